// Copyright 2026 The dvemb Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// Prints one PASS/FAIL line per acceptance check and exits non-zero when any
// check fails. Pipeline checks drive the dvemb CLI on the configs under
// configs/ with outputs redirected into a scratch directory.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "commands.h"
#include "config.h"
#include "dvemb/analysis.h"
#include "dvemb/baselines.h"
#include "dvemb/binary_io.h"
#include "dvemb/engine.h"
#include "dvemb/gradlog.h"
#include "dvemb/trainer.h"
#include "test_util.h"

namespace dvemb {
namespace {

using Clock = std::chrono::steady_clock;

double Seconds(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

std::string Fmt(const char* format, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), format, value);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::filesystem::path ConfigPath(const std::string& name) {
  return std::filesystem::path(DVEMB_CONFIG_DIR) / name;
}

// Runs one CLI command with outputs sent to `out_dir`; throws on failure.
std::string Cli(const std::filesystem::path& out_dir, std::vector<std::string> args) {
  ::setenv("DVE_OUT", out_dir.c_str(), 1);
  std::ostringstream out, err;
  const int code = cli::RunCli(args, out, err);
  ::unsetenv("DVE_OUT");
  if (code != 0) {
    throw std::runtime_error("dvemb " + args.front() + " exited " + std::to_string(code) + ": " + err.str());
  }
  return out.str();
}

void FullPipeline(const std::filesystem::path& out_dir, const std::filesystem::path& config) {
  for (const char* cmd : {"train", "embed", "oracle", "eval"}) Cli(out_dir, {cmd, "-c", config.string()});
}

std::vector<std::vector<std::string>> ReadCsv(const std::filesystem::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(ReadFileBytes(path));
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::istringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

// Column `column` of the row whose first cell is `key`.
double CsvValue(const std::filesystem::path& path, const std::string& key, std::size_t column) {
  for (const auto& row : ReadCsv(path)) {
    if (!row.empty() && row[0] == key) return std::stod(row.at(column));
  }
  throw std::runtime_error("no row '" + key + "' in " + path.string());
}

struct Scratch {
  std::filesystem::path root;
  Scratch() {
    root = std::filesystem::temp_directory_path() / ("dvemb_acceptance_" + std::to_string(::getpid()));
    std::filesystem::remove_all(root);
    std::filesystem::create_directories(root);
  }
  ~Scratch() { std::filesystem::remove_all(root); }
};

// Random projected trajectory shared by the first two checks.
InMemoryLog EquivalenceLog() { return testing::RandomLog(2024, {{4, 4}}, 32, 4, 0.3, 1.0, 12); }

Outcome RecursionMatchesProduct() {
  const InMemoryLog log = EquivalenceLog();
  const auto start = Clock::now();
  const EmbeddingStore store = DveBackward(log);
  double diff = 0.0;
  for (const auto& [key, e] : store.entries()) {
    const ValueEmbedding direct = DveDirect(log, key.first, key.second, 32);
    diff = std::max(diff, (direct.layers[0] - e.layers[0]).cwiseAbs().maxCoeff());
  }
  const double secs = Seconds(start);
  return {diff < 1e-8 && secs < 5.0 && store.size() == 128,
          std::to_string(store.size()) + " records, max |backward - direct| " + Fmt("%.2e", diff) +
              " (< 1e-8), " + Fmt("%.3f", secs) + " s (< 5 s)"};
}

Outcome CheckpointsMatchSinglePass() {
  const InMemoryLog log = EquivalenceLog();
  const EmbeddingStore whole = DveBackward(log);
  std::string detail;
  bool pass = true;
  for (std::size_t k : {2, 4, 8}) {
    const CheckpointedResult r = DveCheckpointed(log, EvenCheckpoints(32, k));
    const EmbeddingStore composed = ComposeStore(r, 32);
    double diff = composed.size() == whole.size() ? 0.0 : INFINITY;
    for (const auto& [key, e] : whole.entries()) {
      diff = std::max(diff, (composed.Get(key.first, key.second).layers[0] - e.layers[0]).cwiseAbs().maxCoeff());
    }
    pass = pass && diff < 1e-8;
    detail += (detail.empty() ? "" : ", ") + std::string("K=") + std::to_string(k) + " " + Fmt("%.2e", diff);
  }
  return {pass, "max deviation from K=1: " + detail + " (< 1e-8)"};
}

// Plain per-sample backprop for a biased ReLU MLP with softmax
// cross-entropy; gradient of layer l with shape (fan_in + 1) x fan_out.
std::vector<Eigen::MatrixXd> ReferenceGrad(const ModelParams& params, const Eigen::VectorXd& x, int label) {
  const std::size_t layers = params.weights.size();
  std::vector<Eigen::VectorXd> acts, pre;
  Eigen::VectorXd h = x;
  for (std::size_t l = 0; l < layers; ++l) {
    Eigen::VectorXd a(h.size() + 1);
    a << h, 1.0;
    acts.push_back(a);
    pre.push_back(params.weights[l].transpose() * a);
    h = l + 1 < layers ? Eigen::VectorXd(pre.back().cwiseMax(0.0)) : pre.back();
  }
  Eigen::VectorXd p = (h.array() - h.maxCoeff()).exp();
  p /= p.sum();
  Eigen::VectorXd delta = p;
  delta[label] -= 1.0;
  std::vector<Eigen::MatrixXd> grads(layers);
  for (std::size_t l = layers; l-- > 0;) {
    grads[l] = acts[l] * delta.transpose();
    if (l > 0) {
      const Eigen::VectorXd back = params.weights[l].topRows(params.weights[l].rows() - 1) * delta;
      delta = back.array() * (pre[l - 1].array() > 0.0).cast<double>();
    }
  }
  return grads;
}

Outcome DecompositionMatchesBackprop() {
  SynthOptions so;
  so.n = 8;
  so.dim = 784;
  so.classes = 10;
  so.latent_dim = 30;
  so.seed = 3;
  const Dataset data = SynthDataset(so);
  const ModelSpec spec = ModelSpec::Mlp(std::vector<std::size_t>{784, 128, 10});
  const ModelParams params = InitModel(spec, 5);
  std::vector<std::uint64_t> ids(data.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  const BackpropCapture cap = ForwardBackward(spec, params, data.Batch(ids));

  double backprop_diff = 0.0;
  double fd_rel = 0.0;
  Rng rng(17);
  for (std::size_t l = 0; l < 2; ++l) {
    const std::vector<Eigen::MatrixXd> decomposed = PerSampleGrads(cap, l);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Eigen::VectorXd x = data.inputs.row(static_cast<Eigen::Index>(i)).transpose();
      const auto ref = ReferenceGrad(params, x, data.labels[i]);
      backprop_diff = std::max(backprop_diff, (decomposed[i] - ref[l].transpose()).cwiseAbs().maxCoeff());
      if (i >= 3) continue;
      // Central differences on 60 coordinates feeding outputs with a live
      // derivative.
      const Eigen::VectorXd ds = cap.output_grads[l].row(static_cast<Eigen::Index>(i)).transpose();
      std::vector<Eigen::Index> live;
      for (Eigen::Index o = 0; o < ds.size(); ++o) {
        if (ds[o] != 0.0) live.push_back(o);
      }
      const RowMatrix input = data.inputs.row(static_cast<Eigen::Index>(i));
      const std::vector<int> label{data.labels[i]};
      double num = 0.0, den = 0.0;
      ModelParams p = params;
      for (int k = 0; k < 60 && !live.empty(); ++k) {
        const Eigen::Index o = live[rng.Below(live.size())];
        const auto in = static_cast<Eigen::Index>(rng.Below(static_cast<std::uint64_t>(params.weights[l].rows())));
        const double w = params.weights[l](in, o);
        const double eps = 1e-5;
        p.weights[l](in, o) = w + eps;
        const double up = SampleLosses(spec, p, input, label)[0];
        p.weights[l](in, o) = w - eps;
        const double down = SampleLosses(spec, p, input, label)[0];
        p.weights[l](in, o) = w;
        const double fd = (up - down) / (2 * eps);
        num += (fd - decomposed[i](o, in)) * (fd - decomposed[i](o, in));
        den += decomposed[i](o, in) * decomposed[i](o, in);
      }
      if (den > 0.0) fd_rel = std::max(fd_rel, std::sqrt(num / den));
    }
  }
  return {backprop_diff < 1e-10 && fd_rel < 1e-3,
          "784-128-10 MLP: max |decomposed - backprop| " + Fmt("%.2e", backprop_diff) +
              " (< 1e-10), finite-difference relative error " + Fmt("%.2e", fd_rel) + " (< 1e-3)"};
}

struct FidelityRun {
  std::filesystem::path dir;
  double dve_single = NAN, dve_all = NAN, if_single = NAN, if_all = NAN;
};

FidelityRun RunFidelity(const std::filesystem::path& dir) {
  FidelityRun r;
  r.dir = dir;
  FullPipeline(dir, ConfigPath("fidelity.json"));
  const auto csv = dir / "eval" / "spearman.csv";
  r.dve_single = CsvValue(csv, "single_iteration", 2);
  r.if_single = CsvValue(csv, "single_iteration", 3);
  r.dve_all = CsvValue(csv, "all_epochs", 2);
  r.if_all = CsvValue(csv, "all_epochs", 3);
  return r;
}

Outcome MislabelDetection(const std::filesystem::path& dir) {
  FullPipeline(dir, ConfigPath("mislabel.json"));
  const auto csv = dir / "eval" / "auroc.csv";
  const double val = CsvValue(csv, "validation", 1);
  const double self = CsvValue(csv, "self_influence", 1);
  return {val >= 0.6, "AUROC " + Fmt("%.3f", val) + " (>= 0.6) with 100 flipped of 1000; self-influence detector " +
                          Fmt("%.3f", self)};
}

Outcome UnrollGap() {
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    GapToyOptions o;
    o.seed = seed;
    o.scale = 0.5;
    const GapMeasurement full = MeasureUnrollGap(o);
    o.scale = 0.25;
    const GapMeasurement half = MeasureUnrollGap(o);
    const double ratio = full.gap / half.gap;
    pass = pass && full.gap <= full.bound && half.gap <= half.bound && ratio >= 3.0;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": gap " +
              Fmt("%.2e", full.gap) + " <= bound " + Fmt("%.2e", full.bound) + ", halved rate shrinks gap " +
              Fmt("%.1fx", ratio);
  }
  return {pass, detail + " (>= 3x)"};
}

Outcome GeometricSeries() {
  Rng rng(8);
  const Eigen::MatrixXd gauss = testing::RandomMatrix(rng, 8, 8);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(gauss).householderQ();
  Eigen::VectorXd eig = Eigen::VectorXd::LinSpaced(8, 0.1, 1.0);
  const Eigen::MatrixXd h = q * eig.asDiagonal() * q.transpose();
  const double dev = GeometricSeriesCheck(h, 0.5, 1000);
  return {dev < 1e-6, "dim 8, eigenvalues 0.1..1, eta 0.5, T 1000: relative deviation " + Fmt("%.2e", dev) +
                          " (< 1e-6)"};
}

Outcome Determinism(const FidelityRun& first, const std::filesystem::path& second_dir) {
  RunFidelity(second_dir);
  const cli::RunLayout a(first.dir), b(second_dir);
  std::vector<std::filesystem::path> files{"manifest.json", "gradients.dvlg", "embed/final.dves"};
  for (const auto& entry : std::filesystem::directory_iterator(a.embed_dir())) {
    if (entry.path().extension() == ".dves" || entry.path().extension() == ".dvek") {
      files.push_back(std::filesystem::path("embed") / entry.path().filename());
    }
  }
  files.push_back("eval/scores.csv");
  std::sort(files.begin(), files.end());
  files.erase(std::unique(files.begin(), files.end()), files.end());
  std::string mismatched;
  for (const auto& f : files) {
    if (ReadFileBytes(a.root / f) != ReadFileBytes(b.root / f)) mismatched += " " + f.string();
  }
  return {mismatched.empty(), std::to_string(files.size()) + " artifacts compared byte for byte" +
                                  (mismatched.empty() ? std::string(", all identical") : ", differing:" + mismatched)};
}

Outcome Efficiency() {
  cli::ExperimentConfig config = cli::LoadConfig(ConfigPath("fidelity.json"));
  const cli::Datasets data = cli::BuildDatasets(config);
  const RunManifest manifest = PlanRun(data.train, config.Plan());
  Scratch scratch;
  auto backward_seconds = [&](std::size_t r) {
    config.projection.r_a = r;
    config.projection.r_s = r;
    const ProjectionPair pair = config.Projections();
    const auto path = scratch.root / ("g" + std::to_string(r) + ".dvlg");
    {
      auto writer = GradientLogWriter::Create(path, LogHeader::For(manifest, pair));
      LogWriterSink sink(*writer, pair);
      TrainOptions o;
      o.sink = &sink;
      Train(manifest, data.train, o);
      writer->Close();
    }
    const auto start = Clock::now();
    auto log = GradientLogReader::Open(path);
    const EmbeddingStore store = DveBackward(*log);
    const double secs = Seconds(start);
    return std::make_pair(secs, store.size());
  };
  const auto [small, records] = backward_seconds(8);
  const auto [large, records_large] = backward_seconds(32);
  (void)records_large;
  const auto start = Clock::now();
  TrainCounterfactual(manifest.WithRemovals({{0, manifest.batches[0][0]}}), data.train);
  const double retrain = Seconds(start);
  return {small < retrain,
          "backward pass over " + std::to_string(records) + " logged records at projected width 64: " +
              Fmt("%.3f", small) + " s vs one retrain " + Fmt("%.3f", retrain) + " s; at width 1024: " +
              Fmt("%.3f", large) + " s"};
}

// Scores every store record against the summed validation gradient.
std::vector<double> SummedScores(const ProjectionPair& pair, const RunManifest& m, const Dataset& train,
                                 const Dataset& val) {
  InMemoryLog log(LogHeader::For(m, pair));
  InMemoryLogSink sink(log, pair);
  TrainOptions o;
  o.sink = &sink;
  const TrainResult base = Train(m, train, o);
  const EmbeddingStore store = DveBackward(log);
  ProjectedGradient total;
  for (std::size_t v = 0; v < val.size(); ++v) {
    const ProjectedGradient g = ProjectGradient(pair, m.spec, base.final_params,
                                                val.inputs.row(static_cast<Eigen::Index>(v)).transpose(), val.labels[v]);
    if (total.layers.empty()) {
      total = g;
    } else {
      for (std::size_t l = 0; l < g.layers.size(); ++l) total.layers[l] += g.layers[l];
    }
  }
  std::vector<double> out;
  for (const auto& s : InfluenceQuery(store, total)) out.push_back(s.score);
  return out;
}

Outcome ProjectionRobustness() {
  SynthOptions so;
  so.seed = 1;
  so.cluster_seed = 7;
  so.n = 500;
  so.dim = 64;
  so.classes = 10;
  so.noise_std = 0.5;
  so.separation = 1.5;
  const Dataset train = SynthDataset(so);
  so.seed = 101;
  so.n = 50;
  const Dataset val = SynthDataset(so);
  PlanOptions po;
  po.spec = ModelSpec::Mlp(std::vector<std::size_t>{64, 32, 10});
  po.init_seed = 1;
  po.shuffle_seed = 1;
  po.batch_size = 16;
  po.epochs = 2;
  po.schedule.eta_max = 0.01 / 16;
  const RunManifest m = PlanRun(train, po);
  const std::vector<double> reference = SummedScores(MakeIdentityProjections(m.spec), m, train, val);
  std::vector<double> rho;
  std::string detail;
  for (std::size_t r : {8, 16, 32}) {
    rho.push_back(Spearman(reference, SummedScores(MakeProjections(5, m.spec, r, r), m, train, val)));
    detail += (detail.empty() ? "" : ", ") + std::string("width ") + std::to_string(r * r) + " " +
              Fmt("%.3f", rho.back());
  }
  const bool monotone = rho[0] <= rho[1] && rho[1] <= rho[2];
  return {monotone && rho[2] >= 0.8, "Spearman vs identity projection: " + detail +
                                         (monotone ? " (non-decreasing" : " (NOT non-decreasing") +
                                         ", >= 0.8 at 1024)"};
}

Outcome DynamicsShape(const std::filesystem::path& dir) {
  const std::string config = ConfigPath("dynamics.json").string();
  for (const char* cmd : {"train", "embed", "report"}) Cli(dir, {cmd, "-c", config});
  const auto rows = ReadCsv(dir / "report" / "curve.csv");
  std::vector<double> normalized;
  for (std::size_t i = 1; i < rows.size(); ++i) normalized.push_back(std::stod(rows[i].at(3)));
  if (normalized.size() != 600) return {false, "expected T = 600, got " + std::to_string(normalized.size())};
  auto mean = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t t = a; t < b; ++t) s += normalized[t];
    return s / static_cast<double>(b - a);
  };
  const double warm = mean(0, 25), basin = mean(200, 400);
  return {warm > basin, "T 600, mean normalized influence of batches 0-24 " + Fmt("%.3e", warm) +
                            " vs batches 200-399 " + Fmt("%.3e", basin)};
}

int Main() {
  Scratch scratch;
  int failures = 0;
  auto report = [&](int index, const std::string& name, const std::function<Outcome()>& check) {
    Outcome o;
    const auto start = Clock::now();
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s %02d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", index, name.c_str(), o.detail.c_str(),
                Seconds(start));
    std::fflush(stdout);
  };

  report(1, "recursion-product equivalence", RecursionMatchesProduct);
  report(2, "checkpointing equivalence", CheckpointsMatchSinglePass);
  report(3, "gradient decomposition", DecompositionMatchesBackprop);

  FidelityRun fidelity;
  std::string fidelity_error;
  const auto fid_start = Clock::now();
  try {
    fidelity = RunFidelity(scratch.root / "fidelity_a");
  } catch (const std::exception& e) {
    fidelity_error = e.what();
  }
  std::printf("     fidelity pipeline (train, embed, 100 retrains, eval): %.1f s\n", Seconds(fid_start));
  auto fidelity_check = [&](const std::function<Outcome()>& f) {
    return [&, f] { return fidelity_error.empty() ? f() : Outcome{false, "error: " + fidelity_error}; };
  };
  report(4, "fidelity, single-iteration removal", fidelity_check([&] {
           return Outcome{fidelity.dve_single >= 0.6,
                          "Spearman " + Fmt("%.3f", fidelity.dve_single) + " (>= 0.6) over 50 last-epoch probes"};
         }));
  report(5, "fidelity, all-epoch removal", fidelity_check([&] {
           return Outcome{fidelity.dve_all >= 0.5,
                          "Spearman " + Fmt("%.3f", fidelity.dve_all) + " (>= 0.5) over 50 probes"};
         }));
  report(6, "baseline separation", fidelity_check([&] {
           return Outcome{fidelity.dve_single > fidelity.if_single,
                          "single-iteration Spearman: embeddings " + Fmt("%.3f", fidelity.dve_single) +
                              " vs influence function " + Fmt("%.3f", fidelity.if_single) +
                              " (all-epoch: " + Fmt("%.3f", fidelity.dve_all) + " vs " +
                              Fmt("%.3f", fidelity.if_all) + ")"};
         }));
  report(7, "mislabel detection", [&] { return MislabelDetection(scratch.root / "mislabel"); });
  report(8, "unrolling error bound", UnrollGap);
  report(9, "geometric-series identity", GeometricSeries);
  report(10, "determinism", fidelity_check([&] { return Determinism(fidelity, scratch.root / "fidelity_b"); }));
  report(11, "efficiency", Efficiency);
  report(12, "projection robustness", ProjectionRobustness);
  report(13, "dynamics shape", [&] { return DynamicsShape(scratch.root / "dynamics"); });

  std::printf("%d of 13 checks failed\n", failures);
  return failures == 0 ? 0 : 1;
}

}  // namespace
}  // namespace dvemb

int main() { return dvemb::Main(); }
