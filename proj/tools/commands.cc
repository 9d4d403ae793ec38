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


#include "commands.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dvemb/analysis.h"
#include "dvemb/baselines.h"
#include "dvemb/binary_io.h"
#include "dvemb/errors.h"
#include "dvemb/gradlog.h"
#include "dvemb/manifest.h"
#include "dvemb/rng.h"
#include "dvemb/store_io.h"

namespace dvemb::cli {
namespace {

using nlohmann::json;

std::string Hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string Num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string Indexed(const char* stem, std::size_t k, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%02zu%s", stem, k, ext);
  return buf;
}

void RequireFile(const std::filesystem::path& path, const std::string& what) {
  Require(std::filesystem::exists(path), ErrorKind::kMissingArtifact,
          "missing " + what + ": " + path.string());
}

void WriteText(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  WriteFileBytes(path, text);
}

std::uint64_t FileDigest(const std::filesystem::path& path) {
  const std::string bytes = ReadFileBytes(path);
  return Fnv1a().Update(bytes).digest();
}

std::uint64_t ConfigHash(const ExperimentConfig& config) {
  return Fnv1a().Update(config.canonical).digest();
}

RunManifest LoadRunManifest(const RunLayout& layout) {
  RequireFile(layout.manifest(), "manifest");
  return LoadManifest(layout.manifest());
}

std::unique_ptr<GradientLogReader> OpenLog(const RunLayout& layout) {
  RequireFile(layout.log(), "gradient log");
  return GradientLogReader::Open(layout.log());
}

// The log must come from this config's model and sketch.
void CheckHeader(const LogHeader& header, const RunManifest& manifest, const ProjectionPair& pair) {
  Require(header == LogHeader::For(manifest, pair), ErrorKind::kConfig,
          "gradient log was written with a different model, schedule or projection");
}

EmbeddingStore LoadFinalStore(const RunLayout& layout, const std::optional<std::filesystem::path>& path = {}) {
  const std::filesystem::path p = path.value_or(layout.final_store());
  RequireFile(p, "embedding store");
  return LoadEmbeddingStore(p);
}

ModelParams FinalParams(const RunLayout& layout, const RunManifest& manifest) {
  const auto path = CheckpointPath(layout.checkpoints(), manifest.total_steps());
  RequireFile(path, "final checkpoint");
  return LoadCheckpoint(path);
}

std::vector<std::uint64_t> ValidationIds(const ExperimentConfig& config, const Dataset& validation) {
  const std::size_t n = std::min(config.probes.validation_count, validation.size());
  std::vector<std::uint64_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

std::vector<ProjectedGradient> ValidationGrads(const ProjectionPair& pair, const ModelSpec& spec,
                                               const ModelParams& params, const Dataset& validation,
                                               std::span<const std::uint64_t> ids) {
  std::vector<ProjectedGradient> out;
  out.reserve(ids.size());
  for (std::uint64_t v : ids) {
    Require(v < validation.size(), ErrorKind::kInvalidArgument,
            "validation id " + std::to_string(v) + " out of range");
    out.push_back(ProjectGradient(pair, spec, params, validation.inputs.row(static_cast<Eigen::Index>(v)).transpose(),
                                  validation.labels[v]));
  }
  return out;
}

double MaxAbs(const ValueEmbedding& e) {
  double m = 0.0;
  for (const auto& l : e.layers) m = std::max(m, l.cwiseAbs().maxCoeff());
  return m;
}

double MaxAbsDiff(const ValueEmbedding& a, const ValueEmbedding& b) {
  Require(a.layers.size() == b.layers.size(), ErrorKind::kVerification, "layer count differs");
  double m = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    Require(a.layers[l].size() == b.layers[l].size(), ErrorKind::kVerification, "layer width differs");
    m = std::max(m, (a.layers[l] - b.layers[l]).cwiseAbs().maxCoeff());
  }
  return m;
}

// Largest deviation between stores over the same keys; throws when the key
// sets differ.
double StoreDeviation(const EmbeddingStore& a, const EmbeddingStore& b, double* scale) {
  Require(a.size() == b.size(), ErrorKind::kVerification,
          "stores hold " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " records");
  double dev = 0.0;
  for (const auto& [key, e] : a.entries()) {
    Require(b.Contains(key.first, key.second), ErrorKind::kVerification,
            "record (" + std::to_string(key.first) + ", " + std::to_string(key.second) + ") missing");
    dev = std::max(dev, MaxAbsDiff(e, b.Get(key.first, key.second)));
    if (scale != nullptr) *scale = std::max(*scale, MaxAbs(e));
  }
  return dev;
}

std::vector<std::uint64_t> CheckpointsFor(std::uint64_t total_steps, std::optional<std::size_t> k,
                                          const ExperimentConfig& config) {
  const std::size_t count = k.value_or(config.checkpoints);
  Require(count >= 1, ErrorKind::kConfig, "--checkpoints must be at least 1");
  return EvenCheckpoints(total_steps, count);
}


// Reads oracle_scores.csv back into per-probe rows, keyed by probe order in
// probes.json.
std::vector<std::vector<double>> LoadOracleScores(const std::filesystem::path& path,
                                                  std::span<const RemovalProbe> probes) {
  RequireFile(path, "oracle scores");
  std::istringstream in(ReadFileBytes(path));
  std::string line;
  std::getline(in, line);
  Require(line == "sample_id,mode,step,val_id,score", ErrorKind::kFormat,
          "unexpected oracle score header in " + path.string());
  std::vector<std::vector<double>> out(probes.size());
  std::size_t probe = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    Require(cells.size() == 5, ErrorKind::kFormat, "malformed oracle score row: " + line);
    while (probe < probes.size() && out[probe].size() == probes[probe].validation_ids.size()) ++probe;
    Require(probe < probes.size(), ErrorKind::kFormat, "more oracle rows than probes");
    const RemovalProbe& p = probes[probe];
    Require(std::stoull(cells[0]) == p.sample_id && cells[1] == RemovalModeName(p.mode) &&
                std::stoull(cells[2]) == p.step &&
                std::stoull(cells[3]) == p.validation_ids[out[probe].size()],
            ErrorKind::kFormat, "oracle scores do not match probes.json at: " + line);
    out[probe].push_back(std::strtod(cells[4].c_str(), nullptr));
  }
  for (std::size_t i = 0; i < probes.size(); ++i) {
    Require(out[i].size() == probes[i].validation_ids.size(), ErrorKind::kFormat,
            "oracle scores incomplete for probe " + std::to_string(i));
  }
  return out;
}

}  // namespace

std::filesystem::path RunLayout::segment_store(std::size_t k) const {
  return embed_dir() / Indexed("segment", k, ".dves");
}

std::filesystem::path RunLayout::kernel(std::size_t k) const {
  return embed_dir() / Indexed("kernel", k, ".dvek");
}

TrainResult LoadBaseline(const RunLayout& layout, const RunManifest& manifest) {
  TrainResult result;
  result.final_params = FinalParams(layout, manifest);
  for (std::uint64_t t : manifest.checkpoint_steps) {
    const auto path = CheckpointPath(layout.checkpoints(), t);
    RequireFile(path, "checkpoint");
    result.checkpoints.emplace(t, LoadCheckpoint(path));
  }
  return result;
}

ProjectedGradient LoadProjectedGradient(const std::filesystem::path& path) {
  RequireFile(path, "gradient file");
  json root;
  try {
    root = json::parse(ReadFileBytes(path));
  } catch (const json::parse_error& e) {
    Fail(ErrorKind::kConfig, "gradient file " + path.string() + ": " + e.what());
  }
  ProjectedGradient g;
  try {
    for (auto it = root.begin(); it != root.end(); ++it) {
      Require(it.key() == "projection_seed" || it.key() == "identity" || it.key() == "layers",
              ErrorKind::kConfig, "gradient file: unknown key '" + it.key() + "'");
    }
    g.projection_seed = root.at("projection_seed").get<std::uint64_t>();
    g.identity = root.at("identity").get<bool>();
    for (const json& layer : root.at("layers")) {
      const auto values = layer.get<std::vector<double>>();
      g.layers.push_back(Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size())));
    }
  } catch (const json::exception& e) {
    Fail(ErrorKind::kConfig, "gradient file " + path.string() + ": " + e.what());
  }
  return g;
}

void SaveProjectedGradient(const std::filesystem::path& path, const ProjectedGradient& grad) {
  json root;
  root["projection_seed"] = grad.projection_seed;
  root["identity"] = grad.identity;
  root["layers"] = json::array();
  for (const auto& l : grad.layers) root["layers"].push_back(std::vector<double>(l.data(), l.data() + l.size()));
  WriteText(path, root.dump() + "\n");
}

void RankScores(std::vector<InfluenceScore>& scores) {
  std::sort(scores.begin(), scores.end(), [](const InfluenceScore& a, const InfluenceScore& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.step != b.step) return a.step < b.step;
    return a.sample_id < b.sample_id;
  });
}

void CmdTrain(const ExperimentConfig& config, std::ostream& out) {
  const RunLayout layout(OutputDir(config));
  const Datasets data = BuildDatasets(config);
  const RunManifest manifest = PlanRun(data.train, config.Plan());
  const ProjectionPair pair = config.Projections();

  std::filesystem::create_directories(layout.checkpoints());
  auto writer = GradientLogWriter::Create(layout.log(), LogHeader::For(manifest, pair));
  TrainResult result;
  {
    LogWriterSink sink(*writer, pair, /*async=*/true);
    TrainOptions options;
    options.sink = &sink;
    options.checkpoint_dir = layout.checkpoints();
    options.keep_checkpoints = false;
    result = Train(manifest, data.train, options);
  }
  writer->Close();
  SaveManifest(layout.manifest(), manifest);

  std::uint64_t expected = 0;
  for (const auto& b : manifest.batches) expected += b.size();
  Require(writer->records_written() == expected, ErrorKind::kVerification,
          "log holds " + std::to_string(writer->records_written()) + " records, expected " +
              std::to_string(expected));

  json meta;
  meta["config_hash"] = Hex(ConfigHash(config));
  meta["manifest_hash"] = Hex(manifest.ContentHash());
  meta["total_steps"] = manifest.total_steps();
  meta["records"] = expected;
  meta["first_loss"] = result.step_losses.empty() ? 0.0 : result.step_losses.front();
  meta["final_loss"] = result.step_losses.empty() ? 0.0 : result.step_losses.back();
  meta["validation_accuracy"] =
      Accuracy(manifest.spec, result.final_params, data.validation.inputs, data.validation.labels);
  WriteText(layout.train_meta(), meta.dump(2) + "\n");

  out << "train: " << manifest.total_steps() << " steps, " << expected << " records, final loss "
      << Num(meta["final_loss"].get<double>()) << ", manifest " << Hex(manifest.ContentHash())
      << "\n";
}

void CmdEmbed(const ExperimentConfig& config, const EmbedArgs& args, std::ostream& out) {
  const RunLayout layout(OutputDir(config));
  auto log = OpenLog(layout);
  const RunManifest manifest = LoadRunManifest(layout);
  CheckHeader(log->header(), manifest, config.Projections());
  const std::uint64_t total = manifest.total_steps();
  const std::vector<std::uint64_t> cps = CheckpointsFor(total, args.checkpoints, config);

  const auto start = std::chrono::steady_clock::now();
  EmbeddingStore final_store;
  std::filesystem::create_directories(layout.embed_dir());
  for (const auto& entry : std::filesystem::directory_iterator(layout.embed_dir())) {
    const std::string name = entry.path().filename().string();
    if (name.starts_with("segment_") || name.starts_with("kernel_")) std::filesystem::remove(entry.path());
  }
  if (cps.size() == 1) {
    final_store = DveBackward(*log);
  } else {
    const CheckpointedResult result = DveCheckpointed(*log, cps, args.jobs);
    for (std::size_t k = 0; k < result.segments.size(); ++k) {
      SaveEmbeddingStore(layout.segment_store(k), result.segments[k]);
    }
    for (std::size_t k = 0; k < result.kernels.size(); ++k) {
      SaveKernel(layout.kernel(k), result.kernels[k]);
    }
    final_store = ComposeStore(result, total);
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  SaveEmbeddingStore(layout.final_store(), final_store);

  json meta;
  meta["checkpoints"] = cps;
  meta["records"] = final_store.size();
  meta["target_step"] = total;
  meta["jobs"] = args.jobs;
  meta["seconds"] = seconds;

  if (args.verify) {
    // Spot-check evenly spaced records against the product form.
    const std::size_t n = std::min(args.verify_records, final_store.size());
    std::vector<const ValueEmbedding*> all;
    for (const auto& [key, e] : final_store.entries()) all.push_back(&e);
    double dev = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const ValueEmbedding& e = *all[i * all.size() / n];
      const ValueEmbedding direct = DveDirect(*log, e.step, e.sample_id, total);
      dev = std::max(dev, MaxAbsDiff(e, direct));
      scale = std::max(scale, MaxAbs(direct));
    }
    const double tol = 1e-8 * std::max(1.0, scale);
    meta["verify"] = {{"records", n}, {"max_deviation", dev}, {"tolerance", tol}};
    out << "embed: verified " << n << " records against the product form, max deviation "
        << Num(dev) << "\n";
    Require(dev <= tol, ErrorKind::kVerification,
            "embedding deviates from the product form by " + Num(dev));
  }
  WriteText(layout.embed_meta(), meta.dump(2) + "\n");
  out << "embed: " << final_store.size() << " embeddings over " << cps.size()
      << " segment(s) -> " << layout.final_store().string() << "\n";
}

void CmdQuery(const ExperimentConfig& config, const QueryArgs& args, std::ostream& out) {
  const RunLayout layout(OutputDir(config));
  Require(args.test_sample.has_value() != args.test_grad_file.has_value(), ErrorKind::kConfig,
          "query needs exactly one of --test-sample and --test-grad-file");
  const EmbeddingStore store = LoadFinalStore(layout, args.store);

  ProjectedGradient grad;
  if (args.test_grad_file) {
    grad = LoadProjectedGradient(*args.test_grad_file);
  } else {
    const RunManifest manifest = LoadRunManifest(layout);
    const Datasets data = BuildDatasets(config);
    const std::uint64_t id = *args.test_sample;
    Require(id < data.validation.size(), ErrorKind::kInvalidArgument,
            "--test-sample " + std::to_string(id) + " out of range (validation size " +
                std::to_string(data.validation.size()) + ")");
    const ModelParams params = FinalParams(layout, manifest);
    grad = ValidationGrads(config.Projections(), manifest.spec, params, data.validation,
                           std::vector<std::uint64_t>{id})
               .front();
  }
  const auto dims = store.header().projected_dims();
  Require(grad.layers.size() == dims.size(), ErrorKind::kInvalidArgument,
          "gradient has " + std::to_string(grad.layers.size()) + " layers, store has " +
              std::to_string(dims.size()));
  for (std::size_t l = 0; l < dims.size(); ++l) {
    Require(static_cast<std::size_t>(grad.layers[l].size()) == dims[l], ErrorKind::kInvalidArgument,
            "gradient layer " + std::to_string(l) + " width mismatch");
  }

  std::vector<InfluenceScore> scores = InfluenceQuery(store, grad);
  RankScores(scores);
  if (args.top > 0 && scores.size() > args.top) scores.resize(args.top);

  std::ostringstream csv;
  csv << "rank,step,sample_id,score\n";
  for (std::size_t i = 0; i < scores.size(); ++i) {
    csv << i + 1 << ',' << scores[i].step << ',' << scores[i].sample_id << ',' << Num(scores[i].score)
        << '\n';
  }
  if (args.out) {
    WriteText(*args.out, csv.str());
    out << "query: " << scores.size() << " rows -> " << args.out->string() << "\n";
  } else {
    out << csv.str();
  }
}

void CmdOracle(const ExperimentConfig& config, const OracleArgs& args, std::ostream& out) {
  const RunLayout layout(OutputDir(config));
  const RunManifest manifest = LoadRunManifest(layout);
  const Datasets data = BuildDatasets(config);
  manifest.Validate(data.train);

  std::vector<RemovalProbe> probes;
  if (args.probes) {
    RequireFile(*args.probes, "probe file");
    probes = LoadProbes(*args.probes);
  } else {
    const std::vector<std::uint64_t> val_ids = ValidationIds(config, data.validation);
    for (const std::string& mode : config.probes.modes) {
      auto batch = LastEpochProbes(manifest, config.probes.count, config.probes.seed,
                                   ParseRemovalMode(mode), val_ids);
      probes.insert(probes.end(), batch.begin(), batch.end());
    }
  }
  Require(!probes.empty(), ErrorKind::kConfig, "no probes");
  // Reject bad probes before any retraining.
  for (const RemovalProbe& p : probes) {
    Require(p.sample_id < data.train.size(), ErrorKind::kInvalidArgument,
            "probe sample " + std::to_string(p.sample_id) + " is not in the training set");
    ProbeRemovals(manifest, p);
    for (std::uint64_t v : p.validation_ids) {
      Require(v < data.validation.size(), ErrorKind::kInvalidArgument,
              "probe validation id " + std::to_string(v) + " out of range");
    }
  }

  const TrainResult baseline = LoadBaseline(layout, manifest);
  const auto start = std::chrono::steady_clock::now();
  const auto scores =
      GroundTruthTslooBatch(manifest, data.train, baseline, data.validation, probes, args.jobs);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::filesystem::create_directories(layout.oracle_dir());
  SaveProbes(layout.probes(), probes);
  WriteText(layout.oracle_scores(), ProbeScoresCsv(probes, scores));
  out << "oracle: " << probes.size() << " counterfactual retrains in " << Num(seconds) << " s -> "
      << layout.oracle_scores().string() << "\n";
}

void CmdEval(const ExperimentConfig& config, std::ostream& out) {
  const RunLayout layout(OutputDir(config));
  const RunManifest manifest = LoadRunManifest(layout);
  RequireFile(layout.probes(), "probe file");
  const std::vector<RemovalProbe> probes = LoadProbes(layout.probes());
  const auto truth = LoadOracleScores(layout.oracle_scores(), probes);
  const EmbeddingStore store = LoadFinalStore(layout);
  const Datasets data = BuildDatasets(config);
  const ModelParams params = FinalParams(layout, manifest);
  const ProjectionPair pair = config.Projections();

  std::set<std::uint64_t> val_set;
  for (const auto& p : probes) val_set.insert(p.validation_ids.begin(), p.validation_ids.end());
  const std::vector<std::uint64_t> val_ids(val_set.begin(), val_set.end());
  const auto val_grads = ValidationGrads(pair, manifest.spec, params, data.validation, val_ids);
  std::map<std::uint64_t, const ProjectedGradient*> grad_of;
  for (std::size_t i = 0; i < val_ids.size(); ++i) grad_of[val_ids[i]] = &val_grads[i];

  std::vector<std::uint64_t> train_ids(data.train.size());
  for (std::size_t i = 0; i < train_ids.size(); ++i) train_ids[i] = i;
  const auto train_grads = ProjectedTrainingGradients(pair, manifest.spec, params, data.train, train_ids);
  const InfluenceFunction influence = InfluenceFunction::Fit(train_grads, config.damping);

  std::map<std::string, std::vector<double>> gt, dve, inf;
  std::ostringstream scores_csv;
  scores_csv << "sample_id,mode,step,ground_truth,dve,influence_function\n";
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const RemovalProbe& p = probes[i];
    double g = 0.0, d = 0.0, f = 0.0;
    for (std::size_t v = 0; v < p.validation_ids.size(); ++v) {
      const ProjectedGradient& vg = *grad_of.at(p.validation_ids[v]);
      g += truth[i][v];
      d += PredictTsloo(store, manifest, p, vg);
      f += influence.Score(vg.layers, train_grads[p.sample_id]);
    }
    const std::string mode = RemovalModeName(p.mode);
    gt[mode].push_back(g);
    dve[mode].push_back(d);
    inf[mode].push_back(f);
    scores_csv << p.sample_id << ',' << mode << ',' << p.step << ',' << Num(g) << ',' << Num(d) << ','
               << Num(f) << '\n';
  }

  json meta;
  meta["config_hash"] = Hex(ConfigHash(config));
  meta["damping"] = config.damping;
  std::ostringstream spearman_csv;
  spearman_csv << "mode,probes,dve,influence_function\n";
  for (const auto& [mode, truth_scores] : gt) {
    const double s_dve = Spearman(truth_scores, dve[mode]);
    const double s_inf = Spearman(truth_scores, inf[mode]);
    spearman_csv << mode << ',' << truth_scores.size() << ',' << Num(s_dve) << ',' << Num(s_inf) << '\n';
    meta["spearman"][mode] = {{"dve", s_dve}, {"influence_function", s_inf}};
    out << "eval: " << mode << " spearman dve " << Num(s_dve) << ", influence function "
        << Num(s_inf) << "\n";
  }

  const std::vector<bool> flags = FlippedFlags(data.train);
  const std::size_t flipped = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
  if (flipped > 0 && flipped < flags.size()) {
    // Validation detector: total influence of every record of a sample on
    // the summed validation gradient. Self detector: negated total
    // influence on the sample's own final gradient.
    const std::vector<std::uint64_t> det_ids = ValidationIds(config, data.validation);
    const auto det_grads = ValidationGrads(pair, manifest.spec, params, data.validation, det_ids);
    ProjectedGradient total = det_grads.front();
    for (std::size_t v = 1; v < det_grads.size(); ++v) {
      for (std::size_t l = 0; l < total.layers.size(); ++l) total.layers[l] += det_grads[v].layers[l];
    }
    ScoreSeries val_series{train_ids, std::vector<double>(train_ids.size(), 0.0), "validation"};
    ScoreSeries self_series{train_ids, std::vector<double>(train_ids.size(), 0.0), "self_influence"};
    for (const auto& [key, e] : store.entries()) {
      val_series.scores[e.sample_id] += Influence(e, total);
      ProjectedGradient self{total.projection_seed, total.identity, train_grads[e.sample_id]};
      self_series.scores[e.sample_id] -= Influence(e, self);
    }
    const double a_val = MislabelAuroc(val_series, flags);
    const double a_self = MislabelAuroc(self_series, flags);
    std::ostringstream auroc_csv;
    auroc_csv << "detector,auroc\nvalidation," << Num(a_val) << "\nself_influence," << Num(a_self)
              << "\n";
    WriteText(layout.eval_dir() / "auroc.csv", auroc_csv.str());
    meta["auroc"] = {{"validation", a_val}, {"self_influence", a_self}, {"flipped", flipped}};
    out << "eval: mislabel auroc " << Num(a_val) << " (validation), " << Num(a_self)
        << " (self influence)\n";
  } else {
    std::filesystem::remove(layout.eval_dir() / "auroc.csv");
    meta["auroc"] = nullptr;
  }

  WriteText(layout.eval_dir() / "spearman.csv", spearman_csv.str());
  WriteText(layout.eval_dir() / "scores.csv", scores_csv.str());
  WriteText(layout.eval_dir() / "eval.json", meta.dump(2) + "\n");
}

void CmdReport(const ExperimentConfig& config, std::ostream& out) {
  const RunLayout layout(OutputDir(config));
  const RunManifest manifest = LoadRunManifest(layout);
  const EmbeddingStore final_store = LoadFinalStore(layout);
  const Datasets data = BuildDatasets(config);
  const ProjectionPair pair = config.Projections();
  const std::vector<std::uint64_t> val_ids = ValidationIds(config, data.validation);
  const std::uint64_t total = manifest.total_steps();

  const ModelParams params = FinalParams(layout, manifest);
  const auto val_grads = ValidationGrads(pair, manifest.spec, params, data.validation, val_ids);
  const DynamicsReport curve = BatchInfluenceCurve(final_store, val_grads, manifest);
  WriteText(layout.report_dir() / "curve.csv", CurveCsv(curve));

  // Evolution uses the segments written by embed when present.
  CheckpointedResult result;
  std::vector<std::uint64_t> cps{total};
  if (std::filesystem::exists(layout.embed_meta())) {
    const json meta = json::parse(ReadFileBytes(layout.embed_meta()));
    cps = meta.at("checkpoints").get<std::vector<std::uint64_t>>();
  }
  result.checkpoints = cps;
  if (cps.size() == 1) {
    result.segments.push_back(final_store);
  } else {
    for (std::size_t k = 0; k < cps.size(); ++k) {
      RequireFile(layout.segment_store(k), "segment store");
      result.segments.push_back(LoadEmbeddingStore(layout.segment_store(k)));
      RequireFile(layout.kernel(k), "segment kernel");
      result.kernels.push_back(LoadKernel(layout.kernel(k)));
    }
  }
  std::vector<std::vector<ProjectedGradient>> per_checkpoint;
  for (std::uint64_t t : cps) {
    const auto path = CheckpointPath(layout.checkpoints(), t);
    RequireFile(path, "checkpoint");
    per_checkpoint.push_back(ValidationGrads(pair, manifest.spec, LoadCheckpoint(path), data.validation, val_ids));
  }
  const auto groups = DecileGroups(total, std::min<std::uint64_t>(10, total));
  const Eigen::MatrixXd evolution = InfluenceEvolution(result, groups, per_checkpoint);
  WriteText(layout.report_dir() / "evolution.csv", EvolutionCsv(groups, cps, evolution));

  // Orthogonal-gradient trace from the logged gradient norms.
  auto log = OpenLog(layout);
  std::vector<double> eta, norm_sq;
  for (std::uint64_t t : log->Steps()) {
    const StepBlock block = log->ReadStep(t);
    double s = 0.0;
    for (const auto& rec : block.records) {
      for (const auto& l : rec.layers) s += l.squaredNorm();
    }
    eta.push_back(block.eta);
    norm_sq.push_back(s);
  }
  double dimension = 0.0;
  for (std::size_t d : log->header().projected_dims()) dimension += static_cast<double>(d);
  const DecayTrace trace = OrthogonalDecayTrace(eta, norm_sq, dimension);
  {
    std::ostringstream csv;
    csv << "t,trace\n";
    for (std::size_t t = 0; t < trace.trace.size(); ++t) csv << t << ',' << Num(trace.trace[t]) << '\n';
    WriteText(layout.report_dir() / "decay.csv", csv.str());
  }

  json meta;
  meta["config_hash"] = Hex(ConfigHash(config));
  meta["input_digest"] = Hex(Fnv1a()
                                 .UpdateValue(FileDigest(layout.manifest()))
                                 .UpdateValue(FileDigest(layout.final_store()))
                                 .digest());
  meta["init_seed"] = manifest.init_seed;
  meta["shuffle_seed"] = manifest.shuffle_seed;
  meta["projection_seed"] = final_store.header().projection_seed;
  meta["total_steps"] = total;
  meta["checkpoints"] = cps;
  meta["validation_points"] = val_ids.size();
  meta["normalization"] = "divided by eta_t";
  meta["groups"] = groups.size();
  meta["decay_clamped"] = trace.clamped;
  WriteText(layout.report_dir() / "report.json", meta.dump(2) + "\n");
  out << "report: " << curve.eta.size() << " curve rows, " << groups.size() << " groups x "
      << cps.size() << " checkpoints -> " << layout.report_dir().string() << "\n";
}

void CmdVerify(const ExperimentConfig& config, const VerifyArgs& args, std::ostream& out) {
  const RunLayout layout(OutputDir(config));
  const Datasets data = BuildDatasets(config);
  const RunManifest manifest = LoadRunManifest(layout);
  const RunManifest planned = PlanRun(data.train, config.Plan());
  Require(manifest.ContentHash() == planned.ContentHash(), ErrorKind::kVerification,
          "manifest does not match the config");
  out << "verify: manifest matches config (" << Hex(manifest.ContentHash()) << ")\n";

  auto log = OpenLog(layout);
  CheckHeader(log->header(), manifest, config.Projections());
  std::uint64_t expected = 0;
  for (const auto& b : manifest.batches) expected += b.size();
  Require(log->record_count() == expected, ErrorKind::kVerification,
          "log holds " + std::to_string(log->record_count()) + " records, expected " +
              std::to_string(expected));
  Require(!log->recovered(), ErrorKind::kVerification, "gradient log has no index (unclean close)");
  out << "verify: log complete (" << expected << " records)\n";

  const EmbeddingStore reference = DveBackward(*log);
  const std::uint64_t total = manifest.total_steps();
  std::vector<std::uint64_t> cps;
  if (args.checkpoints) {
    cps = CheckpointsFor(total, args.checkpoints, config);
  } else if (std::filesystem::exists(layout.embed_meta())) {
    cps = json::parse(ReadFileBytes(layout.embed_meta())).at("checkpoints").get<std::vector<std::uint64_t>>();
  } else {
    cps = CheckpointsFor(total, std::nullopt, config);
  }
  if (cps.size() > 1) {
    const CheckpointedResult result = DveCheckpointed(*log, cps, 1);
    double scale = 0.0;
    const double dev = StoreDeviation(reference, ComposeStore(result, total), &scale);
    out << "verify: " << cps.size() << "-segment composition vs single pass, max deviation "
        << Num(dev) << "\n";
    Require(dev <= 1e-8 * std::max(1.0, scale), ErrorKind::kVerification,
            "checkpointed composition deviates by " + Num(dev));
    for (std::size_t k = 0; k < result.kernels.size(); ++k) {
      if (!std::filesystem::exists(layout.kernel(k))) continue;
      const SegmentKernel stored = LoadKernel(layout.kernel(k));
      const SegmentKernel& fresh = result.kernels[k];
      Require(stored.begin == fresh.begin && stored.end == fresh.end &&
                  stored.layers.size() == fresh.layers.size(),
              ErrorKind::kVerification, "stored kernel " + std::to_string(k) + " has a different range");
      for (std::size_t l = 0; l < stored.layers.size(); ++l) {
        Require(stored.layers[l] == fresh.layers[l], ErrorKind::kVerification,
                "stored kernel " + std::to_string(k) + " differs from recomputation");
      }
    }
  }

  if (std::filesystem::exists(layout.final_store())) {
    const EmbeddingStore stored = LoadEmbeddingStore(layout.final_store());
    double scale = 0.0;
    const double dev = StoreDeviation(reference, stored, &scale);
    // Stored values are f32.
    const double tol = 1e-6 * std::max(scale, 1e-30);
    out << "verify: stored embeddings vs recomputation, max deviation " << Num(dev) << "\n";
    Require(dev <= tol, ErrorKind::kVerification, "stored embeddings deviate by " + Num(dev));
  }
  out << "verify: ok\n";
}

int RunCli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Data value embeddings: train, embed, query and evaluate"};
  app.require_subcommand(1);
  std::string config_path;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "Experiment config (JSON)")->required();
  };

  CLI::App* train = app.add_subcommand("train", "Train and log per-sample gradients");
  add_config(train);

  EmbedArgs embed_args;
  std::size_t embed_k = 0;
  CLI::App* embed = app.add_subcommand("embed", "Compute value embeddings from the gradient log");
  add_config(embed);
  embed->add_option("--checkpoints", embed_k, "Number of segments K");
  embed->add_option("--jobs", embed_args.jobs, "Worker threads for segments")->check(CLI::PositiveNumber);
  embed->add_flag("--verify", embed_args.verify, "Cross-check against the product form");
  embed->add_option("--verify-records", embed_args.verify_records, "Records checked by --verify");

  QueryArgs query_args;
  std::string store_path, grad_path, out_path;
  std::size_t test_sample = 0;
  CLI::App* query = app.add_subcommand("query", "Rank training records for one test point");
  add_config(query);
  query->add_option("--store", store_path, "Embedding store (default: embed/final.dves)");
  auto* sample_opt = query->add_option("--test-sample", test_sample, "Validation sample index");
  auto* grad_opt = query->add_option("--test-grad-file", grad_path, "Projected test gradient (JSON)");
  sample_opt->excludes(grad_opt);
  query->add_option("--top", query_args.top, "Keep the N highest scores (0: all)");
  query->add_option("--out", out_path, "Write CSV here instead of stdout");

  OracleArgs oracle_args;
  std::string probes_path;
  CLI::App* oracle = app.add_subcommand("oracle", "Ground-truth leave-one-out retraining");
  add_config(oracle);
  oracle->add_option("--probes", probes_path, "Probe file (default: drawn from the config)");
  oracle->add_option("--jobs", oracle_args.jobs, "Parallel retrains")->check(CLI::PositiveNumber);

  CLI::App* eval = app.add_subcommand("eval", "Spearman, influence-function and AUROC metrics");
  add_config(eval);
  CLI::App* report = app.add_subcommand("report", "Batch influence curve and evolution");
  add_config(report);

  std::size_t verify_k = 0;
  CLI::App* verify = app.add_subcommand("verify", "Recompute and compare every artifact");
  add_config(verify);
  verify->add_option("--checkpoints", verify_k, "Segments to compare against the single pass");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    const ExperimentConfig config = LoadConfig(config_path);
    if (train->parsed()) {
      CmdTrain(config, out);
    } else if (embed->parsed()) {
      if (embed->count("--checkpoints") > 0) embed_args.checkpoints = embed_k;
      CmdEmbed(config, embed_args, out);
    } else if (query->parsed()) {
      if (!store_path.empty()) query_args.store = store_path;
      if (query->count("--test-sample") > 0) query_args.test_sample = test_sample;
      if (!grad_path.empty()) query_args.test_grad_file = grad_path;
      if (!out_path.empty()) query_args.out = out_path;
      CmdQuery(config, query_args, out);
    } else if (oracle->parsed()) {
      if (!probes_path.empty()) oracle_args.probes = probes_path;
      CmdOracle(config, oracle_args, out);
    } else if (eval->parsed()) {
      CmdEval(config, out);
    } else if (report->parsed()) {
      CmdReport(config, out);
    } else if (verify->parsed()) {
      VerifyArgs args;
      if (verify->count("--checkpoints") > 0) args.checkpoints = verify_k;
      CmdVerify(config, args, out);
    }
  } catch (const Error& e) {
    err << "error (" << ErrorKindName(e.kind()) << "): " << e.what() << "\n";
    return ExitCodeFor(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.push_back("dvemb");
  for (const auto& a : args) argv.push_back(a.c_str());
  return RunCli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace dvemb::cli
