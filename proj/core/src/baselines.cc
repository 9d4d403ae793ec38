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

#include "dvemb/baselines.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "dvemb/binary_io.h"
#include "dvemb/errors.h"
#include "dvemb/rng.h"
#include "dvemb/schedule.h"

namespace dvemb {

using nlohmann::json;

const char* RemovalModeName(RemovalMode mode) {
  return mode == RemovalMode::kSingleIteration ? "single_iteration" : "all_epochs";
}

RemovalMode ParseRemovalMode(const std::string& name) {
  if (name == "single_iteration") return RemovalMode::kSingleIteration;
  if (name == "all_epochs") return RemovalMode::kAllEpochs;
  Fail(ErrorKind::kConfig, "unknown removal mode '" + name + "'");
}

std::vector<Removal> ProbeRemovals(const RunManifest& manifest, const RemovalProbe& probe) {
  if (probe.mode == RemovalMode::kSingleIteration) {
    Require(probe.step < manifest.total_steps(), ErrorKind::kInvalidArgument,
            "probe step " + std::to_string(probe.step) + " is past the last step");
    const auto& batch = manifest.batches[probe.step];
    Require(std::find(batch.begin(), batch.end(), probe.sample_id) != batch.end(),
            ErrorKind::kInvalidArgument,
            "sample " + std::to_string(probe.sample_id) + " is not in the batch at step " +
                std::to_string(probe.step));
    return {Removal{probe.step, probe.sample_id}};
  }
  std::vector<Removal> removals;
  for (std::uint64_t step : manifest.Occurrences(probe.sample_id)) {
    removals.push_back({step, probe.sample_id});
  }
  Require(!removals.empty(), ErrorKind::kInvalidArgument,
          "sample " + std::to_string(probe.sample_id) + " never appears in training");
  return removals;
}

std::vector<double> GroundTruthTsloo(const RunManifest& manifest, const Dataset& train,
                                     const TrainResult& baseline,
                                     const Dataset& validation,
                                     const RemovalProbe& probe) {
  Require(!probe.validation_ids.empty(), ErrorKind::kInvalidArgument,
          "probe has no validation samples");
  for (std::uint64_t id : probe.validation_ids) {
    Require(id < validation.size(), ErrorKind::kInvalidArgument,
            "validation id " + std::to_string(id) + " out of range");
  }
  const RunManifest counterfactual = manifest.WithRemovals(ProbeRemovals(manifest, probe));
  const TrainResult retrained =
      TrainCounterfactual(counterfactual, train, &baseline.checkpoints);
  const SampleBatch batch = validation.Batch(probe.validation_ids);
  const std::vector<double> before =
      SampleLosses(manifest.spec, baseline.final_params, batch.inputs, batch.labels);
  const std::vector<double> after =
      SampleLosses(manifest.spec, retrained.final_params, batch.inputs, batch.labels);
  std::vector<double> scores(before.size());
  for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = after[i] - before[i];
  return scores;
}

std::vector<std::vector<double>> GroundTruthTslooBatch(
    const RunManifest& manifest, const Dataset& train, const TrainResult& baseline,
    const Dataset& validation, std::span<const RemovalProbe> probes, std::size_t jobs) {
  // Fail fast on bad probes before spending time on retrains.
  for (const RemovalProbe& probe : probes) ProbeRemovals(manifest, probe);
  std::vector<std::vector<double>> scores(probes.size());
  std::atomic<std::size_t> next{0};
  std::mutex failure_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < probes.size(); i = next++) {
      try {
        scores[i] = GroundTruthTsloo(manifest, train, baseline, validation, probes[i]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, probes.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return scores;
}

double PredictTsloo(const EmbeddingStore& store, const RunManifest& manifest,
                    const RemovalProbe& probe, const ProjectedGradient& validation_grad) {
  double score = 0.0;
  for (const Removal& r : ProbeRemovals(manifest, probe)) {
    score += Influence(store.Get(r.step, r.sample_id), validation_grad);
  }
  return score;
}

std::vector<RemovalProbe> LastEpochProbes(const RunManifest& manifest, std::size_t count,
                                          std::uint64_t seed, RemovalMode mode,
                                          std::vector<std::uint64_t> validation_ids) {
  const std::size_t total = manifest.total_steps();
  const std::size_t per_epoch = manifest.steps_per_epoch();
  Require(total > 0 && per_epoch > 0, ErrorKind::kInvalidArgument, "empty trajectory");
  const std::size_t first = ((total - 1) / per_epoch) * per_epoch;
  std::vector<Removal> records;
  for (std::size_t t = first; t < total; ++t) {
    for (std::uint64_t id : manifest.batches[t]) records.push_back({t, id});
  }
  Require(count <= records.size(), ErrorKind::kInvalidArgument,
          "asked for " + std::to_string(count) + " probes but the last epoch has " +
              std::to_string(records.size()) + " records");
  Rng rng(seed);
  const std::vector<std::uint64_t> order = rng.Permutation(records.size());
  std::vector<Removal> chosen;
  for (std::size_t i = 0; i < count; ++i) chosen.push_back(records[order[i]]);
  std::sort(chosen.begin(), chosen.end(), [](const Removal& a, const Removal& b) {
    return a.step != b.step ? a.step < b.step : a.sample_id < b.sample_id;
  });
  std::vector<RemovalProbe> probes;
  for (const Removal& r : chosen) {
    probes.push_back({r.sample_id, mode, r.step, validation_ids});
  }
  return probes;
}

std::vector<std::vector<Eigen::VectorXd>> ProjectedTrainingGradients(
    const ProjectionPair& pair, const ModelSpec& spec, const ModelParams& params,
    const Dataset& dataset, std::span<const std::uint64_t> ids) {
  std::vector<std::vector<Eigen::VectorXd>> grads(ids.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t begin = 0; begin < ids.size(); begin += kChunk) {
    const std::size_t end = std::min(ids.size(), begin + kChunk);
    const SampleBatch batch = dataset.Batch(ids.subspan(begin, end - begin));
    const std::vector<RowMatrix> projected =
        ProjectCapture(pair, ForwardBackward(spec, params, batch));
    for (std::size_t i = begin; i < end; ++i) {
      for (const RowMatrix& layer : projected) {
        grads[i].push_back(layer.row(static_cast<Eigen::Index>(i - begin)).transpose());
      }
    }
  }
  return grads;
}

InfluenceFunction InfluenceFunction::Fit(
    std::span<const std::vector<Eigen::VectorXd>> curvature_grads, double damping) {
  Require(std::isfinite(damping) && damping >= 0.0, ErrorKind::kInvalidArgument,
          "damping must be finite and non-negative");
  Require(!curvature_grads.empty(), ErrorKind::kInvalidArgument,
          "influence function needs curvature gradients");
  InfluenceFunction f;
  f.damping_ = damping;
  const std::size_t layers = curvature_grads.front().size();
  for (std::size_t l = 0; l < layers; ++l) {
    const Eigen::Index p = curvature_grads.front()[l].size();
    Eigen::MatrixXd g(static_cast<Eigen::Index>(curvature_grads.size()), p);
    for (std::size_t i = 0; i < curvature_grads.size(); ++i) {
      Require(curvature_grads[i].size() == layers && curvature_grads[i][l].size() == p,
              ErrorKind::kInvalidArgument, "inconsistent curvature gradient shapes");
      g.row(static_cast<Eigen::Index>(i)) = curvature_grads[i][l].transpose();
    }
    Eigen::MatrixXd curvature = g.transpose() * g;
    Eigen::MatrixXd system = curvature;
    system.diagonal().array() += damping;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(system);
    const Eigen::VectorXd d = ldlt.vectorD().cwiseAbs();
    const double scale = std::max(1.0, system.diagonal().cwiseAbs().maxCoeff());
    Require(ldlt.info() == Eigen::Success &&
                d.minCoeff() > 1e-12 * scale * static_cast<double>(p),
            ErrorKind::kInvalidArgument,
            "influence system is singular in layer " + std::to_string(l) +
                "; use a positive damping");
    f.curvature_.push_back(std::move(curvature));
    f.factors_.push_back(std::move(ldlt));
  }
  return f;
}

std::vector<Eigen::VectorXd> InfluenceFunction::Solve(
    const std::vector<Eigen::VectorXd>& rhs) const {
  Require(rhs.size() == factors_.size(), ErrorKind::kInvalidArgument,
          "gradient layer count mismatch");
  std::vector<Eigen::VectorXd> out;
  for (std::size_t l = 0; l < rhs.size(); ++l) {
    Require(rhs[l].size() == factors_[l].rows(), ErrorKind::kInvalidArgument,
            "gradient width mismatch in layer " + std::to_string(l));
    out.push_back(factors_[l].solve(rhs[l]));
  }
  return out;
}

double InfluenceFunction::Score(const std::vector<Eigen::VectorXd>& validation_grad,
                                const std::vector<Eigen::VectorXd>& training_grad) const {
  const std::vector<Eigen::VectorXd> solved = Solve(validation_grad);
  Require(training_grad.size() == solved.size(), ErrorKind::kInvalidArgument,
          "gradient layer count mismatch");
  double score = 0.0;
  for (std::size_t l = 0; l < solved.size(); ++l) score += solved[l].dot(training_grad[l]);
  return score;
}

std::vector<double> InfluenceFunction::Scores(
    const std::vector<Eigen::VectorXd>& validation_grad,
    std::span<const std::vector<Eigen::VectorXd>> training_grads) const {
  const std::vector<Eigen::VectorXd> solved = Solve(validation_grad);
  std::vector<double> scores;
  scores.reserve(training_grads.size());
  for (const auto& g : training_grads) {
    Require(g.size() == solved.size(), ErrorKind::kInvalidArgument,
            "gradient layer count mismatch");
    double score = 0.0;
    for (std::size_t l = 0; l < solved.size(); ++l) score += solved[l].dot(g[l]);
    scores.push_back(score);
  }
  return scores;
}

double UnrollErrorBound(const BoundParams& p) {
  for (double v : {p.gradient_bound, p.scale, p.hessian_lipschitz, p.spectral_decay}) {
    Require(std::isfinite(v) && v >= 0.0, ErrorKind::kInvalidArgument,
            "bound constants must be finite and non-negative");
  }
  return 32.0 / 3.0 * p.gradient_bound * p.gradient_bound * std::pow(p.scale, 3) *
         p.hessian_lipschitz * std::exp(p.scale * p.spectral_decay);
}

GapMeasurement MeasureUnrollGap(const GapToyOptions& o) {
  Require(o.samples > 0 && o.dim > 0 && o.steps > 1, ErrorKind::kInvalidArgument,
          "toy needs samples, dim and at least two steps");
  Require(o.removed_step >= 1 && o.removed_step < o.steps, ErrorKind::kInvalidArgument,
          "removed step must lie in [1, T)");
  Require(o.scale > 0.0, ErrorKind::kInvalidArgument, "scale must be positive");
  const auto d = static_cast<Eigen::Index>(o.dim);
  const auto n = static_cast<Eigen::Index>(o.samples);

  Rng rng(o.seed);
  Eigen::MatrixXd x(n, d);
  Eigen::VectorXd target_w(d);
  for (Eigen::Index j = 0; j < d; ++j) target_w(j) = rng.Normal();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = rng.Normal() / std::sqrt(double(o.dim));
  }
  Eigen::VectorXd y = x * target_w;
  for (Eigen::Index i = 0; i < n; ++i) y(i) += 0.5 * rng.Normal();
  std::vector<Eigen::Index> order(o.steps);
  for (std::size_t t = 0; t < o.steps; ++t) order[t] = static_cast<Eigen::Index>(rng.Below(o.samples));

  ScheduleParams sp;
  sp.kind = ScheduleKind::kInverseSqrt;
  sp.c = o.scale;
  const LearningRateSchedule rates = MakeSchedule(sp, o.steps);

  auto residual = [&](const Eigen::VectorXd& w, Eigen::Index i) {
    return x.row(i).dot(w) - y(i);
  };
  auto gradient = [&](const Eigen::VectorXd& w, Eigen::Index i) -> Eigen::VectorXd {
    return std::tanh(residual(w, i)) * x.row(i).transpose();
  };

  std::vector<Eigen::VectorXd> trajectory{Eigen::VectorXd::Zero(d)};
  for (std::size_t t = 0; t < o.steps; ++t) {
    trajectory.push_back(trajectory.back() - rates.at(t) * gradient(trajectory.back(), order[t]));
  }
  Eigen::VectorXd removed = trajectory[o.removed_step];
  for (std::size_t t = o.removed_step + 1; t < o.steps; ++t) {
    removed -= rates.at(t) * gradient(removed, order[t]);
  }

  const std::size_t ts = o.removed_step;
  Eigen::VectorXd delta = rates.at(ts) * gradient(trajectory[ts], order[ts]);
  double spectral_decay = 0.0;
  for (std::size_t k = 1; k < o.steps; ++k) {
    const Eigen::VectorXd xk = x.row(order[k]).transpose();
    const double sech = 1.0 / std::cosh(residual(trajectory[k], order[k]));
    const double curvature = sech * sech;
    spectral_decay = std::max(spectral_decay,
                              std::sqrt(double(k)) * curvature * xk.squaredNorm());
    if (k > ts) delta -= rates.at(k) * curvature * xk * xk.dot(delta);
  }

  const double max_norm = x.rowwise().norm().maxCoeff();
  GapMeasurement m;
  m.params.gradient_bound = max_norm;
  m.params.scale = o.scale;
  m.params.hessian_lipschitz = 4.0 / (3.0 * std::sqrt(3.0)) * std::pow(max_norm, 3);
  m.params.spectral_decay = spectral_decay;
  m.bound = UnrollErrorBound(m.params);
  const Eigen::VectorXd displacement = removed - trajectory[o.steps];
  m.displacement = displacement.norm();
  m.gap = (displacement - delta).norm();
  return m;
}

double GeometricSeriesCheck(const Eigen::MatrixXd& hessian, double eta, std::size_t steps) {
  Require(hessian.rows() == hessian.cols() && hessian.rows() > 0,
          ErrorKind::kInvalidArgument, "curvature must be a non-empty square matrix");
  Require(eta > 0.0, ErrorKind::kInvalidArgument, "learning rate must be positive");
  Require((hessian - hessian.transpose()).cwiseAbs().maxCoeff() <=
              1e-12 * std::max(1.0, hessian.cwiseAbs().maxCoeff()),
          ErrorKind::kInvalidArgument, "curvature must be symmetric");
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hessian);
  Require(eig.eigenvalues().minCoeff() > 0.0, ErrorKind::kInvalidArgument,
          "curvature must be positive definite");
  const double radius = (1.0 - eta * eig.eigenvalues().array()).abs().maxCoeff();
  if (radius >= 1.0) {
    Fail(ErrorKind::kDivergence,
         "series diverges: spectral radius of I - eta H is " + std::to_string(radius));
  }
  const Eigen::Index p = hessian.rows();
  const Eigen::MatrixXd step = Eigen::MatrixXd::Identity(p, p) - eta * hessian;
  Eigen::MatrixXd term = Eigen::MatrixXd::Identity(p, p);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t s = 0; s < steps; ++s) {
    sum += term;
    term = step * term;
  }
  const Eigen::MatrixXd inverse = (eta * hessian).ldlt().solve(Eigen::MatrixXd::Identity(p, p));
  auto spectral = [](const Eigen::MatrixXd& m) {
    const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sym, Eigen::EigenvaluesOnly)
        .eigenvalues()
        .cwiseAbs()
        .maxCoeff();
  };
  return spectral(sum - inverse) / spectral(inverse);
}

void SaveProbes(const std::filesystem::path& path, std::span<const RemovalProbe> probes) {
  json doc;
  doc["probes"] = json::array();
  std::vector<std::uint64_t> validation;
  for (const RemovalProbe& p : probes) {
    doc["probes"].push_back(
        {{"sample_id", p.sample_id}, {"mode", RemovalModeName(p.mode)}, {"step", p.step}});
    Require(validation.empty() || validation == p.validation_ids, ErrorKind::kInvalidArgument,
            "probes in one file must share validation ids");
    validation = p.validation_ids;
  }
  doc["validation_ids"] = validation;
  WriteFileBytes(path, doc.dump(2) + "\n");
}

std::vector<RemovalProbe> LoadProbes(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(ReadFileBytes(path));
  } catch (const json::exception& e) {
    Fail(ErrorKind::kConfig, path.string() + ": " + e.what());
  }
  std::vector<RemovalProbe> probes;
  try {
    for (const auto& [key, _] : doc.items()) {
      Require(key == "probes" || key == "validation_ids", ErrorKind::kConfig,
              path.string() + ": unknown key '" + key + "'");
    }
    const auto validation = doc.at("validation_ids").get<std::vector<std::uint64_t>>();
    for (const json& p : doc.at("probes")) {
      for (const auto& [key, _] : p.items()) {
        Require(key == "sample_id" || key == "mode" || key == "step", ErrorKind::kConfig,
                path.string() + ": unknown probe key '" + key + "'");
      }
      RemovalProbe probe;
      probe.sample_id = p.at("sample_id").get<std::uint64_t>();
      probe.mode = ParseRemovalMode(p.at("mode").get<std::string>());
      probe.step = p.value("step", std::uint64_t{0});
      probe.validation_ids = validation;
      probes.push_back(std::move(probe));
    }
  } catch (const json::exception& e) {
    Fail(ErrorKind::kConfig, path.string() + ": " + e.what());
  }
  return probes;
}

std::string ProbeScoresCsv(std::span<const RemovalProbe> probes,
                           std::span<const std::vector<double>> scores) {
  Require(probes.size() == scores.size(), ErrorKind::kInvalidArgument,
          "one score row per probe expected");
  std::ostringstream out;
  out.precision(17);
  out << "sample_id,mode,step,val_id,score\n";
  for (std::size_t i = 0; i < probes.size(); ++i) {
    Require(scores[i].size() == probes[i].validation_ids.size(), ErrorKind::kInvalidArgument,
            "one score per validation sample expected");
    for (std::size_t v = 0; v < scores[i].size(); ++v) {
      out << probes[i].sample_id << ',' << RemovalModeName(probes[i].mode) << ','
          << probes[i].step << ',' << probes[i].validation_ids[v] << ',' << scores[i][v]
          << '\n';
    }
  }
  return out.str();
}

}  // namespace dvemb
