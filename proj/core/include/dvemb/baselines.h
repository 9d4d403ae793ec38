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

#ifndef DVEMB_BASELINES_H_
#define DVEMB_BASELINES_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dvemb/dataset.h"
#include "dvemb/engine.h"
#include "dvemb/manifest.h"
#include "dvemb/trainer.h"

namespace dvemb {

enum class RemovalMode { kSingleIteration, kAllEpochs };

const char* RemovalModeName(RemovalMode mode);
RemovalMode ParseRemovalMode(const std::string& name);

struct RemovalProbe {
  std::uint64_t sample_id = 0;
  RemovalMode mode = RemovalMode::kSingleIteration;
  std::uint64_t step = 0;  // used by kSingleIteration only
  // Indices into the validation dataset.
  std::vector<std::uint64_t> validation_ids;
};

// Removals a probe applies to the manifest; throws kInvalidArgument when the
// sample is absent from the named step (or from every step).
std::vector<Removal> ProbeRemovals(const RunManifest& manifest, const RemovalProbe& probe);

// Loss change on each validation sample from retraining without the probed
// occurrences: loss(theta'_T) - loss(theta_T). `baseline` must come from
// Train() on the same manifest; its checkpoints shorten the replay.
std::vector<double> GroundTruthTsloo(const RunManifest& manifest, const Dataset& train,
                                     const TrainResult& baseline,
                                     const Dataset& validation,
                                     const RemovalProbe& probe);

// Runs independent counterfactual retrains on up to `jobs` threads.
std::vector<std::vector<double>> GroundTruthTslooBatch(
    const RunManifest& manifest, const Dataset& train, const TrainResult& baseline,
    const Dataset& validation, std::span<const RemovalProbe> probes, std::size_t jobs);

// Embedding-side prediction for a probe: one record's score for a single
// iteration, the sum over every occurrence for all epochs.
double PredictTsloo(const EmbeddingStore& store, const RunManifest& manifest,
                    const RemovalProbe& probe, const ProjectedGradient& validation_grad);

// `count` distinct (step, sample) records from the last epoch, drawn with a
// seeded shuffle and returned in ascending step order.
std::vector<RemovalProbe> LastEpochProbes(const RunManifest& manifest, std::size_t count,
                                          std::uint64_t seed, RemovalMode mode,
                                          std::vector<std::uint64_t> validation_ids);

// Projected per-sample gradients at fixed parameters, one entry per id.
std::vector<std::vector<Eigen::VectorXd>> ProjectedTrainingGradients(
    const ProjectionPair& pair, const ModelSpec& spec, const ModelParams& params,
    const Dataset& dataset, std::span<const std::uint64_t> ids);

// Damped Gauss-Newton influence function, block diagonal over layers:
// score(z) = sum_l g_val_l^T (G_l + damping I)^{-1} g_l(z).
class InfluenceFunction {
 public:
  // G_l is the sum of g g^T over `curvature_grads`.
  static InfluenceFunction Fit(std::span<const std::vector<Eigen::VectorXd>> curvature_grads,
                               double damping);

  double Score(const std::vector<Eigen::VectorXd>& validation_grad,
               const std::vector<Eigen::VectorXd>& training_grad) const;
  std::vector<double> Scores(const std::vector<Eigen::VectorXd>& validation_grad,
                             std::span<const std::vector<Eigen::VectorXd>> training_grads) const;

  double damping() const { return damping_; }
  const std::vector<Eigen::MatrixXd>& curvature() const { return curvature_; }

 private:
  std::vector<Eigen::VectorXd> Solve(const std::vector<Eigen::VectorXd>& rhs) const;

  double damping_ = 0.0;
  std::vector<Eigen::MatrixXd> curvature_;
  std::vector<Eigen::LDLT<Eigen::MatrixXd>> factors_;
};

// Constants of the unrolling error bound.
struct BoundParams {
  double gradient_bound = 0.0;      // G
  double scale = 0.0;               // C, with eta_max = C / sqrt(T)
  double hessian_lipschitz = 0.0;   // L
  double spectral_decay = 0.0;      // Lambda, with H_t <= Lambda / sqrt(t) I
};

// (32/3) G^2 C^3 L exp(C Lambda).
double UnrollErrorBound(const BoundParams& params);

// Linear regression with loss log(cosh(w.x - y)), batch size 1 and
// eta_t = eta_max / sqrt(t) (eta_0 = eta_max). Gradient and Hessian
// Lipschitz bounds hold globally: G = max |x|, L = 4/(3 sqrt 3) max |x|^3.
struct GapToyOptions {
  std::uint64_t seed = 0;
  std::size_t samples = 16;
  std::size_t dim = 4;
  std::size_t steps = 256;
  double scale = 1.0;  // C
  std::uint64_t removed_step = 1;
};

struct GapMeasurement {
  double gap = 0.0;            // |(theta'_T - theta_T) - delta|
  double displacement = 0.0;   // |theta'_T - theta_T|
  BoundParams params;
  double bound = 0.0;
};

GapMeasurement MeasureUnrollGap(const GapToyOptions& options);

// Relative deviation |sum_{s<T} (I - eta H)^s - (eta H)^{-1}| / |(eta H)^{-1}|
// in spectral norm. Throws kDivergence when the spectral radius of I - eta H
// is at least 1.
double GeometricSeriesCheck(const Eigen::MatrixXd& hessian, double eta, std::size_t steps);

// Probe file (JSON): {"probes": [{"sample_id", "mode", "step"}],
// "validation_ids": [...]}. Every probe shares the validation ids.
void SaveProbes(const std::filesystem::path& path, std::span<const RemovalProbe> probes);
std::vector<RemovalProbe> LoadProbes(const std::filesystem::path& path);

// CSV with columns sample_id,mode,step,val_id,score.
std::string ProbeScoresCsv(std::span<const RemovalProbe> probes,
                           std::span<const std::vector<double>> scores);

}  // namespace dvemb

#endif  // DVEMB_BASELINES_H_
