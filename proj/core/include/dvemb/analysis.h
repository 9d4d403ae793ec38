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

#ifndef DVEMB_ANALYSIS_H_
#define DVEMB_ANALYSIS_H_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dvemb/dataset.h"
#include "dvemb/engine.h"
#include "dvemb/manifest.h"

namespace dvemb {

struct ScoreSeries {
  std::vector<std::uint64_t> ids;
  std::vector<double> scores;
  std::string label;

  std::size_t size() const { return ids.size(); }
  // Equal lengths, finite scores, unique ids.
  void Validate() const;
};

// Ranks starting at 1; tied values share their average rank.
std::vector<double> AverageRanks(std::span<const double> values);

// Rank correlation over the same id set (b is aligned to a by id). Throws
// for fewer than 3 points, mismatched ids or a constant series.
double Spearman(const ScoreSeries& a, const ScoreSeries& b);
double Spearman(std::span<const double> a, std::span<const double> b);

// AUROC of the detector "lower score means mislabeled"; flags[i] marks
// scores.scores[i] as a true positive. Ties count one half.
double MislabelAuroc(const ScoreSeries& scores, const std::vector<bool>& flags);

// k highest scores; ties go to the lower id. Returned in rank order.
std::vector<std::uint64_t> SelectTopK(const ScoreSeries& scores, std::size_t k);

// Trains on the selected subset with `plan` (its seeds and schedule) and
// returns accuracy on `test`.
double RetrainOnSubset(const Dataset& train, std::span<const std::uint64_t> ids,
                       const PlanOptions& plan, const Dataset& test);

struct DynamicsReport {
  std::vector<double> eta;             // per step
  std::vector<double> mean_influence;  // per step, over batch and validation set
  std::vector<double> normalized;      // mean_influence / eta (0 where eta is 0)
};

// Per-step mean of influence over the batch records and validation
// gradients, divided by the step size.
DynamicsReport BatchInfluenceCurve(const EmbeddingStore& store,
                                   std::span<const ProjectedGradient> validation,
                                   const RunManifest& manifest);

// Origin steps [begin, end).
struct StepGroup {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
};

// `count` contiguous buckets of [0, T) of near-equal width.
std::vector<StepGroup> DecileGroups(std::uint64_t total_steps, std::size_t count = 10);

// Mean influence of the group's records at checkpoint `checkpoint`, using
// validation gradients taken at that checkpoint. Throws when the group has
// steps at or after the checkpoint.
double GroupInfluenceAt(const CheckpointedResult& result, const StepGroup& group,
                        std::uint64_t checkpoint,
                        std::span<const ProjectedGradient> validation);

// groups x checkpoints; entry (g, k) uses validation[k]. Cells whose group
// is not entirely before the checkpoint are NaN.
Eigen::MatrixXd InfluenceEvolution(const CheckpointedResult& result,
                                   std::span<const StepGroup> groups,
                                   std::span<const std::vector<ProjectedGradient>> validation);

struct DecayTrace {
  std::vector<double> trace;  // per origin step
  bool clamped = false;       // some entry would have gone negative
};

// Trace of prod (I - eta_t G_t) from each origin step to T when all
// gradients are mutually orthogonal: p - sum_{t >= t_s} eta_t S_t, where S_t
// is the summed squared gradient norm of step t.
DecayTrace OrthogonalDecayTrace(std::span<const double> eta,
                                std::span<const double> grad_norm_sq, double dimension);

// t,eta,mean_influence,normalized
std::string CurveCsv(const DynamicsReport& report);
// group,checkpoint,mean; NaN cells are skipped.
std::string EvolutionCsv(std::span<const StepGroup> groups,
                         std::span<const std::uint64_t> checkpoints,
                         const Eigen::MatrixXd& evolution);
// id plus one column per series; all series must share ids.
std::string ScoresCsv(std::span<const ScoreSeries> series);

}  // namespace dvemb

#endif  // DVEMB_ANALYSIS_H_
