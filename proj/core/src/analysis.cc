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

#include "dvemb/analysis.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "dvemb/errors.h"
#include "dvemb/trainer.h"

namespace dvemb {

void ScoreSeries::Validate() const {
  Require(ids.size() == scores.size(), ErrorKind::kInvalidArgument,
          "series '" + label + "' has " + std::to_string(ids.size()) + " ids and " +
              std::to_string(scores.size()) + " scores");
  for (double s : scores) {
    Require(std::isfinite(s), ErrorKind::kInvalidArgument,
            "series '" + label + "' has a non-finite score");
  }
  std::vector<std::uint64_t> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  Require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
          ErrorKind::kInvalidArgument, "series '" + label + "' has duplicate ids");
}

std::vector<double> AverageRanks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double Spearman(std::span<const double> a, std::span<const double> b) {
  Require(a.size() == b.size(), ErrorKind::kInvalidArgument,
          "series lengths differ: " + std::to_string(a.size()) + " vs " +
              std::to_string(b.size()));
  Require(a.size() >= 3, ErrorKind::kInvalidArgument, "rank correlation needs n >= 3");
  const std::vector<double> ra = AverageRanks(a);
  const std::vector<double> rb = AverageRanks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - mean) * (rb[i] - mean);
    va += (ra[i] - mean) * (ra[i] - mean);
    vb += (rb[i] - mean) * (rb[i] - mean);
  }
  Require(va > 0.0 && vb > 0.0, ErrorKind::kInvalidArgument,
          "rank correlation is undefined for a constant series");
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

double Spearman(const ScoreSeries& a, const ScoreSeries& b) {
  a.Validate();
  b.Validate();
  Require(a.size() == b.size(), ErrorKind::kInvalidArgument,
          "series '" + a.label + "' and '" + b.label + "' differ in length");
  std::map<std::uint64_t, double> by_id;
  for (std::size_t i = 0; i < b.size(); ++i) by_id[b.ids[i]] = b.scores[i];
  std::vector<double> aligned;
  aligned.reserve(a.size());
  for (std::uint64_t id : a.ids) {
    auto it = by_id.find(id);
    Require(it != by_id.end(), ErrorKind::kInvalidArgument,
            "id " + std::to_string(id) + " missing from series '" + b.label + "'");
    aligned.push_back(it->second);
  }
  return Spearman(a.scores, aligned);
}

double MislabelAuroc(const ScoreSeries& scores, const std::vector<bool>& flags) {
  scores.Validate();
  Require(flags.size() == scores.size(), ErrorKind::kInvalidArgument,
          "one flag per score expected");
  const std::size_t positives =
      static_cast<std::size_t>(std::count(flags.begin(), flags.end(), true));
  const std::size_t negatives = flags.size() - positives;
  Require(positives > 0 && negatives > 0, ErrorKind::kInvalidArgument,
          "AUROC needs at least one flagged and one clean sample");
  // Mann-Whitney with the score negated so that low scores rank as positive.
  std::vector<double> negated(scores.scores.size());
  for (std::size_t i = 0; i < negated.size(); ++i) negated[i] = -scores.scores[i];
  const std::vector<double> ranks = AverageRanks(negated);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (flags[i]) rank_sum += ranks[i];
  }
  const double p = static_cast<double>(positives);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(negatives));
}

std::vector<std::uint64_t> SelectTopK(const ScoreSeries& scores, std::size_t k) {
  scores.Validate();
  Require(k <= scores.size(), ErrorKind::kInvalidArgument,
          "k = " + std::to_string(k) + " exceeds " + std::to_string(scores.size()) +
              " scores");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores.scores[a] != scores.scores[b]) return scores.scores[a] > scores.scores[b];
    return scores.ids[a] < scores.ids[b];
  });
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(scores.ids[order[i]]);
  return out;
}

double RetrainOnSubset(const Dataset& train, std::span<const std::uint64_t> ids,
                       const PlanOptions& plan, const Dataset& test) {
  const Dataset subset = train.Subset(ids);
  const RunManifest manifest = PlanRun(subset, plan);
  TrainOptions options;
  options.keep_checkpoints = false;
  const TrainResult result = Train(manifest, subset, options);
  return Accuracy(plan.spec, result.final_params, test.inputs, test.labels);
}

DynamicsReport BatchInfluenceCurve(const EmbeddingStore& store,
                                   std::span<const ProjectedGradient> validation,
                                   const RunManifest& manifest) {
  Require(!validation.empty(), ErrorKind::kInvalidArgument, "empty validation set");
  Require(store.target_step() == manifest.total_steps(), ErrorKind::kInvalidArgument,
          "store must target the final step " + std::to_string(manifest.total_steps()));
  const LearningRateSchedule rates = manifest.Rates();
  DynamicsReport report;
  for (std::uint64_t t = 0; t < manifest.total_steps(); ++t) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::uint64_t id : manifest.batches[t]) {
      const ValueEmbedding& e = store.Get(t, id);
      for (const ProjectedGradient& g : validation) {
        sum += Influence(e, g);
        ++count;
      }
    }
    const double mean = count == 0 ? 0.0 : sum / static_cast<double>(count);
    const double eta = rates.at(t);
    report.eta.push_back(eta);
    report.mean_influence.push_back(mean);
    report.normalized.push_back(eta == 0.0 ? 0.0 : mean / eta);
  }
  return report;
}

std::vector<StepGroup> DecileGroups(std::uint64_t total_steps, std::size_t count) {
  Require(count > 0 && count <= total_steps, ErrorKind::kInvalidArgument,
          "need 1 <= groups <= T");
  std::vector<StepGroup> groups;
  for (std::size_t g = 0; g < count; ++g) {
    groups.push_back({total_steps * g / count, total_steps * (g + 1) / count});
  }
  return groups;
}

double GroupInfluenceAt(const CheckpointedResult& result, const StepGroup& group,
                        std::uint64_t checkpoint,
                        std::span<const ProjectedGradient> validation) {
  Require(!validation.empty(), ErrorKind::kInvalidArgument, "empty validation set");
  Require(group.begin < group.end, ErrorKind::kInvalidArgument, "empty step group");
  Require(group.end <= checkpoint, ErrorKind::kInvalidArgument,
          "group [" + std::to_string(group.begin) + ", " + std::to_string(group.end) +
              ") reaches checkpoint " + std::to_string(checkpoint));
  double sum = 0.0;
  std::size_t count = 0;
  for (const EmbeddingStore& segment : result.segments) {
    if (segment.end_step() <= group.begin || segment.begin_step() >= group.end) continue;
    for (const auto& [key, e] : segment.entries()) {
      if (key.first < group.begin || key.first >= group.end) continue;
      const ValueEmbedding carried = ComposeToCheckpoint(e, result.kernels, checkpoint);
      for (const ProjectedGradient& g : validation) {
        sum += Influence(carried, g);
        ++count;
      }
    }
  }
  Require(count > 0, ErrorKind::kNotFound, "step group has no records");
  return sum / static_cast<double>(count);
}

Eigen::MatrixXd InfluenceEvolution(const CheckpointedResult& result,
                                   std::span<const StepGroup> groups,
                                   std::span<const std::vector<ProjectedGradient>> validation) {
  Require(validation.size() == result.checkpoints.size(), ErrorKind::kInvalidArgument,
          "one validation set per checkpoint expected");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(groups.size()),
                      static_cast<Eigen::Index>(result.checkpoints.size()));
  out.setConstant(std::numeric_limits<double>::quiet_NaN());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t k = 0; k < result.checkpoints.size(); ++k) {
      if (groups[g].end > result.checkpoints[k]) continue;
      out(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(k)) =
          GroupInfluenceAt(result, groups[g], result.checkpoints[k], validation[k]);
    }
  }
  return out;
}

DecayTrace OrthogonalDecayTrace(std::span<const double> eta,
                                std::span<const double> grad_norm_sq, double dimension) {
  Require(eta.size() == grad_norm_sq.size(), ErrorKind::kInvalidArgument,
          "one gradient norm sum per step expected");
  DecayTrace out;
  out.trace.resize(eta.size());
  double tail = 0.0;
  for (std::size_t t = eta.size(); t-- > 0;) {
    tail += eta[t] * grad_norm_sq[t];
    double value = dimension - tail;
    if (value < 0.0) {
      out.clamped = true;
      value = 0.0;
    }
    out.trace[t] = value;
  }
  return out;
}

namespace {

std::ostringstream CsvStream() {
  std::ostringstream out;
  out.precision(17);
  return out;
}

}  // namespace

std::string CurveCsv(const DynamicsReport& report) {
  std::ostringstream out = CsvStream();
  out << "t,eta,mean_influence,normalized\n";
  for (std::size_t t = 0; t < report.eta.size(); ++t) {
    out << t << ',' << report.eta[t] << ',' << report.mean_influence[t] << ','
        << report.normalized[t] << '\n';
  }
  return out.str();
}

std::string EvolutionCsv(std::span<const StepGroup> groups,
                         std::span<const std::uint64_t> checkpoints,
                         const Eigen::MatrixXd& evolution) {
  Require(evolution.rows() == static_cast<Eigen::Index>(groups.size()) &&
              evolution.cols() == static_cast<Eigen::Index>(checkpoints.size()),
          ErrorKind::kInvalidArgument, "evolution matrix shape mismatch");
  std::ostringstream out = CsvStream();
  out << "group,checkpoint,mean\n";
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t k = 0; k < checkpoints.size(); ++k) {
      const double v = evolution(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(k));
      if (std::isnan(v)) continue;
      out << g << ',' << checkpoints[k] << ',' << v << '\n';
    }
  }
  return out.str();
}

std::string ScoresCsv(std::span<const ScoreSeries> series) {
  Require(!series.empty(), ErrorKind::kInvalidArgument, "no series to write");
  for (const ScoreSeries& s : series) {
    s.Validate();
    Require(s.ids == series.front().ids, ErrorKind::kInvalidArgument,
            "series '" + s.label + "' does not share ids");
  }
  std::ostringstream out = CsvStream();
  out << "id";
  for (const ScoreSeries& s : series) out << ',' << s.label;
  out << '\n';
  for (std::size_t i = 0; i < series.front().size(); ++i) {
    out << series.front().ids[i];
    for (const ScoreSeries& s : series) out << ',' << s.scores[i];
    out << '\n';
  }
  return out.str();
}

}  // namespace dvemb
