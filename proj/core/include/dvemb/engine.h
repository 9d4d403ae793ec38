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

#ifndef DVEMB_ENGINE_H_
#define DVEMB_ENGINE_H_

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dvemb/gradlog.h"

namespace dvemb {

// Cumulative effect of one training record (sample at its origin step) on the
// parameters at target_step, per layer in projected coordinates.
struct ValueEmbedding {
  std::uint64_t sample_id = 0;
  std::uint64_t step = 0;
  std::uint64_t target_step = 0;
  std::vector<Eigen::VectorXd> layers;
};

// Per-layer Gauss-Newton curvature of one step: sum of g g^T over the batch.
struct GgnBlock {
  std::vector<Eigen::MatrixXd> layers;
};

// Product of (I - eta_t G_t) over steps [begin, end), stored so that
// K * e carries a vector from step begin to step end. Later steps sit on
// the left.
struct SegmentKernel {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  std::vector<Eigen::MatrixXd> layers;
};

// Embeddings keyed by (step, sample_id) and sharing one target step.
class EmbeddingStore {
 public:
  using Key = std::pair<std::uint64_t, std::uint64_t>;

  EmbeddingStore() = default;
  EmbeddingStore(LogHeader header, std::uint64_t begin_step, std::uint64_t end_step,
                 std::uint64_t target_step)
      : header_(std::move(header)),
        begin_step_(begin_step),
        end_step_(end_step),
        target_step_(target_step) {}

  const LogHeader& header() const { return header_; }
  // Origin steps covered: [begin_step, end_step).
  std::uint64_t begin_step() const { return begin_step_; }
  std::uint64_t end_step() const { return end_step_; }
  std::uint64_t target_step() const { return target_step_; }

  // Rejects duplicates and embeddings whose shape disagrees with the header.
  void Add(ValueEmbedding embedding);
  bool Contains(std::uint64_t step, std::uint64_t sample_id) const;
  const ValueEmbedding& Get(std::uint64_t step, std::uint64_t sample_id) const;
  std::size_t size() const { return entries_.size(); }
  // Ascending (step, sample_id).
  const std::map<Key, ValueEmbedding>& entries() const { return entries_; }

 private:
  LogHeader header_;
  std::uint64_t begin_step_ = 0;
  std::uint64_t end_step_ = 0;
  std::uint64_t target_step_ = 0;
  std::map<Key, ValueEmbedding> entries_;
};

GgnBlock Ggn(const StepBlock& block);

// Product-form embedding built by materializing every (I - eta_k G_k).
// Cost is O(T p^2) per sample; meant as a small-scale reference.
ValueEmbedding DveDirect(const StepSource& source, std::uint64_t step,
                         std::uint64_t sample_id, std::uint64_t target_step);

struct BackwardOptions {
  // Layer processing order; empty means 0..L-1.
  std::vector<std::size_t> layer_order;
  bool accumulate_kernel = false;
};

struct SegmentResult {
  EmbeddingStore store;
  std::optional<SegmentKernel> kernel;
};

// Backward recursion over origin steps [begin, end) with the discount state
// reset at end. Embeddings target step `end`.
SegmentResult DveBackwardSegment(const StepSource& source, std::uint64_t begin,
                                 std::uint64_t end, const BackwardOptions& options = {});

// Whole trajectory; embeddings target the final step T.
EmbeddingStore DveBackward(const StepSource& source, const BackwardOptions& options = {});

struct CheckpointedResult {
  std::vector<std::uint64_t> checkpoints;  // t_1 < ... < t_K = T
  std::vector<EmbeddingStore> segments;    // segment l covers [t_{l-1}, t_l)
  std::vector<SegmentKernel> kernels;
};

// Segments run on up to `jobs` threads; results do not depend on jobs.
CheckpointedResult DveCheckpointed(const StepSource& source,
                                   std::span<const std::uint64_t> checkpoints,
                                   std::size_t jobs = 1);

// Carries a segment-local embedding forward through the kernels that cover
// [embedding.target_step, target_step).
ValueEmbedding ComposeToCheckpoint(const ValueEmbedding& embedding,
                                   std::span<const SegmentKernel> kernels,
                                   std::uint64_t target_step);

// Every embedding with origin step before target_step, carried to target_step.
EmbeddingStore ComposeStore(const CheckpointedResult& result, std::uint64_t target_step);

// A validation gradient in the same projected coordinates as a store.
struct ProjectedGradient {
  std::uint64_t projection_seed = 0;
  bool identity = false;
  std::vector<Eigen::VectorXd> layers;
};

ProjectedGradient ProjectGradient(const ProjectionPair& pair, const ModelSpec& spec,
                                  const ModelParams& params,
                                  const Eigen::Ref<const Eigen::VectorXd>& input, int label);

struct InfluenceScore {
  std::uint64_t step = 0;
  std::uint64_t sample_id = 0;
  double score = 0.0;
};

// Sum over layers of <e_l, g_val_l>. Positive means removing the record would
// raise the validation loss.
double Influence(const ValueEmbedding& embedding, const ProjectedGradient& gradient);

// Scores in ascending (step, sample_id). The optional range is inclusive.
std::vector<InfluenceScore> InfluenceQuery(
    const EmbeddingStore& store, const ProjectedGradient& gradient,
    std::optional<std::pair<std::uint64_t, std::uint64_t>> step_range = std::nullopt);

// Sum of the embeddings of every record whose sample carries `tag`.
ValueEmbedding AggregateSource(const EmbeddingStore& store,
                               std::span<const std::string> sample_tags,
                               const std::string& tag);

}  // namespace dvemb

#endif  // DVEMB_ENGINE_H_
