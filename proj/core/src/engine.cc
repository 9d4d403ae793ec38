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

#include "dvemb/engine.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include <Eigen/Dense>

#include "dvemb/errors.h"

namespace dvemb {
namespace {

void CheckShape(const LogHeader& header, const std::vector<Eigen::VectorXd>& layers,
                const char* what) {
  Require(layers.size() == header.num_layers(), ErrorKind::kInvalidArgument,
          std::string(what) + " has " + std::to_string(layers.size()) +
              " layers, header has " + std::to_string(header.num_layers()));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Require(static_cast<std::size_t>(layers[l].size()) == header.projected_dim(l),
            ErrorKind::kInvalidArgument,
            std::string(what) + " layer " + std::to_string(l) + " has width " +
                std::to_string(layers[l].size()) + ", expected " +
                std::to_string(header.projected_dim(l)));
  }
}

// Rows are the batch's projected gradients for one layer.
Eigen::MatrixXd StackLayer(const StepBlock& block, std::size_t layer, std::size_t dim) {
  Eigen::MatrixXd g(static_cast<Eigen::Index>(block.records.size()),
                    static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < block.records.size(); ++i) {
    const Eigen::VectorXd& v = block.records[i].layers.at(layer);
    Require(static_cast<std::size_t>(v.size()) == dim, ErrorKind::kInvalidArgument,
            "record width mismatch at step " + std::to_string(block.step));
    g.row(static_cast<Eigen::Index>(i)) = v.transpose();
  }
  return g;
}

std::vector<std::size_t> LayerOrder(const BackwardOptions& options, std::size_t layers) {
  if (options.layer_order.empty()) {
    std::vector<std::size_t> order(layers);
    std::iota(order.begin(), order.end(), 0);
    return order;
  }
  std::vector<std::size_t> sorted = options.layer_order;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t l = 0; l < sorted.size(); ++l) {
    Require(sorted[l] == l && sorted.size() == layers, ErrorKind::kInvalidArgument,
            "layer order must be a permutation of 0.." + std::to_string(layers - 1));
  }
  return options.layer_order;
}

void CheckRange(const StepSource& source, std::uint64_t begin, std::uint64_t end) {
  const std::uint64_t total = source.header().total_steps;
  Require(begin <= end && end <= total, ErrorKind::kInvalidArgument,
          "step range [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") outside trajectory of " + std::to_string(total) + " steps");
  for (std::uint64_t t = begin; t < end; ++t) {
    Require(source.HasStep(t), ErrorKind::kMissingArtifact,
            "gradient log is missing step " + std::to_string(t));
  }
}

}  // namespace

void EmbeddingStore::Add(ValueEmbedding embedding) {
  CheckShape(header_, embedding.layers, "embedding");
  Require(embedding.target_step == target_step_, ErrorKind::kInvalidArgument,
          "embedding targets step " + std::to_string(embedding.target_step) +
              ", store targets " + std::to_string(target_step_));
  for (const Eigen::VectorXd& v : embedding.layers) {
    Require(v.allFinite(), ErrorKind::kDivergence,
            "non-finite embedding for sample " + std::to_string(embedding.sample_id) +
                " at step " + std::to_string(embedding.step));
  }
  Key key{embedding.step, embedding.sample_id};
  const bool inserted = entries_.emplace(key, std::move(embedding)).second;
  Require(inserted, ErrorKind::kInvalidArgument,
          "duplicate embedding for sample " + std::to_string(key.second) + " at step " +
              std::to_string(key.first));
}

bool EmbeddingStore::Contains(std::uint64_t step, std::uint64_t sample_id) const {
  return entries_.contains({step, sample_id});
}

const ValueEmbedding& EmbeddingStore::Get(std::uint64_t step,
                                          std::uint64_t sample_id) const {
  auto it = entries_.find({step, sample_id});
  Require(it != entries_.end(), ErrorKind::kNotFound,
          "no embedding for sample " + std::to_string(sample_id) + " at step " +
              std::to_string(step));
  return it->second;
}

GgnBlock Ggn(const StepBlock& block) {
  Require(!block.records.empty(), ErrorKind::kInvalidArgument,
          "empty batch at step " + std::to_string(block.step));
  GgnBlock ggn;
  const std::size_t layers = block.records.front().layers.size();
  for (std::size_t l = 0; l < layers; ++l) {
    const auto dim = static_cast<std::size_t>(block.records.front().layers[l].size());
    const Eigen::MatrixXd g = StackLayer(block, l, dim);
    ggn.layers.push_back(g.transpose() * g);
  }
  return ggn;
}

ValueEmbedding DveDirect(const StepSource& source, std::uint64_t step,
                         std::uint64_t sample_id, std::uint64_t target_step) {
  Require(step < target_step && target_step <= source.header().total_steps,
          ErrorKind::kInvalidArgument,
          "need origin step < target step <= T, got " + std::to_string(step) + " and " +
              std::to_string(target_step));
  const StepBlock origin = source.ReadStep(step);
  auto it = std::find_if(origin.records.begin(), origin.records.end(),
                         [&](const GradientRecord& r) { return r.sample_id == sample_id; });
  Require(it != origin.records.end(), ErrorKind::kNotFound,
          "sample " + std::to_string(sample_id) + " not in batch at step " +
              std::to_string(step));

  ValueEmbedding e;
  e.sample_id = sample_id;
  e.step = step;
  e.target_step = target_step;
  for (const Eigen::VectorXd& g : it->layers) e.layers.push_back(origin.eta * g);

  // Factors for later steps act after earlier ones.
  for (std::uint64_t k = step + 1; k < target_step; ++k) {
    const StepBlock block = source.ReadStep(k);
    const GgnBlock ggn = Ggn(block);
    for (std::size_t l = 0; l < e.layers.size(); ++l) {
      const auto p = e.layers[l].size();
      const Eigen::MatrixXd factor =
          Eigen::MatrixXd::Identity(p, p) - block.eta * ggn.layers[l];
      e.layers[l] = factor * e.layers[l];
    }
  }
  return e;
}

SegmentResult DveBackwardSegment(const StepSource& source, std::uint64_t begin,
                                 std::uint64_t end, const BackwardOptions& options) {
  const LogHeader& header = source.header();
  CheckRange(source, begin, end);
  const std::size_t layers = header.num_layers();
  const std::vector<std::size_t> order = LayerOrder(options, layers);

  SegmentResult result{EmbeddingStore(header, begin, end, end), std::nullopt};
  std::vector<Eigen::MatrixXd> discount(layers);
  std::vector<Eigen::MatrixXd> kernel(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const auto p = static_cast<Eigen::Index>(header.projected_dim(l));
    discount[l] = Eigen::MatrixXd::Zero(p, p);
    if (options.accumulate_kernel) kernel[l] = Eigen::MatrixXd::Identity(p, p);
  }

  for (std::uint64_t t = end; t-- > begin;) {
    const StepBlock block = source.ReadStep(t);
    Require(!block.records.empty(), ErrorKind::kInvalidArgument,
            "empty batch at step " + std::to_string(t));
    const double eta = block.eta;
    std::vector<Eigen::MatrixXd> embedded(layers);
    for (std::size_t l : order) {
      const Eigen::MatrixXd g = StackLayer(block, l, header.projected_dim(l));
      // Row form of e = eta (g - M g), taken before M absorbs this step.
      Eigen::MatrixXd e = eta * (g - g * discount[l].transpose());
      discount[l].noalias() += e.transpose() * g;
      if (options.accumulate_kernel) {
        const Eigen::MatrixXd kg = kernel[l] * g.transpose();
        kernel[l].noalias() -= eta * (kg * g);
      }
      if (!discount[l].allFinite()) {
        throw DivergenceError(t, "discount state overflowed in layer " + std::to_string(l));
      }
      embedded[l] = std::move(e);
    }
    for (std::size_t i = 0; i < block.records.size(); ++i) {
      ValueEmbedding v;
      v.sample_id = block.records[i].sample_id;
      v.step = t;
      v.target_step = end;
      for (std::size_t l = 0; l < layers; ++l) {
        v.layers.push_back(embedded[l].row(static_cast<Eigen::Index>(i)).transpose());
      }
      result.store.Add(std::move(v));
    }
  }
  if (options.accumulate_kernel) {
    result.kernel = SegmentKernel{begin, end, std::move(kernel)};
  }
  return result;
}

EmbeddingStore DveBackward(const StepSource& source, const BackwardOptions& options) {
  return DveBackwardSegment(source, 0, source.header().total_steps, options).store;
}

CheckpointedResult DveCheckpointed(const StepSource& source,
                                   std::span<const std::uint64_t> checkpoints,
                                   std::size_t jobs) {
  const std::uint64_t total = source.header().total_steps;
  Require(!checkpoints.empty() && checkpoints.back() == total, ErrorKind::kInvalidArgument,
          "last checkpoint must equal T = " + std::to_string(total));
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    Require(checkpoints[i] > (i == 0 ? 0 : checkpoints[i - 1]), ErrorKind::kInvalidArgument,
            "checkpoints must be strictly increasing and positive");
  }
  CheckRange(source, 0, total);

  const std::size_t segments = checkpoints.size();
  std::vector<std::optional<SegmentResult>> parts(segments);
  std::atomic<std::size_t> next{0};
  std::mutex failure_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t s = next++; s < segments; s = next++) {
      try {
        const std::uint64_t begin = s == 0 ? 0 : checkpoints[s - 1];
        BackwardOptions options;
        options.accumulate_kernel = true;
        parts[s] = DveBackwardSegment(source, begin, checkpoints[s], options);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(jobs, segments));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  CheckpointedResult result;
  result.checkpoints.assign(checkpoints.begin(), checkpoints.end());
  for (std::optional<SegmentResult>& part : parts) {
    result.segments.push_back(std::move(part->store));
    result.kernels.push_back(std::move(*part->kernel));
  }
  return result;
}

ValueEmbedding ComposeToCheckpoint(const ValueEmbedding& embedding,
                                   std::span<const SegmentKernel> kernels,
                                   std::uint64_t target_step) {
  Require(target_step > embedding.step, ErrorKind::kInvalidArgument,
          "cannot carry step " + std::to_string(embedding.step) + " to checkpoint " +
              std::to_string(target_step) + ": later batches do not affect earlier checkpoints");
  Require(target_step >= embedding.target_step, ErrorKind::kInvalidArgument,
          "embedding already targets step " + std::to_string(embedding.target_step) +
              ", past checkpoint " + std::to_string(target_step));
  ValueEmbedding out = embedding;
  while (out.target_step < target_step) {
    auto it = std::find_if(kernels.begin(), kernels.end(), [&](const SegmentKernel& k) {
      return k.begin == out.target_step;
    });
    Require(it != kernels.end(), ErrorKind::kMissingArtifact,
            "no kernel starting at step " + std::to_string(out.target_step));
    Require(it->end <= target_step, ErrorKind::kInvalidArgument,
            "kernel [" + std::to_string(it->begin) + ", " + std::to_string(it->end) +
                ") overshoots checkpoint " + std::to_string(target_step));
    Require(it->layers.size() == out.layers.size(), ErrorKind::kInvalidArgument,
            "kernel layer count mismatch");
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
      out.layers[l] = it->layers[l] * out.layers[l];
    }
    out.target_step = it->end;
  }
  return out;
}

EmbeddingStore ComposeStore(const CheckpointedResult& result, std::uint64_t target_step) {
  Require(!result.segments.empty(), ErrorKind::kInvalidArgument, "no segments");
  Require(std::find(result.checkpoints.begin(), result.checkpoints.end(), target_step) !=
              result.checkpoints.end(),
          ErrorKind::kInvalidArgument,
          "step " + std::to_string(target_step) + " is not a checkpoint");
  EmbeddingStore store(result.segments.front().header(), 0, target_step, target_step);
  for (const EmbeddingStore& segment : result.segments) {
    if (segment.begin_step() >= target_step) break;
    for (const auto& [key, embedding] : segment.entries()) {
      store.Add(ComposeToCheckpoint(embedding, result.kernels, target_step));
    }
  }
  return store;
}

ProjectedGradient ProjectGradient(const ProjectionPair& pair, const ModelSpec& spec,
                                  const ModelParams& params,
                                  const Eigen::Ref<const Eigen::VectorXd>& input, int label) {
  SampleBatch batch;
  batch.inputs = input.transpose();
  batch.labels = {label};
  batch.sample_ids = {0};
  const BackpropCapture capture = ForwardBackward(spec, params, batch);
  const std::vector<RowMatrix> projected = ProjectCapture(pair, capture);
  ProjectedGradient out;
  out.projection_seed = pair.seed();
  out.identity = pair.identity();
  for (const RowMatrix& layer : projected) out.layers.push_back(layer.row(0).transpose());
  return out;
}

double Influence(const ValueEmbedding& embedding, const ProjectedGradient& gradient) {
  Require(embedding.layers.size() == gradient.layers.size(), ErrorKind::kInvalidArgument,
          "test gradient layer count mismatch");
  double score = 0.0;
  for (std::size_t l = 0; l < embedding.layers.size(); ++l) {
    Require(embedding.layers[l].size() == gradient.layers[l].size(),
            ErrorKind::kInvalidArgument,
            "test gradient width mismatch in layer " + std::to_string(l));
    score += embedding.layers[l].dot(gradient.layers[l]);
  }
  return score;
}

std::vector<InfluenceScore> InfluenceQuery(
    const EmbeddingStore& store, const ProjectedGradient& gradient,
    std::optional<std::pair<std::uint64_t, std::uint64_t>> step_range) {
  Require(gradient.projection_seed == store.header().projection_seed &&
              gradient.identity == store.header().identity,
          ErrorKind::kInvalidArgument,
          "test gradient projected with seed " + std::to_string(gradient.projection_seed) +
              " but store uses seed " + std::to_string(store.header().projection_seed));
  CheckShape(store.header(), gradient.layers, "test gradient");
  std::vector<InfluenceScore> scores;
  scores.reserve(store.size());
  for (const auto& [key, embedding] : store.entries()) {
    if (step_range && (key.first < step_range->first || key.first > step_range->second)) {
      continue;
    }
    scores.push_back({key.first, key.second, Influence(embedding, gradient)});
  }
  return scores;
}

ValueEmbedding AggregateSource(const EmbeddingStore& store,
                               std::span<const std::string> sample_tags,
                               const std::string& tag) {
  ValueEmbedding sum;
  sum.sample_id = 0;
  sum.target_step = store.target_step();
  for (std::size_t l = 0; l < store.header().num_layers(); ++l) {
    sum.layers.push_back(Eigen::VectorXd::Zero(
        static_cast<Eigen::Index>(store.header().projected_dim(l))));
  }
  std::size_t members = 0;
  for (const auto& [key, embedding] : store.entries()) {
    Require(key.second < sample_tags.size(), ErrorKind::kInvalidArgument,
            "sample " + std::to_string(key.second) + " has no source tag");
    if (sample_tags[key.second] != tag) continue;
    for (std::size_t l = 0; l < sum.layers.size(); ++l) sum.layers[l] += embedding.layers[l];
    ++members;
  }
  Require(members > 0, ErrorKind::kNotFound, "unknown source tag '" + tag + "'");
  return sum;
}

}  // namespace dvemb
