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

#ifndef DVEMB_PROJECTION_H_
#define DVEMB_PROJECTION_H_

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dvemb/model.h"

namespace dvemb {

// Kronecker-structured sketch of one linear layer's gradient. A per-sample
// gradient outer(ds, a) is mapped to outer(P_s ds, P_a a), which equals
// (P_s kron P_a) applied to the row-major flattening of outer(ds, a).
// A side whose target width is at least its input width is left unprojected.
struct LayerSketch {
  std::size_t d_in = 0;   // activation width (bias slot included)
  std::size_t d_out = 0;
  std::size_t r_a = 0;
  std::size_t r_s = 0;
  RowMatrix p_a;  // r_a x d_in Rademacher / sqrt(r_a); empty when identity
  RowMatrix p_s;  // r_s x d_out Rademacher / sqrt(r_s); empty when identity

  bool identity_a() const { return p_a.size() == 0; }
  bool identity_s() const { return p_s.size() == 0; }
  std::size_t projected_dim() const { return r_a * r_s; }

  // Row i is the projected gradient of sample i.
  RowMatrix ProjectBatch(const RowMatrix& activations,
                         const RowMatrix& output_grads) const;
  Eigen::VectorXd Project(const Eigen::Ref<const Eigen::VectorXd>& a,
                          const Eigen::Ref<const Eigen::VectorXd>& ds) const;
};

LayerSketch MakeLayerSketch(std::size_t d_in, std::size_t d_out, std::size_t r_a,
                            std::size_t r_s, std::uint64_t seed);

class ProjectionPair {
 public:
  ProjectionPair() = default;
  ProjectionPair(std::uint64_t seed, bool identity, std::vector<LayerSketch> layers)
      : seed_(seed), identity_(identity), layers_(std::move(layers)) {}

  std::uint64_t seed() const { return seed_; }
  bool identity() const { return identity_; }
  std::size_t num_layers() const { return layers_.size(); }
  const LayerSketch& layer(std::size_t l) const { return layers_.at(l); }
  std::size_t projected_dim(std::size_t l) const { return layers_.at(l).projected_dim(); }
  std::vector<std::size_t> projected_dims() const;

 private:
  std::uint64_t seed_ = 0;
  bool identity_ = false;
  std::vector<LayerSketch> layers_;
};

// Per-layer Rademacher sketches with seeds derived from (seed, layer).
ProjectionPair MakeProjections(std::uint64_t seed, const ModelSpec& spec,
                               std::size_t r_a, std::size_t r_s);
// Per-layer (r_a, r_s).
ProjectionPair MakeProjections(std::uint64_t seed, const ModelSpec& spec,
                               std::span<const std::pair<std::size_t, std::size_t>> widths);
ProjectionPair MakeIdentityProjections(const ModelSpec& spec);

Eigen::VectorXd ProjectRecord(const Eigen::Ref<const Eigen::VectorXd>& a,
                              const Eigen::Ref<const Eigen::VectorXd>& ds,
                              const ProjectionPair& pair, std::size_t layer);

// Projects every sample of a capture: result[l] row i is sample i, layer l.
std::vector<RowMatrix> ProjectCapture(const ProjectionPair& pair,
                                      const BackpropCapture& capture);

struct FactoredGradient {
  Eigen::VectorXd a;
  Eigen::VectorXd ds;
};

struct DotPreservationReport {
  std::size_t samples = 0;
  double mean_relative_error = 0.0;
  double stddev_relative_error = 0.0;
  double max_relative_error = 0.0;
};

// Relative error |<Pg1, Pg2> - <g1, g2>| / (|g1| |g2|) over consecutive
// gradient pairs (0,1), (2,3), ..., with a fresh sketch for every trial.
DotPreservationReport DotPreservation(std::span<const FactoredGradient> grads,
                                      std::size_t r_a, std::size_t r_s,
                                      std::uint64_t seed, std::size_t trials);

}  // namespace dvemb

#endif  // DVEMB_PROJECTION_H_
