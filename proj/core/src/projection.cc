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

#include "dvemb/projection.h"

#include <algorithm>
#include <cmath>

#include "dvemb/errors.h"
#include "dvemb/rng.h"

namespace dvemb {
namespace {

RowMatrix Rademacher(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
  RowMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = scale * rng.Sign();
  }
  return m;
}

}  // namespace

LayerSketch MakeLayerSketch(std::size_t d_in, std::size_t d_out, std::size_t r_a,
                            std::size_t r_s, std::uint64_t seed) {
  Require(r_a >= 1 && r_s >= 1, ErrorKind::kInvalidArgument,
          "projection widths must be >= 1");
  LayerSketch sketch;
  sketch.d_in = d_in;
  sketch.d_out = d_out;
  sketch.r_a = std::min(r_a, d_in);
  sketch.r_s = std::min(r_s, d_out);
  if (r_a < d_in) sketch.p_a = Rademacher(r_a, d_in, DeriveSeed(seed, 0));
  if (r_s < d_out) sketch.p_s = Rademacher(r_s, d_out, DeriveSeed(seed, 1));
  return sketch;
}

RowMatrix LayerSketch::ProjectBatch(const RowMatrix& activations,
                                    const RowMatrix& output_grads) const {
  Require(static_cast<std::size_t>(activations.cols()) == d_in &&
              static_cast<std::size_t>(output_grads.cols()) == d_out,
          ErrorKind::kInvalidArgument, "projection input dims do not match layer");
  Require(activations.rows() == output_grads.rows(), ErrorKind::kInvalidArgument,
          "activation and output-derivative batch sizes differ");
  RowMatrix pa = identity_a() ? activations : RowMatrix(activations * p_a.transpose());
  RowMatrix ps = identity_s() ? output_grads : RowMatrix(output_grads * p_s.transpose());
  const auto ra = static_cast<Eigen::Index>(r_a);
  RowMatrix out(activations.rows(), static_cast<Eigen::Index>(projected_dim()));
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index o = 0; o < ps.cols(); ++o) {
      out.row(i).segment(o * ra, ra) = ps(i, o) * pa.row(i);
    }
  }
  return out;
}

Eigen::VectorXd LayerSketch::Project(const Eigen::Ref<const Eigen::VectorXd>& a,
                                     const Eigen::Ref<const Eigen::VectorXd>& ds) const {
  Require(static_cast<std::size_t>(a.size()) == d_in &&
              static_cast<std::size_t>(ds.size()) == d_out,
          ErrorKind::kInvalidArgument,
          "projection input dims (" + std::to_string(a.size()) + ", " +
              std::to_string(ds.size()) + ") do not match layer (" +
              std::to_string(d_in) + ", " + std::to_string(d_out) + ")");
  const Eigen::VectorXd pa = identity_a() ? Eigen::VectorXd(a) : Eigen::VectorXd(p_a * a);
  const Eigen::VectorXd ps = identity_s() ? Eigen::VectorXd(ds) : Eigen::VectorXd(p_s * ds);
  return FlattenOuter(ps, pa);
}

std::vector<std::size_t> ProjectionPair::projected_dims() const {
  std::vector<std::size_t> dims;
  for (const LayerSketch& s : layers_) dims.push_back(s.projected_dim());
  return dims;
}

ProjectionPair MakeProjections(std::uint64_t seed, const ModelSpec& spec,
                               std::size_t r_a, std::size_t r_s) {
  std::vector<std::pair<std::size_t, std::size_t>> widths(spec.num_layers(), {r_a, r_s});
  return MakeProjections(seed, spec, widths);
}

ProjectionPair MakeProjections(std::uint64_t seed, const ModelSpec& spec,
                               std::span<const std::pair<std::size_t, std::size_t>> widths) {
  spec.Validate();
  Require(widths.size() == spec.num_layers(), ErrorKind::kInvalidArgument,
          "need sketch widths for each of the " + std::to_string(spec.num_layers()) +
              " layers");
  std::vector<LayerSketch> layers;
  bool all_identity = true;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    layers.push_back(MakeLayerSketch(spec.activation_dim(l), spec.layers[l].fan_out,
                                     widths[l].first, widths[l].second, DeriveSeed(seed, l)));
    all_identity = all_identity && layers.back().identity_a() && layers.back().identity_s();
  }
  return ProjectionPair(seed, all_identity, std::move(layers));
}

ProjectionPair MakeIdentityProjections(const ModelSpec& spec) {
  spec.Validate();
  std::vector<LayerSketch> layers;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    LayerSketch s;
    s.d_in = s.r_a = spec.activation_dim(l);
    s.d_out = s.r_s = spec.layers[l].fan_out;
    layers.push_back(std::move(s));
  }
  return ProjectionPair(0, true, std::move(layers));
}

Eigen::VectorXd ProjectRecord(const Eigen::Ref<const Eigen::VectorXd>& a,
                              const Eigen::Ref<const Eigen::VectorXd>& ds,
                              const ProjectionPair& pair, std::size_t layer) {
  Require(layer < pair.num_layers(), ErrorKind::kInvalidArgument,
          "layer out of range for projection");
  return pair.layer(layer).Project(a, ds);
}

std::vector<RowMatrix> ProjectCapture(const ProjectionPair& pair,
                                      const BackpropCapture& capture) {
  Require(pair.num_layers() == capture.num_layers(), ErrorKind::kInvalidArgument,
          "projection layer count does not match capture");
  std::vector<RowMatrix> out;
  out.reserve(pair.num_layers());
  for (std::size_t l = 0; l < pair.num_layers(); ++l) {
    out.push_back(pair.layer(l).ProjectBatch(capture.activations[l],
                                             capture.output_grads[l]));
  }
  return out;
}

DotPreservationReport DotPreservation(std::span<const FactoredGradient> grads,
                                      std::size_t r_a, std::size_t r_s,
                                      std::uint64_t seed, std::size_t trials) {
  Require(grads.size() >= 2, ErrorKind::kInvalidArgument,
          "need at least one gradient pair");
  const std::size_t d_in = static_cast<std::size_t>(grads.front().a.size());
  const std::size_t d_out = static_cast<std::size_t>(grads.front().ds.size());
  std::vector<double> errors;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const LayerSketch sketch = MakeLayerSketch(d_in, d_out, r_a, r_s, DeriveSeed(seed, trial));
    for (std::size_t k = 0; k + 1 < grads.size(); k += 2) {
      const FactoredGradient& g1 = grads[k];
      const FactoredGradient& g2 = grads[k + 1];
      // <outer(ds1, a1), outer(ds2, a2)> = <a1, a2> <ds1, ds2>.
      const double exact = g1.a.dot(g2.a) * g1.ds.dot(g2.ds);
      const double norms = g1.a.norm() * g1.ds.norm() * g2.a.norm() * g2.ds.norm();
      const double sketched = sketch.Project(g1.a, g1.ds).dot(sketch.Project(g2.a, g2.ds));
      errors.push_back(norms > 0.0 ? std::abs(sketched - exact) / norms : 0.0);
    }
  }
  DotPreservationReport report;
  report.samples = errors.size();
  double sum = 0.0;
  for (double e : errors) {
    sum += e;
    report.max_relative_error = std::max(report.max_relative_error, e);
  }
  report.mean_relative_error = sum / static_cast<double>(errors.size());
  double var = 0.0;
  for (double e : errors) {
    var += (e - report.mean_relative_error) * (e - report.mean_relative_error);
  }
  report.stddev_relative_error =
      errors.size() > 1 ? std::sqrt(var / static_cast<double>(errors.size() - 1)) : 0.0;
  return report;
}

}  // namespace dvemb
