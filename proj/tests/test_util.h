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


#ifndef DVEMB_TESTS_TEST_UTIL_H_
#define DVEMB_TESTS_TEST_UTIL_H_

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dvemb/gradlog.h"
#include "dvemb/model.h"
#include "dvemb/rng.h"

namespace dvemb::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("dvemb_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Eigen::VectorXd RandomVector(Rng& rng, Eigen::Index n, double scale = 1.0) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.Normal();
  return v;
}

inline RowMatrix RandomMatrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.Normal();
  }
  return m;
}

// Header for a synthetic log whose layer l has projected width
// widths[l].first * widths[l].second.
inline LogHeader SyntheticHeader(const std::vector<std::pair<std::uint64_t, std::uint64_t>>& widths,
                                 std::uint64_t steps, std::uint64_t batch) {
  LogHeader h;
  h.spec_hash = 0x5eed;
  h.projection_seed = 17;
  h.total_steps = steps;
  h.batch_size = batch;
  for (const auto& [a, s] : widths) h.layers.push_back({a, s});
  return h;
}

// Random trajectory of T steps with B records each; sample ids are drawn
// without replacement within a step from [0, pool). Gradient entries are
// N(0, scale^2 / p) and step sizes are uniform in [eta/2, eta].
inline InMemoryLog RandomLog(std::uint64_t seed, const std::vector<std::pair<std::uint64_t, std::uint64_t>>& widths,
                             std::uint64_t steps, std::size_t batch, double eta = 0.2,
                             double scale = 1.0, std::uint64_t pool = 0) {
  Rng rng(seed);
  InMemoryLog log(SyntheticHeader(widths, steps, batch));
  if (pool == 0) pool = 2 * batch;
  for (std::uint64_t t = 0; t < steps; ++t) {
    StepBlock block;
    block.step = t;
    block.eta = eta * (0.5 + 0.5 * rng.Uniform());
    const auto perm = rng.Permutation(pool);
    for (std::size_t i = 0; i < batch; ++i) {
      GradientRecord rec;
      rec.sample_id = perm[i];
      for (const auto& [a, s] : widths) {
        const auto p = static_cast<Eigen::Index>(a * s);
        rec.layers.push_back(RandomVector(rng, p, scale / std::sqrt(static_cast<double>(p))));
      }
      block.records.push_back(std::move(rec));
    }
    log.AppendStep(std::move(block));
  }
  return log;
}

// Central-difference gradient of one sample's loss with respect to layer l,
// flattened like FlattenOuter (entry o * activation_dim + i is W(i, o)).
inline Eigen::VectorXd FiniteDifferenceLayerGrad(const ModelSpec& spec, const ModelParams& params,
                                                 const Eigen::VectorXd& x, int label,
                                                 std::size_t layer, double eps = 1e-4) {
  const Eigen::MatrixXd& w = params.weights[layer];
  Eigen::VectorXd out(w.size());
  ModelParams p = params;
  RowMatrix input(1, x.size());
  input.row(0) = x.transpose();
  const std::vector<int> labels{label};
  for (Eigen::Index o = 0; o < w.cols(); ++o) {
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      p.weights[layer](i, o) = w(i, o) + eps;
      const double up = SampleLosses(spec, p, input, labels)[0];
      p.weights[layer](i, o) = w(i, o) - eps;
      const double down = SampleLosses(spec, p, input, labels)[0];
      p.weights[layer](i, o) = w(i, o);
      out[o * w.rows() + i] = (up - down) / (2.0 * eps);
    }
  }
  return out;
}

}  // namespace dvemb::testing

#endif  // DVEMB_TESTS_TEST_UTIL_H_
