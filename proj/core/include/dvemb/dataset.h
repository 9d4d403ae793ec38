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

#ifndef DVEMB_DATASET_H_
#define DVEMB_DATASET_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dvemb/model.h"

namespace dvemb {

inline constexpr char kFlippedTag[] = "flipped";
inline constexpr char kCleanTag[] = "clean";

struct Dataset {
  RowMatrix inputs;  // N x d
  std::vector<int> labels;
  // Optional group label per sample (empty, or one entry per sample).
  std::vector<std::string> source_tags;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(inputs.cols()); }
  int num_classes() const;

  void Validate() const;
  // Content hash over inputs, labels and tags.
  std::uint64_t Fingerprint() const;
  SampleBatch Batch(std::span<const std::uint64_t> ids) const;
  Dataset Subset(std::span<const std::uint64_t> ids) const;
};

// Reads an IDX image/label pair (big-endian headers, magic 0x00000803 and
// 0x00000801). Items [offset, offset + limit) are returned; limit 0 means
// all remaining items.
Dataset LoadIdx(const std::filesystem::path& images,
                const std::filesystem::path& labels, std::size_t limit,
                bool normalize, std::size_t offset = 0);

// Writes an IDX pair; pixel values must lie in [0, 255].
void WriteIdx(const std::filesystem::path& images,
              const std::filesystem::path& labels, const RowMatrix& pixels,
              std::span<const int> label_values, std::size_t rows,
              std::size_t cols);

struct SynthOptions {
  std::uint64_t seed = 0;
  std::size_t n = 1000;
  std::size_t dim = 20;
  int classes = 2;
  double label_noise = 0.0;
  // Seed for the class means; samples drawn with different `seed` but the
  // same cluster_seed come from the same distribution.
  std::uint64_t cluster_seed = 0;
  // Class means are i.i.d. Gaussian directions scaled to this norm.
  double separation = 1.0;
  double noise_std = 1.0;
  // 0: samples live in dim. Otherwise class means and noise are drawn in
  // latent_dim dimensions and mapped to dim by a fixed Gaussian basis (drawn
  // from cluster_seed) that preserves per-coordinate variance on average.
  std::size_t latent_dim = 0;
};

// Gaussian class clusters. Exactly round(label_noise * n) labels are flipped
// to a uniformly chosen wrong class; flipped samples carry kFlippedTag and
// the rest kCleanTag.
Dataset SynthDataset(const SynthOptions& options);

// Indices of samples tagged kFlippedTag, as flags.
std::vector<bool> FlippedFlags(const Dataset& dataset);

}  // namespace dvemb

#endif  // DVEMB_DATASET_H_
