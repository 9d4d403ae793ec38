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

#include "dvemb/dataset.h"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dvemb/binary_io.h"
#include "dvemb/errors.h"
#include "dvemb/rng.h"

namespace dvemb {
namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::string Hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

void PutBigEndianU32(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) {
    out.push_back(static_cast<char>((v >> shift) & 0xff));
  }
}

}  // namespace

int Dataset::num_classes() const {
  int max_label = 0;
  for (int y : labels) max_label = std::max(max_label, y);
  return std::max(2, max_label + 1);
}

void Dataset::Validate() const {
  Require(!labels.empty(), ErrorKind::kInvalidArgument, "dataset is empty");
  Require(static_cast<std::size_t>(inputs.rows()) == labels.size(),
          ErrorKind::kInvalidArgument, "dataset rows do not match labels");
  Require(source_tags.empty() || source_tags.size() == labels.size(),
          ErrorKind::kInvalidArgument, "source tags do not match labels");
  for (int y : labels) {
    Require(y >= 0, ErrorKind::kInvalidArgument, "negative label");
  }
}

std::uint64_t Dataset::Fingerprint() const {
  Fnv1a h;
  h.Update("Dataset/v1");
  h.UpdateValue(static_cast<std::uint64_t>(inputs.rows()));
  h.UpdateValue(static_cast<std::uint64_t>(inputs.cols()));
  h.Update(inputs.data(), sizeof(double) * static_cast<std::size_t>(inputs.size()));
  for (int y : labels) h.UpdateValue(static_cast<std::int64_t>(y));
  for (const std::string& tag : source_tags) {
    h.UpdateValue(static_cast<std::uint64_t>(tag.size()));
    h.Update(tag);
  }
  return h.digest();
}

SampleBatch Dataset::Batch(std::span<const std::uint64_t> ids) const {
  SampleBatch batch;
  batch.inputs.resize(static_cast<Eigen::Index>(ids.size()), inputs.cols());
  batch.labels.reserve(ids.size());
  batch.sample_ids.assign(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Require(ids[i] < size(), ErrorKind::kInvalidArgument,
            "sample id " + std::to_string(ids[i]) + " out of range");
    batch.inputs.row(static_cast<Eigen::Index>(i)) =
        inputs.row(static_cast<Eigen::Index>(ids[i]));
    batch.labels.push_back(labels[ids[i]]);
  }
  return batch;
}

Dataset Dataset::Subset(std::span<const std::uint64_t> ids) const {
  Dataset out;
  SampleBatch batch = Batch(ids);
  out.inputs = std::move(batch.inputs);
  out.labels = std::move(batch.labels);
  if (!source_tags.empty()) {
    for (std::uint64_t id : ids) out.source_tags.push_back(source_tags[id]);
  }
  return out;
}

Dataset LoadIdx(const std::filesystem::path& images,
                const std::filesystem::path& labels, std::size_t limit,
                bool normalize, std::size_t offset) {
  const std::string image_bytes = ReadFileBytes(images);
  const std::string label_bytes = ReadFileBytes(labels);

  const std::uint32_t image_magic = ReadBigEndianU32(image_bytes, 0);
  Require(image_magic == kIdxImagesMagic, ErrorKind::kFormat,
          "bad IDX image magic in " + images.string() + ": expected " +
              Hex(kIdxImagesMagic) + ", got " + Hex(image_magic));
  const std::uint32_t label_magic = ReadBigEndianU32(label_bytes, 0);
  Require(label_magic == kIdxLabelsMagic, ErrorKind::kFormat,
          "bad IDX label magic in " + labels.string() + ": expected " +
              Hex(kIdxLabelsMagic) + ", got " + Hex(label_magic));

  const std::size_t image_count = ReadBigEndianU32(image_bytes, 4);
  const std::size_t rows = ReadBigEndianU32(image_bytes, 8);
  const std::size_t cols = ReadBigEndianU32(image_bytes, 12);
  const std::size_t label_count = ReadBigEndianU32(label_bytes, 4);
  Require(image_count == label_count, ErrorKind::kFormat,
          "IDX count mismatch: " + std::to_string(image_count) + " images vs " +
              std::to_string(label_count) + " labels");
  const std::size_t pixels = rows * cols;
  Require(image_bytes.size() >= 16 + image_count * pixels, ErrorKind::kFormat,
          "truncated IDX image file " + images.string());
  Require(label_bytes.size() >= 8 + label_count, ErrorKind::kFormat,
          "truncated IDX label file " + labels.string());
  Require(offset <= image_count, ErrorKind::kInvalidArgument,
          "IDX offset beyond item count");

  std::size_t n = image_count - offset;
  if (limit > 0) n = std::min(n, limit);
  Dataset out;
  out.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(pixels));
  out.labels.resize(n);
  const double scale = normalize ? 1.0 / 255.0 : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t item = offset + i;
    const std::size_t base = 16 + item * pixels;
    for (std::size_t p = 0; p < pixels; ++p) {
      out.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) =
          static_cast<double>(static_cast<std::uint8_t>(image_bytes[base + p])) * scale;
    }
    out.labels[i] = static_cast<std::uint8_t>(label_bytes[8 + item]);
  }
  return out;
}

void WriteIdx(const std::filesystem::path& images,
              const std::filesystem::path& labels, const RowMatrix& pixels,
              std::span<const int> label_values, std::size_t rows,
              std::size_t cols) {
  Require(static_cast<std::size_t>(pixels.cols()) == rows * cols,
          ErrorKind::kInvalidArgument, "pixel row width != rows * cols");
  Require(static_cast<std::size_t>(pixels.rows()) == label_values.size(),
          ErrorKind::kInvalidArgument, "image and label counts differ");
  std::string image_bytes;
  PutBigEndianU32(image_bytes, kIdxImagesMagic);
  PutBigEndianU32(image_bytes, static_cast<std::uint32_t>(pixels.rows()));
  PutBigEndianU32(image_bytes, static_cast<std::uint32_t>(rows));
  PutBigEndianU32(image_bytes, static_cast<std::uint32_t>(cols));
  for (Eigen::Index i = 0; i < pixels.rows(); ++i) {
    for (Eigen::Index p = 0; p < pixels.cols(); ++p) {
      const double v = pixels(i, p);
      Require(v >= 0.0 && v <= 255.0, ErrorKind::kInvalidArgument,
              "pixel value out of [0, 255]");
      image_bytes.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(v))));
    }
  }
  std::string label_bytes;
  PutBigEndianU32(label_bytes, kIdxLabelsMagic);
  PutBigEndianU32(label_bytes, static_cast<std::uint32_t>(label_values.size()));
  for (int y : label_values) {
    Require(y >= 0 && y <= 255, ErrorKind::kInvalidArgument, "label out of byte range");
    label_bytes.push_back(static_cast<char>(static_cast<std::uint8_t>(y)));
  }
  WriteFileBytes(images, image_bytes);
  WriteFileBytes(labels, label_bytes);
}

Dataset SynthDataset(const SynthOptions& options) {
  Require(options.classes >= 2, ErrorKind::kInvalidArgument,
          "synthetic dataset needs at least two classes");
  Require(options.n >= 1 && options.dim >= 1, ErrorKind::kInvalidArgument,
          "synthetic dataset needs n >= 1 and dim >= 1");
  Require(options.label_noise >= 0.0 && options.label_noise <= 1.0,
          ErrorKind::kInvalidArgument, "label noise must lie in [0, 1]");
  const auto d = static_cast<Eigen::Index>(options.dim);

  // Samples are drawn in a k-dimensional feature space (k = latent_dim, or
  // dim when latent_dim is 0) and, for latent data, mapped to dim through a
  // fixed Gaussian basis.
  const auto k = static_cast<Eigen::Index>(options.latent_dim > 0 ? options.latent_dim
                                                                   : options.dim);
  Rng cluster_rng(DeriveSeed(options.cluster_seed, 0x636c7573ULL));
  RowMatrix means(options.classes, k);
  for (int c = 0; c < options.classes; ++c) {
    for (Eigen::Index j = 0; j < k; ++j) means(c, j) = cluster_rng.Normal();
    means.row(c) *= options.separation / means.row(c).norm();
  }
  RowMatrix basis;
  if (options.latent_dim > 0) {
    basis.resize(k, d);
    for (Eigen::Index r = 0; r < k; ++r) {
      for (Eigen::Index j = 0; j < d; ++j) basis(r, j) = cluster_rng.Normal();
    }
    basis /= std::sqrt(static_cast<double>(k));
  }

  Rng rng(DeriveSeed(options.seed, 0x73616d70ULL));
  Dataset out;
  out.inputs.resize(static_cast<Eigen::Index>(options.n), d);
  out.labels.resize(options.n);
  Eigen::RowVectorXd u(k);
  for (std::size_t i = 0; i < options.n; ++i) {
    const int y = static_cast<int>(rng.Below(static_cast<std::uint64_t>(options.classes)));
    out.labels[i] = y;
    for (Eigen::Index j = 0; j < k; ++j) u(j) = means(y, j) + options.noise_std * rng.Normal();
    const auto row = static_cast<Eigen::Index>(i);
    if (options.latent_dim > 0) {
      out.inputs.row(row) = u * basis;
    } else {
      out.inputs.row(row) = u;
    }
  }

  out.source_tags.assign(options.n, kCleanTag);
  const auto flips = static_cast<std::size_t>(
      std::llround(options.label_noise * static_cast<double>(options.n)));
  Rng flip_rng(DeriveSeed(options.seed, 0x666c6970ULL));
  std::vector<std::uint64_t> order = flip_rng.Permutation(options.n);
  for (std::size_t k = 0; k < flips; ++k) {
    const std::uint64_t i = order[k];
    const auto shift = 1 + flip_rng.Below(static_cast<std::uint64_t>(options.classes - 1));
    out.labels[i] = static_cast<int>((static_cast<std::uint64_t>(out.labels[i]) + shift) %
                                     static_cast<std::uint64_t>(options.classes));
    out.source_tags[i] = kFlippedTag;
  }
  return out;
}

std::vector<bool> FlippedFlags(const Dataset& dataset) {
  std::vector<bool> flags(dataset.size(), false);
  for (std::size_t i = 0; i < dataset.source_tags.size(); ++i) {
    flags[i] = dataset.source_tags[i] == kFlippedTag;
  }
  return flags;
}

}  // namespace dvemb
