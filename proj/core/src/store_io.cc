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

#include "dvemb/store_io.h"

#include <cmath>
#include <vector>

#include "dvemb/binary_io.h"
#include "dvemb/errors.h"

namespace dvemb {
namespace {

constexpr char kStoreMagic[4] = {'D', 'V', 'E', 'S'};
constexpr char kKernelMagic[4] = {'D', 'V', 'E', 'K'};
constexpr std::uint32_t kStoreVersion = 1;
constexpr std::uint32_t kKernelVersion = 1;

// Splits off and checks the trailing CRC; returns the covered body.
std::string_view CheckedBody(std::string_view bytes, const char* what) {
  Require(bytes.size() >= 8, ErrorKind::kFormat, std::string(what) + " file is truncated");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  Require(Crc32(body) == ByteReader(bytes.substr(bytes.size() - 4)).GetU32(),
          ErrorKind::kFormat, std::string(what) + " checksum failure");
  return body;
}

void ExpectMagic(ByteReader& in, const char (&magic)[4], std::uint32_t version,
                 const char* what) {
  Require(in.GetBytes(4) == std::string_view(magic, 4), ErrorKind::kFormat,
          std::string("not a ") + what + " file");
  const std::uint32_t found = in.GetU32();
  Require(found == version, ErrorKind::kFormat,
          std::string("unsupported ") + what + " version " + std::to_string(found));
}

}  // namespace

std::string SerializeEmbeddingStore(const EmbeddingStore& store) {
  ByteWriter out;
  out.PutBytes(std::string_view(kStoreMagic, 4));
  out.PutU32(kStoreVersion);
  EncodeLogHeader(store.header(), out);
  out.PutU64(store.begin_step());
  out.PutU64(store.end_step());
  out.PutU64(store.target_step());
  out.PutU64(store.size());
  std::vector<std::uint64_t> offsets;
  offsets.reserve(store.size());
  for (const auto& [key, e] : store.entries()) {
    offsets.push_back(out.size());
    out.PutU64(key.first);
    out.PutU64(key.second);
    for (const Eigen::VectorXd& v : e.layers) {
      for (Eigen::Index i = 0; i < v.size(); ++i) out.PutF32(static_cast<float>(v(i)));
    }
  }
  for (std::uint64_t offset : offsets) out.PutU64(offset);
  out.PutU32(Crc32(out.bytes()));
  return out.bytes();
}

EmbeddingStore ParseEmbeddingStore(std::string_view bytes) {
  ByteReader in(CheckedBody(bytes, "embedding store"));
  ExpectMagic(in, kStoreMagic, kStoreVersion, "embedding store");
  LogHeader header = DecodeLogHeader(in);
  const std::uint64_t begin = in.GetU64();
  const std::uint64_t end = in.GetU64();
  const std::uint64_t target = in.GetU64();
  const std::uint64_t count = in.GetU64();
  EmbeddingStore store(header, begin, end, target);
  for (std::uint64_t n = 0; n < count; ++n) {
    ValueEmbedding e;
    e.step = in.GetU64();
    e.sample_id = in.GetU64();
    e.target_step = target;
    for (std::size_t l = 0; l < header.num_layers(); ++l) {
      Eigen::VectorXd v(static_cast<Eigen::Index>(header.projected_dim(l)));
      for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = in.GetF32();
      e.layers.push_back(std::move(v));
    }
    store.Add(std::move(e));
  }
  Require(in.remaining() == count * 8, ErrorKind::kFormat,
          "embedding store index has the wrong length");
  return store;
}

void SaveEmbeddingStore(const std::filesystem::path& path, const EmbeddingStore& store) {
  WriteFileBytes(path, SerializeEmbeddingStore(store));
}

EmbeddingStore LoadEmbeddingStore(const std::filesystem::path& path) {
  try {
    return ParseEmbeddingStore(ReadFileBytes(path));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kMissingArtifact) throw;
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

std::string SerializeKernel(const SegmentKernel& kernel) {
  ByteWriter out;
  out.PutBytes(std::string_view(kKernelMagic, 4));
  out.PutU32(kKernelVersion);
  out.PutU64(kernel.begin);
  out.PutU64(kernel.end);
  out.PutU32(static_cast<std::uint32_t>(kernel.layers.size()));
  for (const Eigen::MatrixXd& k : kernel.layers) {
    Require(k.rows() == k.cols(), ErrorKind::kInvalidArgument, "kernel must be square");
    out.PutU64(static_cast<std::uint64_t>(k.rows()));
    for (Eigen::Index r = 0; r < k.rows(); ++r) {
      for (Eigen::Index c = 0; c < k.cols(); ++c) out.PutF64(k(r, c));
    }
  }
  out.PutU32(Crc32(out.bytes()));
  return out.bytes();
}

SegmentKernel ParseKernel(std::string_view bytes) {
  ByteReader in(CheckedBody(bytes, "kernel"));
  ExpectMagic(in, kKernelMagic, kKernelVersion, "kernel");
  SegmentKernel kernel;
  kernel.begin = in.GetU64();
  kernel.end = in.GetU64();
  const std::uint32_t layers = in.GetU32();
  for (std::uint32_t l = 0; l < layers; ++l) {
    const std::uint64_t p = in.GetU64();
    Require(p * p * 8 <= in.remaining(), ErrorKind::kFormat, "kernel file is truncated");
    Eigen::MatrixXd k(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
    for (Eigen::Index r = 0; r < k.rows(); ++r) {
      for (Eigen::Index c = 0; c < k.cols(); ++c) k(r, c) = in.GetF64();
    }
    kernel.layers.push_back(std::move(k));
  }
  Require(in.remaining() == 0, ErrorKind::kFormat, "trailing bytes in kernel file");
  return kernel;
}

void SaveKernel(const std::filesystem::path& path, const SegmentKernel& kernel) {
  WriteFileBytes(path, SerializeKernel(kernel));
}

SegmentKernel LoadKernel(const std::filesystem::path& path) {
  return ParseKernel(ReadFileBytes(path));
}

}  // namespace dvemb
