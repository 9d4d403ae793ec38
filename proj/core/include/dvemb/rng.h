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

#ifndef DVEMB_RNG_H_
#define DVEMB_RNG_H_

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace dvemb {

// Mixes a base seed with a stream index (splitmix64 finalizer). Used to give
// every layer, epoch and trial its own independent generator.
std::uint64_t DeriveSeed(std::uint64_t seed, std::uint64_t stream);

// Seeded generator whose outputs depend only on the seed. All conversions
// from raw 64-bit draws are done here rather than through the
// implementation-defined <random> distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t NextU64() { return engine_(); }
  // Uniform in [0, 1).
  double Uniform();
  // Uniform integer in [0, n).
  std::uint64_t Below(std::uint64_t n);
  double Normal();
  // +1 or -1 with equal probability.
  double Sign() { return (engine_() >> 63) != 0 ? 1.0 : -1.0; }

  // Fisher-Yates permutation of 0..n-1.
  std::vector<std::uint64_t> Permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a over raw bytes; used for fingerprints and digests.
class Fnv1a {
 public:
  Fnv1a& Update(const void* data, std::size_t size);
  Fnv1a& Update(std::string_view text) { return Update(text.data(), text.size()); }
  template <typename T>
  Fnv1a& UpdateValue(const T& value) {
    return Update(&value, sizeof(T));
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace dvemb

#endif  // DVEMB_RNG_H_
