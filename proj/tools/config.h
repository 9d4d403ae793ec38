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


#ifndef DVEMB_TOOLS_CONFIG_H_
#define DVEMB_TOOLS_CONFIG_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dvemb/dataset.h"
#include "dvemb/manifest.h"
#include "dvemb/projection.h"

namespace dvemb::cli {

struct IdxSource {
  std::filesystem::path images;
  std::filesystem::path labels;
  std::size_t offset = 0;
  std::size_t limit = 0;
};

struct DatasetConfig {
  bool synthetic = true;
  SynthOptions train;
  // Validation draws share everything with `train` except seed and n, and
  // are never label-flipped.
  std::uint64_t validation_seed = 1;
  std::size_t validation_n = 100;
  IdxSource train_idx;
  IdxSource validation_idx;
  bool normalize = true;
};

struct ProjectionConfig {
  bool identity = false;
  std::uint64_t seed = 0;
  std::size_t r_a = 32;
  std::size_t r_s = 32;
  // Per-layer (r_a, r_s); overrides r_a/r_s when non-empty.
  std::vector<std::pair<std::size_t, std::size_t>> layers;
};

struct ProbeConfig {
  std::size_t count = 50;
  std::uint64_t seed = 0;
  std::vector<std::string> modes = {"single_iteration", "all_epochs"};
  // First validation_count validation samples are scored (summed).
  std::size_t validation_count = 10;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::vector<std::size_t> widths;
  std::string activation = "relu";
  bool bias = true;
  std::string loss = "cross_entropy";
  ScheduleParams schedule;
  // "mean": eta_max is quoted for the batch-mean loss and divided by the
  // batch size, since the trainer steps on the summed loss.
  std::string lr_reduction = "sum";
  std::size_t batch_size = 16;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;
  std::uint64_t init_seed = 0;
  std::uint64_t shuffle_seed = 0;
  ProjectionConfig projection;
  std::size_t checkpoints = 1;
  ProbeConfig probes;
  double damping = 1e-3;
  std::filesystem::path output_dir = "dvemb-out";
  // Canonical JSON of the parsed config, for hashing.
  std::string canonical;

  ModelSpec Spec() const;
  PlanOptions Plan() const;
  ProjectionPair Projections() const;
};

// Strict: unknown keys, wrong types and out-of-range values raise kConfig.
// Relative dataset paths resolve against `base_dir`.
ExperimentConfig ParseConfig(const std::string& text,
                             const std::filesystem::path& base_dir = {});
ExperimentConfig LoadConfig(const std::filesystem::path& path);

// Output directory after the DVE_OUT override.
std::filesystem::path OutputDir(const ExperimentConfig& config);

struct Datasets {
  Dataset train;
  Dataset validation;
};
Datasets BuildDatasets(const ExperimentConfig& config);

}  // namespace dvemb::cli

#endif  // DVEMB_TOOLS_CONFIG_H_
