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

#ifndef DVEMB_MANIFEST_H_
#define DVEMB_MANIFEST_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dvemb/dataset.h"
#include "dvemb/model.h"
#include "dvemb/schedule.h"

namespace dvemb {

// Drop sample_id from the batch at step.
struct Removal {
  std::uint64_t step = 0;
  std::uint64_t sample_id = 0;

  bool operator==(const Removal&) const = default;
};

// Complete, replayable description of one training run.
struct RunManifest {
  std::uint64_t dataset_fingerprint = 0;
  std::size_t dataset_size = 0;
  ModelSpec spec;
  std::uint64_t init_seed = 0;
  std::uint64_t shuffle_seed = 0;
  std::size_t batch_size = 0;
  std::size_t epochs = 0;
  ScheduleParams schedule;
  // Ordered sample ids of B_t for t = 0 .. T-1.
  std::vector<std::vector<std::uint64_t>> batches;
  // Sorted steps in [0, T] at which parameters are checkpointed.
  std::vector<std::uint64_t> checkpoint_steps;
  // Non-empty only for counterfactual runs.
  std::vector<Removal> removals;

  std::size_t total_steps() const { return batches.size(); }
  std::size_t steps_per_epoch() const;
  LearningRateSchedule Rates() const;

  // Throws when the manifest is inconsistent with itself or the dataset.
  void Validate(const Dataset& dataset) const;
  void Validate() const;

  // Counterfactual copy: same trajectory with the given removals.
  RunManifest WithRemovals(std::vector<Removal> removals) const;
  // Steps at which sample_id appears.
  std::vector<std::uint64_t> Occurrences(std::uint64_t sample_id) const;

  std::string ToJson() const;
  static RunManifest FromJson(const std::string& text);
  std::uint64_t ContentHash() const;
};

struct PlanOptions {
  ModelSpec spec;
  std::uint64_t init_seed = 0;
  std::uint64_t shuffle_seed = 0;
  std::size_t batch_size = 1;
  std::size_t epochs = 1;
  // 0 keeps every full batch of every epoch; otherwise truncates to T steps.
  std::size_t max_steps = 0;
  ScheduleParams schedule;
  // Evenly spaced checkpoints t_1 < ... < t_K = T.
  std::size_t checkpoint_count = 1;
};

// Each epoch is an independent seeded permutation chunked into full batches;
// the trailing partial batch of an epoch is dropped.
RunManifest PlanRun(const Dataset& dataset, const PlanOptions& options);

std::vector<std::uint64_t> EvenCheckpoints(std::size_t total_steps,
                                           std::size_t count);

void SaveManifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest LoadManifest(const std::filesystem::path& path);

}  // namespace dvemb

#endif  // DVEMB_MANIFEST_H_
