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

#ifndef DVEMB_TRAINER_H_
#define DVEMB_TRAINER_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "dvemb/dataset.h"
#include "dvemb/manifest.h"
#include "dvemb/model.h"

namespace dvemb {

// Everything a sink needs about one optimizer step. The capture is only valid
// for the duration of the Consume call.
struct StepGradients {
  std::uint64_t step = 0;
  double eta = 0.0;
  std::span<const std::uint64_t> sample_ids;
  const BackpropCapture* capture = nullptr;
};

// Receives per-sample gradient factors from the trainer, one call per step in
// increasing step order. Finish() must leave every consumed step persisted.
class GradientSink {
 public:
  virtual ~GradientSink() = default;
  virtual void Consume(const StepGradients& step) = 0;
  virtual void Finish() {}
};

struct TrainOptions {
  GradientSink* sink = nullptr;
  // When set, checkpoint files step_<t>.ckpt are written here.
  std::optional<std::filesystem::path> checkpoint_dir;
  // Resume from these parameters at params.step_index instead of
  // initializing at step 0.
  const ModelParams* start = nullptr;
  // Keep parameters for every manifest checkpoint step in memory.
  bool keep_checkpoints = true;
};

struct TrainResult {
  ModelParams final_params;
  std::map<std::uint64_t, ModelParams> checkpoints;
  std::vector<double> step_losses;  // mean batch loss at each executed step
};

// Replays the manifest exactly: theta_{t+1} = theta_t - eta_t * sum over B_t
// of per-sample gradients, with the manifest's removals dropped.
TrainResult Train(const RunManifest& manifest, const Dataset& dataset,
                  const TrainOptions& options = {});

// Leave-one-out replay; the manifest must carry at least one removal. When a
// baseline checkpoint at or before the first removal is supplied the replay
// starts there, since the prefix is identical.
TrainResult TrainCounterfactual(const RunManifest& manifest, const Dataset& dataset,
                                const std::map<std::uint64_t, ModelParams>* baseline_checkpoints = nullptr);

std::filesystem::path CheckpointPath(const std::filesystem::path& dir,
                                     std::uint64_t step);

}  // namespace dvemb

#endif  // DVEMB_TRAINER_H_
