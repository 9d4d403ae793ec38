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

#include "dvemb/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "dvemb/errors.h"

namespace dvemb {

std::filesystem::path CheckpointPath(const std::filesystem::path& dir,
                                     std::uint64_t step) {
  char name[64];
  std::snprintf(name, sizeof(name), "step_%08llu.ckpt",
                static_cast<unsigned long long>(step));
  return dir / name;
}

TrainResult Train(const RunManifest& manifest, const Dataset& dataset,
                  const TrainOptions& options) {
  manifest.Validate(dataset);
  const LearningRateSchedule rates = manifest.Rates();
  const std::size_t t_total = manifest.total_steps();

  TrainResult result;
  ModelParams params = options.start != nullptr ? *options.start
                                                : InitModel(manifest.spec, manifest.init_seed);
  Require(params.step_index <= t_total, ErrorKind::kInvalidArgument,
          "start step beyond T");

  std::set<std::pair<std::uint64_t, std::uint64_t>> removed;
  for (const Removal& r : manifest.removals) removed.insert({r.step, r.sample_id});
  const std::set<std::uint64_t> checkpoint_steps(manifest.checkpoint_steps.begin(),
                                                 manifest.checkpoint_steps.end());

  auto maybe_checkpoint = [&](const ModelParams& p) {
    if (!checkpoint_steps.contains(p.step_index)) return;
    if (options.keep_checkpoints) result.checkpoints[p.step_index] = p;
    if (options.checkpoint_dir) {
      SaveCheckpoint(CheckpointPath(*options.checkpoint_dir, p.step_index),
                     manifest.spec, p);
    }
  };

  maybe_checkpoint(params);
  std::vector<std::uint64_t> ids;
  for (std::uint64_t t = params.step_index; t < t_total; ++t) {
    const auto& batch_ids = manifest.batches[t];
    ids.clear();
    for (std::uint64_t id : batch_ids) {
      if (!removed.contains({t, id})) ids.push_back(id);
    }
    const double eta = rates.at(t);
    if (!ids.empty()) {
      params.step_index = t;
      const SampleBatch batch = dataset.Batch(ids);
      const BackpropCapture capture = ForwardBackward(manifest.spec, params, batch);
      result.step_losses.push_back(capture.mean_loss);
      if (options.sink != nullptr) {
        options.sink->Consume({t, eta, ids, &capture});
      }
      for (std::size_t l = 0; l < params.weights.size(); ++l) {
        params.weights[l].noalias() -=
            eta * (capture.activations[l].transpose() * capture.output_grads[l]);
        if (!params.weights[l].allFinite()) {
          throw DivergenceError(t, "non-finite parameters after update");
        }
      }
    }
    params.step_index = t + 1;
    maybe_checkpoint(params);
  }
  if (options.sink != nullptr) options.sink->Finish();
  result.final_params = std::move(params);
  return result;
}

TrainResult TrainCounterfactual(
    const RunManifest& manifest, const Dataset& dataset,
    const std::map<std::uint64_t, ModelParams>* baseline_checkpoints) {
  Require(!manifest.removals.empty(), ErrorKind::kInvalidArgument,
          "counterfactual run needs at least one removal");
  manifest.Validate(dataset);
  std::uint64_t first_removal = manifest.removals.front().step;
  for (const Removal& r : manifest.removals) first_removal = std::min(first_removal, r.step);

  TrainOptions options;
  options.keep_checkpoints = false;
  const ModelParams* start = nullptr;
  if (baseline_checkpoints != nullptr) {
    // Latest baseline checkpoint not after the first removal.
    auto it = baseline_checkpoints->upper_bound(first_removal);
    if (it != baseline_checkpoints->begin()) {
      --it;
      start = &it->second;
    }
  }
  options.start = start;
  return Train(manifest, dataset, options);
}

}  // namespace dvemb
