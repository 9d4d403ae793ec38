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

#include "dvemb/manifest.h"

#include <algorithm>
#include <charconv>
#include <set>

#include "json.hpp"

#include "dvemb/binary_io.h"
#include "dvemb/errors.h"
#include "dvemb/rng.h"

namespace dvemb {
namespace {

using nlohmann::json;

constexpr char kManifestFormat[] = "dvemb-manifest/1";

// Run-length text form of an id list: "4-7,1,9" for {4,5,6,7,1,9}.
std::string EncodeRuns(const std::vector<std::uint64_t>& ids) {
  std::string out;
  std::size_t i = 0;
  while (i < ids.size()) {
    std::size_t j = i;
    while (j + 1 < ids.size() && ids[j + 1] == ids[j] + 1) ++j;
    if (!out.empty()) out.push_back(',');
    out += std::to_string(ids[i]);
    if (j > i) out += "-" + std::to_string(ids[j]);
    i = j + 1;
  }
  return out;
}

std::uint64_t ParseU64(std::string_view text) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  Require(ec == std::errc() && ptr == text.data() + text.size(), ErrorKind::kFormat,
          "bad integer '" + std::string(text) + "' in batch list");
  return v;
}

std::vector<std::uint64_t> DecodeRuns(std::string_view text) {
  std::vector<std::uint64_t> ids;
  while (!text.empty()) {
    const std::size_t comma = text.find(',');
    std::string_view run = text.substr(0, comma);
    const std::size_t dash = run.find('-');
    if (dash == std::string_view::npos) {
      ids.push_back(ParseU64(run));
    } else {
      const std::uint64_t first = ParseU64(run.substr(0, dash));
      const std::uint64_t last = ParseU64(run.substr(dash + 1));
      Require(last >= first, ErrorKind::kFormat, "descending run in batch list");
      for (std::uint64_t v = first; v <= last; ++v) ids.push_back(v);
    }
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return ids;
}

json SpecToJson(const ModelSpec& spec) {
  json layers = json::array();
  for (const LayerDims& d : spec.layers) layers.push_back({d.fan_in, d.fan_out});
  return {{"layers", layers},
          {"activation", ActivationName(spec.activation)},
          {"bias", spec.bias},
          {"loss", LossName(spec.loss)}};
}

ModelSpec SpecFromJson(const json& j) {
  ModelSpec spec;
  for (const json& layer : j.at("layers")) {
    spec.layers.push_back({layer.at(0).get<std::size_t>(), layer.at(1).get<std::size_t>()});
  }
  spec.activation = ParseActivation(j.at("activation").get<std::string>());
  spec.bias = j.at("bias").get<bool>();
  spec.loss = ParseLoss(j.at("loss").get<std::string>());
  return spec;
}

}  // namespace

std::size_t RunManifest::steps_per_epoch() const {
  return batch_size == 0 ? 0 : dataset_size / batch_size;
}

LearningRateSchedule RunManifest::Rates() const {
  return MakeSchedule(schedule, total_steps());
}

void RunManifest::Validate() const {
  spec.Validate();
  Require(batch_size >= 1, ErrorKind::kInvalidArgument, "batch size must be >= 1");
  const std::size_t t_total = total_steps();
  for (std::size_t i = 0; i < checkpoint_steps.size(); ++i) {
    Require(checkpoint_steps[i] <= t_total, ErrorKind::kInvalidArgument,
            "checkpoint step " + std::to_string(checkpoint_steps[i]) +
                " beyond T " + std::to_string(t_total));
    Require(i == 0 || checkpoint_steps[i] > checkpoint_steps[i - 1],
            ErrorKind::kInvalidArgument, "checkpoint steps must be strictly increasing");
  }
  std::set<std::pair<std::uint64_t, std::uint64_t>> removed;
  for (const Removal& r : removals) {
    Require(r.step < t_total, ErrorKind::kInvalidArgument,
            "removal step " + std::to_string(r.step) + " beyond T");
    const auto& batch = batches[r.step];
    Require(std::find(batch.begin(), batch.end(), r.sample_id) != batch.end(),
            ErrorKind::kInvalidArgument,
            "sample " + std::to_string(r.sample_id) + " is not in batch " +
                std::to_string(r.step));
    Require(removed.insert({r.step, r.sample_id}).second,
            ErrorKind::kInvalidArgument, "duplicate removal");
  }
  for (std::size_t t = 0; t < t_total; ++t) {
    Require(batches[t].size() == batch_size, ErrorKind::kInvalidArgument,
            "batch " + std::to_string(t) + " has " +
                std::to_string(batches[t].size()) + " samples, expected " +
                std::to_string(batch_size));
    std::set<std::uint64_t> seen(batches[t].begin(), batches[t].end());
    Require(seen.size() == batches[t].size(), ErrorKind::kInvalidArgument,
            "duplicate sample id in batch " + std::to_string(t));
  }
  (void)Rates();
}

void RunManifest::Validate(const Dataset& dataset) const {
  Validate();
  Require(dataset.Fingerprint() == dataset_fingerprint, ErrorKind::kInvalidArgument,
          "dataset fingerprint does not match manifest");
  for (const auto& batch : batches) {
    for (std::uint64_t id : batch) {
      Require(id < dataset.size(), ErrorKind::kInvalidArgument,
              "sample id " + std::to_string(id) + " not in dataset");
    }
  }
}

RunManifest RunManifest::WithRemovals(std::vector<Removal> new_removals) const {
  RunManifest out = *this;
  out.removals = std::move(new_removals);
  std::sort(out.removals.begin(), out.removals.end(),
            [](const Removal& a, const Removal& b) {
              return a.step != b.step ? a.step < b.step : a.sample_id < b.sample_id;
            });
  out.Validate();
  return out;
}

std::vector<std::uint64_t> RunManifest::Occurrences(std::uint64_t sample_id) const {
  std::vector<std::uint64_t> steps;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    if (std::find(batches[t].begin(), batches[t].end(), sample_id) != batches[t].end()) {
      steps.push_back(t);
    }
  }
  return steps;
}

std::string RunManifest::ToJson() const {
  json batch_list = json::array();
  for (const auto& batch : batches) batch_list.push_back(EncodeRuns(batch));
  json removal_list = json::array();
  for (const Removal& r : removals) removal_list.push_back({r.step, r.sample_id});
  json j = {
      {"format", kManifestFormat},
      {"dataset", {{"fingerprint", dataset_fingerprint}, {"size", dataset_size}}},
      {"model", SpecToJson(spec)},
      {"init_seed", init_seed},
      {"shuffle_seed", shuffle_seed},
      {"batch_size", batch_size},
      {"epochs", epochs},
      {"schedule",
       {{"kind", ScheduleKindName(schedule.kind)},
        {"eta_max", schedule.eta_max},
        {"warmup_steps", schedule.warmup_steps},
        {"c", schedule.c}}},
      {"total_steps", total_steps()},
      {"checkpoint_steps", checkpoint_steps},
      {"removals", removal_list},
      {"batches", batch_list},
  };
  return j.dump(2) + "\n";
}

RunManifest RunManifest::FromJson(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    Fail(ErrorKind::kFormat, std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    Require(j.at("format").get<std::string>() == kManifestFormat, ErrorKind::kFormat,
            "unsupported manifest format");
    RunManifest m;
    m.dataset_fingerprint = j.at("dataset").at("fingerprint").get<std::uint64_t>();
    m.dataset_size = j.at("dataset").at("size").get<std::size_t>();
    m.spec = SpecFromJson(j.at("model"));
    m.init_seed = j.at("init_seed").get<std::uint64_t>();
    m.shuffle_seed = j.at("shuffle_seed").get<std::uint64_t>();
    m.batch_size = j.at("batch_size").get<std::size_t>();
    m.epochs = j.at("epochs").get<std::size_t>();
    const json& s = j.at("schedule");
    m.schedule.kind = ParseScheduleKind(s.at("kind").get<std::string>());
    m.schedule.eta_max = s.at("eta_max").get<double>();
    m.schedule.warmup_steps = s.at("warmup_steps").get<std::size_t>();
    m.schedule.c = s.at("c").get<double>();
    for (const json& b : j.at("batches")) {
      m.batches.push_back(DecodeRuns(b.get<std::string>()));
    }
    Require(m.batches.size() == j.at("total_steps").get<std::size_t>(),
            ErrorKind::kFormat, "total_steps does not match batch list");
    m.checkpoint_steps = j.at("checkpoint_steps").get<std::vector<std::uint64_t>>();
    for (const json& r : j.at("removals")) {
      m.removals.push_back({r.at(0).get<std::uint64_t>(), r.at(1).get<std::uint64_t>()});
    }
    // Counterfactual manifests record the full batches; the removal list says
    // what to drop.
    m.Validate();
    return m;
  } catch (const json::exception& e) {
    Fail(ErrorKind::kFormat, std::string("malformed manifest: ") + e.what());
  }
}

std::uint64_t RunManifest::ContentHash() const {
  Fnv1a h;
  h.Update(ToJson());
  return h.digest();
}

std::vector<std::uint64_t> EvenCheckpoints(std::size_t total_steps,
                                           std::size_t count) {
  Require(count >= 1, ErrorKind::kInvalidArgument, "need at least one checkpoint");
  std::vector<std::uint64_t> steps;
  for (std::size_t k = 1; k <= count; ++k) {
    const std::uint64_t t = (static_cast<std::uint64_t>(total_steps) * k) / count;
    if (t > 0 && (steps.empty() || t > steps.back())) steps.push_back(t);
  }
  if (steps.empty()) steps.push_back(total_steps);
  return steps;
}

RunManifest PlanRun(const Dataset& dataset, const PlanOptions& options) {
  options.spec.Validate();
  dataset.Validate();
  Require(options.batch_size >= 1, ErrorKind::kInvalidArgument, "batch size must be >= 1");
  Require(dataset.size() >= options.batch_size, ErrorKind::kInvalidArgument,
          "dataset has " + std::to_string(dataset.size()) +
              " samples, fewer than batch size " + std::to_string(options.batch_size));
  Require(dataset.dim() == options.spec.input_dim(), ErrorKind::kInvalidArgument,
          "dataset dim " + std::to_string(dataset.dim()) +
              " does not match model input " + std::to_string(options.spec.input_dim()));

  RunManifest m;
  m.dataset_fingerprint = dataset.Fingerprint();
  m.dataset_size = dataset.size();
  m.spec = options.spec;
  m.init_seed = options.init_seed;
  m.shuffle_seed = options.shuffle_seed;
  m.batch_size = options.batch_size;
  m.epochs = options.epochs;
  m.schedule = options.schedule;

  const std::size_t per_epoch = dataset.size() / options.batch_size;
  for (std::size_t e = 0; e < options.epochs; ++e) {
    Rng rng(DeriveSeed(options.shuffle_seed, e));
    const std::vector<std::uint64_t> perm = rng.Permutation(dataset.size());
    for (std::size_t b = 0; b < per_epoch; ++b) {
      if (options.max_steps > 0 && m.batches.size() >= options.max_steps) break;
      m.batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(b * options.batch_size),
                             perm.begin() + static_cast<std::ptrdiff_t>((b + 1) * options.batch_size));
    }
  }
  m.checkpoint_steps = EvenCheckpoints(m.total_steps(), options.checkpoint_count);
  m.Validate(dataset);
  return m;
}

void SaveManifest(const std::filesystem::path& path, const RunManifest& manifest) {
  WriteFileBytes(path, manifest.ToJson());
}

RunManifest LoadManifest(const std::filesystem::path& path) {
  return RunManifest::FromJson(ReadFileBytes(path));
}

}  // namespace dvemb
