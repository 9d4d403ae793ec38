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

#include "dvemb/schedule.h"

#include <cmath>
#include <numbers>

#include "dvemb/errors.h"
#include "dvemb/rng.h"

namespace dvemb {

const char* ScheduleKindName(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::kConstant: return "constant";
    case ScheduleKind::kInverseSqrt: return "inverse_sqrt";
    case ScheduleKind::kWarmupCosine: return "warmup_cosine";
  }
  return "constant";
}

ScheduleKind ParseScheduleKind(const std::string& name) {
  if (name == "constant") return ScheduleKind::kConstant;
  if (name == "inverse_sqrt") return ScheduleKind::kInverseSqrt;
  if (name == "warmup_cosine") return ScheduleKind::kWarmupCosine;
  Fail(ErrorKind::kConfig, "unknown schedule kind '" + name + "'");
}

double LearningRateSchedule::eta_max() const {
  if (params_.kind == ScheduleKind::kInverseSqrt && params_.c > 0.0 &&
      !rates_.empty()) {
    return rates_.front();
  }
  return params_.eta_max;
}

std::uint64_t LearningRateSchedule::Digest() const {
  Fnv1a h;
  h.Update("schedule/v1");
  h.UpdateValue(static_cast<std::uint8_t>(params_.kind));
  h.UpdateValue(static_cast<std::uint64_t>(rates_.size()));
  for (double r : rates_) h.UpdateValue(r);
  return h.digest();
}

LearningRateSchedule MakeSchedule(const ScheduleParams& params,
                                  std::size_t total_steps) {
  std::vector<double> rates(total_steps, 0.0);
  const double t_total = static_cast<double>(total_steps);
  switch (params.kind) {
    case ScheduleKind::kConstant: {
      Require(params.eta_max >= 0.0, ErrorKind::kInvalidArgument,
              "eta_max must be non-negative");
      for (double& r : rates) r = params.eta_max;
      break;
    }
    case ScheduleKind::kInverseSqrt: {
      Require(total_steps >= 1, ErrorKind::kInvalidArgument,
              "inverse_sqrt schedule needs T >= 1");
      const double eta_max =
          params.c > 0.0 ? params.c / std::sqrt(t_total) : params.eta_max;
      Require(eta_max > 0.0, ErrorKind::kInvalidArgument,
              "inverse_sqrt needs c > 0 or eta_max > 0");
      for (std::size_t t = 0; t < total_steps; ++t) {
        rates[t] = t == 0 ? eta_max : eta_max / std::sqrt(static_cast<double>(t));
      }
      break;
    }
    case ScheduleKind::kWarmupCosine: {
      Require(params.eta_max > 0.0, ErrorKind::kInvalidArgument,
              "eta_max must be positive");
      Require(params.warmup_steps < total_steps, ErrorKind::kInvalidArgument,
              "warmup_steps " + std::to_string(params.warmup_steps) +
                  " must be < T " + std::to_string(total_steps));
      const std::size_t warmup = params.warmup_steps;
      const double decay_len = t_total - static_cast<double>(warmup);
      for (std::size_t t = 0; t < total_steps; ++t) {
        if (t < warmup) {
          const double ramp = static_cast<double>(t == 0 ? 1 : t);
          rates[t] = params.eta_max * ramp / static_cast<double>(warmup);
        } else {
          const double progress = static_cast<double>(t - warmup) / decay_len;
          rates[t] = params.eta_max * 0.5 *
                     (1.0 + std::cos(std::numbers::pi * progress));
        }
      }
      break;
    }
  }
  return LearningRateSchedule(params, std::move(rates));
}

}  // namespace dvemb
