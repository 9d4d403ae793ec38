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

#ifndef DVEMB_SCHEDULE_H_
#define DVEMB_SCHEDULE_H_

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace dvemb {

enum class ScheduleKind { kConstant, kInverseSqrt, kWarmupCosine };

const char* ScheduleKindName(ScheduleKind kind);
ScheduleKind ParseScheduleKind(const std::string& name);

struct ScheduleParams {
  ScheduleKind kind = ScheduleKind::kConstant;
  // Peak rate. For kInverseSqrt it is derived as c / sqrt(T) when c > 0.
  double eta_max = 0.0;
  std::size_t warmup_steps = 0;
  double c = 0.0;
};

// Step sizes eta_0 .. eta_{T-1}, materialized once.
class LearningRateSchedule {
 public:
  LearningRateSchedule() = default;
  LearningRateSchedule(ScheduleParams params, std::vector<double> rates)
      : params_(params), rates_(std::move(rates)) {}

  const ScheduleParams& params() const { return params_; }
  const std::vector<double>& rates() const { return rates_; }
  double at(std::size_t t) const { return rates_.at(t); }
  std::size_t size() const { return rates_.size(); }
  // Peak rate actually used (after deriving it from c for kInverseSqrt).
  double eta_max() const;
  std::uint64_t Digest() const;

 private:
  ScheduleParams params_;
  std::vector<double> rates_;
};

// constant:      eta_t = eta_max
// inverse_sqrt:  eta_max = c / sqrt(T); eta_0 = eta_max; eta_t = eta_max / sqrt(t)
// warmup_cosine: eta_t = eta_max * t / W for 1 <= t <= W (eta_0 = eta_1),
//                then half-cosine from eta_max down to 0 at t = T.
LearningRateSchedule MakeSchedule(const ScheduleParams& params,
                                  std::size_t total_steps);

}  // namespace dvemb

#endif  // DVEMB_SCHEDULE_H_
