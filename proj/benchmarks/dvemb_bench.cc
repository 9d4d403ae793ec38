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


#include <vector>

#include <benchmark/benchmark.h>

#include "dvemb/dataset.h"
#include "dvemb/engine.h"
#include "dvemb/model.h"
#include "dvemb/projection.h"
#include "dvemb/trainer.h"
#include "test_util.h"

namespace dvemb {
namespace {

Dataset MnistLike(std::size_t n) {
  SynthOptions o;
  o.n = n;
  o.dim = 784;
  o.classes = 10;
  o.latent_dim = 30;
  o.seed = 1;
  return SynthDataset(o);
}

std::vector<std::uint64_t> FirstIds(std::size_t n) {
  std::vector<std::uint64_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

void BM_ForwardBackward(benchmark::State& state) {
  const auto batch_size = static_cast<std::size_t>(state.range(0));
  const Dataset data = MnistLike(batch_size);
  const ModelSpec spec = ModelSpec::Mlp(std::vector<std::size_t>{784, 128, 10});
  const ModelParams params = InitModel(spec, 1);
  const SampleBatch batch = data.Batch(FirstIds(batch_size));
  for (auto _ : state) benchmark::DoNotOptimize(ForwardBackward(spec, params, batch));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(1)->Arg(16)->Arg(128);

void BM_ProjectCapture(benchmark::State& state) {
  const auto r = static_cast<std::size_t>(state.range(0));
  const Dataset data = MnistLike(16);
  const ModelSpec spec = ModelSpec::Mlp(std::vector<std::size_t>{784, 128, 10});
  const ModelParams params = InitModel(spec, 1);
  const BackpropCapture cap = ForwardBackward(spec, params, data.Batch(FirstIds(16)));
  const ProjectionPair pair = MakeProjections(3, spec, r, r);
  for (auto _ : state) benchmark::DoNotOptimize(ProjectCapture(pair, cap));
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_ProjectCapture)->Arg(8)->Arg(16)->Arg(32);

void BM_DveBackward(benchmark::State& state) {
  const auto r = static_cast<std::uint64_t>(state.range(0));
  const InMemoryLog log = testing::RandomLog(1, {{r, r}, {r, r}}, 64, 16, 0.05);
  for (auto _ : state) benchmark::DoNotOptimize(DveBackward(log));
  state.SetItemsProcessed(state.iterations() * 64 * 16);
}
BENCHMARK(BM_DveBackward)->Arg(8)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_TrainEpoch(benchmark::State& state) {
  const Dataset data = MnistLike(1000);
  PlanOptions p;
  p.spec = ModelSpec::Mlp(std::vector<std::size_t>{784, 128, 10});
  p.batch_size = 16;
  p.schedule.eta_max = 1e-2 / 16;
  const RunManifest m = PlanRun(data, p);
  TrainOptions o;
  o.keep_checkpoints = false;
  for (auto _ : state) benchmark::DoNotOptimize(Train(m, data, o));
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace dvemb

BENCHMARK_MAIN();
