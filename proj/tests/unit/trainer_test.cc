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


#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "dvemb/binary_io.h"
#include "dvemb/dataset.h"
#include "dvemb/errors.h"
#include "dvemb/manifest.h"
#include "dvemb/schedule.h"
#include "dvemb/trainer.h"
#include "test_util.h"

namespace dvemb {
namespace {

using testing::TempDir;

Dataset SmallData(std::size_t n = 24, std::uint64_t seed = 1) {
  SynthOptions o;
  o.seed = seed;
  o.n = n;
  o.dim = 4;
  o.classes = 3;
  o.cluster_seed = 2;
  o.separation = 2.0;
  return SynthDataset(o);
}

PlanOptions SmallPlan(std::size_t batch = 4, std::size_t epochs = 2, double eta = 0.05) {
  PlanOptions p;
  p.spec = ModelSpec::Mlp(std::vector<std::size_t>{4, 5, 3});
  p.init_seed = 3;
  p.shuffle_seed = 4;
  p.batch_size = batch;
  p.epochs = epochs;
  p.schedule.eta_max = eta;
  p.checkpoint_count = 2;
  return p;
}

TEST(Schedule, Constant) {
  ScheduleParams p;
  p.eta_max = 0.1;
  EXPECT_EQ(MakeSchedule(p, 3).rates(), (std::vector<double>{0.1, 0.1, 0.1}));
}

TEST(Schedule, InverseSqrtFromScale) {
  ScheduleParams p;
  p.kind = ScheduleKind::kInverseSqrt;
  p.c = 1.0;
  const LearningRateSchedule s = MakeSchedule(p, 100);
  EXPECT_DOUBLE_EQ(s.eta_max(), 0.1);
  EXPECT_DOUBLE_EQ(s.at(0), 0.1);
  EXPECT_DOUBLE_EQ(s.at(4), 0.05);
  for (std::size_t t = 1; t < 100; ++t) EXPECT_DOUBLE_EQ(s.at(t), 0.1 / std::sqrt(double(t)));
}

TEST(Schedule, WarmupCosineMidpointAndShape) {
  ScheduleParams p;
  p.kind = ScheduleKind::kWarmupCosine;
  p.eta_max = 3e-4;
  p.warmup_steps = 2000;
  const LearningRateSchedule s = MakeSchedule(p, 10000);
  EXPECT_NEAR(s.at(1000), 1.5e-4, 1e-18);
  EXPECT_DOUBLE_EQ(s.at(2000), 3e-4);
  for (std::size_t t = 0; t < 10000; ++t) EXPECT_GT(s.at(t), 0.0);
  for (std::size_t t = 2001; t < 10000; ++t) EXPECT_LE(s.at(t), s.at(t - 1));
}

TEST(Schedule, WarmupMustEndBeforeT) {
  ScheduleParams p;
  p.kind = ScheduleKind::kWarmupCosine;
  p.eta_max = 1.0;
  p.warmup_steps = 10;
  EXPECT_THROW(MakeSchedule(p, 10), Error);
}

TEST(PlanRun, TwoBatchesPartitionFourSamples) {
  const Dataset d = SmallData(4);
  PlanOptions p = SmallPlan(2, 1);
  const RunManifest a = PlanRun(d, p);
  const RunManifest b = PlanRun(d, p);
  ASSERT_EQ(a.total_steps(), 2u);
  std::set<std::uint64_t> all;
  for (const auto& batch : a.batches) all.insert(batch.begin(), batch.end());
  EXPECT_EQ(all, (std::set<std::uint64_t>{0, 1, 2, 3}));
  EXPECT_EQ(a.batches, b.batches);
  EXPECT_EQ(a.ToJson(), b.ToJson());
}

TEST(PlanRun, EverySampleOncePerEpoch) {
  const Dataset d = SmallData(24);
  const RunManifest m = PlanRun(d, SmallPlan(4, 3));
  std::map<std::uint64_t, int> count;
  for (const auto& batch : m.batches) {
    for (auto id : batch) ++count[id];
  }
  EXPECT_EQ(count.size(), 24u);
  for (const auto& [id, c] : count) EXPECT_EQ(c, 3) << id;
}

TEST(PlanRun, RemovalOfAbsentSampleFailsValidation) {
  const Dataset d = SmallData(8);
  const RunManifest m = PlanRun(d, SmallPlan(2, 1));
  std::uint64_t absent = 0;
  while (std::find(m.batches[0].begin(), m.batches[0].end(), absent) != m.batches[0].end()) ++absent;
  EXPECT_THROW(m.WithRemovals({{0, absent}}), Error);
  EXPECT_NO_THROW(m.WithRemovals({{0, m.batches[0][0]}}));
}

TEST(Manifest, JsonRoundTripAndFileIo) {
  const Dataset d = SmallData();
  RunManifest m = PlanRun(d, SmallPlan());
  m = m.WithRemovals({{1, m.batches[1][0]}});
  const RunManifest back = RunManifest::FromJson(m.ToJson());
  EXPECT_EQ(back.ToJson(), m.ToJson());
  EXPECT_EQ(back.ContentHash(), m.ContentHash());
  TempDir dir("manifest");
  SaveManifest(dir / "m.json", m);
  EXPECT_EQ(LoadManifest(dir / "m.json").ContentHash(), m.ContentHash());
}

TEST(Train, EmptyTrajectoryReturnsInitialization) {
  const Dataset d = SmallData();
  RunManifest m = PlanRun(d, SmallPlan());
  m.batches.clear();
  m.checkpoint_steps = {0};
  const TrainResult r = Train(m, d);
  EXPECT_TRUE(r.final_params == InitModel(m.spec, m.init_seed));
}

TEST(Train, SingleStepOnLinearModelMatchesHandUpdate) {
  // One sample, identity 1-layer model with squared error: the gradient
  // with respect to W is a (W^T a - y)^T.
  Dataset d;
  d.inputs = RowMatrix{{0.5, -1.0}};
  d.labels = {1};
  PlanOptions p;
  p.spec = ModelSpec::Mlp(std::vector<std::size_t>{2, 2}, Activation::kIdentity, true, LossKind::kSquaredError);
  p.init_seed = 9;
  p.batch_size = 1;
  p.epochs = 1;
  p.schedule.eta_max = 0.3;
  const RunManifest m = PlanRun(d, p);
  const ModelParams w0 = InitModel(p.spec, 9);
  Eigen::Vector3d a(0.5, -1.0, 1.0);
  Eigen::Vector2d y(0.0, 1.0);
  const Eigen::Vector2d residual = w0.weights[0].transpose() * a - y;
  const Eigen::MatrixXd expected = w0.weights[0] - 0.3 * a * residual.transpose();
  const TrainResult r = Train(m, d);
  EXPECT_LT((r.final_params.weights[0] - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Train, ReplayIsBitIdentical) {
  const Dataset d = SmallData();
  RunManifest m = PlanRun(d, SmallPlan());
  m.checkpoint_steps.clear();
  for (std::uint64_t t = 0; t <= m.total_steps(); ++t) m.checkpoint_steps.push_back(t);
  const TrainResult a = Train(m, d);
  const TrainResult b = Train(m, d);
  EXPECT_EQ(SerializeCheckpoint(m.spec, a.final_params), SerializeCheckpoint(m.spec, b.final_params));
  for (const auto& [t, p] : a.checkpoints) EXPECT_TRUE(p == b.checkpoints.at(t)) << t;
}

TEST(Train, WritesCheckpointFiles) {
  const Dataset d = SmallData();
  const RunManifest m = PlanRun(d, SmallPlan());
  TempDir dir("ckpt");
  TrainOptions o;
  o.checkpoint_dir = dir.path();
  const TrainResult r = Train(m, d, o);
  for (std::uint64_t t : m.checkpoint_steps) {
    EXPECT_TRUE(LoadCheckpoint(CheckpointPath(dir.path(), t)) == r.checkpoints.at(t));
  }
}

TEST(Train, DivergenceReportsStep) {
  const Dataset d = SmallData();
  PlanOptions p = SmallPlan(4, 2, 1e6);
  p.spec.loss = LossKind::kSquaredError;
  const RunManifest m = PlanRun(d, p);
  try {
    Train(m, d);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_LT(e.step(), m.total_steps());
    EXPECT_EQ(ExitCodeFor(e.kind()), 3);
  }
}

TEST(Counterfactual, ZeroRateLeavesParametersUnchanged) {
  const Dataset d = SmallData();
  const RunManifest m = PlanRun(d, SmallPlan(4, 2, 0.0));
  const RunManifest cf = m.WithRemovals({{2, m.batches[2][1]}});
  EXPECT_TRUE(Train(m, d).final_params == TrainCounterfactual(cf, d).final_params);
}

// theta'_T - theta_T after removing z* from the last step is exactly eta
// times z*'s gradient at theta_{T-1} (up to rounding of the batch sum).
void ExpectLastStepDifference(const Dataset& d, const RunManifest& m) {
  const std::uint64_t last = m.total_steps() - 1;
  const std::uint64_t removed = m.batches[last][0];
  RunManifest with_ckpt = m;
  with_ckpt.checkpoint_steps = {last, m.total_steps()};
  const TrainResult base = Train(with_ckpt, d);
  const TrainResult cf = TrainCounterfactual(with_ckpt.WithRemovals({{last, removed}}), d);
  const ModelParams& before = base.checkpoints.at(last);
  const SingleSampleGrad g = LossAndGradSingle(m.spec, before, d.inputs.row(static_cast<Eigen::Index>(removed)).transpose(),
                                               d.labels[removed]);
  const double eta = m.Rates().at(last);
  for (std::size_t l = 0; l < m.spec.num_layers(); ++l) {
    const Eigen::VectorXd diff = FlattenLayerParams(cf.final_params, l) - FlattenLayerParams(base.final_params, l);
    const double scale = std::max(1.0, FlattenLayerParams(base.final_params, l).cwiseAbs().maxCoeff());
    EXPECT_LT((diff - eta * g.layers[l]).cwiseAbs().maxCoeff(), 1e-14 * scale) << "layer " << l;
  }
}

TEST(Counterfactual, SingleStepDifferenceIsRemovedGradient) {
  const Dataset d = SmallData(4);
  ExpectLastStepDifference(d, PlanRun(d, SmallPlan(4, 1)));
}

TEST(Counterfactual, LastStepDifferenceIsRemovedGradient) {
  const Dataset d = SmallData();
  ExpectLastStepDifference(d, PlanRun(d, SmallPlan(4, 2)));
}

TEST(Counterfactual, PrefixIsBitIdentical) {
  const Dataset d = SmallData();
  RunManifest m = PlanRun(d, SmallPlan());
  m.checkpoint_steps.clear();
  for (std::uint64_t t = 0; t <= m.total_steps(); ++t) m.checkpoint_steps.push_back(t);
  const std::uint64_t ts = 5;
  const TrainResult base = Train(m, d);
  const TrainResult cf = Train(m.WithRemovals({{ts, m.batches[ts][2]}}), d);
  for (std::uint64_t t = 0; t <= ts; ++t) EXPECT_TRUE(base.checkpoints.at(t) == cf.checkpoints.at(t)) << t;
  EXPECT_FALSE(base.checkpoints.at(ts + 1) == cf.checkpoints.at(ts + 1));
  // Starting from a baseline checkpoint gives the same answer.
  const TrainResult resumed = TrainCounterfactual(m.WithRemovals({{ts, m.batches[ts][2]}}), d, &base.checkpoints);
  EXPECT_TRUE(resumed.final_params == cf.final_params);
  EXPECT_TRUE(TrainCounterfactual(m.WithRemovals({{ts, m.batches[ts][2]}}), d).final_params == cf.final_params);
}

TEST(Counterfactual, RequiresARemoval) {
  const Dataset d = SmallData();
  EXPECT_THROW(TrainCounterfactual(PlanRun(d, SmallPlan()), d), Error);
}

TEST(Train, FullBatchLossIsMonotoneOnConvexQuadratic) {
  Rng rng(3);
  Dataset d;
  d.inputs = testing::RandomMatrix(rng, 32, 3);
  for (int i = 0; i < 32; ++i) d.labels.push_back(i % 2);
  PlanOptions p;
  p.spec = ModelSpec::Mlp(std::vector<std::size_t>{3, 2}, Activation::kIdentity, true, LossKind::kSquaredError);
  p.batch_size = 32;
  p.epochs = 40;
  p.schedule.eta_max = 0.005;
  RunManifest m = PlanRun(d, p);
  const TrainResult r = Train(m, d);
  for (std::size_t t = 1; t < r.step_losses.size(); ++t) EXPECT_LE(r.step_losses[t], r.step_losses[t - 1]);
}

class CountingSink : public GradientSink {
 public:
  void Consume(const StepGradients& step) override {
    records += step.sample_ids.size();
    EXPECT_EQ(step.capture->batch_size(), step.sample_ids.size());
    steps.push_back(step.step);
  }
  void Finish() override { finished = true; }
  std::size_t records = 0;
  std::vector<std::uint64_t> steps;
  bool finished = false;
};

TEST(Train, SinkSeesEveryRecordInStepOrder) {
  const Dataset d = SmallData();
  const RunManifest m = PlanRun(d, SmallPlan(4, 3));
  CountingSink sink;
  TrainOptions o;
  o.sink = &sink;
  Train(m, d, o);
  std::size_t expected = 0;
  for (const auto& b : m.batches) expected += b.size();
  EXPECT_EQ(sink.records, expected);
  EXPECT_TRUE(std::is_sorted(sink.steps.begin(), sink.steps.end()));
  EXPECT_TRUE(sink.finished);
}

TEST(Idx, LimitAndRoundTrip) {
  TempDir dir("idx");
  Rng rng(5);
  RowMatrix pixels(10, 784);
  for (Eigen::Index i = 0; i < pixels.size(); ++i) pixels.data()[i] = static_cast<double>(rng.Below(256));
  std::vector<int> labels;
  for (int i = 0; i < 10; ++i) labels.push_back(i % 10);
  WriteIdx(dir / "img", dir / "lbl", pixels, labels, 28, 28);
  const Dataset five = LoadIdx(dir / "img", dir / "lbl", 5, false);
  EXPECT_EQ(five.size(), 5u);
  EXPECT_EQ(five.dim(), 784u);
  const Dataset all = LoadIdx(dir / "img", dir / "lbl", 0, false);
  EXPECT_EQ(all.inputs, pixels);
  EXPECT_EQ(all.labels, labels);
  const Dataset norm = LoadIdx(dir / "img", dir / "lbl", 0, true);
  EXPECT_LT((norm.inputs - pixels / 255.0).cwiseAbs().maxCoeff(), 1e-15);
  const Dataset tail = LoadIdx(dir / "img", dir / "lbl", 3, false, 7);
  EXPECT_EQ(tail.labels, (std::vector<int>{7, 8, 9}));
}

TEST(Idx, BadMagicAndTruncation) {
  TempDir dir("idxbad");
  RowMatrix pixels = RowMatrix::Zero(2, 4);
  std::vector<int> labels{0, 1};
  WriteIdx(dir / "img", dir / "lbl", pixels, labels, 2, 2);
  std::string bytes = ReadFileBytes(dir / "img");
  std::string bad = bytes;
  bad[3] = 0x01;
  WriteFileBytes(dir / "bad", bad);
  try {
    LoadIdx(dir / "bad", dir / "lbl", 0, false);
    FAIL();
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected"), std::string::npos);
    EXPECT_NE(msg.find("00000803"), std::string::npos) << msg;
  }
  WriteFileBytes(dir / "short", bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(LoadIdx(dir / "short", dir / "lbl", 0, false), Error);
  WriteIdx(dir / "img3", dir / "lbl3", RowMatrix::Zero(3, 4), std::vector<int>{0, 1, 2}, 2, 2);
  EXPECT_THROW(LoadIdx(dir / "img", dir / "lbl3", 0, false), Error);
}

TEST(Synth, LabelNoiseCounts) {
  SynthOptions o;
  o.n = 1000;
  o.classes = 10;
  o.dim = 8;
  o.label_noise = 0.1;
  o.seed = 4;
  const Dataset noisy = SynthDataset(o);
  const auto flags = FlippedFlags(noisy);
  EXPECT_EQ(std::count(flags.begin(), flags.end(), true), 100);
  o.label_noise = 0.0;
  const Dataset clean = SynthDataset(o);
  for (const auto& tag : clean.source_tags) EXPECT_EQ(tag, kCleanTag);
  // Same draws except for flipped labels, none of which keep their class.
  EXPECT_EQ(noisy.inputs, clean.inputs);
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    EXPECT_EQ(flags[i], noisy.labels[i] != clean.labels[i]) << i;
  }
  EXPECT_EQ(SynthDataset(o).Fingerprint(), clean.Fingerprint());
}

}  // namespace
}  // namespace dvemb
