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
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "dvemb/binary_io.h"
#include "dvemb/errors.h"
#include "dvemb/engine.h"
#include "dvemb/store_io.h"
#include "test_util.h"

namespace dvemb {
namespace {

using testing::RandomLog;
using testing::RandomVector;
using testing::SyntheticHeader;
using testing::TempDir;

// Carries v forward through steps [from, to) one matrix-free factor at a
// time: v <- v - eta * sum_i g_i (g_i . v).
Eigen::VectorXd Propagate(const StepSource& log, std::size_t layer, Eigen::VectorXd v,
                          std::uint64_t from, std::uint64_t to) {
  for (std::uint64_t k = from; k < to; ++k) {
    const StepBlock b = log.ReadStep(k);
    Eigen::VectorXd update = Eigen::VectorXd::Zero(v.size());
    for (const auto& r : b.records) update += r.layers[layer] * r.layers[layer].dot(v);
    v -= b.eta * update;
  }
  return v;
}

// Reference embedding of (step, sample) toward target.
std::vector<Eigen::VectorXd> ReferenceEmbedding(const StepSource& log, std::uint64_t step,
                                                std::uint64_t sample, std::uint64_t target) {
  const StepBlock b = log.ReadStep(step);
  const auto it = std::find_if(b.records.begin(), b.records.end(),
                               [&](const GradientRecord& r) { return r.sample_id == sample; });
  std::vector<Eigen::VectorXd> out;
  for (std::size_t l = 0; l < it->layers.size(); ++l) {
    out.push_back(Propagate(log, l, b.eta * it->layers[l], step + 1, target));
  }
  return out;
}

double MaxDiff(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b) {
  double m = 0.0;
  for (std::size_t l = 0; l < a.size(); ++l) m = std::max(m, (a[l] - b[l]).cwiseAbs().maxCoeff());
  return m;
}

InMemoryLog ScalarLog(const std::vector<double>& etas, const std::vector<std::vector<double>>& grads) {
  InMemoryLog log(SyntheticHeader({{1, 1}}, etas.size(), grads[0].size()));
  for (std::size_t t = 0; t < etas.size(); ++t) {
    StepBlock b;
    b.step = t;
    b.eta = etas[t];
    for (std::size_t i = 0; i < grads[t].size(); ++i) {
      b.records.push_back({i, {Eigen::VectorXd::Constant(1, grads[t][i])}});
    }
    log.AppendStep(std::move(b));
  }
  return log;
}

TEST(Ggn, SumsOuterProducts) {
  InMemoryLog log(SyntheticHeader({{2, 1}}, 1, 2));
  StepBlock b;
  b.eta = 0.1;
  b.records.push_back({0, {Eigen::Vector2d(1, 2)}});
  b.records.push_back({1, {Eigen::Vector2d(0, 1)}});
  const GgnBlock g = Ggn(b);
  Eigen::Matrix2d expected;
  expected << 1, 2, 2, 5;
  EXPECT_EQ(g.layers[0], Eigen::MatrixXd(expected));
}

TEST(Embedding, TwoStepScalarHandCase) {
  // Step 0: samples 0,1 with g = 2, -1 at eta 0.5. Step 1: g = 1, 2 at eta 0.1.
  const InMemoryLog log = ScalarLog({0.5, 0.1}, {{2.0, -1.0}, {1.0, 2.0}});
  const double factor = 1.0 - 0.1 * (1.0 + 4.0);
  const EmbeddingStore store = DveBackward(log);
  ASSERT_EQ(store.size(), 4u);
  EXPECT_DOUBLE_EQ(store.Get(0, 0).layers[0][0], 0.5);
  EXPECT_DOUBLE_EQ(factor, 0.5);
  EXPECT_DOUBLE_EQ(store.Get(0, 1).layers[0][0], -0.5 * factor);
  EXPECT_DOUBLE_EQ(store.Get(1, 0).layers[0][0], 0.1);
  EXPECT_DOUBLE_EQ(store.Get(1, 1).layers[0][0], 0.2);
  EXPECT_DOUBLE_EQ(DveDirect(log, 0, 0, 2).layers[0][0], 0.5 * 2.0 * factor);
  EXPECT_EQ(store.Get(0, 0).target_step, 2u);
}

TEST(Embedding, LastStepIsScaledGradient) {
  const InMemoryLog log = RandomLog(1, {{3, 2}, {2, 2}}, 5, 4);
  const EmbeddingStore store = DveBackward(log);
  const StepBlock last = log.ReadStep(4);
  for (const auto& r : last.records) {
    const ValueEmbedding& e = store.Get(4, r.sample_id);
    for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(e.layers[l], last.eta * r.layers[l]);
  }
}

TEST(Embedding, BackwardMatchesDirectAndReference) {
  const InMemoryLog log = RandomLog(2, {{4, 3}, {3, 2}}, 12, 5, 0.4, 1.0, 8);
  const EmbeddingStore store = DveBackward(log);
  EXPECT_EQ(store.size(), 60u);
  for (const auto& [key, e] : store.entries()) {
    const auto ref = ReferenceEmbedding(log, key.first, key.second, 12);
    EXPECT_LT(MaxDiff(e.layers, ref), 1e-12) << key.first << "," << key.second;
    if (key.first % 4 == 0) {
      EXPECT_LT(MaxDiff(DveDirect(log, key.first, key.second, 12).layers, ref), 1e-12);
    }
  }
}

TEST(Embedding, LayerOrderDoesNotMatter) {
  const InMemoryLog log = RandomLog(3, {{3, 3}, {2, 2}, {2, 3}}, 6, 3);
  BackwardOptions reversed;
  reversed.layer_order = {2, 1, 0};
  const EmbeddingStore a = DveBackward(log);
  const EmbeddingStore b = DveBackward(log, reversed);
  for (const auto& [key, e] : a.entries()) EXPECT_EQ(MaxDiff(e.layers, b.Get(key.first, key.second).layers), 0.0);
  BackwardOptions bad;
  bad.layer_order = {0, 0, 1};
  EXPECT_THROW(DveBackward(log, bad), Error);
}

TEST(Embedding, ZeroGradientsGiveZeroEmbeddingsAndIdentityKernels) {
  const InMemoryLog log = RandomLog(4, {{2, 2}}, 6, 3, 0.2, 0.0);
  const std::vector<std::uint64_t> ckpts{3, 6};
  const CheckpointedResult r = DveCheckpointed(log, ckpts);
  for (const auto& k : r.kernels) EXPECT_EQ(k.layers[0], Eigen::MatrixXd::Identity(4, 4));
  for (const auto& s : r.segments) {
    for (const auto& [key, e] : s.entries()) EXPECT_EQ(e.layers[0], Eigen::VectorXd::Zero(4));
  }
}

TEST(Embedding, DirectRejectsBadArguments) {
  const InMemoryLog log = RandomLog(5, {{2, 2}}, 4, 2);
  EXPECT_THROW(DveDirect(log, 2, 0, 2), Error);
  EXPECT_THROW(DveDirect(log, 0, 0, 5), Error);
  EXPECT_THROW(DveDirect(log, 0, 999, 4), Error);
}

class CheckpointTest : public ::testing::TestWithParam<std::vector<std::uint64_t>> {};

TEST_P(CheckpointTest, ComposedSegmentsMatchSinglePass) {
  const InMemoryLog log = RandomLog(6, {{3, 3}, {2, 2}}, 16, 4, 0.3, 1.0, 10);
  const std::vector<std::uint64_t> ckpts = GetParam();
  const CheckpointedResult r = DveCheckpointed(log, ckpts);
  ASSERT_EQ(r.kernels.size(), ckpts.size());
  ASSERT_EQ(r.segments.size(), ckpts.size());
  const EmbeddingStore whole = DveBackward(log);
  const EmbeddingStore composed = ComposeStore(r, 16);
  ASSERT_EQ(composed.size(), whole.size());
  for (const auto& [key, e] : whole.entries()) {
    EXPECT_LT(MaxDiff(composed.Get(key.first, key.second).layers, e.layers), 1e-12);
  }
  // Each kernel carries an arbitrary vector across its segment.
  Rng rng(9);
  for (const auto& k : r.kernels) {
    for (std::size_t l = 0; l < 2; ++l) {
      const Eigen::VectorXd v = RandomVector(rng, k.layers[l].cols());
      EXPECT_LT((k.layers[l] * v - Propagate(log, l, v, k.begin, k.end)).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
  // Intermediate checkpoints: records before t_1 carried only to t_1.
  if (ckpts.size() > 1) {
    const EmbeddingStore first = ComposeStore(r, ckpts[1]);
    for (const auto& [key, e] : first.entries()) {
      EXPECT_LT(key.first, ckpts[1]);
      EXPECT_LT(MaxDiff(e.layers, ReferenceEmbedding(log, key.first, key.second, ckpts[1])), 1e-12);
    }
  }
  // Parallel segments give identical bits.
  const CheckpointedResult p = DveCheckpointed(log, ckpts, 3);
  for (std::size_t s = 0; s < ckpts.size(); ++s) {
    for (const auto& [key, e] : r.segments[s].entries()) {
      EXPECT_EQ(MaxDiff(e.layers, p.segments[s].Get(key.first, key.second).layers), 0.0);
    }
    EXPECT_EQ(r.kernels[s].layers[0], p.kernels[s].layers[0]);
  }
}

INSTANTIATE_TEST_SUITE_P(K, CheckpointTest,
                         ::testing::Values(std::vector<std::uint64_t>{16},
                                           std::vector<std::uint64_t>{8, 16},
                                           std::vector<std::uint64_t>{3, 7, 12, 16}));

TEST(Checkpoint, RejectsBadCheckpointLists) {
  const InMemoryLog log = RandomLog(7, {{2, 2}}, 8, 2);
  EXPECT_THROW(DveCheckpointed(log, std::vector<std::uint64_t>{4}), Error);
  EXPECT_THROW(DveCheckpointed(log, std::vector<std::uint64_t>{4, 4, 8}), Error);
  EXPECT_THROW(DveCheckpointed(log, std::vector<std::uint64_t>{0, 8}), Error);
}

TEST(Checkpoint, ComposeRejectsEarlierCheckpoint) {
  const InMemoryLog log = RandomLog(8, {{2, 2}}, 8, 2);
  const CheckpointedResult r = DveCheckpointed(log, std::vector<std::uint64_t>{4, 8});
  const ValueEmbedding& late = r.segments[1].entries().begin()->second;
  EXPECT_THROW(ComposeToCheckpoint(late, r.kernels, 4), Error);
  EXPECT_THROW(ComposeStore(r, 5), Error);
  const ValueEmbedding& early = r.segments[0].entries().begin()->second;
  EXPECT_EQ(ComposeToCheckpoint(early, r.kernels, 4).layers[0], early.layers[0]);
  EXPECT_THROW(ComposeToCheckpoint(early, std::span<const SegmentKernel>(), 8), Error);
}

ProjectedGradient RandomGradient(Rng& rng, const LogHeader& h) {
  ProjectedGradient g;
  g.projection_seed = h.projection_seed;
  for (std::size_t l = 0; l < h.num_layers(); ++l) {
    g.layers.push_back(RandomVector(rng, static_cast<Eigen::Index>(h.projected_dim(l))));
  }
  return g;
}

TEST(Query, LinearInValidationGradient) {
  const InMemoryLog log = RandomLog(9, {{3, 2}, {2, 2}}, 6, 3);
  const EmbeddingStore store = DveBackward(log);
  Rng rng(10);
  const ProjectedGradient g1 = RandomGradient(rng, log.header());
  const ProjectedGradient g2 = RandomGradient(rng, log.header());
  ProjectedGradient mix = g1;
  for (std::size_t l = 0; l < mix.layers.size(); ++l) mix.layers[l] = 2.0 * g1.layers[l] - 0.5 * g2.layers[l];
  const auto s1 = InfluenceQuery(store, g1);
  const auto s2 = InfluenceQuery(store, g2);
  const auto sm = InfluenceQuery(store, mix);
  ASSERT_EQ(sm.size(), store.size());
  for (std::size_t i = 0; i < sm.size(); ++i) {
    EXPECT_NEAR(sm[i].score, 2.0 * s1[i].score - 0.5 * s2[i].score, 1e-12);
    const ValueEmbedding& e = store.Get(s1[i].step, s1[i].sample_id);
    EXPECT_NEAR(s1[i].score, e.layers[0].dot(g1.layers[0]) + e.layers[1].dot(g1.layers[1]), 1e-14);
  }
  for (std::size_t i = 1; i < s1.size(); ++i) {
    EXPECT_TRUE(std::make_pair(s1[i - 1].step, s1[i - 1].sample_id) < std::make_pair(s1[i].step, s1[i].sample_id));
  }
  const auto ranged = InfluenceQuery(store, g1, std::make_pair<std::uint64_t, std::uint64_t>(2, 3));
  EXPECT_EQ(ranged.size(), 6u);
  for (const auto& s : ranged) EXPECT_TRUE(s.step == 2 || s.step == 3);
  ProjectedGradient wrong = g1;
  wrong.layers.pop_back();
  EXPECT_THROW(InfluenceQuery(store, wrong), Error);
}

TEST(Query, ProjectGradientMatchesSketchedSingleGradient) {
  const ModelSpec spec = ModelSpec::Mlp(std::vector<std::size_t>{5, 6, 3});
  const ModelParams params = InitModel(spec, 2);
  const ProjectionPair pair = MakeProjections(4, spec, 3, 2);
  Rng rng(11);
  const Eigen::VectorXd x = RandomVector(rng, 5);
  const ProjectedGradient g = ProjectGradient(pair, spec, params, x, 1);
  EXPECT_EQ(g.projection_seed, 4u);
  const ProjectedGradient exact = ProjectGradient(MakeIdentityProjections(spec), spec, params, x, 1);
  const SingleSampleGrad single = LossAndGradSingle(spec, params, x, 1);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_LT((exact.layers[l] - single.layers[l]).cwiseAbs().maxCoeff(), 1e-14);
    const LayerSketch& s = pair.layer(l);
    const auto d_in = static_cast<Eigen::Index>(s.d_in);
    // Unflatten the exact gradient into (ds, a) rows and project as a matrix.
    Eigen::MatrixXd outer(s.d_out, s.d_in);
    for (Eigen::Index o = 0; o < outer.rows(); ++o) outer.row(o) = single.layers[l].segment(o * d_in, d_in).transpose();
    const Eigen::MatrixXd projected = s.p_s * outer * s.p_a.transpose();
    Eigen::VectorXd flat(projected.size());
    for (Eigen::Index o = 0; o < projected.rows(); ++o) flat.segment(o * projected.cols(), projected.cols()) = projected.row(o).transpose();
    EXPECT_LT((g.layers[l] - flat).cwiseAbs().maxCoeff(), 1e-13);
  }
}

TEST(Aggregate, SumsTaggedEmbeddings) {
  const InMemoryLog log = RandomLog(12, {{2, 2}}, 5, 3, 0.2, 1.0, 6);
  const EmbeddingStore store = DveBackward(log);
  const std::vector<std::string> tags{"a", "b", "a", "b", "a", "c"};
  const ValueEmbedding sum = AggregateSource(store, tags, "a");
  Eigen::VectorXd expected = Eigen::VectorXd::Zero(4);
  for (const auto& [key, e] : store.entries()) {
    if (tags[key.second] == "a") expected += e.layers[0];
  }
  EXPECT_LT((sum.layers[0] - expected).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(AggregateSource(store, tags, "zzz"), Error);
}

TEST(Store, RejectsDuplicatesAndBadShapes) {
  const InMemoryLog log = RandomLog(13, {{2, 2}}, 3, 2);
  EmbeddingStore store = DveBackward(log);
  ValueEmbedding dup = store.entries().begin()->second;
  EXPECT_THROW(store.Add(dup), Error);
  dup.step = 77;
  dup.layers[0] = Eigen::VectorXd::Zero(3);
  EXPECT_THROW(store.Add(dup), Error);
  EXPECT_FALSE(store.Contains(77, dup.sample_id));
}

TEST(StoreIo, RoundTripAndChecksum) {
  TempDir dir("store");
  const InMemoryLog log = RandomLog(14, {{3, 2}, {2, 2}}, 6, 3);
  const CheckpointedResult r = DveCheckpointed(log, std::vector<std::uint64_t>{2, 6});
  const EmbeddingStore& store = r.segments[1];
  SaveEmbeddingStore(dir / "s.dves", store);
  const EmbeddingStore back = LoadEmbeddingStore(dir / "s.dves");
  EXPECT_EQ(back.header(), store.header());
  EXPECT_EQ(back.begin_step(), 2u);
  EXPECT_EQ(back.end_step(), 6u);
  EXPECT_EQ(back.target_step(), 6u);
  ASSERT_EQ(back.size(), store.size());
  for (const auto& [key, e] : store.entries()) {
    const ValueEmbedding& b = back.Get(key.first, key.second);
    EXPECT_EQ(b.target_step, 6u);
    for (std::size_t l = 0; l < 2; ++l) {
      for (Eigen::Index i = 0; i < e.layers[l].size(); ++i) {
        EXPECT_EQ(b.layers[l][i], static_cast<double>(static_cast<float>(e.layers[l][i])));
      }
    }
  }
  EXPECT_EQ(SerializeEmbeddingStore(back), SerializeEmbeddingStore(store));

  SaveKernel(dir / "k.dvek", r.kernels[0]);
  const SegmentKernel k = LoadKernel(dir / "k.dvek");
  EXPECT_EQ(k.begin, 0u);
  EXPECT_EQ(k.end, 2u);
  EXPECT_EQ(k.layers[1], r.kernels[0].layers[1]);

  std::string bytes = ReadFileBytes(dir / "s.dves");
  bytes[bytes.size() / 2] ^= 1;
  EXPECT_THROW(ParseEmbeddingStore(bytes), Error);
  std::string kbytes = SerializeKernel(r.kernels[0]);
  kbytes[kbytes.size() / 2] ^= 1;
  EXPECT_THROW(ParseKernel(kbytes), Error);
  try {
    LoadEmbeddingStore(dir / "absent.dves");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(ExitCodeFor(e.kind()), 4);
  }
}

}  // namespace
}  // namespace dvemb
