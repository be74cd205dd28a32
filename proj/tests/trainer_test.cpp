// Copyright 2026 The vfuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "vfuse/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "testing.hpp"

namespace vfuse {
namespace {

using testing::tiny_config;
using testing::tiny_task;

TokenSequence tiny_sequence() {
  const TaskSpec t = tiny_task();
  return generate_dataset(t, 32).train.front().to_sequence(t.separator_token());
}

TEST(Loss, Examples) {
  for (std::size_t v : {2u, 8u, 64u}) {
    const Vec uniform(v, 0.7);
    EXPECT_NEAR(loss(uniform, 1), std::log(static_cast<double>(v)), 1e-12);
  }
  EXPECT_NEAR(loss(Vec{1000.0, 0.0, 0.0}, 0), 0.0, 1e-12);
  EXPECT_NEAR(loss(Vec{0.0, std::log(3.0)}, 0), std::log(4.0), 1e-12);
  EXPECT_NEAR(loss(Vec{0.0, std::log(3.0)}, 0), 1.3862943611198906, 1e-12);
  EXPECT_THROW(loss(Vec{0.0, 1.0}, 2), UsageError);
  EXPECT_THROW(loss(Vec{0.0, 1.0}, -1), UsageError);
}

TEST(GradCheck, TinyModelBelowTolerance) {
  const TaskSpec t = tiny_task();
  const Model m = init_model(tiny_config());
  const SyntheticSample s = generate_dataset(t, 32).train.front();
  const GradCheckResult r = grad_check(m, s.to_sequence(t.separator_token()), s.answer_token);
  EXPECT_GE(r.checked, 200u);
  EXPECT_LT(r.max_relative_error, 1e-4)
      << r.worst_parameter << " analytic " << r.worst_analytic << " numeric "
      << r.worst_numeric;
}

TEST(GradCheck, TinyModelAboveRoundingFloor) {
  // With the denominator floored at 1e-6 the residual is finite-difference
  // rounding only, across models and samples.
  const TaskSpec t = tiny_task();
  const auto train = generate_dataset(t, 32).train;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Model m = init_model(tiny_config(seed));
    const SyntheticSample& s = train[seed];
    GradCheckOptions o;
    o.denominator_floor = 1e-6;
    o.seed = seed;
    const GradCheckResult r = grad_check(m, s.to_sequence(t.separator_token()), s.answer_token, o);
    EXPECT_LT(r.max_relative_error, 1e-4) << "seed " << seed << " " << r.worst_parameter;
    EXPECT_LT(r.max_abs_error, 1e-9) << "seed " << seed;
  }
}

TEST(GradCheck, Deterministic) {
  const Model m = init_model(tiny_config());
  const TokenSequence seq = tiny_sequence();
  const GradCheckResult a = grad_check(m, seq, 1), b = grad_check(m, seq, 1);
  EXPECT_EQ(a.max_relative_error, b.max_relative_error);
  EXPECT_EQ(a.worst_parameter, b.worst_parameter);
}

TEST(GradCheck, RejectsBadEpsilon) {
  const Model m = init_model(tiny_config());
  GradCheckOptions o;
  o.epsilon = 0.1;
  EXPECT_THROW(grad_check(m, tiny_sequence(), 0, o), UsageError);
  o.epsilon = 1e-5;
  o.denominator_floor = 0.0;
  EXPECT_THROW(grad_check(m, tiny_sequence(), 0, o), UsageError);
}

TEST(GradCheck, UnusedEmbeddingRowHasZeroGradient) {
  const Model m = init_model(tiny_config());
  const TokenSequence seq = tiny_sequence();
  const std::size_t unused = 31;
  for (auto t : seq.tokens) ASSERT_NE(static_cast<std::size_t>(t), unused);
  ParamSet g = ParamSet::zeros(m.config);
  accumulate_gradients(m, seq, 0, 1.0, g);
  Model probe = m;
  for (std::size_t j = 0; j < m.config.d_model; ++j) {
    EXPECT_EQ(g.tok_embed(unused, j), 0.0);
    const double saved = probe.params.tok_embed(unused, j);
    probe.params.tok_embed(unused, j) = saved + 1e-5;
    const double up = loss(forward(probe, seq).logits, 0);
    probe.params.tok_embed(unused, j) = saved - 1e-5;
    const double down = loss(forward(probe, seq).logits, 0);
    probe.params.tok_embed(unused, j) = saved;
    const double numeric = (up - down) / 2e-5;
    EXPECT_EQ(numeric, 0.0);
    const double denom = std::max({std::abs(g.tok_embed(unused, j)), std::abs(numeric), 1e-8});
    EXPECT_EQ(std::abs(g.tok_embed(unused, j) - numeric) / denom, 0.0);
  }
}

TEST(GradCheck, KeyBiasGradientIsZero) {
  const Model m = init_model(tiny_config());
  const TokenSequence seq = tiny_sequence();
  ParamSet g = ParamSet::zeros(m.config);
  accumulate_gradients(m, seq, 2, 1.0, g);
  Model probe = m;
  const std::size_t d = m.config.d_model;
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    for (std::size_t j = d; j < 2 * d; ++j) {
      EXPECT_NEAR(g.layers[l].b_qkv(0, j), 0.0, 1e-15);
      double& w = probe.params.layers[l].b_qkv(0, j);
      const double saved = w;
      w = saved + 1e-5;
      const double up = loss(forward(probe, seq).logits, 2);
      w = saved - 1e-5;
      const double down = loss(forward(probe, seq).logits, 2);
      w = saved;
      // Rounding noise only: a few ulps of the loss over 2 * epsilon.
      EXPECT_NEAR((up - down) / 2e-5, 0.0, 1e-9);
    }
  }
}

TEST(GradCheck, GradientsThroughInterventions) {
  // Central differences on a model evaluated under a soft mask.
  const Model m = init_model(tiny_config(21));
  const TokenSequence seq = tiny_sequence();
  const std::vector<InterventionSpec> iv{{1, {0, 2}, 0.3}};
  ParamSet g = ParamSet::zeros(m.config);
  accumulate_gradients(m, seq, 3, 1.0, g, iv);
  Model probe = m;
  std::mt19937_64 rng(6);
  double worst = 0.0;
  std::vector<Matrix*> live;
  probe.params.visit([&](const std::string&, Matrix& t) { live.push_back(&t); });
  std::vector<const Matrix*> exact;
  g.visit([&](const std::string&, const Matrix& t) { exact.push_back(&t); });
  for (std::size_t ti = 0; ti < live.size(); ++ti) {
    for (int s = 0; s < 8; ++s) {
      const std::size_t idx = rng() % live[ti]->size();
      double& w = live[ti]->data()[idx];
      const double saved = w;
      w = saved + 1e-5;
      const double up = loss(forward(probe, seq, iv).logits, 3);
      w = saved - 1e-5;
      const double down = loss(forward(probe, seq, iv).logits, 3);
      w = saved;
      const double numeric = (up - down) / 2e-5;
      const double a = exact[ti]->data()[idx];
      worst = std::max(worst, std::abs(a - numeric) /
                                  std::max({std::abs(a), std::abs(numeric), 1e-6}));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Train, ZeroLearningRateLeavesWeights) {
  Model m = init_model(tiny_config());
  const Model before = m;
  const Dataset ds = generate_dataset(tiny_task(), 32);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.n_steps = 5;
  cfg.eval_every = 2;
  const TrainResult r = train(m, ds, cfg);
  EXPECT_EQ(m.params, before.params);
  EXPECT_EQ(r.final_eval_accuracy, accuracy(before, ds.spec, ds.eval));
  ASSERT_EQ(r.curve.size(), 4u);  // steps 0, 2, 4 and the final point
  EXPECT_EQ(r.curve.back().step, 5u);
}

TEST(Train, DeterministicCurves) {
  const Dataset ds = generate_dataset(tiny_task(), 32);
  TrainConfig cfg;
  cfg.n_steps = 30;
  cfg.eval_every = 10;
  Model a = init_model(tiny_config()), b = init_model(tiny_config());
  const TrainResult ra = train(a, ds, cfg), rb = train(b, ds, cfg);
  EXPECT_EQ(ra.curve, rb.curve);
  EXPECT_EQ(a.params, b.params);
}

TEST(Train, InitialLossNearLogVocab) {
  const TaskSpec t;
  const Model m = init_model(ModelConfig{});
  const Dataset ds = generate_dataset(t, m.config.vocab_size);
  std::vector<std::size_t> batch(64);
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = i;
  ParamSet g = ParamSet::zeros(m.config);
  const double l0 = batch_gradients(m, t, ds.train, batch, g);
  const double ln_v = std::log(static_cast<double>(m.config.vocab_size));
  EXPECT_NEAR(l0, ln_v, 0.1 * ln_v);
}

TEST(Train, FullBatchLossNonIncreasingAtSmallLr) {
  Model m = init_model(tiny_config());
  const TaskSpec t = tiny_task();
  const Dataset ds = generate_dataset(t, m.config.vocab_size);
  std::vector<std::size_t> batch(ds.train.size());
  for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = i;
  ParamSet g = ParamSet::zeros(m.config);
  SgdMomentum opt(m.config, 1e-4, TrainConfig{}.momentum);
  double prev = batch_gradients(m, t, ds.train, batch, g);
  for (int step = 0; step < 10; ++step) {
    opt.step(m.params, g);
    const double cur = batch_gradients(m, t, ds.train, batch, g);
    EXPECT_LE(cur, prev) << "step " << step;
    prev = cur;
  }
}

TEST(Train, DivergenceRaisesTrainingError) {
  Model m = init_model(tiny_config());
  const Dataset ds = generate_dataset(tiny_task(), 32);
  TrainConfig cfg;
  cfg.learning_rate = 1e12;
  cfg.momentum = 0.0;
  cfg.clip_norm = 0.0;
  cfg.n_steps = 50;
  EXPECT_THROW(train(m, ds, cfg), TrainingError);
}

TEST(Train, ConfigValidation) {
  TrainConfig cfg;
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = {};
  cfg.learning_rate = -1.0;
  EXPECT_THROW(cfg.validate(), UsageError);
}

TEST(Optimizer, MomentumUpdateRule) {
  ModelConfig c = tiny_config();
  ParamSet w = ParamSet::zeros(c), g = ParamSet::zeros(c);
  g.lnf_gain(0, 0) = 2.0;
  SgdMomentum opt(c, 0.5, 0.9);
  opt.step(w, g);  // v = 2, w = -1
  EXPECT_DOUBLE_EQ(w.lnf_gain(0, 0), -1.0);
  opt.step(w, g);  // v = 0.9 * 2 + 2 = 3.8, w = -1 - 1.9
  EXPECT_DOUBLE_EQ(w.lnf_gain(0, 0), -2.9);
  EXPECT_DOUBLE_EQ(global_norm(g), 2.0);
}

}  // namespace
}  // namespace vfuse
