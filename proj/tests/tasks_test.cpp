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

#include "vfuse/tasks.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "testing.hpp"

namespace vfuse {
namespace {

TEST(TaskSpec, VocabularyLayout) {
  const TaskSpec t;
  EXPECT_EQ(t.cells(), 16u);
  EXPECT_EQ(t.sequence_length(), 18u);
  EXPECT_EQ(t.required_vocab(), 25u);
  EXPECT_EQ(t.color_token(7), 7);
  EXPECT_EQ(t.position_token(0), 8);
  EXPECT_EQ(t.position_token(15), 23);
  EXPECT_EQ(t.separator_token(), 24);
  EXPECT_NO_THROW(t.validate(25));
  EXPECT_THROW(t.validate(24), UsageError);
}

TEST(GenerateDataset, Deterministic) {
  const TaskSpec t;
  const Dataset a = generate_dataset(t, 64), b = generate_dataset(t, 64);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.eval, b.eval);
  EXPECT_EQ(a.train.size(), t.n_train);
  EXPECT_EQ(a.eval.size(), t.n_eval);
  TaskSpec other = t;
  other.seed = 8;
  EXPECT_NE(generate_dataset(other, 64).train, a.train);
  EXPECT_NE(a.train[0], a.eval[0]);
}

TEST(GenerateDataset, AnswersMatchQueriedCell) {
  const TaskSpec t;
  const Dataset ds = generate_dataset(t, 64);
  for (const auto* split : {&ds.train, &ds.eval}) {
    for (const auto& s : *split) {
      const auto cell = static_cast<std::size_t>(s.query_token) - t.n_colors;
      ASSERT_LT(cell, t.cells());
      EXPECT_EQ(s.answer_token, s.image_tokens[cell]);
      for (std::size_t j = 0; j < t.cells(); ++j) {
        EXPECT_EQ(s.relevance[j], j == cell);
        EXPECT_GE(s.image_tokens[j], 0);
        EXPECT_LT(s.image_tokens[j], static_cast<std::int32_t>(t.n_colors));
      }
    }
  }
}

TEST(GenerateDataset, MarginalColorFrequency) {
  TaskSpec t;
  t.grid_side = 2;
  t.n_colors = 2;
  t.n_train = 10000;
  t.n_eval = 1;
  const Dataset ds = generate_dataset(t, 64);
  for (std::size_t cell = 0; cell < 4; ++cell) {
    double ones = 0.0;
    for (const auto& s : ds.train) ones += s.image_tokens[cell] == 1 ? 1.0 : 0.0;
    EXPECT_NEAR(ones / 10000.0, 0.5, 0.02) << "cell " << cell;
  }
}

TEST(GenerateDataset, SequenceLayout) {
  const TaskSpec t;
  const auto s = generate_dataset(t, 64).eval.front();
  const TokenSequence seq = s.to_sequence(t.separator_token());
  ASSERT_EQ(seq.size(), 18u);
  EXPECT_EQ(seq.tokens[16], t.separator_token());
  EXPECT_EQ(seq.tokens[17], s.query_token);
  EXPECT_EQ(seq.image_span.begin, 0u);
  EXPECT_EQ(seq.image_span.end, 16u);
  EXPECT_EQ(seq.answer_pos(), 17u);
}

TEST(Accuracy, ConstantAndOraclePredictors) {
  const TaskSpec t;
  auto samples = generate_dataset(t, 64).eval;
  std::erase_if(samples, [](const SyntheticSample& s) { return s.answer_token == 0; });
  EXPECT_EQ(accuracy(samples, [](const SyntheticSample&) { return 0; }), 0.0);
  EXPECT_EQ(accuracy(samples, [](const SyntheticSample& s) { return s.answer_token; }), 1.0);
  EXPECT_THROW(accuracy({}, [](const SyntheticSample&) { return 0; }), UsageError);
}

TEST(Accuracy, UntrainedModelNearChance) {
  // Answers are uniform over colors, so a predictor that ignores the answer
  // scores (share of predictions that are colors) / n_colors.
  const TaskSpec t;
  const Model m = init_model(ModelConfig{});
  const auto eval = generate_dataset(t, 64).eval;
  std::size_t hits = 0, color_preds = 0;
  for (const auto& s : eval) {
    const auto p = predict(m, s.to_sequence(t.separator_token()));
    hits += p == s.answer_token;
    color_preds += p < static_cast<std::int32_t>(t.n_colors);
  }
  const double acc = accuracy(m, t, eval);
  EXPECT_EQ(acc, static_cast<double>(hits) / 1000.0);
  const double expected = static_cast<double>(color_preds) / 1000.0 / 8.0;
  EXPECT_NEAR(acc, expected, 0.04);
  EXPECT_LE(acc, 1.0 / 8.0 + 0.04);
}

TEST(Accuracy, EmptyInterventionsEqualScaleOne) {
  const TaskSpec t;
  const Model m = init_model(ModelConfig{});
  auto eval = generate_dataset(t, 64).eval;
  eval.resize(100);
  std::vector<std::size_t> all(16);
  for (std::size_t i = 0; i < 16; ++i) all[i] = i;
  EXPECT_EQ(accuracy(m, t, eval), accuracy(m, t, eval, {{2, all, 1.0}, {0, {3}, 1.0}}));
}

TEST(Localization, Examples) {
  const std::vector<bool> rel{false, true, false, false};
  EXPECT_EQ(localization_score(Vec{0.25, 0.25, 0.25, 0.25}, rel), 0.25);
  EXPECT_EQ(localization_score(Vec{0.0, 1.0, 0.0, 0.0}, rel), 1.0);
  EXPECT_EQ(localization_score(Vec{1.0, 3.0, 0.0, 0.0}, rel), 0.75);
}

TEST(Localization, Errors) {
  const std::vector<bool> rel{true, false};
  EXPECT_THROW(localization_score(Vec{1.0}, rel), UsageError);
  EXPECT_THROW(localization_score(Vec{0.0, 0.0}, rel), DegenerateInputError);
  EXPECT_THROW(localization_score(Vec{-1.0, 2.0}, rel), UsageError);
}

TEST(Localization, ScaleInvariantAndUniformBaseline) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + trial % 20;
    Vec ia(d);
    std::vector<bool> rel(d);
    std::size_t n_rel = 0;
    for (std::size_t j = 0; j < d; ++j) {
      ia[j] = u(rng);
      rel[j] = u(rng) < 0.3;
      n_rel += rel[j];
    }
    const double c = 0.01 + 100.0 * u(rng);
    Vec scaled = ia;
    for (auto& v : scaled) v *= c;
    EXPECT_NEAR(localization_score(ia, rel), localization_score(scaled, rel), 1e-12);
    const Vec uniform(d, 1.0 / static_cast<double>(d));
    EXPECT_NEAR(localization_score(uniform, rel),
                static_cast<double>(n_rel) / static_cast<double>(d), 1e-12);
  }
}

TEST(SampleIo, JsonlRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() /
                    ("vfuse_samples_" + std::to_string(::getpid()) + ".jsonl");
  const auto eval = generate_dataset(TaskSpec{}, 64).eval;
  write_samples(eval, path.string());
  EXPECT_EQ(read_samples(path.string()), eval);
  {
    std::ofstream os(path);
    os << "{\"image_tokens\": [1, 2]}\n";
  }
  try {
    read_samples(path.string());
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
  std::filesystem::remove(path);
  EXPECT_THROW(read_samples("/nonexistent/eval.jsonl"), UsageError);
}

}  // namespace
}  // namespace vfuse
