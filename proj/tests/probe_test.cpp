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

#include "vfuse/probe.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "fixtures.hpp"
#include "testing.hpp"

namespace vfuse {
namespace {

using testing::kReferenceBaseline;
using testing::kReferenceSweep;

TEST(FusionLayers, ConstructedSweep) {
  const Vec acc{0.05, 0.90, 0.04, 0.95, 0.95, 0.95};
  EXPECT_EQ(identify_fusion_layers(acc, 0.96, 0.5, default_recovery_window(6)),
            (std::vector<std::size_t>{0, 2}));
}

TEST(FusionLayers, FlatSweepIsEmpty) {
  const Vec acc(6, 0.9);
  EXPECT_TRUE(identify_fusion_layers(acc, 0.9, 0.5, 2).empty());
  EXPECT_FALSE(identify_review_layer(acc, 0.9, {}, 0.5).has_value());
}

TEST(FusionLayers, Errors) {
  const Vec acc{0.5, 0.5};
  EXPECT_THROW(identify_fusion_layers(acc, 0.9, 0.0, 2), UsageError);
  EXPECT_THROW(identify_fusion_layers(acc, 0.9, 1.5, 2), UsageError);
  EXPECT_THROW(identify_fusion_layers(acc, 0.9, 0.5, 0), UsageError);
  EXPECT_THROW(identify_fusion_layers(acc, 0.15, 0.5, 2, 0.125), MethodInapplicableError);
  EXPECT_THROW(identify_review_layer(acc, 0.9, {}, 0.0), UsageError);
}

TEST(FusionLayers, ReferenceFixture) {
  const FusionRule rule;
  const FusionReport r = build_fusion_report(kReferenceSweep, kReferenceBaseline, rule);
  EXPECT_EQ(r.recovery_window, 4u);
  EXPECT_EQ(r.fusion_layers, testing::kReferenceFusion);
  EXPECT_EQ(r.review_layer, testing::kReferenceReview);
  EXPECT_EQ(r.post_integrated_layer, testing::kReferencePost);
}

TEST(FusionLayers, ShortWindowEndsFusionEarly) {
  // A window of two stops at the three-layer plateau after layer 4.
  EXPECT_EQ(identify_fusion_layers(kReferenceSweep, kReferenceBaseline, 0.5, 2),
            (std::vector<std::size_t>{2, 4}));
}

TEST(FusionLayers, RecoveryWindowDefault) {
  EXPECT_EQ(default_recovery_window(6), 2u);
  EXPECT_EQ(default_recovery_window(16), 2u);
  EXPECT_EQ(default_recovery_window(32), 4u);
}

TEST(FusionLayers, ThresholdProperties) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 4 + trial % 29;
    Vec acc(n);
    for (auto& a : acc) a = u(rng) < 0.3 ? 0.0 : u(rng);
    const double baseline = 0.5 + 0.5 * u(rng);
    const double delta = 0.05 + 0.95 * u(rng);
    const std::size_t window = 1 + trial % 4;
    const auto s = identify_fusion_layers(acc, baseline, delta, window);
    EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
    for (auto l : s) EXPECT_LT(acc[l], delta * baseline);
    // A smaller delta can only shrink the set.
    const auto tight = identify_fusion_layers(acc, baseline, 1e-9, window);
    for (auto l : tight) EXPECT_LT(acc[l], 1e-9 * baseline);

    const auto r = identify_review_layer(acc, baseline, s, delta);
    if (r) {
      if (!s.empty()) {
        EXPECT_GT(*r, s.back() + 1);
      }
      EXPECT_LT(acc[*r], delta * baseline);
      EXPECT_GE(acc[*r - 1], delta * baseline);
    }
  }
}

TEST(FusionLayers, DeltaOneTakesEveryShallowDrop) {
  const Vec acc{0.90, 0.96, 0.91, 0.96, 0.96, 0.96, 0.96};
  EXPECT_EQ(identify_fusion_layers(acc, 0.96, 1.0, 2), (std::vector<std::size_t>{0, 2}));
}

TEST(ReviewLayer, ConstructedSweep) {
  const Vec acc{0.05, 0.05, 0.90, 0.95, 0.95, 0.10, 0.92};
  const std::vector<std::size_t> s{0, 1};
  EXPECT_EQ(identify_review_layer(acc, 0.96, s, 0.5), 5u);
  const Vec recovering{0.05, 0.05, 0.50, 0.80, 0.90, 0.95, 0.96};
  EXPECT_FALSE(identify_review_layer(recovering, 0.96, s, 0.5).has_value());
}

TEST(ReviewLayer, MustSitPastFusionPlusOne) {
  // Layer 3 drops right after max(S) + 1 = 3 is excluded; layer 5 qualifies.
  const Vec acc{0.9, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9};
  EXPECT_EQ(identify_review_layer(acc, 0.96, {2}, 0.5), 5u);
}

TEST(FusionReport, TextRoundTrip) {
  const FusionReport r = build_fusion_report(kReferenceSweep, kReferenceBaseline, FusionRule{},
                                             0.0, 0.0);
  const std::string text = format_fusion_report(r);
  EXPECT_EQ(parse_fusion_report(text), r);
  EXPECT_NE(text.find("fusion_layers = 2,4,8,11,12,13"), std::string::npos);
  EXPECT_NE(text.find("review_layer = 29"), std::string::npos);
  EXPECT_NE(text.find("post_integrated_layer = 28"), std::string::npos);

  FusionReport none = r;
  none.review_layer.reset();
  none.post_integrated_layer.reset();
  none.fusion_layers.clear();
  EXPECT_EQ(parse_fusion_report(format_fusion_report(none)), none);
}

TEST(FusionReport, FileRoundTripAndErrors) {
  const auto path = std::filesystem::temp_directory_path() /
                    ("vfuse_report_" + std::to_string(::getpid()) + ".txt");
  const FusionReport r = build_fusion_report(kReferenceSweep, kReferenceBaseline, FusionRule{});
  write_fusion_report(r, path.string());
  EXPECT_EQ(read_fusion_report(path.string()), r);
  std::filesystem::remove(path);
  EXPECT_THROW(read_fusion_report(path.string()), UsageError);
  EXPECT_THROW(parse_fusion_report("n_layers = 3\n"), UsageError);
  EXPECT_THROW(parse_fusion_report("garbage\n"), UsageError);
  std::string bad = format_fusion_report(r);
  bad.replace(bad.find("n_layers = 32"), 13, "n_layers = x");
  EXPECT_THROW(parse_fusion_report(bad), UsageError);
}

class SweepTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    model_ = new Model(init_model(testing::tiny_config()));
    spec_ = testing::tiny_task();
    eval_ = generate_dataset(spec_, 32).eval;
  }
  static void TearDownTestSuite() { delete model_; }
  static Model* model_;
  static TaskSpec spec_;
  static std::vector<SyntheticSample> eval_;
};
Model* SweepTest::model_ = nullptr;
TaskSpec SweepTest::spec_;
std::vector<SyntheticSample> SweepTest::eval_;

TEST_F(SweepTest, ScaleOneRowsEqualBaseline) {
  const Sweep s = layer_mask_sweep(*model_, spec_, eval_, 1.0);
  ASSERT_EQ(s.layers.size(), model_->config.n_layers);
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    EXPECT_EQ(s.layers[l].layer, l);
    EXPECT_EQ(s.layers[l].accuracy, s.baseline.accuracy);
    EXPECT_GT(s.layers[l].mean_latency, 0.0);
  }
  EXPECT_FALSE(s.baseline.layer.has_value());
}

TEST_F(SweepTest, AccuracyColumnsDeterministic) {
  const Sweep a = layer_mask_sweep(*model_, spec_, eval_, 0.0);
  const Sweep b = layer_mask_sweep(*model_, spec_, eval_, 0.0);
  EXPECT_EQ(a.layer_accuracy(), b.layer_accuracy());
  EXPECT_EQ(a.baseline.accuracy, b.baseline.accuracy);
}

TEST_F(SweepTest, Errors) {
  SweepOptions o;
  o.latency_repeats = 2;
  EXPECT_THROW(layer_mask_sweep(*model_, spec_, eval_, 0.0, o), UsageError);
  EXPECT_THROW(layer_mask_sweep(*model_, spec_, {}, 0.0), UsageError);
  EXPECT_THROW(layer_mask_sweep(*model_, spec_, eval_, -1.0), UsageError);
}

TEST_F(SweepTest, UntrainedBaselineIsInapplicable) {
  Sweep s = layer_mask_sweep(*model_, spec_, eval_, 0.0);
  s.baseline.accuracy = s.chance_level;
  EXPECT_THROW(build_fusion_report(s, FusionRule{}), MethodInapplicableError);
}

TEST_F(SweepTest, DistanceCurve) {
  const DistanceCurve c = distance_to_final_curve(*model_, spec_, eval_);
  ASSERT_EQ(c.mean_distance.size(), 2u);
  EXPECT_EQ(c.mean_distance.back(), 0.0);
  for (double v : c.mean_distance) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(c.used, eval_.size());

  const Model deep = init_model(ModelConfig{});
  const auto eval = generate_dataset(TaskSpec{}, 64).eval;
  const std::vector<SyntheticSample> few(eval.begin(), eval.begin() + 50);
  const DistanceCurve d = distance_to_final_curve(deep, TaskSpec{}, few);
  ASSERT_EQ(d.mean_distance.size(), 6u);
  EXPECT_EQ(d.mean_distance[5], 0.0);
  EXPECT_EQ(distance_rank(d, 5, 6), 0u);
  EXPECT_THROW(distance_rank(d, 6, 6), UsageError);
}

}  // namespace
}  // namespace vfuse
