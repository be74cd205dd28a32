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

// Contrastive attention and review-layer soft masking.
//
// For each input:
//   1. take the image-attention distribution of the post-integrated layer k
//      and of every candidate layer in C (all below k);
//   2. pick the candidate i* with the largest Hellinger distance to layer k;
//   3. IA = |A(k) - A(i*)| elementwise;
//   4. before the review layer r = k + 1 runs, scale the hidden states of the
//      floor(rho * d) image tokens with the lowest IA by lambda.
// All of this happens inside a single forward pass because every attention
// map it needs is produced before layer r.

#pragma once

#include <algorithm>
#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vfuse/errors.hpp"
#include "vfuse/model.hpp"
#include "vfuse/numerics.hpp"
#include "vfuse/probe.hpp"
#include "vfuse/tasks.hpp"

namespace vfuse {

enum class StrategyKind { kAll, kShallow, kDeep, kFusion };

struct CandidateStrategy {
  StrategyKind kind = StrategyKind::kFusion;
  // Shallow/Deep split; nullopt means floor(n_layers / 2).
  std::optional<std::size_t> boundary;
  std::vector<std::size_t> fusion_set;  // used by kFusion

  static CandidateStrategy all() { return {StrategyKind::kAll, std::nullopt, {}}; }
  static CandidateStrategy shallow(std::optional<std::size_t> b = std::nullopt) {
    return {StrategyKind::kShallow, b, {}};
  }
  static CandidateStrategy deep(std::optional<std::size_t> b = std::nullopt) {
    return {StrategyKind::kDeep, b, {}};
  }
  static CandidateStrategy fusion(std::vector<std::size_t> s) {
    return {StrategyKind::kFusion, std::nullopt, std::move(s)};
  }
};

inline std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::kAll: return "all";
    case StrategyKind::kShallow: return "shallow";
    case StrategyKind::kDeep: return "deep";
    case StrategyKind::kFusion: return "fusion";
  }
  return "?";
}

inline StrategyKind parse_strategy(const std::string& s) {
  if (s == "all") return StrategyKind::kAll;
  if (s == "shallow") return StrategyKind::kShallow;
  if (s == "deep") return StrategyKind::kDeep;
  if (s == "fusion") return StrategyKind::kFusion;
  throw UsageError("unknown strategy '" + s + "' (expected all|shallow|deep|fusion)");
}

// All -> [0, k); Shallow -> [0, b]; Deep -> (b, k); Fusion -> S. Every
// result is clipped to [0, k).
inline std::vector<std::size_t> candidate_set(const CandidateStrategy& strategy,
                                              std::size_t n_layers, std::size_t k) {
  if (k >= n_layers) {
    throw UsageError("candidate_set: post-integrated layer " + std::to_string(k) +
                     " >= n_layers " + std::to_string(n_layers));
  }
  const std::size_t b = strategy.boundary.value_or(n_layers / 2);
  std::vector<std::size_t> out;
  switch (strategy.kind) {
    case StrategyKind::kAll:
      for (std::size_t l = 0; l < k; ++l) out.push_back(l);
      break;
    case StrategyKind::kShallow:
      for (std::size_t l = 0; l <= b && l < k; ++l) out.push_back(l);
      break;
    case StrategyKind::kDeep:
      for (std::size_t l = b + 1; l < k; ++l) out.push_back(l);
      break;
    case StrategyKind::kFusion: {
      std::vector<std::size_t> s = strategy.fusion_set;
      std::sort(s.begin(), s.end());
      s.erase(std::unique(s.begin(), s.end()), s.end());
      for (std::size_t l : s) {
        if (l < k) out.push_back(l);
      }
      break;
    }
  }
  if (out.empty()) {
    throw UsageError("candidate_set: strategy '" + to_string(strategy.kind) +
                     "' leaves no candidate below layer " + std::to_string(k));
  }
  return out;
}

struct PreIntegratedChoice {
  std::size_t layer = 0;
  std::map<std::size_t, double> distances;  // candidate -> H(attn[i], attn[k])
};

// argmax over C of Hellinger distance to layer k; ties go to the smaller layer.
inline PreIntegratedChoice select_pre_integrated(
    const std::map<std::size_t, ProbVec>& attn_by_layer, std::size_t k,
    const std::vector<std::size_t>& candidates) {
  if (candidates.empty()) throw UsageError("select_pre_integrated: empty candidate set");
  const auto post = attn_by_layer.find(k);
  if (post == attn_by_layer.end()) {
    throw UsageError("select_pre_integrated: missing attention for layer " +
                     std::to_string(k));
  }
  std::vector<std::size_t> order = candidates;
  std::sort(order.begin(), order.end());
  PreIntegratedChoice choice;
  double best = -1.0;
  for (std::size_t i : order) {
    const auto it = attn_by_layer.find(i);
    if (it == attn_by_layer.end()) {
      throw UsageError("select_pre_integrated: missing attention for layer " +
                       std::to_string(i));
    }
    const double h = hellinger(it->second, post->second);
    choice.distances[i] = h;
    if (h > best) {
      best = h;
      choice.layer = i;
    }
  }
  return choice;
}

inline Vec contrastive_attention(const ProbVec& a_post, const ProbVec& a_pre) {
  if (a_post.size() != a_pre.size()) {
    throw UsageError("contrastive_attention: length mismatch");
  }
  Vec ia(a_post.size());
  for (std::size_t j = 0; j < ia.size(); ++j) ia[j] = std::abs(a_post[j] - a_pre[j]);
  return ia;
}

// Soft mask for the floor(rho * d) lowest-IA image tokens, applied at `review`.
inline InterventionSpec build_review_mask(std::span<const double> ia, double rho,
                                          double lambda, ImageSpan span,
                                          std::size_t review) {
  if (ia.size() != span.size()) {
    throw UsageError("build_review_mask: IA length differs from image span length");
  }
  if (!(lambda >= 0.0)) throw UsageError("build_review_mask: lambda must be >= 0");
  InterventionSpec iv;
  iv.layer = review;
  iv.scale = lambda;
  for (std::size_t j : mask_indices_by_quantile(ia, rho)) {
    iv.token_indices.push_back(span.begin + j);
  }
  return iv;
}

// Resolved layers for one run of the method.
struct ReviewPlan {
  std::size_t review = 0;
  std::size_t post = 0;
  StrategyKind strategy = StrategyKind::kFusion;
  std::vector<std::size_t> candidates;
};

inline ReviewPlan make_review_plan(const FusionReport& report, std::size_t n_layers,
                                   CandidateStrategy strategy) {
  if (!report.review_layer) {
    throw MethodInapplicableError(
        "no review layer in the fusion report; contrastive masking needs one");
  }
  const std::size_t r = *report.review_layer;
  if (r == 0 || r >= n_layers) {
    throw UsageError("review layer " + std::to_string(r) + " invalid for a " +
                     std::to_string(n_layers) + "-layer model");
  }
  if (report.post_integrated_layer && *report.post_integrated_layer != r - 1) {
    throw UsageError("fusion report: post-integrated layer must equal review - 1");
  }
  if (strategy.kind == StrategyKind::kFusion && strategy.fusion_set.empty()) {
    strategy.fusion_set = report.fusion_layers;
  }
  ReviewPlan plan;
  plan.review = r;
  plan.post = r - 1;
  plan.strategy = strategy.kind;
  plan.candidates = candidate_set(strategy, n_layers, plan.post);
  return plan;
}

struct ContrastiveResult {
  Vec ia;
  std::vector<std::size_t> masked_indices;  // image-relative
  std::int32_t prediction = 0;
  Vec logits;
  PreIntegratedChoice selection;
  ProbVec post_attention;
  ProbVec pre_attention;
  double wall_time = 0.0;
};

namespace detail {

struct MaskDecision {
  PreIntegratedChoice selection;
  ProbVec post, pre;
  Vec ia;
  InterventionSpec mask;
};

inline MaskDecision decide_mask(const ForwardTrace& trace, const TokenSequence& seq,
                                const ReviewPlan& plan, double rho, double lambda) {
  std::map<std::size_t, ProbVec> attn;
  attn.emplace(plan.post, image_attention(trace, plan.post, seq));
  for (std::size_t c : plan.candidates) attn.emplace(c, image_attention(trace, c, seq));
  MaskDecision d;
  d.selection = select_pre_integrated(attn, plan.post, plan.candidates);
  d.post = attn.at(plan.post);
  d.pre = attn.at(d.selection.layer);
  d.ia = contrastive_attention(d.post, d.pre);
  d.mask = build_review_mask(d.ia, rho, lambda, seq.image_span, plan.review);
  return d;
}

inline void check_review_args(const Model& model, const ReviewPlan& plan, double rho) {
  if (plan.review >= model.config.n_layers || plan.post + 1 != plan.review) {
    throw UsageError("review plan inconsistent with model depth");
  }
  if (!(rho >= 0.0 && rho <= 1.0)) throw UsageError("rho must lie in [0, 1]");
}

inline ContrastiveResult to_result(MaskDecision&& d, ForwardTrace&& trace,
                                   const TokenSequence& seq) {
  ContrastiveResult res;
  res.ia = std::move(d.ia);
  for (std::size_t pos : d.mask.token_indices) {
    res.masked_indices.push_back(pos - seq.image_span.begin);
  }
  res.selection = std::move(d.selection);
  res.post_attention = std::move(d.post);
  res.pre_attention = std::move(d.pre);
  res.prediction = argmax_token(trace.logits);
  res.logits = std::move(trace.logits);
  res.wall_time = trace.wall_time;
  return res;
}

}  // namespace detail

// Single forward pass: the mask is decided from attention captured in layers
// below r and applied to the input of layer r.
inline ContrastiveResult contrastive_inference(const Model& model,
                                               const TokenSequence& seq,
                                               const ReviewPlan& plan, double rho,
                                               double lambda) {
  detail::check_review_args(model, plan, rho);
  std::optional<detail::MaskDecision> decision;
  ForwardOptions options;
  options.capture_attention = true;
  options.before_layer = [&](std::size_t layer, const ForwardTrace& partial,
                             std::vector<InterventionSpec>& extra) {
    if (layer != plan.review) return;
    decision = detail::decide_mask(partial, seq, plan, rho, lambda);
    extra.push_back(decision->mask);
  };
  ForwardTrace trace = forward(model, seq, {}, options);
  return detail::to_result(std::move(*decision), std::move(trace), seq);
}

// Reference path: a capture-only pass, then a second pass with the mask.
inline ContrastiveResult contrastive_inference_two_pass(const Model& model,
                                                        const TokenSequence& seq,
                                                        const ReviewPlan& plan,
                                                        double rho, double lambda) {
  detail::check_review_args(model, plan, rho);
  const ForwardTrace first = forward(model, seq, {}, true);
  detail::MaskDecision d = detail::decide_mask(first, seq, plan, rho, lambda);
  ForwardTrace second = forward(model, seq, {d.mask}, false);
  second.wall_time += first.wall_time;
  return detail::to_result(std::move(d), std::move(second), seq);
}

struct ContrastiveEval {
  double accuracy = 0.0;
  double plain_accuracy = 0.0;
  double mean_latency = 0.0;
  // Mean localization of IA, post-layer and pre-layer attention over samples
  // where the vector is non-degenerate.
  double localization_ia = 0.0;
  double localization_post = 0.0;
  double localization_pre = 0.0;
  std::size_t degenerate_ia = 0;
  std::map<std::size_t, std::size_t> selection_histogram;
  std::vector<ContrastiveResult> per_sample;  // filled when requested
};

inline ContrastiveEval evaluate_contrastive(const Model& model, const TaskSpec& spec,
                                            const std::vector<SyntheticSample>& samples,
                                            const ReviewPlan& plan, double rho,
                                            double lambda, bool keep_per_sample = false) {
  if (samples.empty()) throw UsageError("evaluate_contrastive: empty sample list");
  const std::int32_t sep = spec.separator_token();
  ContrastiveEval ev;
  for (std::size_t c : plan.candidates) ev.selection_histogram[c] = 0;
  std::size_t hits = 0, plain_hits = 0, ia_used = 0;
  double total_time = 0.0;
  for (const auto& s : samples) {
    const TokenSequence seq = s.to_sequence(sep);
    ContrastiveResult r = contrastive_inference(model, seq, plan, rho, lambda);
    total_time += r.wall_time;
    hits += r.prediction == s.answer_token ? 1 : 0;
    plain_hits += predict(model, seq) == s.answer_token ? 1 : 0;
    ++ev.selection_histogram[r.selection.layer];
    ev.localization_post += localization_score(r.post_attention.values(), s.relevance);
    ev.localization_pre += localization_score(r.pre_attention.values(), s.relevance);
    try {
      ev.localization_ia += localization_score(r.ia, s.relevance);
      ++ia_used;
    } catch (const DegenerateInputError&) {
      ++ev.degenerate_ia;
    }
    if (keep_per_sample) ev.per_sample.push_back(std::move(r));
  }
  const double n = static_cast<double>(samples.size());
  ev.accuracy = static_cast<double>(hits) / n;
  ev.plain_accuracy = static_cast<double>(plain_hits) / n;
  ev.mean_latency = total_time / n;
  ev.localization_post /= n;
  ev.localization_pre /= n;
  if (ia_used) ev.localization_ia /= static_cast<double>(ia_used);
  return ev;
}

}  // namespace vfuse
