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

// Layer-wise visual masking sweeps and the rules that read fusion layers,
// the review layer and the post-integrated layer off a sweep.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vfuse/errors.hpp"
#include "vfuse/model.hpp"
#include "vfuse/numerics.hpp"
#include "vfuse/tasks.hpp"

namespace vfuse {

struct SweepRecord {
  std::optional<std::size_t> layer;  // nullopt for the unmasked baseline
  double accuracy = 0.0;
  double mean_latency = 0.0;  // seconds per sample

  double inv_latency() const { return 1.0 / mean_latency; }
};

struct Sweep {
  SweepRecord baseline;
  std::vector<SweepRecord> layers;  // one per layer, ascending
  double mask_scale = 0.0;
  double chance_level = 0.0;
  bool near_chance_baseline = false;

  std::vector<double> layer_accuracy() const {
    std::vector<double> out;
    out.reserve(layers.size());
    for (const auto& r : layers) out.push_back(r.accuracy);
    return out;
  }
};

struct SweepOptions {
  std::size_t latency_repeats = 3;
};

// Band around chance inside which a baseline is treated as "at chance".
inline constexpr double kChanceBand = 0.04;

namespace detail {

struct TimedAccuracy {
  double accuracy = 0.0;
  double mean_latency = 0.0;
};

// Accuracy from the first pass; latency is the median batch time over all
// repeats divided by the batch size.
inline TimedAccuracy timed_accuracy(const Model& model, const TaskSpec& spec,
                                    const std::vector<SyntheticSample>& samples,
                                    const std::vector<InterventionSpec>& iv,
                                    std::size_t repeats) {
  const std::int32_t sep = spec.separator_token();
  std::vector<double> times;
  TimedAccuracy out;
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    std::size_t hits = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& s : samples) {
      hits += predict(model, s.to_sequence(sep), iv) == s.answer_token ? 1 : 0;
    }
    times.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    if (rep == 0) {
      out.accuracy = static_cast<double>(hits) / static_cast<double>(samples.size());
    }
  }
  std::sort(times.begin(), times.end());
  const double median = times[times.size() / 2];
  out.mean_latency =
      std::max(median, 1e-12) / static_cast<double>(samples.size());
  return out;
}

}  // namespace detail

inline std::vector<std::size_t> all_image_positions(const TaskSpec& spec) {
  std::vector<std::size_t> pos(spec.cells());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  return pos;
}

// Masks every image token at one layer at a time (scale lambda) and records
// accuracy and latency, plus an unmasked baseline.
inline Sweep layer_mask_sweep(const Model& model, const TaskSpec& spec,
                              const std::vector<SyntheticSample>& eval, double lambda,
                              const SweepOptions& options = {}) {
  if (eval.empty()) throw UsageError("layer_mask_sweep: empty eval set");
  if (!(lambda >= 0.0)) throw UsageError("layer_mask_sweep: lambda must be >= 0");
  if (options.latency_repeats < 3) {
    throw UsageError("layer_mask_sweep: latency_repeats must be >= 3");
  }
  Sweep sweep;
  sweep.mask_scale = lambda;
  sweep.chance_level = 1.0 / static_cast<double>(spec.n_colors);
  const auto base = detail::timed_accuracy(model, spec, eval, {}, options.latency_repeats);
  sweep.baseline = {std::nullopt, base.accuracy, base.mean_latency};
  sweep.near_chance_baseline = base.accuracy <= sweep.chance_level + kChanceBand;

  const auto image = all_image_positions(spec);
  for (std::size_t layer = 0; layer < model.config.n_layers; ++layer) {
    const std::vector<InterventionSpec> iv{{layer, image, lambda}};
    const auto r = detail::timed_accuracy(model, spec, eval, iv, options.latency_repeats);
    sweep.layers.push_back({layer, r.accuracy, r.mean_latency});
  }
  return sweep;
}

// Consecutive above-threshold layers that end the shallow fusion regime.
inline std::size_t default_recovery_window(std::size_t n_layers) {
  return std::max<std::size_t>(2, n_layers / 8);
}

struct FusionRule {
  double delta = 0.5;
  double delta_review = 0.5;
  std::size_t recovery_window = 0;  // 0 picks default_recovery_window
};

// Layers whose masked accuracy falls below delta * baseline, up to the first
// layer from which accuracy stays at or above that line for
// `recovery_window` consecutive layers.
inline std::vector<std::size_t> identify_fusion_layers(
    std::span<const double> accuracy, double baseline, double delta,
    std::size_t recovery_window, double chance_level = 0.0) {
  if (!(delta > 0.0 && delta <= 1.0)) {
    throw UsageError("identify_fusion_layers: delta must lie in (0, 1]");
  }
  if (recovery_window == 0) throw UsageError("identify_fusion_layers: window must be >= 1");
  if (baseline <= chance_level + kChanceBand) {
    throw MethodInapplicableError(
        "identify_fusion_layers: baseline accuracy is at chance level");
  }
  const double thr = delta * baseline;
  const std::size_t n = accuracy.size();
  std::size_t first = n;
  for (std::size_t l = 0; l < n; ++l) {
    if (accuracy[l] < thr) {
      first = l;
      break;
    }
  }
  std::size_t end = n;
  for (std::size_t l = first + 1; l + recovery_window <= n; ++l) {
    bool recovered = true;
    for (std::size_t j = l; j < l + recovery_window; ++j) {
      recovered = recovered && accuracy[j] >= thr;
    }
    if (recovered) {
      end = l;
      break;
    }
  }
  std::vector<std::size_t> fusion;
  for (std::size_t l = first; l < end; ++l) {
    if (accuracy[l] < thr) fusion.push_back(l);
  }
  return fusion;
}

// Smallest layer past max(S) + 1 where accuracy drops below
// delta_review * baseline right after a layer that was above it.
inline std::optional<std::size_t> identify_review_layer(
    std::span<const double> accuracy, double baseline,
    const std::vector<std::size_t>& fusion, double delta_review) {
  if (!(delta_review > 0.0 && delta_review <= 1.0)) {
    throw UsageError("identify_review_layer: delta_review must lie in (0, 1]");
  }
  const double thr = delta_review * baseline;
  const std::size_t start = fusion.empty() ? 1 : fusion.back() + 2;
  for (std::size_t l = std::max<std::size_t>(start, 1); l < accuracy.size(); ++l) {
    if (accuracy[l] < thr && accuracy[l - 1] >= thr) return l;
  }
  return std::nullopt;
}

struct FusionReport {
  std::size_t n_layers = 0;
  double baseline_accuracy = 0.0;
  double mask_scale = 0.0;
  double delta = 0.5;
  double delta_review = 0.5;
  std::size_t recovery_window = 2;
  std::vector<std::size_t> fusion_layers;
  std::optional<std::size_t> review_layer;
  std::optional<std::size_t> post_integrated_layer;

  friend bool operator==(const FusionReport&, const FusionReport&) = default;
};

inline FusionReport build_fusion_report(std::span<const double> accuracy, double baseline,
                                        const FusionRule& rule,
                                        double chance_level = 0.0,
                                        double mask_scale = 0.0) {
  FusionReport rep;
  rep.n_layers = accuracy.size();
  rep.baseline_accuracy = baseline;
  rep.mask_scale = mask_scale;
  rep.delta = rule.delta;
  rep.delta_review = rule.delta_review;
  rep.recovery_window = rule.recovery_window == 0
                            ? default_recovery_window(accuracy.size())
                            : rule.recovery_window;
  rep.fusion_layers = identify_fusion_layers(accuracy, baseline, rule.delta,
                                             rep.recovery_window, chance_level);
  rep.review_layer =
      identify_review_layer(accuracy, baseline, rep.fusion_layers, rule.delta_review);
  if (rep.review_layer) rep.post_integrated_layer = *rep.review_layer - 1;
  return rep;
}

inline FusionReport build_fusion_report(const Sweep& sweep, const FusionRule& rule) {
  const auto acc = sweep.layer_accuracy();
  return build_fusion_report(acc, sweep.baseline.accuracy, rule, sweep.chance_level,
                             sweep.mask_scale);
}

namespace detail {

inline std::string join_layers(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

// "key = value" lines; absent layers are written as "none".
inline std::string format_fusion_report(const FusionReport& r) {
  auto opt = [](const std::optional<std::size_t>& v) {
    return v ? std::to_string(*v) : std::string("none");
  };
  std::ostringstream os;
  os << "# vfuse fusion report\n"
     << "n_layers = " << r.n_layers << '\n'
     << "baseline_accuracy = " << detail::format_double(r.baseline_accuracy) << '\n'
     << "mask_scale = " << detail::format_double(r.mask_scale) << '\n'
     << "delta = " << detail::format_double(r.delta) << '\n'
     << "delta_review = " << detail::format_double(r.delta_review) << '\n'
     << "recovery_window = " << r.recovery_window << '\n'
     << "fusion_layers = " << detail::join_layers(r.fusion_layers) << '\n'
     << "review_layer = " << opt(r.review_layer) << '\n'
     << "post_integrated_layer = " << opt(r.post_integrated_layer) << '\n';
  return os.str();
}

inline FusionReport parse_fusion_report(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("fusion report: bad line '" + line + "'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw UsageError("fusion report: missing key '" + key + "'");
    return it->second;
  };
  auto layer = [&](const std::string& key) -> std::optional<std::size_t> {
    const std::string& v = get(key);
    if (v == "none") return std::nullopt;
    return static_cast<std::size_t>(std::stoull(v));
  };
  try {
    FusionReport r;
    r.n_layers = std::stoull(get("n_layers"));
    r.baseline_accuracy = std::stod(get("baseline_accuracy"));
    r.mask_scale = std::stod(get("mask_scale"));
    r.delta = std::stod(get("delta"));
    r.delta_review = std::stod(get("delta_review"));
    r.recovery_window = std::stoull(get("recovery_window"));
    std::istringstream ls(get("fusion_layers"));
    std::string tok;
    while (std::getline(ls, tok, ',')) {
      if (!tok.empty()) r.fusion_layers.push_back(std::stoull(tok));
    }
    r.review_layer = layer("review_layer");
    r.post_integrated_layer = layer("post_integrated_layer");
    return r;
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const UsageError*>(&e)) throw;
    throw UsageError(std::string("fusion report: bad value: ") + e.what());
  }
}

inline void write_fusion_report(const FusionReport& r, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw UsageError("cannot write fusion report: " + path);
  os << format_fusion_report(r);
}

inline FusionReport read_fusion_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open fusion report: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_fusion_report(ss.str());
}

struct DistanceCurve {
  std::vector<double> mean_distance;  // per layer, to the final layer
  std::size_t used = 0;
  std::size_t skipped = 0;
};

// Mean Hellinger distance between each layer's image-attention distribution
// and the final layer's.
inline DistanceCurve distance_to_final_curve(const Model& model, const TaskSpec& spec,
                                             const std::vector<SyntheticSample>& eval) {
  if (eval.empty()) throw UsageError("distance_to_final_curve: empty eval set");
  const std::size_t n_layers = model.config.n_layers;
  DistanceCurve curve;
  curve.mean_distance.assign(n_layers, 0.0);
  const std::int32_t sep = spec.separator_token();
  std::vector<double> row(n_layers);
  for (const auto& s : eval) {
    const TokenSequence seq = s.to_sequence(sep);
    const ForwardTrace trace = forward(model, seq, {}, true);
    try {
      const ProbVec final_layer = image_attention(trace, n_layers - 1, seq);
      for (std::size_t l = 0; l < n_layers; ++l) {
        row[l] = hellinger(image_attention(trace, l, seq), final_layer);
      }
    } catch (const DegenerateInputError&) {
      ++curve.skipped;
      continue;
    }
    for (std::size_t l = 0; l < n_layers; ++l) curve.mean_distance[l] += row[l];
    ++curve.used;
  }
  if (10 * curve.skipped > eval.size()) {
    throw DegenerateInputError("distance_to_final_curve: " + std::to_string(curve.skipped) +
                               " of " + std::to_string(eval.size()) +
                               " samples had degenerate attention");
  }
  for (double& v : curve.mean_distance) v /= static_cast<double>(curve.used);
  return curve;
}

// Rank (0 = closest to the final layer) of `layer` among layers [0, below).
inline std::size_t distance_rank(const DistanceCurve& curve, std::size_t layer,
                                 std::size_t below) {
  if (layer >= below || below > curve.mean_distance.size()) {
    throw UsageError("distance_rank: layer outside [0, below)");
  }
  std::size_t rank = 0;
  for (std::size_t l = 0; l < below; ++l) {
    if (curve.mean_distance[l] < curve.mean_distance[layer]) ++rank;
  }
  return rank;
}

}  // namespace vfuse
