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

// Synthetic grid-VQA: a G x G grid of colored cells, a query naming one cell,
// and the answer is that cell's color.
//
// Vocabulary layout:
//   [0, n_colors)                 color tokens (the only valid answers)
//   [n_colors, n_colors + G*G)    position tokens, one per cell
//   n_colors + G*G                separator
// Sequence layout: [image tokens (G*G)] [separator] [query].

#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vfuse/errors.hpp"
#include "vfuse/model.hpp"
#include "vfuse/numerics.hpp"

namespace vfuse {

struct TaskSpec {
  std::size_t grid_side = 4;
  std::size_t n_colors = 8;
  std::size_t n_train = 5000;
  std::size_t n_eval = 1000;
  std::uint64_t seed = 7;

  std::size_t cells() const { return grid_side * grid_side; }
  std::size_t required_vocab() const { return n_colors + cells() + 1; }
  std::size_t sequence_length() const { return cells() + 2; }

  std::int32_t color_token(std::size_t color) const {
    return static_cast<std::int32_t>(color);
  }
  std::int32_t position_token(std::size_t cell) const {
    return static_cast<std::int32_t>(n_colors + cell);
  }
  std::int32_t separator_token() const {
    return static_cast<std::int32_t>(n_colors + cells());
  }

  void validate(std::size_t vocab_size) const {
    if (grid_side < 2) throw UsageError("task.grid_side must be >= 2");
    if (n_colors < 2) throw UsageError("task.n_colors must be >= 2");
    if (required_vocab() > vocab_size) {
      throw UsageError("task needs " + std::to_string(required_vocab()) +
                       " tokens but model.vocab_size is " +
                       std::to_string(vocab_size));
    }
  }

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TaskSpec, grid_side, n_colors, n_train, n_eval,
                                   seed)

struct SyntheticSample {
  std::vector<std::int32_t> image_tokens;  // row-major grid of color tokens
  std::int32_t query_token = 0;
  std::int32_t answer_token = 0;
  std::vector<bool> relevance;  // true only at the queried cell

  TokenSequence to_sequence(std::int32_t separator) const {
    TokenSequence seq;
    seq.tokens = image_tokens;
    seq.tokens.push_back(separator);
    seq.tokens.push_back(query_token);
    seq.image_span = {0, image_tokens.size()};
    return seq;
  }

  friend bool operator==(const SyntheticSample&, const SyntheticSample&) = default;
};

struct Dataset {
  TaskSpec spec;
  std::vector<SyntheticSample> train;
  std::vector<SyntheticSample> eval;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  SplitMix64 m(seed ^ (0xA0761D6478BD642Full * (stream + 1)));
  return m.next();
}

inline std::size_t uniform_index(SplitMix64& rng, std::size_t n) {
  // Lemire-style rejection keeps the draw exactly uniform.
  const std::uint64_t bound = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = rng.next();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

inline std::vector<SyntheticSample> draw_samples(const TaskSpec& spec,
                                                 std::size_t count,
                                                 std::uint64_t stream_seed) {
  SplitMix64 rng(stream_seed);
  std::vector<SyntheticSample> out(count);
  for (auto& s : out) {
    s.image_tokens.resize(spec.cells());
    for (auto& t : s.image_tokens) {
      t = spec.color_token(uniform_index(rng, spec.n_colors));
    }
    const std::size_t cell = uniform_index(rng, spec.cells());
    s.query_token = spec.position_token(cell);
    s.answer_token = s.image_tokens[cell];
    s.relevance.assign(spec.cells(), false);
    s.relevance[cell] = true;
  }
  return out;
}

}  // namespace detail

inline Dataset generate_dataset(const TaskSpec& spec, std::size_t vocab_size) {
  spec.validate(vocab_size);
  Dataset ds{spec, {}, {}};
  ds.train = detail::draw_samples(spec, spec.n_train, detail::mix_seed(spec.seed, 0));
  ds.eval = detail::draw_samples(spec, spec.n_eval, detail::mix_seed(spec.seed, 1));
  return ds;
}

using Predictor = std::function<std::int32_t(const SyntheticSample&)>;

inline double accuracy(const std::vector<SyntheticSample>& samples,
                       const Predictor& predictor) {
  if (samples.empty()) throw UsageError("accuracy: empty sample list");
  std::size_t hits = 0;
  for (const auto& s : samples) hits += predictor(s) == s.answer_token ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

inline double accuracy(const Model& model, const TaskSpec& spec,
                       const std::vector<SyntheticSample>& samples,
                       const std::vector<InterventionSpec>& interventions = {}) {
  const std::int32_t sep = spec.separator_token();
  return accuracy(samples, [&](const SyntheticSample& s) {
    return predict(model, s.to_sequence(sep), interventions);
  });
}

// Fraction of attention mass that lands on the relevant cells.
inline double localization_score(std::span<const double> ia,
                                 const std::vector<bool>& relevance) {
  if (ia.size() != relevance.size()) {
    throw UsageError("localization_score: length mismatch");
  }
  double total = 0.0, hit = 0.0;
  for (std::size_t j = 0; j < ia.size(); ++j) {
    if (!(ia[j] >= 0.0)) throw UsageError("localization_score: negative entry");
    total += ia[j];
    if (relevance[j]) hit += ia[j];
  }
  if (!(total > 0.0)) throw DegenerateInputError("localization_score: all-zero input");
  return hit / total;
}

// One JSON object per line: image_tokens, query, answer, relevance (0/1).
inline void write_samples(const std::vector<SyntheticSample>& samples,
                          const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw UsageError("cannot write dataset: " + path);
  for (const auto& s : samples) {
    std::vector<int> rel(s.relevance.begin(), s.relevance.end());
    nlohmann::json j = {{"image_tokens", s.image_tokens},
                        {"query", s.query_token},
                        {"answer", s.answer_token},
                        {"relevance", rel}};
    os << j.dump() << '\n';
  }
}

inline std::vector<SyntheticSample> read_samples(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open dataset: " + path);
  std::vector<SyntheticSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SyntheticSample s;
      s.image_tokens = j.at("image_tokens").get<std::vector<std::int32_t>>();
      s.query_token = j.at("query").get<std::int32_t>();
      s.answer_token = j.at("answer").get<std::int32_t>();
      for (int r : j.at("relevance").get<std::vector<int>>()) s.relevance.push_back(r != 0);
      if (s.relevance.size() != s.image_tokens.size()) {
        throw UsageError("relevance length differs from image length");
      }
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw UsageError("dataset " + path + " line " + std::to_string(lineno) + ": " +
                       e.what());
    }
  }
  return out;
}

}  // namespace vfuse
