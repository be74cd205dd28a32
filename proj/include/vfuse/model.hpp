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

// Toy decoder-only transformer with a designated image-token span.
//
// Pre-norm blocks, learned absolute positions, GELU MLP of width 4 * d_model,
// untied unembedding. Every forward can capture per-layer, per-head attention
// and apply interventions that rescale hidden states of chosen positions at
// the input of a chosen layer (before that layer's attention).

#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vfuse/errors.hpp"
#include "vfuse/numerics.hpp"

namespace vfuse {

struct ModelConfig {
  std::size_t n_layers = 6;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 18;
  std::uint64_t seed = 1234;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t d_ff() const { return 4 * d_model; }

  void validate() const {
    if (n_layers == 0) throw UsageError("model.n_layers must be positive");
    if (n_heads == 0) throw UsageError("model.n_heads must be positive");
    if (d_model == 0) throw UsageError("model.d_model must be positive");
    if (vocab_size == 0) throw UsageError("model.vocab_size must be positive");
    if (max_seq_len == 0) throw UsageError("model.max_seq_len must be positive");
    if (d_model % n_heads != 0) {
      throw UsageError("model.d_model (" + std::to_string(d_model) +
                       ") must be divisible by model.n_heads (" +
                       std::to_string(n_heads) + ")");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, n_layers, n_heads, d_model,
                                   vocab_size, max_seq_len, seed)

// Half-open range of sequence positions holding image tokens.
struct ImageSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool contains(std::size_t pos) const { return pos >= begin && pos < end; }
};

struct TokenSequence {
  std::vector<std::int32_t> tokens;
  ImageSpan image_span;

  std::size_t size() const { return tokens.size(); }
  // Logits are always read at the last position.
  std::size_t answer_pos() const { return tokens.size() - 1; }
};

struct InterventionSpec {
  std::size_t layer = 0;
  std::vector<std::size_t> token_indices;  // sequence positions
  double scale = 0.0;
};

struct ForwardTrace {
  Vec logits;
  // attention[layer][head] is (seq x seq); empty when capture is off.
  std::vector<std::vector<Matrix>> attention;
  double wall_time = 0.0;  // seconds
};

struct LayerParams {
  Matrix ln1_gain, ln1_bias;
  Matrix w_qkv, b_qkv;  // d x 3d, columns [q | k | v], heads contiguous
  Matrix w_out, b_out;
  Matrix ln2_gain, ln2_bias;
  Matrix w_fc, b_fc;
  Matrix w_proj, b_proj;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

// All trainable tensors. The same layout doubles as a gradient buffer.
struct ParamSet {
  Matrix tok_embed;  // vocab x d
  Matrix pos_embed;  // max_seq_len x d
  std::vector<LayerParams> layers;
  Matrix lnf_gain, lnf_bias;
  Matrix w_unembed, b_unembed;  // d x vocab, 1 x vocab

  static ParamSet zeros(const ModelConfig& c) {
    const std::size_t d = c.d_model;
    ParamSet p;
    p.tok_embed = Matrix(c.vocab_size, d);
    p.pos_embed = Matrix(c.max_seq_len, d);
    p.layers.resize(c.n_layers);
    for (auto& l : p.layers) {
      l.ln1_gain = Matrix(1, d);
      l.ln1_bias = Matrix(1, d);
      l.w_qkv = Matrix(d, 3 * d);
      l.b_qkv = Matrix(1, 3 * d);
      l.w_out = Matrix(d, d);
      l.b_out = Matrix(1, d);
      l.ln2_gain = Matrix(1, d);
      l.ln2_bias = Matrix(1, d);
      l.w_fc = Matrix(d, c.d_ff());
      l.b_fc = Matrix(1, c.d_ff());
      l.w_proj = Matrix(c.d_ff(), d);
      l.b_proj = Matrix(1, d);
    }
    p.lnf_gain = Matrix(1, d);
    p.lnf_bias = Matrix(1, d);
    p.w_unembed = Matrix(d, c.vocab_size);
    p.b_unembed = Matrix(1, c.vocab_size);
    return p;
  }

  // Visits (name, tensor) in a fixed order; names are checkpoint keys.
  template <typename Self, typename F>
  static void visit_impl(Self& self, F&& fn) {
    fn(std::string("tok_embed"), self.tok_embed);
    fn(std::string("pos_embed"), self.pos_embed);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      fn(p + "ln1_gain", l.ln1_gain);
      fn(p + "ln1_bias", l.ln1_bias);
      fn(p + "w_qkv", l.w_qkv);
      fn(p + "b_qkv", l.b_qkv);
      fn(p + "w_out", l.w_out);
      fn(p + "b_out", l.b_out);
      fn(p + "ln2_gain", l.ln2_gain);
      fn(p + "ln2_bias", l.ln2_bias);
      fn(p + "w_fc", l.w_fc);
      fn(p + "b_fc", l.b_fc);
      fn(p + "w_proj", l.w_proj);
      fn(p + "b_proj", l.b_proj);
    }
    fn(std::string("lnf_gain"), self.lnf_gain);
    fn(std::string("lnf_bias"), self.lnf_bias);
    fn(std::string("w_unembed"), self.w_unembed);
    fn(std::string("b_unembed"), self.b_unembed);
  }
  template <typename F>
  void visit(F&& fn) { visit_impl(*this, std::forward<F>(fn)); }
  template <typename F>
  void visit(F&& fn) const { visit_impl(*this, std::forward<F>(fn)); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

struct Model {
  ModelConfig config;
  ParamSet params;
};

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

// splitmix64: portable, so weights do not depend on the standard library's
// distribution implementations.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::uint64_t state_;
};

inline void fill_uniform(Matrix& m, SplitMix64& rng, double bound) {
  for (double& v : m.data()) v = rng.uniform(-bound, bound);
}

// y = x W + b for every row of x.
inline void linear(const Matrix& x, const Matrix& w, const Matrix& b, Matrix& y) {
  const std::size_t n = x.rows(), in = x.cols(), out = w.cols();
  y = Matrix(n, out);
  for (std::size_t t = 0; t < n; ++t) {
    double* __restrict yr = y.row(t).data();
    const double* __restrict xr = x.row(t).data();
    std::copy_n(b.data().data(), out, yr);
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      const double* __restrict wr = w.row(i).data();
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wr[o];
    }
  }
}

struct LayerNormStats {
  Vec mean, rstd;
};

inline void layer_norm_rows(const Matrix& x, const Matrix& gain,
                            const Matrix& bias, Matrix& y,
                            LayerNormStats* stats) {
  const std::size_t n = x.rows(), d = x.cols();
  y = Matrix(n, d);
  if (stats) {
    stats->mean.assign(n, 0.0);
    stats->rstd.assign(n, 0.0);
  }
  const double* g = gain.data().data();
  const double* b = bias.data().data();
  for (std::size_t t = 0; t < n; ++t) {
    const double* xr = x.row(t).data();
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    double* yr = y.row(t).data();
    for (std::size_t i = 0; i < d; ++i) yr[i] = g[i] * (xr[i] - mean) * rstd + b[i];
    if (stats) {
      stats->mean[t] = mean;
      stats->rstd[t] = rstd;
    }
  }
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
  const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + th) +
         0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

// Activations kept for the backward pass.
struct LayerCache {
  Matrix x_in;  // after interventions
  LayerNormStats ln1;
  Matrix h1, qkv;
  std::vector<Matrix> probs;  // per head
  Matrix att, x_mid;
  LayerNormStats ln2;
  Matrix h2, fc_pre, fc_act;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Vec x_final;  // residual stream at the answer position
  double lnf_mean = 0.0, lnf_rstd = 0.0;
  Vec h_final;
  // Interventions per layer, as (position, scale) pairs.
  std::vector<std::vector<std::pair<std::size_t, double>>> scaled_rows;
};

}  // namespace detail

inline Model init_model(const ModelConfig& config) {
  config.validate();
  Model model{config, ParamSet::zeros(config)};
  detail::SplitMix64 rng(config.seed);
  const double d = static_cast<double>(config.d_model);
  const double ff = static_cast<double>(config.d_ff());
  const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto& p = model.params;
  detail::fill_uniform(p.tok_embed, rng, 0.5);
  detail::fill_uniform(p.pos_embed, rng, 0.5);
  for (auto& l : p.layers) {
    l.ln1_gain.fill(1.0);
    l.ln2_gain.fill(1.0);
    detail::fill_uniform(l.w_qkv, rng, 1.0 / std::sqrt(d));
    detail::fill_uniform(l.w_out, rng, resid / std::sqrt(d));
    detail::fill_uniform(l.w_fc, rng, 1.0 / std::sqrt(d));
    detail::fill_uniform(l.w_proj, rng, resid / std::sqrt(ff));
  }
  p.lnf_gain.fill(1.0);
  detail::fill_uniform(p.w_unembed, rng, 0.5 / std::sqrt(d));
  return model;
}

// FNV-1a over the raw bytes of every tensor, in visit order.
inline std::uint64_t weights_checksum(const Model& model) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  model.params.visit([&](const std::string&, const Matrix& m) {
    for (double v : m.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ull;
      }
    }
  });
  return h;
}

inline void validate_sequence(const ModelConfig& config, const TokenSequence& seq) {
  if (seq.tokens.empty()) throw UsageError("forward: empty token sequence");
  if (seq.size() > config.max_seq_len) {
    throw UsageError("forward: sequence length " + std::to_string(seq.size()) +
                     " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  for (std::int32_t t : seq.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
      throw UsageError("forward: token id " + std::to_string(t) +
                       " outside vocabulary of size " +
                       std::to_string(config.vocab_size));
    }
  }
  if (seq.image_span.begin > seq.image_span.end || seq.image_span.end > seq.size()) {
    throw UsageError("forward: image span out of bounds");
  }
}

inline void validate_intervention(const ModelConfig& config, const TokenSequence& seq,
                                  const InterventionSpec& iv) {
  if (iv.layer >= config.n_layers) {
    throw UsageError("intervention: layer " + std::to_string(iv.layer) +
                     " >= n_layers " + std::to_string(config.n_layers));
  }
  if (!(iv.scale >= 0.0) || !std::isfinite(iv.scale)) {
    throw UsageError("intervention: scale must be finite and >= 0");
  }
  for (std::size_t pos : iv.token_indices) {
    if (!seq.image_span.contains(pos)) {
      throw UsageError("intervention: position " + std::to_string(pos) +
                       " is outside the image span");
    }
  }
}

// Called before each layer runs; may append interventions for that layer.
// `partial` holds attention for the layers that already executed.
using LayerHook = std::function<void(std::size_t layer, const ForwardTrace& partial,
                                     std::vector<InterventionSpec>& extra)>;

struct ForwardOptions {
  bool capture_attention = false;
  LayerHook before_layer;
  detail::ForwardCache* cache = nullptr;
};

inline ForwardTrace forward(const Model& model, const TokenSequence& seq,
                            const std::vector<InterventionSpec>& interventions,
                            const ForwardOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  const ModelConfig& c = model.config;
  const ParamSet& p = model.params;
  validate_sequence(c, seq);
  for (const auto& iv : interventions) validate_intervention(c, seq, iv);

  const std::size_t n = seq.size(), d = c.d_model, nh = c.n_heads, hd = c.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardTrace trace;
  if (options.capture_attention) trace.attention.reserve(c.n_layers);
  detail::ForwardCache* cache = options.cache;
  if (cache) {
    cache->layers.assign(c.n_layers, {});
    cache->scaled_rows.assign(c.n_layers, {});
  }

  Matrix x(n, d);
  for (std::size_t t = 0; t < n; ++t) {
    const auto tok = p.tok_embed.row(static_cast<std::size_t>(seq.tokens[t]));
    const auto pos = p.pos_embed.row(t);
    auto xr = x.row(t);
    for (std::size_t i = 0; i < d; ++i) xr[i] = tok[i] + pos[i];
  }

  std::vector<InterventionSpec> extra;
  Matrix h1, qkv, att, proj, h2, fc_pre, fc_act, mlp_out;
  std::vector<Matrix> probs(nh, Matrix(n, n));
  Vec scores(n);

  for (std::size_t layer = 0; layer < c.n_layers; ++layer) {
    const LayerParams& lp = p.layers[layer];

    extra.clear();
    if (options.before_layer) {
      options.before_layer(layer, trace, extra);
      for (const auto& iv : extra) {
        validate_intervention(c, seq, iv);
        if (iv.layer != layer) {
          throw UsageError("layer hook returned an intervention for another layer");
        }
      }
    }
    auto apply = [&](const InterventionSpec& iv) {
      if (iv.layer != layer) return;
      for (std::size_t pos : iv.token_indices) {
        for (double& v : x.row(pos)) v *= iv.scale;
        if (cache) cache->scaled_rows[layer].emplace_back(pos, iv.scale);
      }
    };
    for (const auto& iv : interventions) apply(iv);
    for (const auto& iv : extra) apply(iv);

    detail::LayerCache* lc = cache ? &cache->layers[layer] : nullptr;
    if (lc) lc->x_in = x;

    detail::layer_norm_rows(x, lp.ln1_gain, lp.ln1_bias, h1, lc ? &lc->ln1 : nullptr);
    detail::linear(h1, lp.w_qkv, lp.b_qkv, qkv);

    att = Matrix(n, d);
    for (std::size_t h = 0; h < nh; ++h) {
      Matrix& ph = probs[h];
      ph.fill(0.0);
      const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
      for (std::size_t t = 0; t < n; ++t) {
        const double* q = qkv.row(t).data() + qo;
        double mx = -INFINITY;
        for (std::size_t u = 0; u <= t; ++u) {
          const double* k = qkv.row(u).data() + ko;
          double s = 0.0;
          for (std::size_t j = 0; j < hd; ++j) s += q[j] * k[j];
          s *= att_scale;
          scores[u] = s;
          mx = std::max(mx, s);
        }
        double sum = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          scores[u] = std::exp(scores[u] - mx);
          sum += scores[u];
        }
        double* pr = ph.row(t).data();
        double* out = att.row(t).data() + qo;
        for (std::size_t u = 0; u <= t; ++u) {
          pr[u] = scores[u] / sum;
          const double* v = qkv.row(u).data() + vo;
          for (std::size_t j = 0; j < hd; ++j) out[j] += pr[u] * v[j];
        }
      }
    }
    if (options.capture_attention) trace.attention.push_back(probs);

    detail::linear(att, lp.w_out, lp.b_out, proj);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += proj.data()[i];
    if (lc) lc->x_mid = x;

    detail::layer_norm_rows(x, lp.ln2_gain, lp.ln2_bias, h2, lc ? &lc->ln2 : nullptr);
    detail::linear(h2, lp.w_fc, lp.b_fc, fc_pre);
    fc_act = Matrix(fc_pre.rows(), fc_pre.cols());
    for (std::size_t i = 0; i < fc_pre.size(); ++i) {
      fc_act.data()[i] = detail::gelu(fc_pre.data()[i]);
    }
    detail::linear(fc_act, lp.w_proj, lp.b_proj, mlp_out);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += mlp_out.data()[i];

    if (lc) {
      lc->h1 = h1;
      lc->qkv = qkv;
      lc->probs = probs;
      lc->att = att;
      lc->h2 = h2;
      lc->fc_pre = fc_pre;
      lc->fc_act = fc_act;
    }
  }

  // Final norm and unembedding at the answer position only.
  const std::size_t ap = seq.answer_pos();
  Matrix xf(1, d, Vec(x.row(ap).begin(), x.row(ap).end()));
  Matrix hf;
  detail::LayerNormStats fstats;
  detail::layer_norm_rows(xf, p.lnf_gain, p.lnf_bias, hf, &fstats);
  Matrix logits;
  detail::linear(hf, p.w_unembed, p.b_unembed, logits);
  trace.logits = std::move(logits.data());
  if (cache) {
    cache->x_final = xf.data();
    cache->lnf_mean = fstats.mean[0];
    cache->lnf_rstd = fstats.rstd[0];
    cache->h_final = hf.data();
  }

  trace.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return trace;
}

inline ForwardTrace forward(const Model& model, const TokenSequence& seq,
                            const std::vector<InterventionSpec>& interventions = {},
                            bool capture_attention = false) {
  ForwardOptions options;
  options.capture_attention = capture_attention;
  return forward(model, seq, interventions, options);
}

// Argmax with ties going to the lowest id.
inline std::int32_t argmax_token(std::span<const double> logits) {
  if (logits.empty()) throw UsageError("argmax_token: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<std::int32_t>(best);
}

inline std::int32_t predict(const Model& model, const TokenSequence& seq,
                            const std::vector<InterventionSpec>& interventions = {}) {
  return argmax_token(forward(model, seq, interventions).logits);
}

// Head-averaged attention from the answer position over the image span,
// renormalized to a distribution over image tokens.
inline ProbVec image_attention(const ForwardTrace& trace, std::size_t layer,
                               const TokenSequence& seq) {
  if (layer >= trace.attention.size()) {
    throw UsageError("image_attention: layer " + std::to_string(layer) +
                     " not captured (" + std::to_string(trace.attention.size()) +
                     " layers available)");
  }
  const auto& heads = trace.attention[layer];
  const ImageSpan span = seq.image_span;
  if (span.size() == 0) throw UsageError("image_attention: empty image span");
  const std::size_t ap = seq.answer_pos();
  Vec row(span.size(), 0.0);
  for (const Matrix& h : heads) {
    for (std::size_t j = 0; j < span.size(); ++j) row[j] += h(ap, span.begin + j);
  }
  for (double& v : row) v /= static_cast<double>(heads.size());
  try {
    return normalize(row);
  } catch (const DegenerateInputError&) {
    throw DegenerateInputError("image_attention: layer " + std::to_string(layer) +
                               " puts no mass on the image span");
  }
}

// Checkpoint: magic, version, JSON config, then named tensors with shapes.
// Doubles are stored as little-endian IEEE-754 bit patterns.
inline constexpr char kCheckpointMagic[8] = {'V', 'F', 'U', 'S', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint I/O assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& path) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw UsageError("checkpoint " + path + ": truncated file");
  return value;
}

}  // namespace detail

inline void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw UsageError("cannot write checkpoint: " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  const std::string cfg = nlohmann::json(model.config).dump();
  detail::write_le<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  std::uint64_t count = 0;
  model.params.visit([&](const std::string&, const Matrix&) { ++count; });
  detail::write_le<std::uint64_t>(os, count);
  model.params.visit([&](const std::string& name, const Matrix& m) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint64_t>(os, m.rows());
    detail::write_le<std::uint64_t>(os, m.cols());
    for (double v : m.data()) detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  });
  if (!os) throw UsageError("failed writing checkpoint: " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open checkpoint: " + path);
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw UsageError("checkpoint " + path + ": bad magic");
  }
  if (detail::read_le<std::uint32_t>(is, path) != kCheckpointVersion) {
    throw UsageError("checkpoint " + path + ": unsupported version");
  }
  const auto cfg_len = detail::read_le<std::uint64_t>(is, path);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  if (!is) throw UsageError("checkpoint " + path + ": truncated config");
  Model model;
  try {
    model.config = nlohmann::json::parse(cfg).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("checkpoint " + path + ": bad config: " + e.what());
  }
  model.config.validate();
  model.params = ParamSet::zeros(model.config);
  const auto count = detail::read_le<std::uint64_t>(is, path);
  std::uint64_t expected = 0;
  model.params.visit([&](const std::string&, const Matrix&) { ++expected; });
  if (count != expected) throw UsageError("checkpoint " + path + ": tensor count mismatch");
  model.params.visit([&](const std::string& name, Matrix& m) {
    const auto len = detail::read_le<std::uint32_t>(is, path);
    std::string got(len, '\0');
    is.read(got.data(), len);
    const auto rows = detail::read_le<std::uint64_t>(is, path);
    const auto cols = detail::read_le<std::uint64_t>(is, path);
    if (got != name || rows != m.rows() || cols != m.cols()) {
      throw UsageError("checkpoint " + path + ": unexpected tensor '" + got + "'");
    }
    for (double& v : m.data()) {
      v = std::bit_cast<double>(detail::read_le<std::uint64_t>(is, path));
    }
  });
  return model;
}

}  // namespace vfuse
