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

// Cross-entropy training of the toy model with a hand-written backward pass.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vfuse/errors.hpp"
#include "vfuse/model.hpp"
#include "vfuse/numerics.hpp"
#include "vfuse/tasks.hpp"

namespace vfuse {

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  std::size_t n_steps = 1200;
  std::size_t batch_size = 16;
  std::size_t eval_every = 200;
  std::uint64_t seed = 99;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw UsageError("train.learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw UsageError("train.momentum must be in [0, 1)");
    }
    if (!(clip_norm >= 0.0)) throw UsageError("train.clip_norm must be >= 0");
    if (n_steps == 0) throw UsageError("train.n_steps must be >= 1");
    if (batch_size == 0) throw UsageError("train.batch_size must be >= 1");
    if (eval_every == 0) throw UsageError("train.eval_every must be >= 1");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, learning_rate, momentum, clip_norm,
                                   n_steps, batch_size, eval_every, seed)

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;
  double eval_accuracy = 0.0;

  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct TrainResult {
  std::vector<CurvePoint> curve;
  double final_eval_accuracy = 0.0;
};

// -log softmax(logits)[target].
inline double loss(std::span<const double> logits, std::int32_t target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw UsageError("loss: target " + std::to_string(target) + " outside [0, " +
                     std::to_string(logits.size()) + ")");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  return std::log(sum) + mx - logits[static_cast<std::size_t>(target)];
}

namespace detail {

// dW += x^T dy, db += colsum(dy), dx = dy W^T.
inline void linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy,
                            Matrix& dw, Matrix& db, Matrix& dx) {
  const std::size_t n = x.rows(), in = w.rows(), out = w.cols();
  dx = Matrix(n, in);
  double* dbp = db.data().data();
  for (std::size_t t = 0; t < n; ++t) {
    const double* __restrict dyr = dy.row(t).data();
    bool any = false;
    for (std::size_t o = 0; o < out; ++o) {
      if (dyr[o] != 0.0) {
        any = true;
        break;
      }
    }
    if (!any) continue;
    const double* __restrict xr = x.row(t).data();
    double* __restrict dxr = dx.row(t).data();
    for (std::size_t o = 0; o < out; ++o) dbp[o] += dyr[o];
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      double* __restrict dwr = dw.row(i).data();
      const double* __restrict wr = w.row(i).data();
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) {
        dwr[o] += xi * dyr[o];
        acc += dyr[o] * wr[o];
      }
      dxr[i] = acc;
    }
  }
}

// Adds the input gradient of a row-wise layer norm into dx.
inline void layer_norm_backward(const Matrix& x, const LayerNormStats& stats,
                                const Matrix& gain, const Matrix& dy,
                                Matrix& dgain, Matrix& dbias, Matrix& dx) {
  const std::size_t n = x.rows(), d = x.cols();
  const double* g = gain.data().data();
  double* dg = dgain.data().data();
  double* dbp = dbias.data().data();
  Vec xhat(d), dxhat(d);
  for (std::size_t t = 0; t < n; ++t) {
    const double* dyr = dy.row(t).data();
    const double* xr = x.row(t).data();
    const double mean = stats.mean[t], rstd = stats.rstd[t];
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      xhat[i] = (xr[i] - mean) * rstd;
      dg[i] += dyr[i] * xhat[i];
      dbp[i] += dyr[i];
      dxhat[i] = dyr[i] * g[i];
      m1 += dxhat[i];
      m2 += dxhat[i] * xhat[i];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    double* dxr = dx.row(t).data();
    for (std::size_t i = 0; i < d; ++i) {
      dxr[i] += rstd * (dxhat[i] - m1 - xhat[i] * m2);
    }
  }
}

}  // namespace detail

// Accumulates scale * d(loss)/d(params) into `grads` for one sequence and
// returns the unscaled loss.
inline double accumulate_gradients(const Model& model, const TokenSequence& seq,
                                   std::int32_t target, double scale,
                                   ParamSet& grads,
                                   const std::vector<InterventionSpec>& interventions = {}) {
  const ModelConfig& c = model.config;
  const ParamSet& p = model.params;
  detail::ForwardCache cache;
  ForwardOptions options;
  options.cache = &cache;
  const ForwardTrace trace = forward(model, seq, interventions, options);
  const double value = loss(trace.logits, target);
  if (!std::isfinite(value)) return value;

  const std::size_t n = seq.size(), d = c.d_model, nh = c.n_heads, hd = c.head_dim();
  const std::size_t vocab = c.vocab_size;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // Output head.
  ProbVec probs = softmax(trace.logits);
  Vec dlogits(vocab);
  for (std::size_t v = 0; v < vocab; ++v) dlogits[v] = scale * probs[v];
  dlogits[static_cast<std::size_t>(target)] -= scale;

  Matrix hf(1, d, cache.h_final);
  Matrix dlog(1, vocab, dlogits);
  Matrix dhf;
  detail::linear_backward(hf, p.w_unembed, dlog, grads.w_unembed, grads.b_unembed, dhf);

  Matrix xf(1, d, cache.x_final);
  detail::LayerNormStats fstats{{cache.lnf_mean}, {cache.lnf_rstd}};
  Matrix dxf(1, d);
  detail::layer_norm_backward(xf, fstats, p.lnf_gain, dhf, grads.lnf_gain, grads.lnf_bias,
                              dxf);

  Matrix dx(n, d);
  std::copy_n(dxf.data().data(), d, dx.row(seq.answer_pos()).data());

  Matrix dfc_act, dh2, datt, dh1;
  Matrix dqkv;
  for (std::size_t layer = c.n_layers; layer-- > 0;) {
    const LayerParams& lp = p.layers[layer];
    LayerParams& gp = grads.layers[layer];
    const detail::LayerCache& lc = cache.layers[layer];

    // MLP residual branch.
    detail::linear_backward(lc.fc_act, lp.w_proj, dx, gp.w_proj, gp.b_proj, dfc_act);
    for (std::size_t i = 0; i < dfc_act.size(); ++i) {
      dfc_act.data()[i] *= detail::gelu_grad(lc.fc_pre.data()[i]);
    }
    detail::linear_backward(lc.h2, lp.w_fc, dfc_act, gp.w_fc, gp.b_fc, dh2);
    detail::layer_norm_backward(lc.x_mid, lc.ln2, lp.ln2_gain, dh2, gp.ln2_gain,
                                gp.ln2_bias, dx);

    // Attention residual branch.
    detail::linear_backward(lc.att, lp.w_out, dx, gp.w_out, gp.b_out, datt);
    dqkv = Matrix(n, 3 * d);
    Vec dp(n);
    for (std::size_t h = 0; h < nh; ++h) {
      const Matrix& pr = lc.probs[h];
      const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
      for (std::size_t t = 0; t < n; ++t) {
        const double* dout = datt.row(t).data() + qo;
        bool any = false;
        for (std::size_t j = 0; j < hd; ++j) any = any || dout[j] != 0.0;
        if (!any) continue;
        double dot = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          const double* v = lc.qkv.row(u).data() + vo;
          double* dv = dqkv.row(u).data() + vo;
          const double puv = pr(t, u);
          double s = 0.0;
          for (std::size_t j = 0; j < hd; ++j) {
            s += dout[j] * v[j];
            dv[j] += puv * dout[j];
          }
          dp[u] = s;
          dot += puv * s;
        }
        const double* q = lc.qkv.row(t).data() + qo;
        double* dq = dqkv.row(t).data() + qo;
        for (std::size_t u = 0; u <= t; ++u) {
          const double ds = pr(t, u) * (dp[u] - dot) * att_scale;
          if (ds == 0.0) continue;
          const double* k = lc.qkv.row(u).data() + ko;
          double* dk = dqkv.row(u).data() + ko;
          for (std::size_t j = 0; j < hd; ++j) {
            dq[j] += ds * k[j];
            dk[j] += ds * q[j];
          }
        }
      }
    }
    detail::linear_backward(lc.h1, lp.w_qkv, dqkv, gp.w_qkv, gp.b_qkv, dh1);
    detail::layer_norm_backward(lc.x_in, lc.ln1, lp.ln1_gain, dh1, gp.ln1_gain,
                                gp.ln1_bias, dx);

    for (const auto& [pos, s] : cache.scaled_rows[layer]) {
      for (double& v : dx.row(pos)) v *= s;
    }
  }

  for (std::size_t t = 0; t < n; ++t) {
    const auto tok = static_cast<std::size_t>(seq.tokens[t]);
    const double* dxr = dx.row(t).data();
    double* dtok = grads.tok_embed.row(tok).data();
    double* dpos = grads.pos_embed.row(t).data();
    for (std::size_t i = 0; i < d; ++i) {
      dtok[i] += dxr[i];
      dpos[i] += dxr[i];
    }
  }
  return value;
}

struct GradCheckOptions {
  double epsilon = 1e-5;
  // Lower bound on the relative-error denominator.
  double denominator_floor = 1e-8;
  std::size_t min_parameters = 200;
  std::uint64_t seed = 5;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::string worst_parameter;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares analytic gradients against central differences on a random subset
// of parameters that covers every tensor.
inline GradCheckResult grad_check(const Model& model, const TokenSequence& seq,
                                  std::int32_t target,
                                  const GradCheckOptions& options = {}) {
  if (!(options.epsilon >= 1e-6 && options.epsilon <= 1e-3)) {
    throw UsageError("grad_check: epsilon must lie in [1e-6, 1e-3]");
  }
  if (!(options.denominator_floor > 0.0)) {
    throw UsageError("grad_check: denominator_floor must be positive");
  }
  ParamSet grads = ParamSet::zeros(model.config);
  accumulate_gradients(model, seq, target, 1.0, grads);

  std::size_t tensors = 0;
  model.params.visit([&](const std::string&, const Matrix&) { ++tensors; });
  const std::size_t per_tensor = (options.min_parameters + tensors - 1) / tensors;

  Model probe = model;
  auto objective = [&]() { return loss(forward(probe, seq).logits, target); };

  std::vector<std::pair<std::string, Matrix*>> live;
  probe.params.visit([&](const std::string& name, Matrix& m) { live.emplace_back(name, &m); });
  std::vector<const Matrix*> analytic;
  grads.visit([&](const std::string&, const Matrix& m) { analytic.push_back(&m); });

  detail::SplitMix64 rng(options.seed);
  GradCheckResult result;
  for (std::size_t ti = 0; ti < live.size(); ++ti) {
    Matrix& m = *live[ti].second;
    for (std::size_t s = 0; s < per_tensor; ++s) {
      const std::size_t idx = detail::uniform_index(rng, m.size());
      const double saved = m.data()[idx];
      m.data()[idx] = saved + options.epsilon;
      const double up = objective();
      m.data()[idx] = saved - options.epsilon;
      const double down = objective();
      m.data()[idx] = saved;
      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double exact = analytic[ti]->data()[idx];
      const double denom =
          std::max({std::abs(exact), std::abs(numeric), options.denominator_floor});
      const double rel = std::abs(exact - numeric) / denom;
      ++result.checked;
      result.max_abs_error = std::max(result.max_abs_error, std::abs(exact - numeric));
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_parameter = live[ti].first + "[" + std::to_string(idx) + "]";
        result.worst_analytic = exact;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

inline double global_norm(const ParamSet& g) {
  double sq = 0.0;
  g.visit([&](const std::string&, const Matrix& m) {
    for (double v : m.data()) sq += v * v;
  });
  return std::sqrt(sq);
}

// Mean loss and gradient over a batch.
inline double batch_gradients(const Model& model, const TaskSpec& spec,
                              const std::vector<SyntheticSample>& samples,
                              std::span<const std::size_t> batch, ParamSet& grads) {
  grads.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
  const double inv = 1.0 / static_cast<double>(batch.size());
  const std::int32_t sep = spec.separator_token();
  double total = 0.0;
  for (std::size_t i : batch) {
    const auto& s = samples[i];
    total += accumulate_gradients(model, s.to_sequence(sep), s.answer_token, inv, grads);
  }
  return total * inv;
}

// SGD with heavy-ball momentum: v = mu v + g; theta -= lr v.
class SgdMomentum {
 public:
  SgdMomentum(const ModelConfig& config, double lr, double momentum)
      : velocity_(ParamSet::zeros(config)), lr_(lr), momentum_(momentum) {}

  void step(ParamSet& params, const ParamSet& grads) {
    std::vector<Matrix*> vel;
    velocity_.visit([&](const std::string&, Matrix& m) { vel.push_back(&m); });
    std::vector<const Matrix*> g;
    grads.visit([&](const std::string&, const Matrix& m) { g.push_back(&m); });
    std::size_t i = 0;
    params.visit([&](const std::string&, Matrix& m) {
      auto& v = vel[i]->data();
      const auto& gd = g[i]->data();
      auto& w = m.data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum_ * v[j] + gd[j];
        w[j] -= lr_ * v[j];
      }
      ++i;
    });
  }

 private:
  ParamSet velocity_;
  double lr_;
  double momentum_;
};

using ProgressFn = std::function<void(const CurvePoint&)>;

inline TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg,
                         const ProgressFn& progress = {}) {
  cfg.validate();
  if (data.train.empty() || data.eval.empty()) {
    throw UsageError("train: train and eval sets must be non-empty");
  }
  data.spec.validate(model.config.vocab_size);

  TrainResult result;
  ParamSet grads = ParamSet::zeros(model.config);
  SgdMomentum opt(model.config, cfg.learning_rate, cfg.momentum);
  detail::SplitMix64 rng(cfg.seed);
  std::vector<std::size_t> batch(cfg.batch_size);

  auto record = [&](std::size_t step, double batch_loss) {
    CurvePoint pt{step, batch_loss, accuracy(model, data.spec, data.eval)};
    result.curve.push_back(pt);
    if (progress) progress(pt);
  };

  double last_loss = 0.0;
  for (std::size_t step = 0; step < cfg.n_steps; ++step) {
    for (auto& b : batch) b = detail::uniform_index(rng, data.train.size());
    last_loss = batch_gradients(model, data.spec, data.train, batch, grads);
    if (!std::isfinite(last_loss)) throw TrainingError("training loss diverged", step);
    if (step % cfg.eval_every == 0) record(step, last_loss);

    if (cfg.clip_norm > 0.0) {
      const double norm = global_norm(grads);
      if (!std::isfinite(norm)) throw TrainingError("gradient norm diverged", step);
      if (norm > cfg.clip_norm) {
        const double f = cfg.clip_norm / norm;
        grads.visit([&](const std::string&, Matrix& m) {
          for (double& v : m.data()) v *= f;
        });
      }
    }
    opt.step(model.params, grads);
  }
  record(cfg.n_steps, last_loss);
  result.final_eval_accuracy = result.curve.back().eval_accuracy;
  return result;
}

}  // namespace vfuse
