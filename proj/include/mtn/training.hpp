#pragma once

// Losses, initialisation, Adam with warm-up schedule, and the epoch loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtn/data.hpp"
#include "mtn/model.hpp"
#include "mtn/random.hpp"
#include "mtn/tensor.hpp"

namespace mtn {

inline constexpr double kProbabilityFloor = 1e-12;

// ---------------------------------------------------------------------------
// Losses

/// Mean over unpadded positions of the cross-entropy between `probs` rows and
/// a smoothed one-hot target: 1-ε on the gold id, ε spread evenly over every
/// other id except padding. Probabilities are floored before the log.
inline Tensor generation_loss(const Tensor &probs, std::span<const TokenId> targets,
                              std::span<const std::uint8_t> target_allowed = {}, double smoothing = 0.0,
                              TokenId pad_id = kPad) {
  const std::size_t m = probs.rows(), v = probs.cols();
  if (targets.size() != m)
    throw ShapeError("loss has " + std::to_string(targets.size()) + " targets for " + std::to_string(m) + " rows");
  if (!target_allowed.empty() && target_allowed.size() != m) throw ShapeError("loss mask length mismatch");
  if (smoothing < 0.0 || smoothing >= 1.0) throw std::invalid_argument("label smoothing must be in [0, 1)");
  if (smoothing > 0.0 && v < 3) throw std::invalid_argument("label smoothing needs at least three classes");
  const bool pad_in_vocab = pad_id >= 0 && static_cast<std::size_t>(pad_id) < v;
  const double off = smoothing > 0.0 ? smoothing / static_cast<double>(v - (pad_in_vocab ? 2 : 1)) : 0.0;

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < m; ++i) {
    if (!target_allowed.empty() && !target_allowed[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw std::out_of_range("target id " + std::to_string(targets[i]) + " outside distribution");
    rows.push_back(i);
  }
  if (rows.empty()) throw std::invalid_argument("loss over zero unpadded positions");
  const double inv_n = 1.0 / static_cast<double>(rows.size());

  // Target weight of column w in row i.
  std::vector<TokenId> gold(targets.begin(), targets.end());
  auto weight = [=](TokenId g, std::size_t w) {
    if (static_cast<TokenId>(w) == g) return 1.0 - smoothing;
    if (pad_in_vocab && static_cast<TokenId>(w) == pad_id) return 0.0;
    return off;
  };

  auto pv = probs.values();
  double total = 0.0;
  for (auto i : rows) {
    if (smoothing == 0.0) {
      total -= std::log(std::max(pv[i * v + static_cast<std::size_t>(gold[i])], kProbabilityFloor));
    } else {
      for (std::size_t w = 0; w < v; ++w) {
        const double q = weight(gold[i], w);
        if (q != 0.0) total -= q * std::log(std::max(pv[i * v + w], kProbabilityFloor));
      }
    }
  }
  return Tensor::make_op("generation_loss", {1}, {total * inv_n}, {probs},
                         [=](auto, auto dout, std::span<InputGrad> in) {
                           for (auto i : rows)
                             for (std::size_t w = 0; w < v; ++w) {
                               const double q = weight(gold[i], w);
                               const double p = in[0].value[i * v + w];
                               if (q != 0.0 && p > kProbabilityFloor) in[0].grad[i * v + w] -= dout[0] * inv_n * q / p;
                             }
                         });
}

struct QaeLosses {
  Tensor visual, audio; // constant zero when the branch is disabled
};

inline QaeLosses qae_losses(const std::optional<Tensor> &p_vis, const std::optional<Tensor> &p_aud,
                            std::span<const TokenId> query, std::span<const std::uint8_t> query_allowed = {}) {
  QaeLosses l;
  l.visual = p_vis ? generation_loss(*p_vis, query, query_allowed) : Tensor::scalar(0.0);
  l.audio = p_aud ? generation_loss(*p_aud, query, query_allowed) : Tensor::scalar(0.0);
  return l;
}

inline Tensor joint_loss(const Tensor &gen, const Tensor &qae_vis, const Tensor &qae_aud, double alpha = 1.0,
                         double beta = 1.0) {
  return add(add(gen, scale(qae_vis, alpha)), scale(qae_aud, beta));
}

// ---------------------------------------------------------------------------
// Schedule and optimiser

/// d^-0.5 · min(step^-0.5, step · warmup^-1.5); peaks at step == warmup.
inline double noam_lr(std::size_t step, std::size_t d, std::size_t warmup) {
  if (step == 0 || d == 0 || warmup == 0) throw std::invalid_argument("noam_lr needs positive step, width and warmup");
  const double s = static_cast<double>(step);
  return std::pow(static_cast<double>(d), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

/// One bias-corrected Adam update of a flat parameter block at step `t` (1-based).
inline void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                        std::size_t t, double lr, const AdamOptions &opt = {}) {
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : grad[i];
    m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
    v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
    param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt.epsilon);
  }
}

struct OptimizerState {
  AdamOptions options;
  std::size_t step = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> m, v;

  explicit OptimizerState(const MTNParams &params, AdamOptions opt = {}) : options(opt) {
    params.visit([&](const std::string &name, const Tensor &t) {
      names.push_back(name);
      m.emplace_back(t.size(), 0.0);
      v.emplace_back(t.size(), 0.0);
    });
  }
};

/// Applies one Adam step to every parameter from its accumulated gradient.
inline void adam_step(MTNParams &params, OptimizerState &state, double lr) {
  ++state.step;
  std::size_t k = 0;
  params.visit([&](const std::string &name, Tensor &t) {
    if (k >= state.names.size() || state.names[k] != name)
      throw std::logic_error("optimizer state does not match parameter " + name);
    adam_update(t.mutable_values(), t.grad_span(), state.m[k], state.v[k], state.step, lr, state.options);
    ++k;
  });
}

// ---------------------------------------------------------------------------
// Initialisation

inline std::uint64_t name_hash(const std::string &s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Weights ~ U(±√(6/(fan_in+fan_out))), biases 0, layer-norm gains 1.
/// Each tensor draws from its own stream keyed by name, so enabling or
/// disabling a component leaves every other tensor's values unchanged.
inline MTNParams init_params(const ModelConfig &config, std::uint64_t seed) {
  return make_params(config, [seed](const std::string &name, const Shape &shape, ParamRole role) {
    std::vector<double> values(element_count(shape), 0.0);
    if (role == ParamRole::Gain) std::fill(values.begin(), values.end(), 1.0);
    if (role != ParamRole::Weight) return values;
    const double fan_in = static_cast<double>(shape.front());
    const double fan_out = static_cast<double>(shape.back());
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::mt19937_64 rng(derive_seed(seed, name_hash(name)));
    for (auto &v : values) v = uniform_real(rng, -limit, limit);
    return values;
  });
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::size_t warmup_steps = 400;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double label_smoothing = 0.1;
  double alpha = 1.0;
  double beta = 1.0;
  double lr_factor = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (warmup_steps == 0) throw std::invalid_argument("warmup_steps must be >= 1");
    if (epochs == 0 || epochs > 50) throw std::invalid_argument("epochs must be in 1..50");
    if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw std::invalid_argument("label smoothing must be in [0, 1)");
  }
};

struct ExampleLoss {
  Tensor total, gen, qae_vis, qae_aud;
};

/// Joint loss of one (possibly padded) example.
inline ExampleLoss example_loss(const MTNParams &params, const ModelConfig &config, const ModelInput &in,
                                std::span<const TokenId> decoder_input, std::span<const TokenId> target,
                                std::span<const std::uint8_t> target_mask, const TrainConfig &tc,
                                const ForwardContext &ctx) {
  auto out = forward(params, config, in, decoder_input, target_mask, ctx);
  ExampleLoss l;
  l.gen = generation_loss(out.dist.p_vocab, target, target_mask, tc.label_smoothing);
  auto q = qae_losses(out.qae.visual, out.qae.audio, in.query, in.query_mask);
  l.qae_vis = q.visual;
  l.qae_aud = q.audio;
  l.total = joint_loss(l.gen, l.qae_vis, l.qae_aud, tc.alpha, tc.beta);
  return l;
}

inline double evaluation_loss(const MTNParams &params, const ModelConfig &config, std::span<const EncodedExample> data,
                              const TrainConfig &tc) {
  if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
  NoGradGuard no_grad;
  double total = 0.0;
  for (auto &ex : data)
    total += example_loss(params, config, ModelInput::from(ex), ex.decoder_input, ex.target, {}, tc, {}).total.item();
  return total / static_cast<double>(data.size());
}

/// Fraction of target positions (end token included) whose most probable
/// token under teacher forcing is the gold token. Ties go to the lower id.
inline double teacher_forced_accuracy(const MTNParams &params, const ModelConfig &config,
                                      std::span<const EncodedExample> data) {
  NoGradGuard no_grad;
  std::size_t hits = 0, total = 0;
  for (auto &ex : data) {
    auto out = forward(params, config, ModelInput::from(ex), ex.decoder_input);
    const auto &p = out.dist.p_vocab;
    for (std::size_t i = 0; i < ex.target.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t w = 1; w < p.cols(); ++w)
        if (p(i, w) > p(i, best)) best = w;
      hits += static_cast<TokenId>(best) == ex.target[i];
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

/// Tab-separated epoch line: epoch, train loss, validation loss, learning rate.
inline std::string format_epoch_log(const EpochLog &e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.10f\t%.10f\t%.10e", e.epoch, e.train_loss, e.val_loss, e.lr);
  return buf;
}

inline constexpr const char *kEpochLogHeader = "epoch\ttrain_loss\tval_loss\tlr";

struct TrainResult {
  MTNParams best;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<EpochLog> log;
  std::size_t steps = 0;
};

/// Teacher-forced training with per-step warm-up schedule. `params` ends at
/// the last epoch's weights; the result carries the lowest-validation-loss
/// copy. Without validation data the last epoch is kept.
inline TrainResult train(MTNParams &params, const ModelConfig &config, std::span<const EncodedExample> train_set,
                         std::span<const EncodedExample> val_set, const TrainConfig &tc,
                         const std::function<void(const EpochLog &)> &on_epoch = {}) {
  tc.validate();
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("empty training set");
  OptimizerState opt(params);
  TrainResult result;
  double lr = 0.0;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    auto batches = make_batches(train_set, tc.batch_size, kPad, derive_seed(tc.seed, 0xba7c4, epoch));
    double epoch_loss = 0.0;
    for (auto &batch : batches) {
      // Examples run one graph each, so padding is never materialised here.
      params.zero_grad();
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        std::mt19937_64 rng(derive_seed(tc.seed, opt.step + 1, i));
        ForwardContext ctx{true, config.dropout, &rng};
        const auto &ex = train_set[batch.indices[i]];
        auto loss = example_loss(params, config, ModelInput::from(ex), ex.decoder_input, ex.target, {}, tc, ctx);
        epoch_loss += loss.total.item();
        backward(scale(loss.total, inv_b));
      }
      lr = tc.lr_factor * noam_lr(opt.step + 1, config.d, tc.warmup_steps);
      adam_step(params, opt, lr);
    }
    EpochLog e{epoch, epoch_loss / static_cast<double>(train_set.size()), 0.0, lr};
    e.val_loss = val_set.empty() ? e.train_loss : evaluation_loss(params, config, val_set, tc);
    if (!std::isfinite(e.val_loss) || !std::isfinite(e.train_loss))
      throw std::runtime_error("training diverged at epoch " + std::to_string(epoch));
    if (e.val_loss < result.best_val_loss || val_set.empty()) {
      result.best_val_loss = e.val_loss;
      result.best_epoch = epoch;
      result.best = params.clone();
    }
    result.log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  result.steps = opt.step;
  return result;
}

} // namespace mtn
