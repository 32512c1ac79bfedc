#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtn/tensor.hpp"

namespace mtn {

/// Dropout switches shared by every layer of one forward pass.
struct ForwardContext {
  bool training = false;
  double dropout_rate = 0.0;
  std::mt19937_64 *rng = nullptr;

  Tensor drop(const Tensor &x) const {
    if (!training || dropout_rate == 0.0) return x;
    if (!rng) throw std::logic_error("training forward pass without an rng");
    return dropout(x, dropout_rate, true, *rng);
  }
};

/// Sinusoidal position table, L×d.
inline Tensor positional_encoding(std::size_t length, std::size_t d) {
  std::vector<double> v(length * d);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * rate;
      v[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return Tensor({length, d}, std::move(v));
}

struct MultiHeadParams {
  std::size_t heads = 1;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;

  std::size_t width() const { return wq.rows(); }
};

struct AttentionBlockParams {
  MultiHeadParams attn;
  FeedForwardParams ff;
  Tensor ln_gain, ln_bias;
};

/// Per-head attention weights captured for inspection (heads × L1 × L2).
struct AttentionTrace {
  std::size_t heads = 0, queries = 0, keys = 0;
  std::vector<double> weights;
  double weight(std::size_t h, std::size_t i, std::size_t j) const {
    return weights[(h * queries + i) * keys + j];
  }
};

/// Scaled dot-product attention over already-projected queries, keys and
/// values, split into `heads` column groups. Fused forward and backward.
inline Tensor scaled_dot_attention(const Tensor &q, const Tensor &k, const Tensor &v, std::size_t heads,
                                   const Mask &mask, AttentionTrace *trace = nullptr) {
  const std::size_t lq = q.rows(), lk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != lk)
    throw ShapeError("attention projections disagree: q " + to_string(q.shape()) + ", k " +
                     to_string(k.shape()) + ", v " + to_string(v.shape()));
  if (heads == 0 || d % heads != 0)
    throw ShapeError("width " + std::to_string(d) + " is not divisible into " + std::to_string(heads) + " heads");
  if (!mask.empty() && (mask.rows != lq || mask.cols != lk))
    throw ShapeError("attention mask does not match " + std::to_string(lq) + "x" + std::to_string(lk));
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qv = q.values(), kv = k.values(), vv = v.values();

  auto probs = std::make_shared<std::vector<double>>(heads * lq * lk);
  std::vector<double> out(lq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      double *row = probs->data() + (h * lq + i) * lk;
      for (std::size_t j = 0; j < lk; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qv[i * d + off + c] * kv[j * d + off + c];
        row[j] = s * sc;
      }
      detail::softmax_row(row, lk, mask.empty() ? nullptr : mask.allowed.data() + i * lk, i);
      for (std::size_t j = 0; j < lk; ++j) {
        const double a = row[j];
        if (a == 0.0) continue;
        for (std::size_t c = 0; c < dh; ++c) out[i * d + off + c] += a * vv[j * d + off + c];
      }
    }
  }
  if (trace) *trace = {heads, lq, lk, *probs};

  return Tensor::make_op(
      "scaled_dot_attention", {lq, d}, std::move(out), {q, k, v},
      [=](auto, auto dout, std::span<InputGrad> in) {
        std::vector<double> da(lk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < lq; ++i) {
            const double *a = probs->data() + (h * lq + i) * lk;
            const double *go = dout.data() + i * d + off;
            // dA = dO · Vᵀ ; dV += Aᵀ · dO
            for (std::size_t j = 0; j < lk; ++j) {
              double s = 0.0;
              const double *vj = in[2].value.data() + j * d + off;
              for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
              da[j] = s;
              if (in[2].needed() && a[j] != 0.0) {
                double *gv = in[2].grad.data() + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) gv[c] += a[j] * go[c];
              }
            }
            double dot = 0.0;
            for (std::size_t j = 0; j < lk; ++j) dot += da[j] * a[j];
            for (std::size_t j = 0; j < lk; ++j) {
              const double ds = a[j] * (da[j] - dot) * sc;
              if (ds == 0.0) continue;
              if (in[0].needed()) {
                double *gq = in[0].grad.data() + i * d + off;
                const double *kj = in[1].value.data() + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) gq[c] += ds * kj[c];
              }
              if (in[1].needed()) {
                double *gk = in[1].grad.data() + j * d + off;
                const double *qi = in[0].value.data() + i * d + off;
                for (std::size_t c = 0; c < dh; ++c) gk[c] += ds * qi[c];
              }
            }
          }
        }
      });
}

/// Attention from z1 onto z2. `key_allowed` (length L2, empty = all keys)
/// removes padded keys; `causal` additionally hides later positions and
/// requires z1 and z2 to be the same sequence.
inline Tensor multi_head_attention(const Tensor &z1, const Tensor &z2, std::span<const std::uint8_t> key_allowed,
                                   bool causal, const MultiHeadParams &p, AttentionTrace *trace = nullptr) {
  if (z1.cols() != z2.cols())
    throw ShapeError("attention inputs differ in width: " + to_string(z1.shape()) + " vs " + to_string(z2.shape()));
  if (p.heads == 0 || z1.cols() % p.heads != 0)
    throw ShapeError("width " + std::to_string(z1.cols()) + " is not divisible into " + std::to_string(p.heads) +
                     " heads");
  if (causal && z1.rows() != z2.rows()) throw ShapeError("causal attention needs a single sequence");
  if (!key_allowed.empty() && key_allowed.size() != z2.rows())
    throw ShapeError("key mask length " + std::to_string(key_allowed.size()) + " does not match " +
                     std::to_string(z2.rows()) + " keys");
  Mask mask;
  if (!key_allowed.empty()) mask = Mask::keys(z1.rows(), key_allowed);
  if (causal) mask = mask & Mask::causal(z1.rows());
  Tensor q = linear(z1, p.wq, p.bq);
  Tensor k = linear(z2, p.wk, p.bk);
  Tensor v = linear(z2, p.wv, p.bv);
  return linear(scaled_dot_attention(q, k, v, p.heads, mask, trace), p.wo, p.bo);
}

/// LayerNorm(FF(MultiHeadAtt(z1, z2)) + z1).
inline Tensor attention_block(const Tensor &z1, const Tensor &z2, std::span<const std::uint8_t> key_allowed,
                              bool causal, const AttentionBlockParams &p, const ForwardContext &ctx = {},
                              AttentionTrace *trace = nullptr) {
  Tensor att = ctx.drop(multi_head_attention(z1, z2, key_allowed, causal, p.attn, trace));
  Tensor ff = ctx.drop(feed_forward(att, p.ff));
  return layer_norm(add(ff, z1), p.ln_gain, p.ln_bias);
}

/// Feeds each round's output into the next round. `step(round, input)`.
template <typename Step>
Tensor progressive_rounds(const Tensor &initial, Step &&step, std::size_t n_rounds) {
  if (n_rounds == 0) throw std::invalid_argument("progressive_rounds needs at least one round");
  Tensor z = initial;
  for (std::size_t r = 0; r < n_rounds; ++r) z = step(r, z);
  return z;
}

} // namespace mtn
