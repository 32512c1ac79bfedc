#pragma once

// Pointer distributions over source texts, their projection onto the
// vocabulary, the generation head, and the learned mixture of all of them.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtn/tensor.hpp"

namespace mtn {

/// Softmax(z_dec · z_xᵀ) with padded source positions removed.
/// Rows are target positions, columns source positions.
inline Tensor pointer_distribution(const Tensor &z_dec, const Tensor &z_x, std::span<const std::uint8_t> source_allowed = {}) {
  if (z_dec.cols() != z_x.cols())
    throw ShapeError("pointer inputs differ in width: " + to_string(z_dec.shape()) + " vs " + to_string(z_x.shape()));
  Mask mask;
  if (!source_allowed.empty()) {
    if (source_allowed.size() != z_x.rows()) throw ShapeError("pointer pad mask length mismatch");
    if (std::find(source_allowed.begin(), source_allowed.end(), std::uint8_t{1}) == source_allowed.end())
      throw DegenerateRowError("pointer source consists only of padding");
    mask = Mask::keys(z_dec.rows(), source_allowed);
  }
  return softmax_rows(matmul_nt(z_dec, z_x), mask);
}

/// Accumulates each row's pointer mass onto the vocabulary id carried by the
/// source position: out[i][w] = Σ_{j : ids[j] = w} ptr[i][j].
inline Tensor scatter_to_vocab(const Tensor &ptr, std::span<const std::int32_t> source_ids, std::size_t vocab_size) {
  const std::size_t m = ptr.rows(), lx = ptr.cols();
  if (source_ids.size() != lx)
    throw ShapeError("scatter_to_vocab: " + std::to_string(source_ids.size()) + " source ids for " +
                     std::to_string(lx) + " pointer columns");
  for (auto id : source_ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
      throw std::out_of_range("source id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size));
  std::vector<std::int32_t> ids(source_ids.begin(), source_ids.end());
  std::vector<double> out(m * vocab_size, 0.0);
  auto pv = ptr.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < lx; ++j) out[i * vocab_size + static_cast<std::size_t>(ids[j])] += pv[i * lx + j];
  return Tensor::make_op("scatter_to_vocab", {m, vocab_size}, std::move(out), {ptr},
                         [ids = std::move(ids), m, lx, vocab_size](auto, auto dout, std::span<InputGrad> in) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < lx; ++j)
                               in[0].grad[i * lx + j] += dout[i * vocab_size + static_cast<std::size_t>(ids[j])];
                         });
}

/// Softmax(z_dec · w_gen).
inline Tensor generation_distribution(const Tensor &z_dec, const Tensor &w_gen) {
  return softmax_rows(matmul(z_dec, w_gen));
}

/// Column order of the mixture score matrix.
enum class MixtureColumn : std::size_t { History = 0, Query = 1, Summary = 2, Generation = 3 };
inline constexpr std::size_t kMixtureColumns = 4;

/// Context rows [mean(z_his) ⊕ mean(z_que) ⊕ mean(z_cap) ⊕ z_res ⊕ z_dec] · w_ctx,
/// before normalisation. Source means skip padded positions.
inline Tensor mixture_logits(const Tensor &z_his, const Tensor &z_que, const Tensor &z_cap, const Tensor &z_res,
                             const Tensor &z_dec, const Tensor &w_ctx, std::span<const std::uint8_t> his_allowed = {},
                             std::span<const std::uint8_t> que_allowed = {},
                             std::span<const std::uint8_t> cap_allowed = {}) {
  const std::size_t ly = z_dec.rows(), d = z_dec.cols();
  for (const Tensor *t : {&z_his, &z_que, &z_cap, &z_res})
    if (t->cols() != d) throw ShapeError("mixture context width mismatch: " + to_string(t->shape()));
  if (z_res.rows() != ly) throw ShapeError("z_res and z_dec differ in length");
  if (w_ctx.rows() != 5 * d) throw ShapeError("w_ctx must have 5d rows, got " + to_string(w_ctx.shape()));
  Tensor ctx = concat_last_dim({broadcast_rows(mean_rows(z_his, his_allowed), ly),
                                broadcast_rows(mean_rows(z_que, que_allowed), ly),
                                broadcast_rows(mean_rows(z_cap, cap_allowed), ly), z_res, z_dec});
  return matmul(ctx, w_ctx);
}

/// Row-wise softmax over all four mixture columns.
inline Tensor mixture_scores(const Tensor &z_his, const Tensor &z_que, const Tensor &z_cap, const Tensor &z_res,
                             const Tensor &z_dec, const Tensor &w_ctx, std::span<const std::uint8_t> his_allowed = {},
                             std::span<const std::uint8_t> que_allowed = {},
                             std::span<const std::uint8_t> cap_allowed = {}) {
  return softmax_rows(mixture_logits(z_his, z_que, z_cap, z_res, z_dec, w_ctx, his_allowed, que_allowed, cap_allowed));
}

/// Keeps the listed score columns (in order) and normalises over them.
inline Tensor select_mixture_scores(const Tensor &logits, std::span<const MixtureColumn> columns) {
  if (columns.empty()) throw std::invalid_argument("mixture needs at least one column");
  std::vector<Tensor> parts;
  for (auto c : columns) parts.push_back(slice_cols(logits, static_cast<std::size_t>(c), 1));
  return softmax_rows(parts.size() == 1 ? parts.front() : concat_last_dim(parts));
}

/// Per-row convex combination Σ_k scores[i][k] · components[k][i].
inline Tensor weighted_mixture(const std::vector<Tensor> &components, const Tensor &scores) {
  if (components.empty()) throw std::invalid_argument("mixture of no distributions");
  const std::size_t m = components.front().rows(), v = components.front().cols(), k = components.size();
  for (auto &c : components)
    if (c.rows() != m || c.cols() != v) throw ShapeError("mixture components differ in shape");
  if (scores.rows() != m || scores.cols() != k)
    throw ShapeError("mixture scores " + to_string(scores.shape()) + " do not match " + std::to_string(k) +
                     " components of " + std::to_string(m) + " rows");
  std::vector<double> out(m * v, 0.0);
  auto sv = scores.values();
  for (std::size_t c = 0; c < k; ++c) {
    auto cv = components[c].values();
    for (std::size_t i = 0; i < m; ++i) {
      const double w = sv[i * k + c];
      for (std::size_t j = 0; j < v; ++j) out[i * v + j] += w * cv[i * v + j];
    }
  }
  std::vector<Tensor> inputs = components;
  inputs.push_back(scores);
  return Tensor::make_op("weighted_mixture", {m, v}, std::move(out), inputs,
                         [m, v, k](auto, auto dout, std::span<InputGrad> in) {
                           const auto &s = in[k];
                           for (std::size_t c = 0; c < k; ++c)
                             for (std::size_t i = 0; i < m; ++i) {
                               const double *comp = in[c].value.data() + i * v;
                               const double *g = dout.data() + i * v;
                               if (s.needed()) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < v; ++j) dot += g[j] * comp[j];
                                 s.grad[i * k + c] += dot;
                               }
                               if (in[c].needed()) {
                                 const double w = s.value[i * k + c];
                                 for (std::size_t j = 0; j < v; ++j) in[c].grad[i * v + j] += w * g[j];
                               }
                             }
                         });
}

/// Mixes the enabled pointer distributions with the generation distribution.
/// `scores` has one column per present component, ordered history, query,
/// summary, generation. With no pointer component the generation
/// distribution is returned unchanged.
inline Tensor mix_distributions(const std::optional<Tensor> &p_his, const std::optional<Tensor> &p_que,
                                const std::optional<Tensor> &p_cap, const Tensor &p_gen, const Tensor &scores) {
  std::vector<Tensor> parts;
  for (auto *p : {&p_his, &p_que, &p_cap})
    if (*p) parts.push_back(**p);
  parts.push_back(p_gen);
  if (scores.cols() != parts.size())
    throw ShapeError("mixture has " + std::to_string(parts.size()) + " components but scores have " +
                     std::to_string(scores.cols()) + " columns");
  if (parts.size() == 1) return p_gen;
  return weighted_mixture(parts, scores);
}

} // namespace mtn
