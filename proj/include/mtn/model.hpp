#pragma once

// Multimodal transformer: query-guided encoder over visual/audio streams,
// six-stage decoder cascade, pointer-generator output and the query
// auto-encoding heads.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mtn/attention.hpp"
#include "mtn/data.hpp"
#include "mtn/pointer.hpp"
#include "mtn/tensor.hpp"

namespace mtn {

struct PointerSources {
  bool history = false;
  bool query = false;
  bool summary = false;

  bool any() const { return history || query || summary; }
  bool operator==(const PointerSources &) const = default;

  /// Comma list from {summary, query, history}, or "none".
  static PointerSources parse(const std::string &spec) {
    PointerSources p;
    if (spec == "none") return p;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item == "summary") p.summary = true;
      else if (item == "query") p.query = true;
      else if (item == "history") p.history = true;
      else throw std::invalid_argument("unknown pointer source '" + item + "' (expected summary, query, history or none)");
    }
    return p;
  }

  std::string str() const {
    std::string s;
    auto add = [&](bool on, const char *name) {
      if (!on) return;
      if (!s.empty()) s += ',';
      s += name;
    };
    add(summary, "summary");
    add(history, "history");
    add(query, "query");
    return s.empty() ? "none" : s;
  }
};

struct FeatureModes {
  bool visual = false;
  bool audio = false;

  bool any() const { return visual || audio; }
  bool operator==(const FeatureModes &) const = default;

  /// Comma list from {visual, audio}, or "none".
  static FeatureModes parse(const std::string &spec) {
    FeatureModes f;
    if (spec == "none") return f;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item == "visual") f.visual = true;
      else if (item == "audio") f.audio = true;
      else throw std::invalid_argument("unknown feature mode '" + item + "' (expected visual, audio or none)");
    }
    return f;
  }

  std::string str() const {
    if (visual && audio) return "visual,audio";
    if (visual) return "visual";
    if (audio) return "audio";
    return "none";
  }
};

struct ModelConfig {
  std::size_t d = 64;
  std::size_t rounds = 2;
  std::size_t heads = 4;
  std::size_t vocab_size = 0;
  std::size_t visual_dim = kVisualDim;
  std::size_t audio_dim = kAudioDim;
  std::size_t ff_multiplier = 4;
  double dropout = 0.1;
  PointerSources pointers{false, true, true};
  FeatureModes features{true, false};

  /// Full-size hyperparameters (d=512, N=6, h=16, dropout 0.5).
  static ModelConfig paper(std::size_t vocab_size) {
    ModelConfig c;
    c.d = 512;
    c.rounds = 6;
    c.heads = 16;
    c.dropout = 0.5;
    c.vocab_size = vocab_size;
    return c;
  }

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0)
      throw std::invalid_argument("model width " + std::to_string(d) + " must be a positive multiple of heads " +
                                  std::to_string(heads));
    if (rounds == 0) throw std::invalid_argument("model needs at least one attention round");
    if (vocab_size <= kReservedTokens) throw std::invalid_argument("vocabulary too small");
    if (ff_multiplier == 0) throw std::invalid_argument("feed-forward multiplier must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"d", d},
            {"rounds", rounds},
            {"heads", heads},
            {"vocab_size", vocab_size},
            {"visual_dim", visual_dim},
            {"audio_dim", audio_dim},
            {"ff_multiplier", ff_multiplier},
            {"dropout", dropout},
            {"pointer_sources", pointers.str()},
            {"features", features.str()}};
  }

  static ModelConfig from_json(const nlohmann::json &j) {
    ModelConfig c;
    c.d = j.at("d").get<std::size_t>();
    c.rounds = j.at("rounds").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.visual_dim = j.at("visual_dim").get<std::size_t>();
    c.audio_dim = j.at("audio_dim").get<std::size_t>();
    c.ff_multiplier = j.at("ff_multiplier").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.pointers = PointerSources::parse(j.at("pointer_sources").get<std::string>());
    c.features = FeatureModes::parse(j.at("features").get<std::string>());
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Parameters

struct ProjectionParams {
  Tensor w, b;
};

struct EncoderRound {
  AttentionBlockParams self;  // query self-attention
  AttentionBlockParams cross; // query onto the feature stream
};

struct DecoderRound {
  AttentionBlockParams res2res, res2his, res2cap, res2que;
  std::optional<AttentionBlockParams> res2aud, res2vis;
};

/// How a freshly shaped parameter should be filled.
enum class ParamRole { Weight, Bias, Gain };

/// Called once per parameter with its registry name, shape and role.
using ParamInitializer = std::function<std::vector<double>(const std::string &name, const Shape &shape, ParamRole role)>;

struct MTNParams {
  Tensor embedding; // |V| × d
  std::optional<ProjectionParams> visual_proj, audio_proj;
  std::vector<EncoderRound> visual_encoder, audio_encoder;
  std::vector<DecoderRound> decoder;
  Tensor w_gen; // d × |V|
  Tensor w_ctx; // 5d × 4

  /// Visits every learnable tensor once, in a fixed order, with its name.
  template <typename F>
  void visit(F &&f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F &&f) const {
    visit_impl(*this, f);
  }

  std::size_t tensor_count() const {
    std::size_t n = 0;
    visit([&](const std::string &, const Tensor &) { ++n; });
    return n;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string &, const Tensor &t) { n += t.size(); });
    return n;
  }

  /// Deep copy with independent value storage.
  MTNParams clone() const {
    MTNParams p = *this;
    p.visit([](const std::string &, Tensor &t) { t = t.clone(); });
    return p;
  }

  void zero_grad() {
    visit([](const std::string &, Tensor &t) { t.zero_grad(); });
  }

private:
  static void visit_block(const std::string &prefix, auto &b, auto &f) {
    f(prefix + ".attn.wq", b.attn.wq);
    f(prefix + ".attn.bq", b.attn.bq);
    f(prefix + ".attn.wk", b.attn.wk);
    f(prefix + ".attn.bk", b.attn.bk);
    f(prefix + ".attn.wv", b.attn.wv);
    f(prefix + ".attn.bv", b.attn.bv);
    f(prefix + ".attn.wo", b.attn.wo);
    f(prefix + ".attn.bo", b.attn.bo);
    f(prefix + ".ff.w1", b.ff.w1);
    f(prefix + ".ff.b1", b.ff.b1);
    f(prefix + ".ff.w2", b.ff.w2);
    f(prefix + ".ff.b2", b.ff.b2);
    f(prefix + ".ln.gain", b.ln_gain);
    f(prefix + ".ln.bias", b.ln_bias);
  }

  template <typename Self, typename F>
  static void visit_impl(Self &self, F &f) {
    f(std::string("embedding"), self.embedding);
    if (self.visual_proj) {
      f(std::string("visual_proj.w"), self.visual_proj->w);
      f(std::string("visual_proj.b"), self.visual_proj->b);
    }
    if (self.audio_proj) {
      f(std::string("audio_proj.w"), self.audio_proj->w);
      f(std::string("audio_proj.b"), self.audio_proj->b);
    }
    for (std::size_t r = 0; r < self.visual_encoder.size(); ++r) {
      visit_block("enc.visual." + std::to_string(r) + ".que2que", self.visual_encoder[r].self, f);
      visit_block("enc.visual." + std::to_string(r) + ".que2vis", self.visual_encoder[r].cross, f);
    }
    for (std::size_t r = 0; r < self.audio_encoder.size(); ++r) {
      visit_block("enc.audio." + std::to_string(r) + ".que2que", self.audio_encoder[r].self, f);
      visit_block("enc.audio." + std::to_string(r) + ".que2aud", self.audio_encoder[r].cross, f);
    }
    for (std::size_t r = 0; r < self.decoder.size(); ++r) {
      auto p = "dec." + std::to_string(r);
      auto &dr = self.decoder[r];
      visit_block(p + ".res2res", dr.res2res, f);
      visit_block(p + ".res2his", dr.res2his, f);
      visit_block(p + ".res2cap", dr.res2cap, f);
      visit_block(p + ".res2que", dr.res2que, f);
      if (dr.res2aud) visit_block(p + ".res2aud", *dr.res2aud, f);
      if (dr.res2vis) visit_block(p + ".res2vis", *dr.res2vis, f);
    }
    f(std::string("w_gen"), self.w_gen);
    f(std::string("w_ctx"), self.w_ctx);
  }
};

/// Shapes every parameter implied by `config` and fills it via `init`.
inline MTNParams make_params(const ModelConfig &config, const ParamInitializer &init) {
  config.validate();
  const std::size_t d = config.d, v = config.vocab_size, inner = config.ff_multiplier * d;
  auto tensor = [&](const std::string &name, Shape shape, ParamRole role) {
    auto values = init(name, shape, role);
    return Tensor(std::move(shape), std::move(values), true);
  };
  auto block = [&](const std::string &prefix) {
    AttentionBlockParams b;
    b.attn.heads = config.heads;
    b.attn.wq = tensor(prefix + ".attn.wq", {d, d}, ParamRole::Weight);
    b.attn.bq = tensor(prefix + ".attn.bq", {d}, ParamRole::Bias);
    b.attn.wk = tensor(prefix + ".attn.wk", {d, d}, ParamRole::Weight);
    b.attn.bk = tensor(prefix + ".attn.bk", {d}, ParamRole::Bias);
    b.attn.wv = tensor(prefix + ".attn.wv", {d, d}, ParamRole::Weight);
    b.attn.bv = tensor(prefix + ".attn.bv", {d}, ParamRole::Bias);
    b.attn.wo = tensor(prefix + ".attn.wo", {d, d}, ParamRole::Weight);
    b.attn.bo = tensor(prefix + ".attn.bo", {d}, ParamRole::Bias);
    b.ff.w1 = tensor(prefix + ".ff.w1", {d, inner}, ParamRole::Weight);
    b.ff.b1 = tensor(prefix + ".ff.b1", {inner}, ParamRole::Bias);
    b.ff.w2 = tensor(prefix + ".ff.w2", {inner, d}, ParamRole::Weight);
    b.ff.b2 = tensor(prefix + ".ff.b2", {d}, ParamRole::Bias);
    b.ln_gain = tensor(prefix + ".ln.gain", {d}, ParamRole::Gain);
    b.ln_bias = tensor(prefix + ".ln.bias", {d}, ParamRole::Bias);
    return b;
  };

  MTNParams p;
  p.embedding = tensor("embedding", {v, d}, ParamRole::Weight);
  if (config.features.visual)
    p.visual_proj = ProjectionParams{tensor("visual_proj.w", {config.visual_dim, d}, ParamRole::Weight),
                                     tensor("visual_proj.b", {d}, ParamRole::Bias)};
  if (config.features.audio)
    p.audio_proj = ProjectionParams{tensor("audio_proj.w", {config.audio_dim, d}, ParamRole::Weight),
                                    tensor("audio_proj.b", {d}, ParamRole::Bias)};
  for (std::size_t r = 0; r < config.rounds; ++r) {
    auto rs = std::to_string(r);
    if (config.features.visual)
      p.visual_encoder.push_back({block("enc.visual." + rs + ".que2que"), block("enc.visual." + rs + ".que2vis")});
    if (config.features.audio)
      p.audio_encoder.push_back({block("enc.audio." + rs + ".que2que"), block("enc.audio." + rs + ".que2aud")});
  }
  for (std::size_t r = 0; r < config.rounds; ++r) {
    auto pre = "dec." + std::to_string(r);
    DecoderRound dr{block(pre + ".res2res"), block(pre + ".res2his"), block(pre + ".res2cap"),
                    block(pre + ".res2que"), std::nullopt, std::nullopt};
    if (config.features.audio) dr.res2aud = block(pre + ".res2aud");
    if (config.features.visual) dr.res2vis = block(pre + ".res2vis");
    p.decoder.push_back(std::move(dr));
  }
  p.w_gen = tensor("w_gen", {d, v}, ParamRole::Weight);
  p.w_ctx = tensor("w_ctx", {5 * d, kMixtureColumns}, ParamRole::Weight);
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass

/// One example's inputs. Empty masks mean "no padding".
struct ModelInput {
  std::span<const TokenId> history, query, summary;
  std::span<const std::uint8_t> history_mask, query_mask, summary_mask;
  const FeatureMatrix *visual = nullptr;
  const FeatureMatrix *audio = nullptr;

  static ModelInput from(const EncodedExample &ex) {
    return {ex.history, ex.query, ex.summary, {}, {}, {}, ex.visual.get(), ex.audio.get()};
  }
  static ModelInput from(const Batch &b, std::size_t i) {
    return {b.history.row(i),      b.query.row(i),        b.summary.row(i),
            b.history.row_mask(i), b.query.row_mask(i),   b.summary.row_mask(i),
            b.visual[i].get(),     b.audio[i].get()};
  }
};

namespace detail {
inline std::vector<std::uint8_t> materialize_mask(std::span<const std::uint8_t> mask, std::size_t n) {
  if (mask.empty()) return std::vector<std::uint8_t>(n, 1);
  if (mask.size() != n) throw ShapeError("mask length does not match its sequence");
  return {mask.begin(), mask.end()};
}
} // namespace detail

/// Token lookup plus sinusoidal positions.
inline Tensor embed_tokens(std::span<const TokenId> tokens, const Tensor &embedding) {
  return add(embedding_lookup(embedding, tokens), positional_encoding(tokens.size(), embedding.cols()));
}

/// Embeddings as fed to the attention stacks, with dropout.
inline Tensor embed_text(std::span<const TokenId> tokens, const Tensor &embedding, const ForwardContext &ctx = {}) {
  return ctx.drop(embed_tokens(tokens, embedding));
}

/// Projects a clip feature matrix (F × width) to the model width.
inline Tensor project_features(const FeatureMatrix &features, const ProjectionParams &proj, const ForwardContext &ctx = {}) {
  if (features.dim != proj.w.rows())
    throw ShapeError("feature width " + std::to_string(features.dim) + " does not match projection " +
                     to_string(proj.w.shape()));
  Tensor raw({features.frames, features.dim}, std::vector<double>(features.values.begin(), features.values.end()));
  return ctx.drop(linear(raw, proj.w, proj.b));
}

struct EncoderOutputs {
  Tensor z_his, z_que, z_cap;  // attention inputs, dropout applied when training
  Tensor g_his, g_que, g_cap;  // the same embeddings without dropout, read by the pointer-generator
  Tensor z_que2vis, z_que2aud; // undefined when that modality is off
  std::vector<std::uint8_t> his_mask, que_mask, cap_mask;
  TokenIds his_ids, que_ids, cap_ids;
};

/// Query self-attention followed by attention onto one feature stream,
/// repeated over rounds with each round's output as the next query.
inline Tensor query_guided_stream(const Tensor &z_que, std::span<const std::uint8_t> que_mask, const Tensor &z_feat,
                                  const std::vector<EncoderRound> &rounds, const ForwardContext &ctx) {
  return progressive_rounds(
      z_que,
      [&](std::size_t r, const Tensor &z) {
        Tensor self = attention_block(z, z, que_mask, false, rounds[r].self, ctx);
        return attention_block(self, z_feat, {}, false, rounds[r].cross, ctx);
      },
      rounds.size());
}

struct QueryGuided {
  Tensor z_que2vis, z_que2aud;
};

inline QueryGuided encode_query_guided(const Tensor &z_que, std::span<const std::uint8_t> que_mask,
                                       const std::optional<Tensor> &z_vis, const std::optional<Tensor> &z_aud,
                                       const ModelConfig &config, const MTNParams &params, const ForwardContext &ctx = {}) {
  if (z_que.rows() == 0) throw ShapeError("empty query");
  if (!config.features.any()) throw std::logic_error("query-guided encoding needs a visual or audio stream");
  QueryGuided out;
  if (config.features.visual) {
    if (!z_vis) throw std::invalid_argument("visual features enabled but missing");
    out.z_que2vis = query_guided_stream(z_que, que_mask, *z_vis, params.visual_encoder, ctx);
  }
  if (config.features.audio) {
    if (!z_aud) throw std::invalid_argument("audio features enabled but missing");
    out.z_que2aud = query_guided_stream(z_que, que_mask, *z_aud, params.audio_encoder, ctx);
  }
  return out;
}

inline EncoderOutputs encode(const MTNParams &params, const ModelConfig &config, const ModelInput &in,
                             const ForwardContext &ctx = {}) {
  if (in.query.empty()) throw ShapeError("empty query");
  if (in.history.empty() || in.summary.empty()) throw ShapeError("history and summary need at least one token");
  EncoderOutputs enc;
  enc.his_ids.assign(in.history.begin(), in.history.end());
  enc.que_ids.assign(in.query.begin(), in.query.end());
  enc.cap_ids.assign(in.summary.begin(), in.summary.end());
  enc.his_mask = detail::materialize_mask(in.history_mask, in.history.size());
  enc.que_mask = detail::materialize_mask(in.query_mask, in.query.size());
  enc.cap_mask = detail::materialize_mask(in.summary_mask, in.summary.size());
  enc.g_his = embed_tokens(in.history, params.embedding);
  enc.g_que = embed_tokens(in.query, params.embedding);
  enc.g_cap = embed_tokens(in.summary, params.embedding);
  enc.z_his = ctx.drop(enc.g_his);
  enc.z_que = ctx.drop(enc.g_que);
  enc.z_cap = ctx.drop(enc.g_cap);
  if (!config.features.any()) return enc;

  std::optional<Tensor> z_vis, z_aud;
  if (config.features.visual) {
    if (!in.visual) throw std::invalid_argument("model expects visual features");
    z_vis = project_features(*in.visual, *params.visual_proj, ctx);
  }
  if (config.features.audio) {
    if (!in.audio) throw std::invalid_argument("model expects audio features");
    z_aud = project_features(*in.audio, *params.audio_proj, ctx);
  }
  auto qg = encode_query_guided(enc.z_que, enc.que_mask, z_vis, z_aud, config, params, ctx);
  enc.z_que2vis = qg.z_que2vis;
  enc.z_que2aud = qg.z_que2aud;
  return enc;
}

/// Decoder cascade res2res → res2his → res2cap → res2que → res2aud → res2vis,
/// each round fed the previous round's output.
inline Tensor decode_responses(const Tensor &z_res, std::span<const std::uint8_t> res_mask, const EncoderOutputs &enc,
                               const ModelConfig &config, const MTNParams &params, const ForwardContext &ctx = {}) {
  if (z_res.rows() == 0) throw ShapeError("empty target");
  return progressive_rounds(
      z_res,
      [&](std::size_t r, const Tensor &z) {
        const DecoderRound &dr = params.decoder[r];
        Tensor out = attention_block(z, z, res_mask, true, dr.res2res, ctx);
        out = attention_block(out, enc.z_his, enc.his_mask, false, dr.res2his, ctx);
        out = attention_block(out, enc.z_cap, enc.cap_mask, false, dr.res2cap, ctx);
        out = attention_block(out, enc.z_que, enc.que_mask, false, dr.res2que, ctx);
        if (config.features.audio) out = attention_block(out, enc.z_que2aud, enc.que_mask, false, *dr.res2aud, ctx);
        if (config.features.visual) out = attention_block(out, enc.z_que2vis, enc.que_mask, false, *dr.res2vis, ctx);
        return out;
      },
      config.rounds);
}

struct OutputDistribution {
  Tensor p_vocab; // final mixture, L_Y × |V|
  Tensor p_gen;
  std::optional<Tensor> p_his, p_que, p_cap;
  Tensor scores; // one column per present component
};

inline OutputDistribution output_distribution(const Tensor &z_dec, const Tensor &z_res, const EncoderOutputs &enc,
                                              const ModelConfig &config, const MTNParams &params) {
  OutputDistribution out;
  out.p_gen = generation_distribution(z_dec, params.w_gen);
  if (!config.pointers.any()) {
    out.p_vocab = out.p_gen;
    out.scores = Tensor::filled({z_dec.rows(), 1}, 1.0);
    return out;
  }
  const std::size_t v = config.vocab_size;
  std::vector<MixtureColumn> cols;
  if (config.pointers.history) {
    out.p_his = scatter_to_vocab(pointer_distribution(z_dec, enc.g_his, enc.his_mask), enc.his_ids, v);
    cols.push_back(MixtureColumn::History);
  }
  if (config.pointers.query) {
    out.p_que = scatter_to_vocab(pointer_distribution(z_dec, enc.g_que, enc.que_mask), enc.que_ids, v);
    cols.push_back(MixtureColumn::Query);
  }
  if (config.pointers.summary) {
    out.p_cap = scatter_to_vocab(pointer_distribution(z_dec, enc.g_cap, enc.cap_mask), enc.cap_ids, v);
    cols.push_back(MixtureColumn::Summary);
  }
  cols.push_back(MixtureColumn::Generation);
  Tensor logits = mixture_logits(enc.g_his, enc.g_que, enc.g_cap, z_res, z_dec, params.w_ctx, enc.his_mask,
                                 enc.que_mask, enc.cap_mask);
  out.scores = select_mixture_scores(logits, cols);
  out.p_vocab = mix_distributions(out.p_his, out.p_que, out.p_cap, out.p_gen, out.scores);
  return out;
}

/// Query re-generation distributions from each enabled modality branch,
/// sharing the generation weights.
struct QaeDistributions {
  std::optional<Tensor> visual, audio;
};

inline QaeDistributions qae_distributions(const EncoderOutputs &enc, const MTNParams &params) {
  QaeDistributions q;
  if (enc.z_que2vis.defined()) q.visual = softmax_rows(matmul(enc.z_que2vis, params.w_gen));
  if (enc.z_que2aud.defined()) q.audio = softmax_rows(matmul(enc.z_que2aud, params.w_gen));
  return q;
}

struct ForwardOutput {
  EncoderOutputs enc;
  Tensor z_res, z_dec;
  OutputDistribution dist;
  QaeDistributions qae;
};

/// Decoder half of the forward pass given cached encoder outputs.
inline OutputDistribution decode_distribution(const MTNParams &params, const ModelConfig &config,
                                              const EncoderOutputs &enc, std::span<const TokenId> decoder_input,
                                              std::span<const std::uint8_t> decoder_mask = {},
                                              const ForwardContext &ctx = {}, Tensor *z_res_out = nullptr,
                                              Tensor *z_dec_out = nullptr) {
  auto res_mask = detail::materialize_mask(decoder_mask, decoder_input.size());
  Tensor g_res = embed_tokens(decoder_input, params.embedding);
  Tensor z_res = ctx.drop(g_res);
  Tensor z_dec = decode_responses(z_res, res_mask, enc, config, params, ctx);
  if (z_res_out) *z_res_out = z_res;
  if (z_dec_out) *z_dec_out = z_dec;
  return output_distribution(z_dec, g_res, enc, config, params);
}

inline ForwardOutput forward(const MTNParams &params, const ModelConfig &config, const ModelInput &in,
                             std::span<const TokenId> decoder_input, std::span<const std::uint8_t> decoder_mask = {},
                             const ForwardContext &ctx = {}) {
  ForwardOutput out;
  out.enc = encode(params, config, in, ctx);
  out.dist = decode_distribution(params, config, out.enc, decoder_input, decoder_mask, ctx, &out.z_res, &out.z_dec);
  out.qae = qae_distributions(out.enc, params);
  return out;
}

} // namespace mtn
