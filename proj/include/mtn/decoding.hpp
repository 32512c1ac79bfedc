#pragma once

// Beam search over a step distribution, optionally averaged across models.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtn/checkpoint.hpp"
#include "mtn/data.hpp"
#include "mtn/model.hpp"

namespace mtn {

struct BeamOptions {
  std::size_t beam_size = 5;
  double length_penalty = 1.0;
  std::size_t max_len = 20;
  TokenId start = kStart;
  TokenId end = kEnd;

  void validate() const {
    if (beam_size == 0) throw std::invalid_argument("beam size must be >= 1");
    if (max_len == 0) throw std::invalid_argument("max length must be >= 1");
    if (length_penalty < 0.0) throw std::invalid_argument("length penalty must be >= 0");
  }
};

struct Hypothesis {
  TokenIds tokens; // generated tokens, the end token included when finished
  double log_prob = 0.0;
  bool finished = false;
};

/// log p / len^penalty with len counting generated tokens.
inline double normalized_score(const Hypothesis &h, double length_penalty) {
  const double len = static_cast<double>(std::max<std::size_t>(h.tokens.size(), 1));
  return h.log_prob / std::pow(len, length_penalty);
}

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> beams; // final beam, best first
  bool truncated = false;        // best hypothesis hit max_len without the end token

  /// Generated tokens without the trailing end token.
  TokenIds output(TokenId end = kEnd) const {
    TokenIds out = best.tokens;
    if (!out.empty() && out.back() == end) out.pop_back();
    return out;
  }
};

/// `next` maps a prefix (start token first) to a probability row over the
/// vocabulary. Pruning keeps the `beam_size` highest raw log-probabilities;
/// the final choice uses the length-normalised score. Ties at either stage go
/// to the lexicographically smaller token sequence.
template <typename NextFn>
BeamResult beam_search(NextFn &&next, const BeamOptions &opt) {
  opt.validate();
  auto lex_less = [](const Hypothesis &a, const Hypothesis &b) { return a.tokens < b.tokens; };
  std::vector<Hypothesis> beams{Hypothesis{}};
  TokenIds prefix;
  for (std::size_t step = 0; step < opt.max_len; ++step) {
    std::vector<Hypothesis> candidates;
    for (auto &h : beams) {
      if (h.finished) {
        candidates.push_back(h);
        continue;
      }
      prefix.assign(1, opt.start);
      prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
      const std::vector<double> row = next(std::span<const TokenId>(prefix));
      for (std::size_t w = 0; w < row.size(); ++w) {
        if (!(row[w] > 0.0)) continue;
        Hypothesis c{h.tokens, h.log_prob + std::log(row[w]), static_cast<TokenId>(w) == opt.end};
        c.tokens.push_back(static_cast<TokenId>(w));
        candidates.push_back(std::move(c));
      }
    }
    if (candidates.empty()) throw std::runtime_error("beam search: every continuation has zero probability");
    const std::size_t keep = std::min(opt.beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [&](const Hypothesis &a, const Hypothesis &b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        return lex_less(a, b);
                      });
    candidates.resize(keep);
    beams = std::move(candidates);
    if (std::all_of(beams.begin(), beams.end(), [](const Hypothesis &h) { return h.finished; })) break;
  }
  std::sort(beams.begin(), beams.end(), [&](const Hypothesis &a, const Hypothesis &b) {
    const double sa = normalized_score(a, opt.length_penalty), sb = normalized_score(b, opt.length_penalty);
    if (sa != sb) return sa > sb;
    return lex_less(a, b);
  });
  BeamResult r;
  r.best = beams.front();
  r.truncated = !r.best.finished;
  r.beams = std::move(beams);
  return r;
}

/// Repeated arg-max (lowest id on ties) until the end token or max_len.
template <typename NextFn>
BeamResult greedy_search(NextFn &&next, std::size_t max_len, TokenId start = kStart, TokenId end = kEnd) {
  if (max_len == 0) throw std::invalid_argument("max length must be >= 1");
  Hypothesis h;
  TokenIds prefix{start};
  while (h.tokens.size() < max_len) {
    const std::vector<double> row = next(std::span<const TokenId>(prefix));
    if (row.empty()) throw std::runtime_error("empty step distribution");
    std::size_t best = 0;
    for (std::size_t w = 1; w < row.size(); ++w)
      if (row[w] > row[best]) best = w;
    h.log_prob += std::log(row[best]);
    h.tokens.push_back(static_cast<TokenId>(best));
    prefix.push_back(static_cast<TokenId>(best));
    if (static_cast<TokenId>(best) == end) {
      h.finished = true;
      break;
    }
  }
  BeamResult r;
  r.best = h;
  r.truncated = !h.finished;
  r.beams = {h};
  return r;
}

/// Sums the rows and renormalises to a distribution.
inline std::vector<double> average_distributions(std::span<const std::vector<double>> rows) {
  if (rows.empty()) throw std::invalid_argument("ensemble of zero models");
  std::vector<double> out(rows.front().size(), 0.0);
  for (auto &r : rows) {
    if (r.size() != out.size()) throw ShapeError("ensemble members disagree on vocabulary size");
    for (std::size_t i = 0; i < r.size(); ++i) out[i] += r[i];
  }
  double total = 0.0;
  for (double v : out) total += v;
  if (!(total > 0.0)) throw DegenerateRowError("ensemble distribution has no mass");
  for (auto &v : out) v /= total;
  return out;
}

/// A trained model ready for inference.
struct LoadedModel {
  ModelConfig config;
  Vocab vocab;
  MTNParams params;

  static LoadedModel from(Checkpoint ck) { return {std::move(ck.config), std::move(ck.vocab), std::move(ck.params)}; }
};

/// Step distribution of one example under an ensemble. Encoder outputs are
/// computed once per member; each call decodes the whole prefix.
class EnsembleStepper {
public:
  EnsembleStepper(std::span<const LoadedModel *const> models, const EncodedExample &ex) : models_(models.begin(), models.end()) {
    if (models_.empty()) throw std::invalid_argument("no models to decode with");
    for (auto *m : models_) {
      if (m->vocab.tokens() != models_.front()->vocab.tokens())
        throw std::invalid_argument("ensemble members must share a vocabulary");
      NoGradGuard no_grad;
      enc_.push_back(encode(m->params, m->config, ModelInput::from(ex)));
    }
  }

  std::vector<double> operator()(std::span<const TokenId> prefix) const {
    NoGradGuard no_grad;
    std::vector<std::vector<double>> rows;
    for (std::size_t k = 0; k < models_.size(); ++k) {
      auto dist = decode_distribution(models_[k]->params, models_[k]->config, enc_[k], prefix);
      const auto &p = dist.p_vocab;
      auto v = p.values();
      const std::size_t last = p.rows() - 1;
      rows.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(last * p.cols()),
                        v.begin() + static_cast<std::ptrdiff_t>((last + 1) * p.cols()));
    }
    return rows.size() == 1 ? rows.front() : average_distributions(rows);
  }

private:
  std::vector<const LoadedModel *> models_;
  std::vector<EncoderOutputs> enc_;
};

struct GeneratedResponse {
  std::string dialog_id;
  int turn = 0;
  std::vector<std::string> tokens;
  bool truncated = false;

  std::string text() const { return detokenize(tokens); }
};

inline GeneratedResponse generate_response(std::span<const LoadedModel *const> models, const DialogExample &ex,
                                           const BeamOptions &opt) {
  if (models.empty()) throw std::invalid_argument("no models to decode with");
  auto enc = encode_example(ex, models.front()->vocab);
  EnsembleStepper stepper(models, enc);
  auto r = beam_search(stepper, opt);
  return {ex.dialog_id, ex.turn, models.front()->vocab.decode(r.output(opt.end)), r.truncated};
}

/// One JSON object per line: dialog_id, turn, response, truncated.
inline void save_responses(const std::filesystem::path &path, std::span<const GeneratedResponse> responses) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  for (auto &r : responses) {
    nlohmann::json j{{"dialog_id", r.dialog_id}, {"turn", r.turn}, {"response", r.text()}, {"truncated", r.truncated}};
    os << j.dump() << '\n';
  }
}

} // namespace mtn
