#pragma once

// Corpus-level BLEU-1..4, ROUGE-L and CIDEr-D over token sequences.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace mtn {

using Words = std::vector<std::string>;

struct EvalPair {
  Words hypothesis;
  std::vector<Words> references;
};

using NgramCounts = std::map<Words, std::size_t>;

inline NgramCounts ngram_counts(const Words &w, std::size_t n) {
  NgramCounts c;
  if (n == 0 || w.size() < n) return c;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++c[Words(w.begin() + static_cast<std::ptrdiff_t>(i),
                                                           w.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return c;
}

namespace detail {
inline void require_references(std::span<const EvalPair> corpus) {
  for (auto &p : corpus)
    if (p.references.empty()) throw std::invalid_argument("evaluation pair without references");
}
} // namespace detail

// ---------------------------------------------------------------------------
// BLEU

/// Corpus BLEU-n without smoothing. The reference length per pair is the one
/// closest to the hypothesis length, the shorter one on ties.
inline double bleu(std::span<const EvalPair> corpus, std::size_t n) {
  if (n < 1 || n > 4) throw std::invalid_argument("BLEU order must be in 1..4");
  detail::require_references(corpus);
  std::array<double, 4> matched{}, total{};
  double hyp_len = 0.0, ref_len = 0.0;
  for (auto &p : corpus) {
    const auto c = p.hypothesis.size();
    hyp_len += static_cast<double>(c);
    std::size_t best = p.references.front().size();
    for (auto &r : p.references) {
      const auto diff = [c](std::size_t len) { return len > c ? len - c : c - len; };
      if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best)) best = r.size();
    }
    ref_len += static_cast<double>(best);
    for (std::size_t k = 1; k <= n; ++k) {
      auto hyp = ngram_counts(p.hypothesis, k);
      NgramCounts max_ref;
      for (auto &r : p.references)
        for (auto &[g, cnt] : ngram_counts(r, k)) max_ref[g] = std::max(max_ref[g], cnt);
      for (auto &[g, cnt] : hyp) {
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matched[k - 1] += static_cast<double>(std::min(cnt, it->second));
        total[k - 1] += static_cast<double>(cnt);
      }
    }
  }
  if (hyp_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (matched[k] == 0.0 || total[k] == 0.0) return 0.0;
    log_sum += std::log(matched[k] / total[k]);
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// ROUGE-L

inline constexpr double kRougeBeta = 1.2;

inline std::size_t lcs_length(const Words &a, const Words &b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// LCS F-measure of one pair using the best precision and best recall over
/// the references.
inline double rouge_l(const EvalPair &p, double beta = kRougeBeta) {
  if (p.references.empty()) throw std::invalid_argument("evaluation pair without references");
  if (p.hypothesis.empty()) return 0.0;
  double prec = 0.0, rec = 0.0;
  for (auto &r : p.references) {
    if (r.empty()) continue;
    const double l = static_cast<double>(lcs_length(p.hypothesis, r));
    prec = std::max(prec, l / static_cast<double>(p.hypothesis.size()));
    rec = std::max(rec, l / static_cast<double>(r.size()));
  }
  if (prec == 0.0 || rec == 0.0) return 0.0;
  const double b2 = beta * beta;
  return (1.0 + b2) * prec * rec / (rec + b2 * prec);
}

inline double rouge_l(std::span<const EvalPair> corpus, double beta = kRougeBeta) {
  if (corpus.empty()) return 0.0;
  double s = 0.0;
  for (auto &p : corpus) s += rouge_l(p, beta);
  return s / static_cast<double>(corpus.size());
}

// ---------------------------------------------------------------------------
// CIDEr-D

inline constexpr double kCiderSigma = 6.0;
inline constexpr std::size_t kCiderMaxN = 4;

/// Document frequency of each n-gram: the number of pairs whose reference set
/// contains it.
inline std::map<Words, std::size_t> cider_document_frequency(std::span<const EvalPair> corpus) {
  std::map<Words, std::size_t> df;
  for (auto &p : corpus) {
    std::set<Words> seen;
    for (auto &r : p.references)
      for (std::size_t n = 1; n <= kCiderMaxN; ++n)
        for (auto &[g, _] : ngram_counts(r, n)) seen.insert(g);
    for (auto &g : seen) ++df[g];
  }
  return df;
}

namespace detail {

struct TfIdf {
  std::array<std::map<Words, double>, kCiderMaxN> vec;
  std::array<double, kCiderMaxN> norm{};
  double length = 0.0;
};

inline TfIdf tf_idf(const Words &w, const std::map<Words, std::size_t> &df, double log_n) {
  TfIdf t;
  t.length = static_cast<double>(w.size());
  for (std::size_t n = 1; n <= kCiderMaxN; ++n) {
    for (auto &[g, tf] : ngram_counts(w, n)) {
      auto it = df.find(g);
      const double d = it == df.end() ? 0.0 : static_cast<double>(it->second);
      const double v = static_cast<double>(tf) * (log_n - std::log(std::max(1.0, d)));
      t.vec[n - 1][g] = v;
      t.norm[n - 1] += v * v;
    }
    t.norm[n - 1] = std::sqrt(t.norm[n - 1]);
  }
  return t;
}

} // namespace detail

/// Per-pair CIDEr-D: for each order, clipped tf-idf cosine damped by a
/// gaussian on the length difference; averaged over orders and references,
/// times ten.
inline std::vector<double> cider_scores(std::span<const EvalPair> corpus, double sigma = kCiderSigma) {
  detail::require_references(corpus);
  std::vector<double> scores;
  if (corpus.empty()) return scores;
  const auto df = cider_document_frequency(corpus);
  const double log_n = std::log(static_cast<double>(corpus.size()));
  for (auto &p : corpus) {
    auto hyp = detail::tf_idf(p.hypothesis, df, log_n);
    double total = 0.0;
    for (auto &r : p.references) {
      auto ref = detail::tf_idf(r, df, log_n);
      const double delta = hyp.length - ref.length;
      const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      for (std::size_t n = 0; n < kCiderMaxN; ++n) {
        double val = 0.0;
        for (auto &[g, hv] : hyp.vec[n]) {
          auto it = ref.vec[n].find(g);
          if (it != ref.vec[n].end()) val += std::min(hv, it->second) * it->second;
        }
        if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val /= hyp.norm[n] * ref.norm[n];
        total += val * penalty;
      }
    }
    scores.push_back(10.0 * total / static_cast<double>(kCiderMaxN) / static_cast<double>(p.references.size()));
  }
  return scores;
}

inline double cider(std::span<const EvalPair> corpus, double sigma = kCiderSigma) {
  auto s = cider_scores(corpus, sigma);
  if (s.empty()) return 0.0;
  double total = 0.0;
  for (double v : s) total += v;
  return total / static_cast<double>(s.size());
}

// ---------------------------------------------------------------------------
// Report

struct MetricReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;
  std::size_t pairs = 0;

  nlohmann::ordered_json to_json() const {
    return {{"BLEU1", bleu[0]}, {"BLEU2", bleu[1]}, {"BLEU3", bleu[2]}, {"BLEU4", bleu[3]},
            {"ROUGE_L", rouge_l}, {"CIDEr", cider},  {"pairs", pairs}};
  }

  /// Two aligned lines: column names, then values.
  std::string to_text() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-8s %-8s %-8s %-8s %-8s %-8s\n%-8.4f %-8.4f %-8.4f %-8.4f %-8.4f %-8.4f\n",
                  "BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE_L", "CIDEr", bleu[0], bleu[1], bleu[2], bleu[3], rouge_l,
                  cider);
    return buf;
  }
};

inline MetricReport evaluate_corpus(std::span<const EvalPair> corpus) {
  MetricReport r;
  for (std::size_t n = 1; n <= 4; ++n) r.bleu[n - 1] = bleu(corpus, n);
  r.rouge_l = rouge_l(corpus);
  r.cider = cider(corpus);
  r.pairs = corpus.size();
  return r;
}

} // namespace mtn
