#pragma once

// Vocabulary, tokenizer, dialog/feature files, synthetic copy-task corpus
// and batching.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "mtn/random.hpp"

namespace mtn {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kStart = 1;
inline constexpr TokenId kEnd = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kSep = 4;
inline constexpr std::size_t kReservedTokens = 5;

inline constexpr std::size_t kVisualDim = 2048;
inline constexpr std::size_t kAudioDim = 128;

class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Tokenizer

/// Lowercases, splits on whitespace, and makes every punctuation character
/// its own token.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::exchange(cur, {}));
  };
  for (char raw : text) {
    auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

inline std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
public:
  Vocab() : tokens_{"<pad>", "<s>", "</s>", "<unk>", "<sep>"} { reindex(); }

  /// Restores a vocabulary from its full token list (reserved ids first).
  static Vocab from_tokens(std::vector<std::string> tokens) {
    Vocab v;
    if (tokens.size() < kReservedTokens || !std::equal(v.tokens_.begin(), v.tokens_.end(), tokens.begin()))
      throw DataError("vocabulary does not start with the reserved tokens");
    v.tokens_ = std::move(tokens);
    v.reindex();
    if (v.index_.size() != v.tokens_.size()) throw DataError("vocabulary contains duplicate tokens");
    return v;
  }

  void add(const std::string &token) {
    if (index_.count(token)) return;
    index_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(token);
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string &token) const { return index_.count(token) != 0; }

  TokenId id(const std::string &token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string &token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }

  TokenIds encode(std::span<const std::string> tokens) const {
    TokenIds ids;
    ids.reserve(tokens.size());
    for (auto &t : tokens) ids.push_back(id(t));
    return ids;
  }

  /// Drops pad/start/end/separator ids; stops at the first end token.
  std::vector<std::string> decode(std::span<const TokenId> ids) const {
    std::vector<std::string> out;
    for (TokenId id : ids) {
      if (id == kEnd) break;
      if (id == kPad || id == kStart || id == kSep) continue;
      out.push_back(token(id));
    }
    return out;
  }

  const std::vector<std::string> &tokens() const { return tokens_; }

private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Features

struct FeatureMatrix {
  std::uint32_t frames = 0;
  std::uint32_t dim = 0;
  std::vector<float> values;

  float at(std::size_t f, std::size_t c) const { return values[f * dim + c]; }
};

inline constexpr std::array<char, 8> kFeatureMagic{'M', 'T', 'N', 'F', 'E', 'A', 'T', '1'};

namespace detail {

template <typename T>
void write_le(std::ostream &os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char *>(bytes.data()), sizeof(T));
}

template <typename T>
bool read_le(std::istream &is, T &v) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!is.read(reinterpret_cast<char *>(bytes.data()), sizeof(T))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  std::memcpy(&v, bytes.data(), sizeof(T));
  return true;
}

} // namespace detail

inline void write_features(std::ostream &os, const FeatureMatrix &m) {
  if (m.frames == 0 || m.dim == 0 || m.values.size() != std::size_t{m.frames} * m.dim)
    throw DataError("feature matrix is inconsistent: " + std::to_string(m.frames) + "x" + std::to_string(m.dim) +
                    " with " + std::to_string(m.values.size()) + " values");
  os.write(kFeatureMagic.data(), kFeatureMagic.size());
  detail::write_le(os, m.frames);
  detail::write_le(os, m.dim);
  for (float v : m.values) detail::write_le(os, v);
}

inline void write_features(const std::filesystem::path &path, const FeatureMatrix &m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  write_features(os, m);
}

inline FeatureMatrix read_features(std::istream &is, const std::string &name = "feature stream") {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kFeatureMagic)
    throw DataError(name + ": bad magic, expected MTNFEAT1");
  FeatureMatrix m;
  if (!detail::read_le(is, m.frames) || !detail::read_le(is, m.dim)) throw DataError(name + ": truncated header");
  if (m.frames == 0 || m.dim == 0)
    throw DataError(name + ": empty feature matrix " + std::to_string(m.frames) + "x" + std::to_string(m.dim));
  const std::size_t n = std::size_t{m.frames} * m.dim;
  m.values.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    if (!detail::read_le(is, m.values[i]))
      throw DataError(name + ": truncated payload, got " + std::to_string(i) + " of " + std::to_string(n) + " values");
  if (is.peek() != std::char_traits<char>::eof())
    throw DataError(name + ": trailing bytes after " + std::to_string(n) + " values");
  return m;
}

inline FeatureMatrix load_features(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open feature file " + path.string());
  return read_features(is, path.string());
}

// ---------------------------------------------------------------------------
// Dialogs

struct DialogExample {
  std::string dialog_id;
  int turn = 1;
  std::vector<std::string> history; // H1, A1, ..., H(t-1), A(t-1)
  std::string query;
  std::string summary;
  std::string answer;
  std::string visual_path; // as referenced in the dialog file; may be empty
  std::string audio_path;
  std::shared_ptr<const FeatureMatrix> visual;
  std::shared_ptr<const FeatureMatrix> audio;
};

inline void validate(const DialogExample &ex) {
  if (ex.turn < 1) throw DataError(ex.dialog_id + ": turn index must be >= 1");
  if (ex.visual && ex.visual->dim != kVisualDim)
    throw DataError(ex.dialog_id + ": visual features must be " + std::to_string(kVisualDim) + " wide");
  if (ex.audio && ex.audio->dim != kAudioDim)
    throw DataError(ex.dialog_id + ": audio features must be " + std::to_string(kAudioDim) + " wide");
  if (ex.visual && ex.audio && ex.visual->frames != ex.audio->frames)
    throw DataError(ex.dialog_id + ": visual and audio clip counts differ");
}

inline nlohmann::json to_json(const DialogExample &ex) {
  nlohmann::json j;
  j["dialog_id"] = ex.dialog_id;
  j["turn"] = ex.turn;
  j["history"] = ex.history;
  j["query"] = ex.query;
  j["summary"] = ex.summary;
  j["answer"] = ex.answer;
  j["visual"] = ex.visual_path.empty() ? nlohmann::json(nullptr) : nlohmann::json(ex.visual_path);
  j["audio"] = ex.audio_path.empty() ? nlohmann::json(nullptr) : nlohmann::json(ex.audio_path);
  return j;
}

/// Writes one JSON object per line. Feature matrices are not written here.
inline void save_dialogs(const std::filesystem::path &path, std::span<const DialogExample> examples) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  for (auto &ex : examples) os << to_json(ex).dump() << '\n';
}

/// Reads a dialog file; feature references resolve relative to its directory.
inline std::vector<DialogExample> load_dialogs(const std::filesystem::path &path, bool load_feature_files = true) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dialog file " + path.string());
  std::vector<DialogExample> out;
  std::map<std::string, std::shared_ptr<const FeatureMatrix>> cache;
  auto base = path.parent_path();
  auto features = [&](const std::string &ref) -> std::shared_ptr<const FeatureMatrix> {
    auto it = cache.find(ref);
    if (it != cache.end()) return it->second;
    auto m = std::make_shared<const FeatureMatrix>(load_features(base / ref));
    cache.emplace(ref, m);
    return m;
  };
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto where = path.string() + ":" + std::to_string(lineno);
    try {
      auto j = nlohmann::json::parse(line);
      static const std::set<std::string> known{"dialog_id", "turn",   "history", "query",
                                               "summary",   "answer", "visual",  "audio"};
      for (auto &[key, _] : j.items())
        if (!known.count(key)) throw DataError("unknown field '" + key + "'");
      DialogExample ex;
      ex.dialog_id = j.at("dialog_id").get<std::string>();
      ex.turn = j.at("turn").get<int>();
      ex.history = j.value("history", std::vector<std::string>{});
      ex.query = j.at("query").get<std::string>();
      ex.summary = j.value("summary", std::string{});
      ex.answer = j.value("answer", std::string{});
      if (j.contains("visual") && !j["visual"].is_null()) ex.visual_path = j["visual"].get<std::string>();
      if (j.contains("audio") && !j["audio"].is_null()) ex.audio_path = j["audio"].get<std::string>();
      if (load_feature_files) {
        if (!ex.visual_path.empty()) ex.visual = features(ex.visual_path);
        if (!ex.audio_path.empty()) ex.audio = features(ex.audio_path);
      }
      validate(ex);
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception &e) {
      throw DataError(where + ": " + e.what());
    } catch (const DataError &e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary construction and id-level examples

inline std::vector<std::string> example_text_tokens(const DialogExample &ex) {
  std::vector<std::string> all;
  auto append = [&](const std::string &s) {
    auto t = tokenize(s);
    all.insert(all.end(), t.begin(), t.end());
  };
  for (auto &h : ex.history) append(h);
  append(ex.query);
  append(ex.summary);
  append(ex.answer);
  return all;
}

/// Reserved tokens first, then every training token seen at least
/// `min_count` times in lexicographic order.
inline Vocab build_vocab(std::span<const DialogExample> training, std::size_t min_count = 1) {
  std::map<std::string, std::size_t> counts;
  for (auto &ex : training)
    for (auto &t : example_text_tokens(ex)) ++counts[t];
  Vocab v;
  for (auto &[tok, n] : counts)
    if (n >= min_count && !v.contains(tok)) v.add(tok);
  return v;
}

struct EncodedExample {
  std::string dialog_id;
  int turn = 1;
  TokenIds history;       // turns joined and terminated by separators
  TokenIds query;
  TokenIds summary;
  TokenIds target;        // answer + end
  TokenIds decoder_input; // start + answer
  std::shared_ptr<const FeatureMatrix> visual;
  std::shared_ptr<const FeatureMatrix> audio;
};

inline EncodedExample encode_example(const DialogExample &ex, const Vocab &vocab) {
  EncodedExample e;
  e.dialog_id = ex.dialog_id;
  e.turn = ex.turn;
  for (auto &utt : ex.history) {
    auto ids = vocab.encode(tokenize(utt));
    e.history.insert(e.history.end(), ids.begin(), ids.end());
    e.history.push_back(kSep);
  }
  if (e.history.empty()) e.history.push_back(kSep);
  e.query = vocab.encode(tokenize(ex.query));
  if (e.query.empty()) throw DataError(ex.dialog_id + ": empty query");
  e.summary = vocab.encode(tokenize(ex.summary));
  if (e.summary.empty()) e.summary.push_back(kSep);
  auto answer = vocab.encode(tokenize(ex.answer));
  e.target = answer;
  e.target.push_back(kEnd);
  e.decoder_input.push_back(kStart);
  e.decoder_input.insert(e.decoder_input.end(), answer.begin(), answer.end());
  e.visual = ex.visual;
  e.audio = ex.audio;
  return e;
}

inline std::vector<EncodedExample> encode_corpus(std::span<const DialogExample> corpus, const Vocab &vocab) {
  std::vector<EncodedExample> out;
  out.reserve(corpus.size());
  for (auto &ex : corpus) out.push_back(encode_example(ex, vocab));
  return out;
}

// ---------------------------------------------------------------------------
// Batching

struct PaddedTokens {
  std::size_t rows = 0, cols = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask; // 1 = real token

  std::span<const TokenId> row(std::size_t i) const { return {ids.data() + i * cols, cols}; }
  std::span<const std::uint8_t> row_mask(std::size_t i) const { return {mask.data() + i * cols, cols}; }
  std::size_t length(std::size_t i) const {
    auto m = row_mask(i);
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
  }
};

inline PaddedTokens pad_sequences(const std::vector<const TokenIds *> &seqs, TokenId pad_id) {
  PaddedTokens p;
  p.rows = seqs.size();
  for (auto *s : seqs) p.cols = std::max(p.cols, s->size());
  p.ids.assign(p.rows * p.cols, pad_id);
  p.mask.assign(p.rows * p.cols, 0);
  for (std::size_t i = 0; i < p.rows; ++i)
    for (std::size_t j = 0; j < seqs[i]->size(); ++j) {
      p.ids[i * p.cols + j] = (*seqs[i])[j];
      p.mask[i * p.cols + j] = 1;
    }
  return p;
}

struct Batch {
  std::vector<std::size_t> indices; // positions in the source corpus
  PaddedTokens history, query, summary, decoder_input, target;
  std::vector<std::shared_ptr<const FeatureMatrix>> visual, audio;
  std::size_t size() const { return indices.size(); }
};

/// Groups examples into padded batches. With a seed the order is a
/// seeded permutation; without one it is corpus order.
inline std::vector<Batch> make_batches(std::span<const EncodedExample> corpus, std::size_t batch_size,
                                       TokenId pad_id = kPad, std::optional<std::uint64_t> shuffle_seed = {}) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    std::mt19937_64 rng(*shuffle_seed);
    shuffle(order, rng);
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    Batch b;
    std::vector<const TokenIds *> his, que, sum, din, tgt;
    for (std::size_t k = start; k < std::min(order.size(), start + batch_size); ++k) {
      const auto &ex = corpus[order[k]];
      b.indices.push_back(order[k]);
      his.push_back(&ex.history);
      que.push_back(&ex.query);
      sum.push_back(&ex.summary);
      din.push_back(&ex.decoder_input);
      tgt.push_back(&ex.target);
      b.visual.push_back(ex.visual);
      b.audio.push_back(ex.audio);
    }
    b.history = pad_sequences(his, pad_id);
    b.query = pad_sequences(que, pad_id);
    b.summary = pad_sequences(sum, pad_id);
    b.decoder_input = pad_sequences(din, pad_id);
    b.target = pad_sequences(tgt, pad_id);
    batches.push_back(std::move(b));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Synthetic copy-task corpus

enum class AnswerMode { CopySummary, CopyQuery, Mixed };

inline std::string to_string(AnswerMode m) {
  switch (m) {
  case AnswerMode::CopySummary: return "summary";
  case AnswerMode::CopyQuery: return "query";
  case AnswerMode::Mixed: return "mixed";
  }
  return "?";
}

inline AnswerMode parse_answer_mode(const std::string &s) {
  if (s == "summary") return AnswerMode::CopySummary;
  if (s == "query") return AnswerMode::CopyQuery;
  if (s == "mixed") return AnswerMode::Mixed;
  throw std::invalid_argument("unknown answer mode '" + s + "' (expected summary, query or mixed)");
}

struct SynthOptions {
  std::uint64_t seed = 0;
  std::size_t n_examples = 100;
  std::size_t vocab_size = 100; // including the reserved tokens
  AnswerMode mode = AnswerMode::Mixed;
  bool visual = true;
  bool audio = true;
  std::string id_prefix = "dlg";
};

namespace synth {
// Cue words and the marker are part of the vocabulary budget.
inline const std::string kCueQuery = "which";
inline const std::string kCueSummary = "first";
inline const std::string kMarker = "*";
inline constexpr std::size_t kFunctionTokens = 3;
inline constexpr std::size_t kMinContent = 16;

inline std::size_t content_count(std::size_t vocab_size) {
  if (vocab_size < kReservedTokens + kFunctionTokens + kMinContent)
    throw std::invalid_argument("synthetic vocabulary needs at least " +
                                std::to_string(kReservedTokens + kFunctionTokens + kMinContent) + " tokens");
  return vocab_size - kReservedTokens - kFunctionTokens;
}

inline std::string content_word(std::size_t i) {
  std::ostringstream os;
  os << 'w' << std::setw(3) << std::setfill('0') << i;
  return os.str();
}

inline std::shared_ptr<const FeatureMatrix> random_features(std::mt19937_64 &rng, std::uint32_t frames,
                                                            std::uint32_t dim) {
  auto m = std::make_shared<FeatureMatrix>();
  m->frames = frames;
  m->dim = dim;
  m->values.resize(std::size_t{frames} * dim);
  for (auto &v : m->values) v = static_cast<float>(uniform_real(rng, -1.0, 1.0));
  return m;
}
} // namespace synth

/// Deterministic dialog corpus whose answers copy query/summary tokens.
///
/// Each dialog has a summary of 5-8 distinct content words shared by its
/// 1-3 turns. A query starts with a cue word, followed by 1-3 distractor
/// words absent from the summary with a marked span of 1-3 summary words
/// (enclosed by two markers) inserted among them. Query-copy answers repeat
/// the marked span; summary-copy answers are the first two summary words.
inline std::vector<DialogExample> synth_copy_corpus(const SynthOptions &opt) {
  const std::size_t n_content = synth::content_count(opt.vocab_size);
  std::mt19937_64 rng(derive_seed(opt.seed, 0x5ca1ab1e));
  std::vector<DialogExample> out;
  out.reserve(opt.n_examples);
  std::size_t dialog_index = 0;
  while (out.size() < opt.n_examples) {
    std::ostringstream id;
    id << opt.id_prefix << '-' << std::setw(5) << std::setfill('0') << dialog_index++;

    std::vector<std::size_t> pool(n_content);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    shuffle(pool, rng);
    const auto summary_len = static_cast<std::size_t>(uniform_int(rng, 5, 8));
    std::vector<std::string> summary;
    for (std::size_t i = 0; i < summary_len; ++i) summary.push_back(synth::content_word(pool[i]));
    std::vector<std::string> outside;
    for (std::size_t i = summary_len; i < pool.size(); ++i) outside.push_back(synth::content_word(pool[i]));

    const auto frames = static_cast<std::uint32_t>(uniform_int(rng, 2, 8));
    std::shared_ptr<const FeatureMatrix> vis, aud;
    if (opt.visual) vis = synth::random_features(rng, frames, kVisualDim);
    if (opt.audio) aud = synth::random_features(rng, frames, kAudioDim);

    const auto turns = std::min<std::size_t>(static_cast<std::size_t>(uniform_int(rng, 1, 3)),
                                             opt.n_examples - out.size());
    std::vector<std::string> history;
    for (std::size_t t = 1; t <= turns; ++t) {
      bool copy_query = opt.mode == AnswerMode::CopyQuery ||
                        (opt.mode == AnswerMode::Mixed && uniform_int(rng, 0, 1) == 1);
      const auto marked = static_cast<std::size_t>(uniform_int(rng, 1, 3));
      const auto distract = static_cast<std::size_t>(uniform_int(rng, 1, 3));
      std::vector<std::size_t> spos(summary_len);
      std::iota(spos.begin(), spos.end(), std::size_t{0});
      shuffle(spos, rng);
      std::vector<std::string> span;
      for (std::size_t i = 0; i < marked; ++i) span.push_back(summary[spos[i]]);
      std::vector<std::size_t> dpos(outside.size());
      std::iota(dpos.begin(), dpos.end(), std::size_t{0});
      shuffle(dpos, rng);
      const auto before = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(distract)));

      std::vector<std::string> query{copy_query ? synth::kCueQuery : synth::kCueSummary};
      for (std::size_t i = 0; i < before; ++i) query.push_back(outside[dpos[i]]);
      query.push_back(synth::kMarker);
      query.insert(query.end(), span.begin(), span.end());
      query.push_back(synth::kMarker);
      for (std::size_t i = before; i < distract; ++i) query.push_back(outside[dpos[i]]);
      const std::vector<std::string> answer = copy_query ? span : std::vector<std::string>{summary[0], summary[1]};

      DialogExample ex;
      ex.dialog_id = id.str();
      ex.turn = static_cast<int>(t);
      ex.history = history;
      ex.query = detokenize(query);
      ex.summary = detokenize(summary);
      ex.answer = detokenize(answer);
      ex.visual = vis;
      ex.audio = aud;
      if (vis) ex.visual_path = "features/" + id.str() + ".vis.bin";
      if (aud) ex.audio_path = "features/" + id.str() + ".aud.bin";
      out.push_back(std::move(ex));

      history.push_back(detokenize(query));
      history.push_back(detokenize(answer));
      // Only the two most recent turns are kept as context.
      if (history.size() > 4) history.erase(history.begin(), history.begin() + 2);
    }
  }
  return out;
}

/// Writes a corpus as a dialog file plus its referenced feature files.
inline void save_corpus(const std::filesystem::path &dialog_file, std::span<const DialogExample> corpus) {
  auto base = dialog_file.parent_path();
  if (!base.empty()) std::filesystem::create_directories(base);
  std::set<std::string> written;
  for (auto &ex : corpus) {
    for (auto [ref, mat] : {std::pair{ex.visual_path, ex.visual}, std::pair{ex.audio_path, ex.audio}}) {
      if (ref.empty() || !mat || !written.insert(ref).second) continue;
      auto p = base / ref;
      std::filesystem::create_directories(p.parent_path());
      write_features(p, *mat);
    }
  }
  save_dialogs(dialog_file, corpus);
}

} // namespace mtn
