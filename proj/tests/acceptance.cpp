// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
//   acceptance [--workdir DIR] [--only 1,4,...]

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "mtn/cli.hpp"
#include "oracles.hpp"

using namespace mtn;
using mtn::testing::gradient_check;
using mtn::testing::GradCheck;
using mtn::testing::probe;
using mtn::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kOpGradTol = 1e-4;
constexpr double kEndToEndGradTol = 1e-3;
constexpr double kGradBudgetSeconds = 120.0;
constexpr double kAttentionOracleTol = 1e-10;
constexpr double kCiderOracleTol = 1e-9;
constexpr double kRowSumTol = 1e-6;
constexpr int kStochasticInstances = 1000;
constexpr double kCopyAccuracy = 0.90;
constexpr double kCopyGap = 0.15;
constexpr double kCopyBudgetSeconds = 1800.0;
constexpr double kClipExampleTol = 1e-12;
constexpr int kGreedyModels = 100;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char *f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path &p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("missing " + p.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Runs the command-line front end in-process; throws on a nonzero exit.
std::string cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mtn");
  std::vector<const char *> argv;
  for (auto &a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  if (run_cli(static_cast<int>(argv.size()), argv.data(), out, err) != 0)
    throw std::runtime_error("mtn " + args.at(1) + " failed: " + err.str());
  return out.str();
}

fs::path fresh_dir(const fs::path &p) {
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------
// Micro model shared by several criteria: d=8, h=2, N=1, |V|=12, F=3.

ModelConfig micro_config(PointerSources pointers = {true, true, true}) {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.rounds = 1;
  c.vocab_size = 12;
  c.visual_dim = 6;
  c.audio_dim = 5;
  c.dropout = 0.0;
  c.pointers = pointers;
  c.features = {true, true};
  return c;
}

std::shared_ptr<const FeatureMatrix> micro_features(std::uint32_t dim, std::mt19937_64 &rng) {
  auto m = std::make_shared<FeatureMatrix>();
  m->frames = 3;
  m->dim = dim;
  for (std::size_t i = 0; i < std::size_t{3} * dim; ++i) m->values.push_back(static_cast<float>(unit_uniform(rng) * 2 - 1));
  return m;
}

EncodedExample micro_example(std::mt19937_64 &rng) {
  auto tokens = [&](std::size_t n) {
    TokenIds t(n);
    for (auto &id : t) id = static_cast<TokenId>(uniform_int(rng, kReservedTokens, 11));
    return t;
  };
  EncodedExample ex;
  ex.history = tokens(4);
  ex.query = tokens(3);
  ex.summary = tokens(4);
  auto answer = tokens(3);
  ex.target = answer;
  ex.target.push_back(kEnd);
  ex.decoder_input = {kStart};
  ex.decoder_input.insert(ex.decoder_input.end(), answer.begin(), answer.end());
  ex.visual = micro_features(6, rng);
  ex.audio = micro_features(5, rng);
  return ex;
}

MultiHeadParams random_mha(std::size_t d, std::size_t heads, std::mt19937_64 &rng) {
  return {heads,
          random_tensor({d, d}, rng), random_tensor({d}, rng), random_tensor({d, d}, rng), random_tensor({d}, rng),
          random_tensor({d, d}, rng), random_tensor({d}, rng), random_tensor({d, d}, rng), random_tensor({d}, rng)};
}

AttentionBlockParams random_block(std::size_t d, std::size_t heads, std::mt19937_64 &rng) {
  return {random_mha(d, heads, rng),
          {random_tensor({d, 2 * d}, rng), random_tensor({2 * d}, rng), random_tensor({2 * d, d}, rng),
           random_tensor({d}, rng)},
          random_tensor({d}, rng, 0.5, 1.5),
          random_tensor({d}, rng)};
}

std::vector<Tensor> mha_tensors(const MultiHeadParams &p) {
  return {p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo};
}

std::vector<std::int32_t> random_ids(std::size_t n, std::size_t vocab, std::mt19937_64 &rng) {
  std::vector<std::int32_t> ids(n);
  for (auto &id : ids) id = static_cast<std::int32_t>(uniform_int(rng, 0, static_cast<std::int64_t>(vocab) - 1));
  return ids;
}

/// Random 0/1 mask with at least one allowed entry (always the first when `first`).
std::vector<std::uint8_t> random_mask(std::size_t n, std::mt19937_64 &rng, bool first = false) {
  std::vector<std::uint8_t> m(n);
  for (auto &x : m) x = uniform_int(rng, 0, 3) != 0;
  if (first || std::find(m.begin(), m.end(), 1) == m.end()) m[0] = 1;
  return m;
}

// ---------------------------------------------------------------------------
// 1. Gradient integrity

Outcome gradient_integrity(const fs::path &) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name = "-";
  std::size_t checked = 0;
  auto record = [&](const std::string &op, const std::vector<GradCheck> &checks) {
    for (auto &c : checks) {
      ++checked;
      if (c.relative_error > worst) {
        worst = c.relative_error;
        worst_name = op + ":" + c.name;
      }
    }
  };

  std::mt19937_64 rng(1);
  for (int inst = 0; inst < 5; ++inst) {
    auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng), c = random_tensor({5, 4}, rng);
    auto bias = random_tensor({5}, rng), x = random_tensor({3, 4}, rng), y = random_tensor({3, 4}, rng);
    record("matmul", gradient_check([&] { return probe(matmul(a, b)); }, {a, b}));
    record("matmul_nt", gradient_check([&] { return probe(matmul_nt(a, c)); }, {a, c}));
    record("linear", gradient_check([&] { return probe(linear(a, b, bias)); }, {a, b, bias}));
    record("add_scale_relu", gradient_check([&] { return probe(relu(add(scale(x, 1.7), y))); }, {x, y}));
    record("transpose_sum", gradient_check([&] { return sum(matmul(transpose(x), y)); }, {x, y}));

    auto s = random_tensor({3, 5}, rng, -2, 2);
    auto keys = random_mask(5, rng);
    record("softmax", gradient_check([&] { return probe(softmax_rows(s, Mask::keys(3, keys))); }, {s}));
    auto gain = random_tensor({4}, rng, 0.5, 1.5), lb = random_tensor({4}, rng);
    record("layer_norm", gradient_check([&] { return probe(layer_norm(x, gain, lb)); }, {x, gain, lb}));
    FeedForwardParams ff{random_tensor({4, 8}, rng), random_tensor({8}, rng), random_tensor({8, 4}, rng),
                         random_tensor({4}, rng)};
    record("feed_forward", gradient_check([&] { return probe(feed_forward(x, ff)); }, {x, ff.w1, ff.b1, ff.w2, ff.b2}));
    auto table = random_tensor({7, 4}, rng);
    auto ids = random_ids(5, 7, rng);
    record("embedding", gradient_check([&] { return probe(embedding_lookup(table, ids)); }, {table}));
    record("dropout", gradient_check(
                          [&] {
                            std::mt19937_64 fixed(9);
                            return probe(dropout(x, 0.3, true, fixed));
                          },
                          {x}));
    auto rows = random_mask(3, rng);
    record("concat_mean_broadcast_slice", gradient_check(
                                              [&] {
                                                auto m = broadcast_rows(mean_rows(x, rows), 3);
                                                return probe(slice_cols(concat_last_dim({m, y}), 2, 5));
                                              },
                                              {x, y}));

    const std::size_t d = 8;
    auto z1 = random_tensor({3, d}, rng), z2 = random_tensor({4, d}, rng), zs = random_tensor({3, d}, rng);
    auto mha = random_mha(d, 2, rng);
    auto key_mask = random_mask(4, rng);
    auto mha_inputs = mha_tensors(mha);
    mha_inputs.push_back(z1);
    mha_inputs.push_back(z2);
    record("multi_head_attention",
           gradient_check([&] { return probe(multi_head_attention(z1, z2, key_mask, false, mha)); }, mha_inputs));
    record("causal_attention", gradient_check([&] { return probe(multi_head_attention(zs, zs, {}, true, mha)); },
                                              {zs, mha.wq, mha.wk, mha.wv}));
    auto block = random_block(d, 2, rng);
    record("attention_block", gradient_check([&] { return probe(attention_block(z1, z2, key_mask, false, block, {})); },
                                             {z1, z2, block.attn.wq, block.ff.w1, block.ff.b2, block.ln_gain, block.ln_bias}));

    const std::size_t vocab = 9;
    auto z_dec = random_tensor({3, d}, rng), z_src = random_tensor({5, d}, rng);
    auto src_mask = random_mask(5, rng);
    auto src_ids = random_ids(5, vocab, rng);
    record("pointer_distribution",
           gradient_check([&] { return probe(pointer_distribution(z_dec, z_src, src_mask)); }, {z_dec, z_src}));
    record("scatter_to_vocab", gradient_check(
                                   [&] { return probe(scatter_to_vocab(pointer_distribution(z_dec, z_src), src_ids, vocab)); },
                                   {z_dec, z_src}));
    auto w_gen = random_tensor({d, vocab}, rng);
    record("generation_distribution",
           gradient_check([&] { return probe(generation_distribution(z_dec, w_gen)); }, {z_dec, w_gen}));
    auto z_his = random_tensor({4, d}, rng), z_que = random_tensor({2, d}, rng), z_cap = random_tensor({5, d}, rng);
    auto z_res = random_tensor({3, d}, rng), w_ctx = random_tensor({5 * d, 4}, rng);
    record("mixture_scores", gradient_check(
                                 [&] { return probe(mixture_scores(z_his, z_que, z_cap, z_res, z_dec, w_ctx, {}, {}, src_mask)); },
                                 {z_his, z_que, z_cap, z_res, z_dec, w_ctx}));
    auto ids_h = random_ids(4, vocab, rng), ids_q = random_ids(2, vocab, rng), ids_c = random_ids(5, vocab, rng);
    record("mix_distributions", gradient_check(
                                    [&] {
                                      auto ph = scatter_to_vocab(pointer_distribution(z_dec, z_his), ids_h, vocab);
                                      auto pq = scatter_to_vocab(pointer_distribution(z_dec, z_que), ids_q, vocab);
                                      auto pc = scatter_to_vocab(pointer_distribution(z_dec, z_cap), ids_c, vocab);
                                      auto pg = generation_distribution(z_dec, w_gen);
                                      auto sc = mixture_scores(z_his, z_que, z_cap, z_res, z_dec, w_ctx);
                                      return probe(mix_distributions(ph, pq, pc, pg, sc));
                                    },
                                    {z_his, z_que, z_cap, z_res, z_dec, w_ctx, w_gen}));
    auto logits = random_tensor({4, vocab}, rng, -2, 2);
    TokenIds targets{3, 5, 0, 8};
    std::vector<std::uint8_t> target_mask{1, 1, 0, 1};
    record("generation_loss",
           gradient_check([&] { return generation_loss(softmax_rows(logits), targets, target_mask, 0.1); }, {logits}));
  }
  const double op_worst = worst;
  const std::string op_worst_name = worst_name;

  // End-to-end micro model, every parameter tensor.
  auto config = micro_config();
  std::mt19937_64 ex_rng(61);
  auto params = init_params(config, 3);
  auto ex = micro_example(ex_rng);
  TrainConfig tc;
  tc.label_smoothing = 0.1;
  std::vector<Tensor> tensors;
  std::vector<std::string> names;
  params.visit([&](const std::string &name, Tensor &t) {
    tensors.push_back(t);
    names.push_back(name);
  });
  auto loss = [&] {
    return example_loss(params, config, ModelInput::from(ex), ex.decoder_input, ex.target, {}, tc, {}).total;
  };
  double e2e = 0.0;
  std::string e2e_name = "-";
  for (auto &c : gradient_check(loss, tensors, names))
    if (c.relative_error > e2e) {
      e2e = c.relative_error;
      e2e_name = c.name;
    }
  const double secs = seconds_since(t0);
  return {op_worst < kOpGradTol && e2e < kEndToEndGradTol && secs < kGradBudgetSeconds,
          fmt("ops max %.2e (%s) < %.0e over %zu tensors; end-to-end max %.2e (%s) < %.0e over %zu tensors; "
              "%.1f s < %.0f s",
              op_worst, op_worst_name.c_str(), kOpGradTol, checked, e2e, e2e_name.c_str(), kEndToEndGradTol,
              tensors.size(), secs, kGradBudgetSeconds)};
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence

Outcome oracle_equivalence(const fs::path &) {
  std::mt19937_64 rng(2);
  std::vector<std::string> failures;

  double attn_err = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t d = 8, heads = inst % 2 ? 2 : 4;
    const bool causal = inst % 3 == 0;
    const auto l1 = static_cast<std::size_t>(uniform_int(rng, 1, 5));
    const std::size_t l2 = causal ? l1 : static_cast<std::size_t>(uniform_int(rng, 1, 6));
    auto z1 = random_tensor({l1, d}, rng, -1, 1, false);
    auto z2 = causal ? z1 : random_tensor({l2, d}, rng, -1, 1, false);
    auto p = random_mha(d, heads, rng);
    auto keys = random_mask(l2, rng, causal);
    auto got = multi_head_attention(z1, z2, keys, causal, p);
    auto want = oracle::naive_attention(z1, z2, keys, causal, p);
    for (std::size_t i = 0; i < l1; ++i)
      for (std::size_t j = 0; j < d; ++j) attn_err = std::max(attn_err, std::abs(got(i, j) - want[i][j]));
  }
  if (!(attn_err <= kAttentionOracleTol)) failures.push_back(fmt("attention %.2e", attn_err));

  bool scatter_exact = true, mixture_exact = true;
  for (int inst = 0; inst < 200; ++inst) {
    const auto ly = static_cast<std::size_t>(uniform_int(rng, 1, 4));
    const auto lx = static_cast<std::size_t>(uniform_int(rng, 1, 7));
    const auto vocab = static_cast<std::size_t>(uniform_int(rng, 2, 10));
    auto ptr = softmax_rows(random_tensor({ly, lx}, rng, -3, 3, false));
    auto ids = random_ids(lx, vocab, rng);
    auto got = scatter_to_vocab(ptr, ids, vocab);
    std::vector<double> want(ly * vocab, 0.0);
    for (std::size_t i = 0; i < ly; ++i)
      for (std::size_t j = 0; j < lx; ++j) want[i * vocab + static_cast<std::size_t>(ids[j])] += ptr(i, j);
    for (std::size_t k = 0; k < want.size(); ++k) scatter_exact = scatter_exact && got.at(k) == want[k];

    std::vector<Tensor> comps;
    for (int c = 0; c < 4; ++c) comps.push_back(softmax_rows(random_tensor({ly, vocab}, rng, -3, 3, false)));
    auto scores = softmax_rows(random_tensor({ly, 4}, rng, -3, 3, false));
    auto mixed = mix_distributions(comps[0], comps[1], comps[2], comps[3], scores);
    for (std::size_t i = 0; i < ly; ++i)
      for (std::size_t w = 0; w < vocab; ++w) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 4; ++c) acc += scores(i, c) * comps[c](i, w);
        mixture_exact = mixture_exact && mixed(i, w) == acc;
      }
  }
  if (!scatter_exact) failures.push_back("scatter_to_vocab differs from the double loop");
  if (!mixture_exact) failures.push_back("mixture differs from the weighted loop");

  std::size_t beam_mismatch = 0, beam_cases = 0;
  for (double penalty : {0.0, 0.5, 1.0, 2.0})
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      oracle::ToyModel model(seed);
      ++beam_cases;
      beam_mismatch += beam_search(model, oracle::toy_options(64, penalty)).best.tokens !=
                       oracle::exhaustive_best(model, 3, penalty).tokens;
    }
  if (beam_mismatch) failures.push_back(fmt("beam search %zu/%zu mismatches", beam_mismatch, beam_cases));

  auto random_words = [&](std::size_t lo, std::size_t hi, int alphabet) {
    Words w(static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi))));
    for (auto &t : w) t = "w" + std::to_string(uniform_int(rng, 0, alphabet - 1));
    return w;
  };
  double rouge_err = 0.0;
  for (int inst = 0; inst < 1000; ++inst) {
    EvalPair p{random_words(1, 12, 4), {random_words(1, 12, 4)}};
    const double l = static_cast<double>(oracle::dp_lcs(p.hypothesis, p.references[0]));
    const double prec = l / static_cast<double>(p.hypothesis.size());
    const double rec = l / static_cast<double>(p.references[0].size());
    const double b2 = 1.2 * 1.2;
    const double want = l == 0 ? 0.0 : (1 + b2) * prec * rec / (rec + b2 * prec);
    rouge_err = std::max(rouge_err, std::abs(rouge_l(p) - want));
  }
  if (rouge_err > 1e-15) failures.push_back(fmt("ROUGE-L %.2e", rouge_err));

  auto pair = [](const std::string &h, std::vector<std::string> refs) {
    std::istringstream hs(h);
    EvalPair p;
    for (std::string w; hs >> w;) p.hypothesis.push_back(w);
    for (auto &r : refs) {
      std::istringstream rs(r);
      Words ws;
      for (std::string w; rs >> w;) ws.push_back(w);
      p.references.push_back(ws);
    }
    return p;
  };
  std::vector<std::vector<EvalPair>> corpora{
      {pair("a man rides a horse", {"a man is riding a horse", "a person rides a horse"}),
       pair("two dogs play", {"two dogs are playing in the park"}),
       pair("a woman cooks food", {"a woman is cooking", "someone cooks food in a kitchen"})}};
  for (int inst = 0; inst < 20; ++inst) {
    std::vector<EvalPair> c;
    for (int k = 0; k < 4; ++k) {
      EvalPair p{random_words(1, 9, 8), {}};
      for (int r = 0, n = static_cast<int>(uniform_int(rng, 1, 3)); r < n; ++r) p.references.push_back(random_words(1, 9, 8));
      c.push_back(p);
    }
    corpora.push_back(c);
  }
  double cider_err = 0.0;
  for (auto &c : corpora) {
    auto got = cider_scores(c);
    for (std::size_t i = 0; i < c.size(); ++i) cider_err = std::max(cider_err, std::abs(got[i] - oracle::loop_cider(c, i)));
  }
  if (!(cider_err <= kCiderOracleTol)) failures.push_back(fmt("CIDEr %.2e", cider_err));

  std::string detail = fmt("attention %.2e <= %.0e; scatter %s; mixture %s; beam %zu/%zu identical; ROUGE-L %.1e; "
                           "CIDEr %.2e <= %.0e",
                           attn_err, kAttentionOracleTol, scatter_exact ? "exact" : "inexact",
                           mixture_exact ? "exact" : "inexact", beam_cases - beam_mismatch, beam_cases, rouge_err,
                           cider_err, kCiderOracleTol);
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------------------
// 3. Stochasticity

Outcome stochasticity(const fs::path &) {
  std::mt19937_64 rng(3);
  double worst = 0.0;
  double most_negative = 0.0;
  std::size_t rows = 0;
  auto check = [&](const Tensor &t) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < t.cols(); ++c) {
        s += t(r, c);
        most_negative = std::min(most_negative, t(r, c));
      }
      worst = std::max(worst, std::abs(s - 1.0));
      ++rows;
    }
  };
  for (int inst = 0; inst < kStochasticInstances; ++inst) {
    const auto ly = static_cast<std::size_t>(uniform_int(rng, 1, 5));
    const auto vocab = static_cast<std::size_t>(uniform_int(rng, 2, 30));
    const std::size_t d = 8;
    const double spread = uniform_real(rng, 0.1, 10.0);
    auto z_dec = random_tensor({ly, d}, rng, -spread, spread, false);
    auto src = [&] {
      const auto n = static_cast<std::size_t>(uniform_int(rng, 1, 7));
      return std::pair{random_tensor({n, d}, rng, -spread, spread, false), random_mask(n, rng)};
    };
    auto [z_his, m_his] = src();
    auto [z_que, m_que] = src();
    auto [z_cap, m_cap] = src();
    auto ptr = [&](const Tensor &z, const std::vector<std::uint8_t> &m) {
      auto p = pointer_distribution(z_dec, z, m);
      check(p);
      auto v = scatter_to_vocab(p, random_ids(z.rows(), vocab, rng), vocab);
      check(v);
      return v;
    };
    auto ph = ptr(z_his, m_his), pq = ptr(z_que, m_que), pc = ptr(z_cap, m_cap);
    auto pg = generation_distribution(z_dec, random_tensor({d, vocab}, rng, -spread, spread, false));
    check(pg);
    auto z_res = random_tensor({ly, d}, rng, -spread, spread, false);
    auto scores = mixture_scores(z_his, z_que, z_cap, z_res, z_dec, random_tensor({5 * d, 4}, rng, -1, 1, false), m_his,
                                 m_que, m_cap);
    check(scores);
    auto mixed = mix_distributions(ph, pq, pc, pg, scores);
    check(mixed);
    std::vector<MixtureColumn> cols{MixtureColumn::Query, MixtureColumn::Generation};
    auto two = select_mixture_scores(random_tensor({ly, 4}, rng, -spread, spread, false), cols);
    check(two);
    check(mix_distributions(std::nullopt, pq, std::nullopt, pg, two));

    const auto k = static_cast<std::size_t>(uniform_int(rng, 1, 4));
    std::vector<std::vector<double>> members;
    for (std::size_t m = 0; m < k; ++m) {
      auto row = softmax_rows(random_tensor({1, vocab}, rng, -spread, spread, false));
      auto v = row.values();
      members.emplace_back(v.begin(), v.end());
    }
    auto avg = average_distributions(members);
    check(Tensor({1, vocab}, avg));
  }
  return {worst <= kRowSumTol && most_negative >= 0.0,
          fmt("max |row sum - 1| %.2e <= %.0e over %zu rows from %d instances; min entry %.2e", worst, kRowSumTol, rows,
              kStochasticInstances, most_negative)};
}

// ---------------------------------------------------------------------------
// 4. Copy-task efficacy

Outcome copy_task(const fs::path &work) {
  const auto t0 = Clock::now();
  auto dir = fresh_dir(work / "copy_task");
  cli({"synth-data", "--seed", "0", "--n-train", "2000", "--n-val", "200", "--n-test", "0", "--vocab-size", "100",
       "--answer-mode", "mixed", "--out", (dir / "corpus").string()});
  auto train_raw = load_dialogs(dir / "corpus" / "train.jsonl");
  auto val_raw = load_dialogs(dir / "corpus" / "val.jsonl");
  auto vocab = build_vocab(train_raw);
  auto train_set = encode_corpus(train_raw, vocab), val_set = encode_corpus(val_raw, vocab);

  struct Result {
    double accuracy = 0.0;
    std::size_t best_epoch = 0;
  };
  auto run = [&](const std::string &sources, const std::string &tag) {
    RunConfig rc; // desk profile
    rc.pointer_sources = sources;
    auto config = rc.model_config(vocab.size());
    auto tc = rc.train_config();
    auto params = init_params(config, rc.seed);
    std::ofstream log(dir / (tag + ".tsv"), std::ios::binary);
    log << kEpochLogHeader << "\taccuracy\n";
    auto result = train(params, config, train_set, val_set, tc, [&](const EpochLog &e) {
      log << format_epoch_log(e) << fmt("\t%.4f", teacher_forced_accuracy(params, config, val_set)) << '\n' << std::flush;
    });
    return Result{teacher_forced_accuracy(result.best, config, val_set), result.best_epoch};
  };
  auto sq = run("summary,query", "summary+query");
  auto none = run("none", "none");
  const double secs = seconds_since(t0);
  const double gap = sq.accuracy - none.accuracy;
  return {sq.accuracy >= kCopyAccuracy && gap >= kCopyGap && secs < kCopyBudgetSeconds,
          fmt("Summary+Query %.4f (epoch %zu) >= %.2f; None %.4f (epoch %zu); gap %.1f >= %.0f points; %.0f s < %.0f s",
              sq.accuracy, sq.best_epoch, kCopyAccuracy, none.accuracy, none.best_epoch, 100 * gap, 100 * kCopyGap, secs,
              kCopyBudgetSeconds)};
}

// ---------------------------------------------------------------------------
// 5. Ablation harness parity

Outcome ablation_parity(const fs::path &work) {
  auto dir = fresh_dir(work / "ablation");
  cli({"synth-data", "--seed", "0", "--n-train", "600", "--n-val", "60", "--n-test", "0", "--out",
       (dir / "corpus").string()});
  auto printed = cli({"ablate", "--train", (dir / "corpus" / "train.jsonl").string(), "--val",
                      (dir / "corpus" / "val.jsonl").string(), "--epochs", "12", "--warmup", "200", "--max-len", "8",
                      "--out", (dir / "out").string()});
  std::vector<std::string> failures;

  std::istringstream table(printed);
  std::string header;
  std::getline(table, header);
  std::istringstream hs(header);
  std::vector<std::string> columns;
  for (std::string w; hs >> w;) columns.push_back(w);
  const std::vector<std::string> expected_columns{"Pointer", "Source", "BLEU1", "BLEU2", "BLEU3",
                                                  "BLEU4",   "METEOR", "ROUGE-L", "CIDEr"};
  if (columns != expected_columns) failures.push_back("column header '" + header + "'");

  const std::vector<std::string> expected_rows{"Summary+Query", "History+Query", "Summary+History+Query", "Summary",
                                               "Query", "History", "None"};
  std::vector<std::string> rows;
  for (std::string line; std::getline(table, line);) rows.push_back(line.substr(0, line.find(' ')));
  if (rows != expected_rows) failures.push_back(fmt("%zu table rows", rows.size()));

  auto json = nlohmann::json::parse(slurp(dir / "out" / "ablation.json"));
  double sq = -1, none = -1;
  for (auto &r : json) {
    if (r["variant"] == "Summary+Query") sq = r["metrics"]["BLEU1"].get<double>();
    if (r["variant"] == "None") none = r["metrics"]["BLEU1"].get<double>();
  }
  if (!(sq >= none)) failures.push_back("Summary+Query BLEU-1 below None");

  // The None row is the generation path alone.
  auto none_model = LoadedModel::from(load_checkpoint(dir / "out" / "none.ckpt"));
  auto val = encode_corpus(load_dialogs(dir / "corpus" / "val.jsonl"), none_model.vocab);
  bool pure = !none_model.config.pointers.any();
  for (std::size_t i = 0; i < 5 && i < val.size(); ++i) {
    NoGradGuard no_grad;
    auto out = forward(none_model.params, none_model.config, ModelInput::from(val[i]), val[i].decoder_input);
    pure = pure && out.dist.p_vocab.same_node(out.dist.p_gen);
  }
  if (!pure) failures.push_back("None row mixes pointer distributions");

  std::string detail = fmt("%zu rows in table order; %zu columns; Summary+Query BLEU-1 %.4f >= None %.4f; None row is "
                           "pure generation: %s",
                           rows.size(), columns.size() - 2, sq, none, pure ? "yes" : "no");
  if (!failures.empty()) detail += " [" + failures.front() + "]";
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------------------
// 6. Decoding contracts

Outcome decoding_contracts(const fs::path &work) {
  std::size_t greedy_equal = 0;
  Vocab vocab;
  for (const char *w : {"red", "green", "blue", "cat", "dog", "runs", "sits"}) vocab.add(w);
  std::mt19937_64 rng(6);
  for (int seed = 0; seed < kGreedyModels; ++seed) {
    auto config = micro_config();
    LoadedModel model{config, vocab, init_params(config, static_cast<std::uint64_t>(seed))};
    auto ex = micro_example(rng);
    const LoadedModel *members[] = {&model};
    EnsembleStepper stepper(members, ex);
    BeamOptions o;
    o.beam_size = 1;
    o.max_len = 8;
    greedy_equal += beam_search(stepper, o).best.tokens == greedy_search(stepper, 8).best.tokens;
  }

  auto dir = fresh_dir(work / "decoding");
  cli({"synth-data", "--seed", "6", "--n-train", "80", "--n-val", "0", "--n-test", "40", "--vocab-size", "40", "--out",
       (dir / "corpus").string()});
  const auto ckpt = (dir / "model.ckpt").string();
  cli({"train", "--train", (dir / "corpus" / "train.jsonl").string(), "--d", "16", "--epochs", "3", "--warmup", "20",
       "--out", ckpt});
  std::vector<std::string> outputs;
  for (std::size_t k = 1; k <= 3; ++k) {
    std::string list = ckpt;
    for (std::size_t i = 1; i < k; ++i) list += "," + ckpt;
    auto out = dir / fmt("k%zu.jsonl", k);
    cli({"generate", "--checkpoints", list, "--input", (dir / "corpus" / "test.jsonl").string(), "--max-len", "8",
         "--out", out.string()});
    outputs.push_back(slurp(out));
  }
  const bool ensemble_equal = outputs[1] == outputs[0] && outputs[2] == outputs[0];
  return {greedy_equal == static_cast<std::size_t>(kGreedyModels) && ensemble_equal,
          fmt("beam_size=1 equals greedy for %zu/%d models; ensembles of k=2,3 identical checkpoints %s the single "
              "model on 40 dialogs",
              greedy_equal, kGreedyModels, ensemble_equal ? "match" : "differ from")};
}

// ---------------------------------------------------------------------------
// 7. Metric sanity

Outcome metric_sanity(const fs::path &) {
  SynthOptions opt;
  opt.n_examples = 60;
  opt.visual = opt.audio = false;
  std::vector<EvalPair> corpus;
  for (auto &ex : synth_copy_corpus(opt)) corpus.push_back({tokenize(ex.summary), {tokenize(ex.summary)}});
  auto report = evaluate_corpus(corpus);
  bool perfect = report.rouge_l == 1.0;
  for (double b : report.bleu) perfect = perfect && b == 1.0;

  // CIDEr: no other hypothesis beats the reference on its own pair.
  auto self = cider_scores(corpus);
  std::size_t beaten = 0, trials = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    std::vector<Words> alternatives;
    for (std::size_t j = 0; j < corpus.size(); ++j)
      if (corpus[j].hypothesis != corpus[i].hypothesis) alternatives.push_back(corpus[j].hypothesis);
    for (std::size_t pos = 0; pos < corpus[i].hypothesis.size(); ++pos) {
      Words dropped = corpus[i].hypothesis;
      dropped.erase(dropped.begin() + static_cast<std::ptrdiff_t>(pos));
      alternatives.push_back(dropped);
      Words swapped = corpus[i].hypothesis;
      swapped[pos] = corpus[(i + 1) % corpus.size()].hypothesis.front();
      if (swapped != corpus[i].hypothesis) alternatives.push_back(swapped);
    }
    for (auto &alt : alternatives) {
      auto perturbed = corpus;
      perturbed[i].hypothesis = alt;
      ++trials;
      beaten += !(self[i] > cider_scores(perturbed)[i]);
    }
  }

  std::vector<EvalPair> clip{{{"the", "the", "the", "the"}, {{"the", "cat", "sat", "here"}}}};
  const double clipped = bleu(clip, 1);
  const bool clip_ok = std::abs(clipped - 0.25) <= kClipExampleTol;
  return {perfect && beaten == 0 && clip_ok,
          fmt("reference-as-hypothesis BLEU1-4 %.1f %.1f %.1f %.1f, ROUGE-L %.1f, CIDEr %.4f maximal against %zu/%zu "
              "perturbations; clipping example %.15f (tol %.0e)",
              report.bleu[0], report.bleu[1], report.bleu[2], report.bleu[3], report.rouge_l, report.cider,
              trials - beaten, trials, clipped, kClipExampleTol)};
}

// ---------------------------------------------------------------------------
// 8. Determinism

Outcome determinism(const fs::path &work) {
  auto pipeline = [&](const std::string &name) {
    auto dir = fresh_dir(work / "determinism" / name);
    cli({"synth-data", "--seed", "8", "--n-train", "120", "--n-val", "30", "--n-test", "30", "--vocab-size", "60",
         "--out", (dir / "corpus").string()});
    cli({"train", "--seed", "8", "--train", (dir / "corpus" / "train.jsonl").string(), "--val",
         (dir / "corpus" / "val.jsonl").string(), "--d", "32", "--rounds", "1", "--epochs", "3", "--warmup", "30",
         "--dropout", "0.3", "--out", (dir / "model.ckpt").string()});
    cli({"generate", "--checkpoints", (dir / "model.ckpt").string(), "--input", (dir / "corpus" / "test.jsonl").string(),
         "--max-len", "8", "--out", (dir / "responses.jsonl").string()});
    auto printed = cli({"evaluate", "--responses", (dir / "responses.jsonl").string(), "--references",
                        (dir / "corpus" / "test.jsonl").string(), "--out", (dir / "report.json").string()});
    std::vector<std::pair<std::string, std::string>> artefacts;
    for (auto f : {"corpus/train.jsonl", "model.ckpt.log", "model.ckpt", "responses.jsonl", "report.json"})
      artefacts.emplace_back(f, slurp(dir / f));
    artefacts.emplace_back("report text", printed);
    return artefacts;
  };
  auto a = pipeline("a"), b = pipeline("b");
  std::vector<std::string> differing;
  std::size_t bytes = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    bytes += a[i].second.size();
    if (a[i].second != b[i].second) differing.push_back(a[i].first);
  }
  std::string detail = fmt("%zu artefacts (%zu bytes) compared across two seeded runs", a.size(), bytes);
  if (!differing.empty()) {
    detail += "; differing:";
    for (auto &d : differing) detail += " " + d;
  } else {
    detail += "; all byte-identical";
  }
  return {differing.empty(), detail};
}

} // namespace

int main(int argc, char **argv) {
  fs::path work = "acceptance_work";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::istringstream is(argv[++i]);
      for (std::string n; std::getline(is, n, ',');) only.insert(std::stoi(n));
    } else {
      std::cerr << "usage: acceptance [--workdir DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::create_directories(work);

  struct Criterion {
    int id;
    const char *name;
    std::function<Outcome(const fs::path &)> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient integrity", gradient_integrity}, {2, "oracle equivalence", oracle_equivalence},
      {3, "stochasticity invariants", stochasticity}, {4, "copy-task efficacy", copy_task},
      {5, "ablation harness parity", ablation_parity}, {6, "decoding contracts", decoding_contracts},
      {7, "metric sanity", metric_sanity},           {8, "determinism", determinism}};

  int failed = 0;
  for (auto &c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run(work);
    } catch (const std::exception &e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << c.id << " " << c.name << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << std::endl;
  }
  return failed ? 1 : 0;
}
