#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>

#include "corelm/error.hpp"
#include "corelm/eval.hpp"
#include "corelm/ops.hpp"
#include "support/fake_models.hpp"

using namespace corelm;
using corelm::testing::ScriptedModel;

namespace {

TokenizedInstance plain_doc(std::string id, std::vector<TokenId> tokens) {
  TokenizedInstance d;
  d.id = std::move(id);
  d.entity_ids.assign(tokens.size(), 0);
  for (std::size_t i = 0; i < tokens.size(); ++i) d.word_boundaries.push_back({i, i + 1});
  d.token_ids = std::move(tokens);
  return d;
}

// Deterministic pseudo-random logits that depend on the whole prefix.
ScriptedModel hashed_model(std::size_t vocab, std::size_t context) {
  return ScriptedModel(vocab, context, [vocab](std::span<const TokenId> prefix) {
    std::uint64_t h = 1469598103934665603ull;
    for (TokenId t : prefix) h = (h ^ static_cast<std::uint64_t>(t + 1)) * 1099511628211ull;
    std::mt19937_64 rng(h);
    std::normal_distribution<double> n(0.0, 1.5);
    std::vector<double> row(vocab);
    for (auto& x : row) x = n(rng);
    return row;
  });
}

// Greedy output fixed by position: the argmax after a prefix of length n is
// script[n] (or token 0 past the end).
ScriptedModel scripted_argmax(std::size_t vocab, std::size_t context, std::vector<TokenId> script,
                              std::vector<std::vector<TokenId>>* seen = nullptr) {
  return ScriptedModel(vocab, context, [vocab, script, seen](std::span<const TokenId> prefix) {
    if (seen) seen->emplace_back(prefix.begin(), prefix.end());
    std::vector<double> row(vocab, 0.0);
    const std::size_t n = prefix.size();
    row[static_cast<std::size_t>(n < script.size() ? script[n] : 0)] = 5.0;
    return row;
  });
}

// Two-sided p-value by Simpson integration of the Student t density.
double simpson_p(double t, double dof) {
  const double c = std::exp(std::lgamma((dof + 1) / 2) - std::lgamma(dof / 2)) / std::sqrt(dof * std::numbers::pi);
  auto f = [&](double x) { return c * std::pow(1 + x * x / dof, -(dof + 1) / 2); };
  const int n = 20000;
  const double a = 0.0, b = std::abs(t), h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4 : 2);
  return 1.0 - 2.0 * s * h / 3.0;
}

EvalReport scores(std::vector<double> values) {
  EvalReport r;
  r.task = "lambada";
  for (std::size_t i = 0; i < values.size(); ++i) r.examples.push_back({"e" + std::to_string(i), "x", values[i], 1});
  return r;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 20;
  c.context_window = 8;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.entity_heads = 2;
  return c;
}

}  // namespace

TEST_CASE("perplexity of fixed models") {
  SUBCASE("uniform over 64 tokens") {
    auto model = corelm::testing::uniform_model(64, 16);
    std::vector<TokenizedInstance> docs{plain_doc("a", {1, 5, 9, 63, 0, 2, 2, 2}), plain_doc("b", {7, 7, 7})};
    EntityStore store(4);
    auto r = eval_perplexity(model, store, docs);
    CHECK(r.aggregate("ppl") == doctest::Approx(64.0).epsilon(1e-12));
    CHECK(r.aggregate("tokens") == 9.0);
    CHECK(r.examples[0].count == 7);
    CHECK(r.examples[0].score == doctest::Approx(-7 * std::log(64.0)).epsilon(1e-12));
  }
  SUBCASE("successor model is exact") {
    auto model = corelm::testing::successor_model(10, 4);
    std::vector<TokenizedInstance> docs{plain_doc("s", {3, 4, 5, 6, 7, 8, 9, 0, 1, 2, 3})};
    EntityStore store(4);
    CHECK(eval_perplexity(model, store, docs).aggregate("ppl") == doctest::Approx(1.0).epsilon(1e-12));
    PerplexityOptions strided;
    strided.stride = 2;
    auto r = eval_perplexity(model, store, docs, strided);
    CHECK(r.aggregate("ppl") == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.aggregate("tokens") == 10.0);  // every token but the first, exactly once
  }
  SUBCASE("no scoreable tokens") {
    auto model = corelm::testing::uniform_model(8, 4);
    std::vector<TokenizedInstance> docs{plain_doc("one", {3})};
    EntityStore store(4);
    CHECK_THROWS_AS(eval_perplexity(model, store, docs), ValueError);
  }
}

TEST_CASE("probabilities of all continuations sum to one") {
  // Enumerate every length-5 sequence over 3 tokens with a fixed first token.
  auto model = hashed_model(3, 8);
  auto chunked = hashed_model(3, 3);  // windows of 3: a second unscored token
  EntityStore store(4);
  for (TokenId first = 0; first < 3; ++first) {
    double total = 0.0, total_chunked = 0.0;
    for (int code = 0; code < 81; ++code) {
      std::vector<TokenId> seq{first};
      for (int c = code, i = 0; i < 4; ++i, c /= 3) seq.push_back(c % 3);
      std::vector<TokenizedInstance> docs{plain_doc("x", seq)};
      total += std::exp(eval_perplexity(model, store, docs).examples[0].score);
      total_chunked += std::exp(eval_perplexity(chunked, store, docs).examples[0].score);
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
    // windows [0,3) and [3,5): the token at 3 is free, so the mass is 3
    CHECK(total_chunked == doctest::Approx(3.0).epsilon(1e-9));
  }
}

TEST_CASE("perplexity equals exp of the cross-entropy") {
  auto cfg = tiny_config();
  CoreLM model(cfg, 21);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<TokenId> tok(0, 19);
  std::vector<TokenId> tokens(8);
  for (auto& t : tokens) t = tok(rng);
  std::vector<TokenizedInstance> docs{plain_doc("d", tokens)};
  EntityStore store(cfg.d_model);
  auto out = corelm_logits(model, tokens, {}, store);
  std::vector<std::int64_t> targets(tokens.begin() + 1, tokens.end());
  targets.push_back(-1);
  const double ce = cross_entropy(out.logits, targets).item();
  CHECK(eval_perplexity(model, store, docs).aggregate("ppl") == doctest::Approx(std::exp(ce)).epsilon(1e-12));
}

TEST_CASE("entity store modes") {
  auto cfg = tiny_config();
  CoreLM model(cfg, 22);
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<TokenId> tok(0, 19);
  std::vector<TokenizedInstance> docs;
  for (int d = 0; d < 2; ++d) {
    std::vector<TokenId> t(20);
    for (auto& x : t) x = tok(rng);
    auto doc = plain_doc("d" + std::to_string(d), t);
    for (std::size_t i = 0; i < t.size(); ++i) doc.entity_ids[i] = i % 3 == 0 ? 1 : (i % 5 == 0 ? 2 : 0);
    docs.push_back(doc);
  }
  EntityStore store(cfg.d_model);
  store.set(1, std::vector<double>(cfg.d_model, 0.25));
  const auto snapshot = store.entries();

  auto run = [&](StoreMode mode, bool entities = true) {
    PerplexityOptions o;
    o.store_mode = mode;
    o.use_entities = entities;
    return eval_perplexity(model, store, docs, o);
  };
  auto frozen = run(StoreMode::kFrozen), online = run(StoreMode::kOnline), reset = run(StoreMode::kReset);
  CHECK(store.entries() == snapshot);
  // Three windows per document; updates change the later ones.
  CHECK(online.examples[0].score != frozen.examples[0].score);
  CHECK(reset.examples[0].score != online.examples[0].score);  // reset starts from all-ones, not 0.25
  CHECK(online.examples[1].score != reset.examples[1].score);
  CHECK(run(StoreMode::kFrozen, false).aggregate("ppl") != frozen.aggregate("ppl"));

  SUBCASE("reset equals online from an empty store, document by document") {
    EntityStore empty(cfg.d_model);
    PerplexityOptions o;
    o.store_mode = StoreMode::kOnline;
    for (std::size_t d = 0; d < docs.size(); ++d) {
      auto single = eval_perplexity(model, empty, std::span<const TokenizedInstance>(&docs[d], 1), o);
      CHECK(single.examples[0].score == reset.examples[d].score);
    }
  }
  SUBCASE("frozen mode never runs the entity forward pass") {
    auto probe = corelm::testing::uniform_model(20, 8);
    EntityStore narrow(4);  // the probe's hidden width
    PerplexityOptions o;
    eval_perplexity(probe, narrow, docs, o);
    CHECK(probe.hidden_calls == 0);
    o.store_mode = StoreMode::kOnline;
    eval_perplexity(probe, narrow, docs, o);
    CHECK(probe.hidden_calls == 6);
  }
  CHECK(parse_store_mode("reset") == StoreMode::kReset);
  CHECK(std::string(store_mode_name(StoreMode::kOnline)) == "online");
  CHECK_THROWS_AS(parse_store_mode("sometimes"), ConfigError);
}

TEST_CASE("last-word accuracy") {
  BpeTokenizer bytes;
  // "ab cd ef": tokens a b ' ' c d ' ' e f, target " ef" = tokens 5..7
  ClozeInstance inst = format_lambada({"q", {"ab", "cd", "ef"}, {}});
  const std::vector<TokenId> gold{'a', 'b', ' ', 'c', 'd', ' ', 'e', 'f'};
  EntityStore store(4);
  auto run = [&](const ScriptedModel& m) {
    return eval_lambada(m, store, std::span<const ClozeInstance>(&inst, 1), bytes, false).examples[0].score;
  };
  SUBCASE("hand trace") {
    // Only positions 5, 6 and 7 matter; the context predictions are junk.
    std::vector<TokenId> script{0, 1, 2, 3, 4, ' ', 'e', 'f'};
    std::vector<std::vector<TokenId>> seen;
    CHECK(run(scripted_argmax(256, 64, script, &seen)) == 1.0);
    for (const auto& prefix : seen) {
      CHECK(prefix.size() <= 7);  // the final subtoken is never an input
      for (std::size_t i = 0; i < prefix.size(); ++i) CHECK(prefix[i] == gold[i]);
    }
    script[6] = 'g';
    CHECK(run(scripted_argmax(256, 64, script)) == 0.0);
    script[6] = 'e';
    script[7] = 'x';
    CHECK(run(scripted_argmax(256, 64, script)) == 0.0);
  }
  SUBCASE("left truncation to the context window") {
    std::vector<std::vector<TokenId>> seen;
    // With k = 3 every query is the last three gold tokens, so the script is
    // indexed by the truncated length 3.
    std::vector<TokenId> script{0, 0, 0, ' '};
    run(scripted_argmax(256, 3, script, &seen));
    REQUIRE_FALSE(seen.empty());
    for (const auto& prefix : seen) CHECK(prefix.size() <= 3);
    CHECK(seen.back() == std::vector<TokenId>{'c', 'd', ' '});
  }
  SUBCASE("coreference initialisation sees only the context") {
    ClozeInstance annotated = format_lambada({"q2", {"ab", "cd", "ab"}, {1, 0, 1}});
    auto probe = corelm::testing::uniform_model(256, 64);
    eval_lambada(probe, store, std::span<const ClozeInstance>(&annotated, 1), bytes, true);
    REQUIRE(probe.hidden_inputs.size() == 1);
    CHECK(probe.hidden_inputs[0] == std::vector<TokenId>{'a', 'b', ' ', 'c', 'd'});
  }
  SUBCASE("accuracy aggregate") {
    std::vector<ClozeInstance> set{inst, format_lambada({"r", {"ab", "zz"}, {}})};
    auto m = scripted_argmax(256, 64, {0, 1, 2, 3, 4, ' ', 'e', 'f'});
    auto r = eval_lambada(m, store, set, bytes, false);
    CHECK(r.aggregate("accuracy") == 0.5);
    CHECK(r.aggregate("accuracy.last-word") == 0.5);
    CHECK(r.aggregate("examples") == 2.0);
  }
}

TEST_CASE("multiple-choice cloze") {
  CHECK(argmax_first(std::vector<double>{-1, -2, -3, -4, -5, -6, -7, -8, -9, -10}) == 0);
  CHECK(argmax_first(std::vector<double>{-3, -2, 0.5, -1, -2, 0.5, -7, -8, -9, -10}) == 2);
  CHECK_THROWS_AS(argmax_first(std::vector<double>{}), ValueError);

  auto question = [](std::string id, std::string cat, std::size_t answer) {
    CbtQuestion q;
    q.id = std::move(id);
    q.category = std::move(cat);
    q.passage = {"p", "q"};
    q.question = {"r", "XXXXX"};
    q.candidates = {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"};
    q.answer_index = answer;
    return q;
  };
  // Favours byte 'd' everywhere, so candidate 3 has the highest score.
  auto favour_d = ScriptedModel(256, 64, [](std::span<const TokenId>) {
    std::vector<double> row(256, 0.0);
    row['d'] = 3.0;
    return row;
  });
  BpeTokenizer bytes;
  EntityStore store(4);
  std::vector<ClozeInstance> variants;
  for (const auto& q : {question("n1", "NE", 3), question("n2", "NE", 3), question("v1", "V", 0),
                        question("c1", "CN", 3)}) {
    auto vs = format_cbt(q);
    variants.insert(variants.end(), vs.begin(), vs.end());
  }
  auto r = eval_cbt(favour_d, store, variants, bytes, false);
  REQUIRE(r.examples.size() == 4);
  CHECK(r.aggregate("accuracy") == 0.75);
  CHECK(r.aggregate("accuracy.NE") == 1.0);
  CHECK(r.aggregate("accuracy.V") == 0.0);
  CHECK(r.aggregate("accuracy.CN") == 1.0);
  CHECK_THROWS_AS(r.aggregate("accuracy.P"), ValueError);

  SUBCASE("ties go to the first candidate") {
    auto flat = corelm::testing::uniform_model(256, 64);
    auto rt = eval_cbt(flat, store, variants, bytes, false);
    CHECK(rt.examples[2].score == 1.0);  // answer 0
    CHECK(rt.examples[0].score == 0.0);
  }
  SUBCASE("malformed variant lists") {
    auto bad = variants;
    for (std::size_t c = 0; c < 10; ++c) bad[c].category = "XX";
    CHECK_THROWS_AS(eval_cbt(favour_d, store, bad, bytes, false), ValueError);
    bad = variants;
    std::swap(bad[1], bad[2]);
    CHECK_THROWS_AS(eval_cbt(favour_d, store, bad, bytes, false), ValueError);
    bad = variants;
    bad.pop_back();
    CHECK_THROWS_AS(eval_cbt(favour_d, store, bad, bytes, false), ValueError);
  }
}

TEST_CASE("paired t-test") {
  SUBCASE("identical reports") {
    auto a = scores({1, 0, 1, 1});
    auto t = paired_t_test(a, a);
    CHECK(t.t == 0.0);
    CHECK(t.p == 1.0);
    CHECK_FALSE(t.degenerate_variance);
  }
  SUBCASE("constant non-zero differences") {
    auto t = paired_t_test(scores({2, 2, 2, 2}), scores({1, 1, 1, 1}));
    CHECK(t.degenerate_variance);
    CHECK(std::isinf(t.t));
    CHECK(t.t > 0);
    CHECK(t.p == 0.0);
  }
  SUBCASE("hand example against numerical integration") {
    auto t = paired_t_test(scores({1, -1, 2, 0, 1}), scores({0, 0, 0, 0, 0}));
    CHECK(t.n == 5);
    CHECK(t.mean_difference == doctest::Approx(0.6));
    CHECK(t.t == doctest::Approx(0.6 / std::sqrt(1.3 / 5)).epsilon(1e-12));
    CHECK(t.t == doctest::Approx(1.17670).epsilon(1e-5));
    CHECK(std::abs(t.p - simpson_p(t.t, 4)) < 1e-6);
    auto flipped = paired_t_test(scores({0, 0, 0, 0, 0}), scores({1, -1, 2, 0, 1}));
    CHECK(flipped.t == doctest::Approx(-t.t));
    CHECK(flipped.p == doctest::Approx(t.p));
  }
  SUBCASE("distribution tails") {
    CHECK(std::abs(t_two_sided_p(1.0, 1) - 0.5) < 1e-12);  // Cauchy
    for (double t : {0.3, 1.7, 4.2}) {
      CHECK(std::abs(t_two_sided_p(t, 1) - (1 - 2 * std::atan(t) / std::numbers::pi)) < 1e-12);
      CHECK(std::abs(t_two_sided_p(t, 7) - simpson_p(t, 7)) < 1e-9);
    }
  }
  SUBCASE("mismatched reports") {
    CHECK_THROWS_AS(paired_t_test(scores({1, 2}), scores({1, 2, 3})), ValueError);
    auto b = scores({1, 2});
    b.examples[1].id = "other";
    CHECK_THROWS_AS(paired_t_test(scores({1, 2}), b), ValueError);
  }
}

TEST_CASE("category deltas") {
  EvalReport a, b;
  a.examples = {{"1", "NE", 1, 1}, {"2", "NE", 0, 1}, {"3", "V", 1, 1}};
  b.examples = {{"1", "NE", 1, 1}, {"2", "NE", 1, 1}, {"3", "V", 0, 1}};
  auto d = category_deltas(a, b);
  REQUIRE(d.size() == 2);
  CHECK(d[0] == std::pair<std::string, double>{"NE", 0.5});
  CHECK(d[1] == std::pair<std::string, double>{"V", -1.0});
}

TEST_CASE("report files") {
  EvalReport r = scores({1, 0, 0.1});
  r.aggregates = {{"accuracy", 1.1 / 3}, {"examples", 3}};
  r.comparison = paired_t_test(scores({1, -1, 2}), scores({0, 0, 0}));
  const std::string text = serialize_report(r);
  CHECK(parse_report(text) == r);
  CHECK(serialize_report(parse_report(text)) == text);
  EvalReport plain = scores({2});
  plain.aggregates = {{"ppl", 3.5}};
  CHECK(parse_report(serialize_report(plain)) == plain);
  CHECK_THROWS_AS(parse_report("nope\n"), FormatError);
  CHECK_THROWS_AS(parse_report("report\tppl\na\tb\tc\n--\n"), FormatError);
  CHECK_THROWS_AS(parse_report("report\tppl\na\tb\t1\t1\n"), FormatError);
  CHECK_THROWS_AS(parse_report("report\tppl\n--\nppl\tx\n"), FormatError);
}
