#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <bit>
#include <cmath>
#include <filesystem>
#include <random>

#include "corelm/entity.hpp"
#include "corelm/error.hpp"
#include "corelm/ops.hpp"
#include "support/fake_models.hpp"
#include "support/gradcheck.hpp"
#include "support/reference.hpp"

using namespace corelm;
using corelm::testing::random_tensor;
namespace ref = corelm::testing::ref;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.vocab_size = 11;
  c.context_window = 8;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 12;
  c.entity_heads = 2;
  c.init_std = 0.5;
  return c;
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

void jitter(const std::vector<ParamRef>& params, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> dist(0.0, scale);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (double& v : t.data()) v += dist(rng);
  }
}

std::vector<double> row(const Tensor& t, std::size_t i) {
  auto d = t.data().subspan(i * t.cols(), t.cols());
  return {d.begin(), d.end()};
}

}  // namespace

TEST_CASE("entity store resolution") {
  EntityStore store(4);
  SUBCASE("ID 0 and unknown IDs give ones") {
    for (EntityId id : {0, 1, 42}) {
      for (double v : store.lookup(id)) CHECK(v == 1.0);
    }
    CHECK(store.size() == 0);
  }
  SUBCASE("resolve registers unknown positive IDs, lookup does not") {
    store.lookup(5);
    CHECK_FALSE(store.contains(5));
    store.resolve(5);
    CHECK(store.contains(5));
    store.resolve(0);
    CHECK_FALSE(store.contains(0));
  }
  SUBCASE("a stored vector is returned verbatim") {
    store.set(3, std::vector<double>{0.1, -0.2, 0.3, 0.4});
    auto e = store.lookup(3);
    CHECK(e[1] == -0.2);
    CHECK_THROWS_AS(store.set(0, std::vector<double>{1, 1, 1, 1}), ValueError);
    CHECK_THROWS_AS(store.set(2, std::vector<double>{1, 1}), ShapeError);
  }
  SUBCASE("stacked rows") {
    store.set(2, std::vector<double>{2, 2, 2, 2});
    const std::vector<EntityId> ids{0, 2, 7};
    Tensor e = lookup_entities(ids, store);
    CHECK(e.at(0, 0) == 1.0);
    CHECK(e.at(1, 3) == 2.0);
    CHECK(e.at(2, 2) == 1.0);
    CHECK_FALSE(store.contains(7));
    resolve_entities(ids, store);
    CHECK(store.contains(7));
  }
}

TEST_CASE("entity attention") {
  std::mt19937_64 rng(11);
  auto params = make_entity_gating(toy_config(), 3);
  jitter(gating_parameters(params), rng, 0.1);
  const auto& a = params.attn;
  SUBCASE("L = 1 reduces to the value path") {
    Tensor h = random_tensor({1, 8}, rng);
    Tensor e = random_tensor({1, 8}, rng);
    Tensor out = entity_attention(h, e, a, 2);
    Tensor expected = linear(linear(h, a.w_v, a.b_v), a.w_o, a.b_o);
    CHECK(bit_equal(out.data(), expected.data()));
  }
  SUBCASE("later entity rows never reach earlier outputs") {
    Tensor h = random_tensor({5, 8}, rng);
    Tensor e = random_tensor({5, 8}, rng);
    Tensor base = entity_attention(h, e, a, 2);
    for (std::size_t j = 1; j < 5; ++j) {
      Tensor p = e.clone();
      for (std::size_t c = 0; c < 8; ++c) p.at(j, c) -= 0.9;
      Tensor out = entity_attention(h, p, a, 2);
      CHECK(bit_equal(out.data().subspan(0, j * 8), base.data().subspan(0, j * 8)));
      CHECK_FALSE(bit_equal(out.data().subspan(j * 8, 8), base.data().subspan(j * 8, 8)));
    }
  }
  SUBCASE("loop oracle") {
    Tensor h = random_tensor({4, 8}, rng);
    Tensor e = random_tensor({4, 8}, rng);
    Tensor out = entity_attention(h, e, a, 2);
    ref::Mat expected = ref::affine(
        ref::causal_attention(ref::affine(ref::to_mat(h), a.w_q, a.b_q), ref::affine(ref::to_mat(e), a.w_ent, a.b_ent),
                              ref::affine(ref::to_mat(h), a.w_v, a.b_v), 2),
        a.w_o, a.b_o);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(out.at(i, j) - expected[i][j]) <= 1e-12);
  }
}

TEST_CASE("gate") {
  std::mt19937_64 rng(12);
  SUBCASE("hand value, d = 2") {
    Tensor h = Tensor::matrix(1, 2, {2.0, 1.0});
    Tensor v = Tensor::vector({1.0, -1.0});
    Tensor g = gate_coefficients(h, v, 0.5, GateMode::kScalar);
    CHECK(g.at(0, 0) == doctest::Approx(0.36552928931500245).epsilon(1e-15));
    Tensor eg_b = Tensor::matrix(1, 2, {0.0, 4.0});
    Tensor z = gate(eg_b, h, v, 0.5, GateMode::kScalar);
    const double gv = 0.5 / (1.0 + std::exp(-1.0));
    CHECK(z.at(0, 0) == doctest::Approx(gv * 2.0).epsilon(1e-15));
    CHECK(z.at(0, 1) == doctest::Approx((1 - gv) * 4.0 + gv * 1.0).epsilon(1e-15));
  }
  SUBCASE("delta = 0 returns EG_B bit for bit") {
    Tensor eg_b = random_tensor({6, 8}, rng, -50, 50);
    Tensor h = random_tensor({6, 8}, rng, -50, 50);
    Tensor v = random_tensor({8}, rng);
    CHECK(bit_equal(gate(eg_b, h, v, 0.0, GateMode::kScalar).data(), eg_b.data()));
    CHECK(bit_equal(gate(eg_b, h, v, 0.0, GateMode::kElementwise).data(), eg_b.data()));
  }
  SUBCASE("the blend stays between its endpoints and g is in [0, delta]") {
    for (int trial = 0; trial < 50; ++trial) {
      const double delta = (trial % 11) / 10.0;
      const GateMode mode = trial % 2 ? GateMode::kScalar : GateMode::kElementwise;
      Tensor eg_b = random_tensor({3, 8}, rng, -5, 5);
      Tensor h = random_tensor({3, 8}, rng, -5, 5);
      Tensor v = random_tensor({8}, rng, -4, 4);
      Tensor g = gate_coefficients(h, v, delta, mode);
      for (double x : g.data()) {
        CHECK(x >= 0.0);
        CHECK(x <= delta);
      }
      Tensor z = gate(eg_b, h, v, delta, mode);
      for (std::size_t i = 0; i < z.data().size(); ++i) {
        const double lo = std::min(eg_b.data()[i], h.data()[i]), hi = std::max(eg_b.data()[i], h.data()[i]);
        CHECK(z.data()[i] >= lo - 1e-12);
        CHECK(z.data()[i] <= hi + 1e-12);
      }
    }
  }
  SUBCASE("shapes per mode") {
    Tensor h = random_tensor({3, 8}, rng);
    Tensor v = random_tensor({8}, rng);
    CHECK(gate_coefficients(h, v, 0.5, GateMode::kScalar).shape() == Shape{3, 1});
    CHECK(gate_coefficients(h, v, 0.5, GateMode::kElementwise).shape() == Shape{3, 8});
  }
}

TEST_CASE("entity-gating forward") {
  std::mt19937_64 rng(13);
  ModelConfig c = toy_config();
  auto params = make_entity_gating(c, 5);
  jitter(gating_parameters(params), rng, 0.2);
  SUBCASE("straight-line oracle, both gate modes") {
    for (GateMode mode : {GateMode::kScalar, GateMode::kElementwise}) {
      params.mode = mode;
      Tensor h = random_tensor({5, 8}, rng, -2, 2);
      Tensor e = random_tensor({5, 8}, rng, -2, 2);
      Tensor out = entity_gating_forward(h, e, params, c.layer_norm_eps);
      ref::Mat expected = ref::gating(ref::to_mat(h), ref::to_mat(e), params, c.layer_norm_eps);
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(out.at(i, j) - expected[i][j]) <= 1e-10);
    }
  }
  SUBCASE("gradient check over every gating parameter") {
    for (const auto& p : gating_parameters(params)) {
      Tensor t = p.tensor;
      t.set_requires_grad(true);
    }
    Tensor h = random_tensor({4, 8}, rng).set_requires_grad(true);
    Tensor e = random_tensor({4, 8}, rng).set_requires_grad(true);
    Tensor w = random_tensor({4, 8}, rng);
    // b_ent has an exactly zero gradient (a shared key shift cancels in the
    // softmax), so the floor sits above central-difference roundoff.
    corelm::testing::NamedParams named{{"h", h}, {"E", e}};
    for (const auto& p : gating_parameters(params)) named.emplace_back(p.name, p.tensor);
    auto res = corelm::testing::gradient_check(
        named, [&] { return corelm::testing::probe(entity_gating_forward(h, e, params, 1e-5), w); }, 1e-5,
        1e-5);
    CHECK_MESSAGE(res.max_rel_error < 1e-5, res.worst);
  }
}

TEST_CASE("CoreLM with entity streams") {
  std::mt19937_64 rng(14);
  CoreLM model(toy_config(), 21);
  jitter(model.parameters(), rng, 0.1);
  const std::vector<TokenId> toks{1, 5, 2, 5, 7, 3};
  EntityStore store(8);

  SUBCASE("empty stream equals the all-zero stream equals ones entity rows") {
    const std::vector<EntityId> zeros(toks.size(), 0);
    CoreLMOutput a = corelm_logits(model, toks, {}, store);
    CoreLMOutput b = corelm_logits(model, toks, zeros, store);
    CHECK(bit_equal(a.logits.data(), b.logits.data()));
    ref::Mat hn = ref::base_hidden(model.base(), toks);
    ref::Mat ones(toks.size(), std::vector<double>(8, 1.0));
    ref::Mat he = ref::gating(hn, ones, model.gating(), model.config().layer_norm_eps);
    ref::Mat probs = ref::softmax_logits(he, model.base().embeddings().wte);
    Tensor p = corelm_forward(model, toks, zeros, store);
    for (std::size_t i = 0; i < toks.size(); ++i)
      for (std::size_t v = 0; v < 11; ++v) CHECK(std::abs(p.at(i, v) - probs[i][v]) <= 1e-10);
  }
  SUBCASE("misaligned stream") {
    const std::vector<EntityId> short_ids{0, 1};
    CHECK_THROWS_AS(corelm_logits(model, toks, short_ids, store), AlignmentError);
  }
  SUBCASE("swapping entity IDs changes outputs from the first swapped position") {
    store.set(1, row(random_tensor({1, 8}, rng, -2, 2), 0));
    store.set(2, row(random_tensor({1, 8}, rng, -2, 2), 0));
    const std::vector<EntityId> ids_a{0, 0, 1, 1, 2, 0};
    const std::vector<EntityId> ids_b{0, 0, 2, 2, 1, 0};
    Tensor la = corelm_logits(model, toks, ids_a, store).logits;
    Tensor lb = corelm_logits(model, toks, ids_b, store).logits;
    CHECK(bit_equal(la.data().subspan(0, 2 * 11), lb.data().subspan(0, 2 * 11)));
    for (std::size_t i = 2; i < toks.size(); ++i) CHECK_FALSE(bit_equal(row(la, i), row(lb, i)));
  }
  SUBCASE("delta = 0 and ones entities: gating output is LN_out(EG_B)") {
    model.gating().delta = 0.0;
    Tensor hn = forward_base(model.base(), toks);
    Tensor out = entity_gating_forward(hn, Tensor::ones({toks.size(), 8}), model.gating(), 1e-5);
    const auto& g = model.gating();
    Tensor eg_a = add(layer_norm(entity_attention(hn, Tensor::ones({toks.size(), 8}), g.attn, g.heads),
                                 g.ln_attn.gain, g.ln_attn.bias, 1e-5),
                      hn);
    Tensor eg_b = add(layer_norm(position_ffn(eg_a, g.ffn), g.ln_ffn.gain, g.ln_ffn.bias, 1e-5), eg_a);
    CHECK(bit_equal(out.data(), layer_norm(eg_b, g.ln_out.gain, g.ln_out.bias, 1e-5).data()));
  }
  SUBCASE("forward does not register IDs") {
    const std::vector<EntityId> ids{0, 9, 9, 0, 0, 0};
    corelm_logits(model, toks, ids, store);
    CHECK_FALSE(store.contains(9));
  }
  SUBCASE("parameter names and groups") {
    auto params = model.parameters();
    std::size_t gate_count = 0;
    for (const auto& p : params)
      if (p.group == ParamGroup::kEntityGating) gate_count += p.tensor.numel();
    CHECK(gate_count == entity_gating_param_count(8, 12));
    CHECK(params.back().name == "gate.v");
  }
}

TEST_CASE("entity updates") {
  const Tensor hidden = Tensor::matrix(4, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  SUBCASE("mu = 1 replaces with the mention mean") {
    EntityStore store(2, 1.0);
    const std::vector<EntityId> ids{0, 3, 0, 3};
    update_entity_representations(store, ids, hidden);
    auto e = store.lookup(3);
    CHECK(e[0] == 5.0);
    CHECK(e[1] == 6.0);
  }
  SUBCASE("absent IDs keep their vectors") {
    EntityStore store(2, 0.5);
    store.set(8, std::vector<double>{-1, -1});
    const std::vector<EntityId> ids{1, 0, 0, 0};
    update_entity_representations(store, ids, hidden);
    CHECK(store.lookup(8)[0] == -1.0);
    CHECK(store.lookup(8)[1] == -1.0);
    CHECK_FALSE(store.contains(0));
  }
  SUBCASE("two mentions from the ones vector at mu = 0.5") {
    EntityStore store(2, 0.5);
    const std::vector<EntityId> ids{2, 0, 2, 0};
    update_entity_representations(store, ids, hidden);
    // mean = [3, 4]; 0.5 * [1, 1] + 0.5 * [3, 4]
    CHECK(store.lookup(2)[0] == 2.0);
    CHECK(store.lookup(2)[1] == 2.5);
  }
  SUBCASE("errors") {
    EntityStore store(2);
    const std::vector<EntityId> ids{1, 2};
    CHECK_THROWS_AS(update_entity_representations(store, ids, hidden), AlignmentError);
    EntityStore wide(3);
    const std::vector<EntityId> four{1, 1, 1, 1};
    CHECK_THROWS_AS(update_entity_representations(wide, four, hidden), ShapeError);
  }
}

TEST_CASE("init from context") {
  auto model = corelm::testing::uniform_model(20, 4);
  // hidden row = [u, 2u, 0, 1]
  const std::vector<TokenId> toks{3, 5, 7, 9, 11, 13};
  const std::vector<EntityId> ids{1, 0, 1, 2, 0, 2};
  const std::vector<WordSpan> words{{0, 2}, {2, 3}, {3, 5}, {5, 6}};
  SUBCASE("direct mean, windows of k") {
    EntityStore store(4);
    init_entities_from_context(store, model, toks, ids, words, false);
    CHECK(store.lookup(1)[0] == 5.0);
    CHECK(store.lookup(2)[0] == 11.0);
    CHECK(store.lookup(2)[1] == 22.0);
    CHECK(store.lookup(2)[3] == 1.0);
    REQUIRE(model.hidden_inputs.size() == 2);
    CHECK(model.hidden_inputs[0] == std::vector<TokenId>{3, 5, 7, 9});
    CHECK(model.hidden_inputs[1] == std::vector<TokenId>{11, 13});
  }
  SUBCASE("excluding the last word removes its tokens from the forward pass") {
    EntityStore store(4);
    init_entities_from_context(store, model, toks, ids, words, true);
    CHECK(store.lookup(2)[0] == 9.0);
    for (const auto& input : model.hidden_inputs)
      for (TokenId t : input) CHECK(t != 13);
  }
  SUBCASE("no mentions leaves the store untouched") {
    EntityStore store(4);
    const std::vector<EntityId> none(toks.size(), 0);
    init_entities_from_context(store, model, toks, none, words, false);
    CHECK(store.size() == 0);
    CHECK(model.hidden_calls == 0);
  }
  SUBCASE("reset") {
    EntityStore store(4);
    init_entities_from_context(store, model, toks, ids, words, false);
    reset_store(store);
    CHECK(store.size() == 0);
    for (double v : store.lookup(1)) CHECK(v == 1.0);
  }
}

TEST_CASE("store persistence") {
  EntityStore store(3, 0.25, "doc-17");
  store.set(4, std::vector<double>{0.1, -0.0, 1e-310});
  store.set(12, std::vector<double>{7, 8, 9});
  const auto path = std::filesystem::temp_directory_path() / "corelm_store_test.bin";
  save_store(store, path);
  EntityStore back = load_store(path);
  CHECK(back.dim() == 3);
  CHECK(back.momentum() == 0.25);
  CHECK(back.scope() == "doc-17");
  CHECK(back.size() == 2);
  CHECK(bit_equal(back.lookup(4), store.lookup(4)));
  CHECK(bit_equal(back.lookup(12), store.lookup(12)));
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".manifest");
}

TEST_CASE("gating parameter count") {
  CHECK(entity_gating_param_count(768, 3072) == 7090176);
  CHECK(entity_gating_param_count(16, 64) == 3328);
  CHECK(entity_gating_param_count(8, 12) == 556);
  for (auto [d, ff] : {std::pair<std::size_t, std::size_t>{8, 12}, {16, 64}, {24, 40}}) {
    ModelConfig c = toy_config();
    c.d_model = d;
    c.d_ff = ff;
    c.n_heads = 2;
    c.entity_heads = 2;
    CHECK(count_parameters(make_entity_gating(c, 1)) == entity_gating_param_count(d, ff));
  }
}
