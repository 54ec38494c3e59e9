#include "entity_benefit.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>

#include "corelm/error.hpp"
#include "corelm/eval.hpp"
#include "corelm/train.hpp"

namespace corelm::acceptance {

std::vector<TokenizedInstance> benefit_corpus(const BenefitSetup& s) {
  if (s.attributes < s.entities_per_doc || s.names < s.entities_per_doc) {
    throw ValueError("benefit corpus needs at least entities_per_doc names and attributes");
  }
  std::mt19937_64 rng(s.seed);
  const TokenId attr0 = static_cast<TokenId>(s.names);
  const TokenId filler0 = static_cast<TokenId>(s.names + s.attributes);
  std::vector<TokenizedInstance> docs;
  docs.reserve(s.documents);
  std::vector<TokenId> names(s.names), attrs(s.attributes);
  std::iota(names.begin(), names.end(), TokenId{0});
  std::iota(attrs.begin(), attrs.end(), attr0);
  std::vector<std::size_t> order(s.entities_per_doc);
  for (std::size_t d = 0; d < s.documents; ++d) {
    TokenizedInstance doc;
    doc.id = "syn" + std::to_string(d);
    // Within a document names and attributes are distinct, so a cue has one answer.
    std::shuffle(names.begin(), names.end(), rng);
    std::shuffle(attrs.begin(), attrs.end(), rng);
    auto push = [&](TokenId t, EntityId e) {
      doc.token_ids.push_back(t);
      doc.entity_ids.push_back(e);
    };
    const EntityId first_id = static_cast<EntityId>(d * s.entities_per_doc + 1);
    auto id_of = [&](std::size_t j) { return first_id + static_cast<EntityId>(j); };
    for (std::size_t j = 0; j < s.entities_per_doc; ++j) {
      push(names[j], id_of(j));
      push(attrs[j], id_of(j));
    }
    // Fill up to and including the first position of the second window.
    for (std::size_t t = 0; doc.token_ids.size() <= s.context; ++t) {
      push(filler0 + static_cast<TokenId>(t % s.fillers), 0);
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t j : order) push(names[j], id_of(j));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t j : order) {
      push(attrs[j], id_of(j));
      push(names[j], id_of(j));
    }
    for (std::size_t i = 0; i < doc.token_ids.size(); ++i) doc.word_boundaries.push_back({i, i + 1});
    docs.push_back(std::move(doc));
  }
  return docs;
}

BenefitResult run_entity_benefit(const BenefitSetup& s, std::ostream& log) {
  auto docs = benefit_corpus(s);
  const std::size_t n_eval = static_cast<std::size_t>(static_cast<double>(docs.size()) * s.holdout);
  const std::vector<TokenizedInstance> train(docs.begin(), docs.end() - static_cast<std::ptrdiff_t>(n_eval));
  const std::vector<TokenizedInstance> held(docs.end() - static_cast<std::ptrdiff_t>(n_eval), docs.end());
  std::vector<TokenizedInstance> train_null = train;
  for (auto& d : train_null) std::fill(d.entity_ids.begin(), d.entity_ids.end(), 0);

  ModelConfig mc;
  mc.vocab_size = s.vocab();
  mc.context_window = s.context;
  mc.d_model = s.d_model;
  mc.n_layers = 2;
  mc.n_heads = s.n_heads;
  mc.d_ff = s.d_ff;
  mc.entity_heads = s.entity_heads;

  auto progress = [&](const char* stage) {
    return [&log, stage](const StepRecord& r) {
      if (r.step % 200 == 0) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "    %s step %zu loss %.4f\n", stage, r.step, r.loss);
        log << buf << std::flush;
      }
    };
  };

  TrainConfig pre;
  pre.epochs = s.pretrain_epochs;
  pre.batch_size = s.batch_size;
  pre.lr_start = s.pretrain_lr;
  pre.warmup_steps = 50;
  pre.seed = s.seed;
  DecoderModel base(mc, s.seed);
  pretrain_base(base, train, pre, progress("pretrain"));

  BenefitResult r;
  EntityStore unused(mc.d_model);
  r.base_ppl = eval_perplexity(base, unused, held).aggregate("ppl");

  TrainConfig ft = pre;
  ft.epochs = s.finetune_epochs;
  ft.lr_start = s.finetune_lr;
  ft.momentum = s.momentum;
  const EntityGatingParams gating = make_entity_gating(mc, s.seed + 1);

  PerplexityOptions opts;
  opts.store_mode = StoreMode::kReset;
  {
    // Tensors are handles: clone so the two runs never share storage.
    CoreLM model = CoreLM(base.clone(), gating).clone();
    EntityStore store(mc.d_model, s.momentum, "synthetic");
    fine_tune(model, store, train, ft, progress("entities"));
    r.ppl_entities = eval_perplexity(model, store, held, opts).aggregate("ppl");
  }
  {
    CoreLM model = CoreLM(base.clone(), gating).clone();
    EntityStore store(mc.d_model, s.momentum, "synthetic");
    fine_tune(model, store, train_null, ft, progress("null"));
    opts.use_entities = false;
    r.ppl_null = eval_perplexity(model, store, held, opts).aggregate("ppl");
  }
  return r;
}

}  // namespace corelm::acceptance
