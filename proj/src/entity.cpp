#include "corelm/entity.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "corelm/archive.hpp"
#include "corelm/error.hpp"
#include "corelm/ops.hpp"

namespace corelm {

EntityStore::EntityStore(std::size_t dim, double momentum, std::string scope)
    : ones_(dim, 1.0), momentum_(momentum), scope_(std::move(scope)) {
  if (dim == 0) throw ValueError("entity store dimension must be positive");
  if (!(momentum > 0.0 && momentum <= 1.0)) throw ValueError("entity momentum must lie in (0, 1]");
}

void EntityStore::set_momentum(double momentum) {
  if (!(momentum > 0.0 && momentum <= 1.0)) throw ValueError("entity momentum must lie in (0, 1]");
  momentum_ = momentum;
}

std::span<const double> EntityStore::lookup(EntityId id) const {
  if (id < 0) throw FormatError("negative entity id " + std::to_string(id));
  if (id == 0) return ones_;
  auto it = table_.find(id);
  return it == table_.end() ? std::span<const double>(ones_) : std::span<const double>(it->second);
}

std::span<const double> EntityStore::resolve(EntityId id) {
  if (id < 0) throw FormatError("negative entity id " + std::to_string(id));
  if (id == 0) return ones_;
  auto it = table_.try_emplace(id, ones_).first;
  return it->second;
}

void EntityStore::set(EntityId id, std::span<const double> value) {
  if (id <= 0) throw ValueError("only positive entity ids can be written, got " + std::to_string(id));
  if (value.size() != dim()) throw ShapeError("entity vector has the wrong dimension");
  table_[id].assign(value.begin(), value.end());
}

void save_store(const EntityStore& store, const std::filesystem::path& path) {
  std::vector<NamedTensor> tensors;
  tensors.reserve(store.size());
  for (const auto& [id, vec] : store.entries()) {
    tensors.push_back({"entity." + std::to_string(id), Tensor::vector(vec)});
  }
  save_archive(path, tensors);
  std::ofstream manifest(path.string() + ".manifest", std::ios::trunc);
  if (!manifest) throw IoError("cannot write store manifest next to " + path.string());
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", store.momentum());
  manifest << "dim=" << store.dim() << "\n"
           << "momentum=" << buf << "\n"
           << "scope=" << store.scope() << "\n"
           << "count=" << store.size() << "\n";
}

EntityStore load_store(const std::filesystem::path& path) {
  std::ifstream manifest(path.string() + ".manifest");
  if (!manifest) throw IoError("missing store manifest " + path.string() + ".manifest");
  std::size_t dim = 0;
  double momentum = 0.5;
  std::string scope = "default";
  std::string line;
  while (std::getline(manifest, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "dim") dim = std::stoul(value);
    else if (key == "momentum") momentum = std::stod(value);
    else if (key == "scope") scope = value;
  }
  EntityStore store(dim, momentum, scope);
  for (const NamedTensor& t : load_archive(path)) {
    if (t.name.rfind("entity.", 0) != 0) throw CheckpointError("unexpected tensor '" + t.name + "' in entity store");
    const EntityId id = std::stoll(t.name.substr(7));
    if (t.tensor.numel() != dim) throw CheckpointError("entity '" + t.name + "' does not match store dimension");
    store.set(id, t.tensor.data());
  }
  return store;
}

Tensor resolve_entities(std::span<const EntityId> entity_ids, EntityStore& store) {
  for (EntityId id : entity_ids) store.resolve(id);
  return lookup_entities(entity_ids, store);
}

Tensor lookup_entities(std::span<const EntityId> entity_ids, const EntityStore& store) {
  if (entity_ids.empty()) throw ValueError("empty entity stream");
  const std::size_t d = store.dim();
  std::vector<double> rows(entity_ids.size() * d);
  for (std::size_t i = 0; i < entity_ids.size(); ++i) {
    auto v = store.lookup(entity_ids[i]);
    std::copy(v.begin(), v.end(), rows.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return Tensor::matrix(entity_ids.size(), d, std::move(rows));
}

EntityGatingParams make_entity_gating(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, config.init_std);
  auto normal = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = dist(rng);
    return t;
  };
  const std::size_t d = config.d_model;
  EntityGatingParams p;
  p.attn = {normal({d, d}), Tensor::zeros({d}), normal({d, d}), Tensor::zeros({d}),
            normal({d, d}), Tensor::zeros({d}), normal({d, d}), Tensor::zeros({d})};
  p.ffn = {normal({d, config.d_ff}), Tensor::zeros({config.d_ff}), normal({config.d_ff, d}), Tensor::zeros({d})};
  p.ln_attn = make_layer_norm(d);
  p.ln_ffn = make_layer_norm(d);
  p.ln_out = make_layer_norm(d);
  p.v_gate = normal({d});
  p.delta = config.delta;
  p.heads = config.entity_heads;
  p.mode = config.gate_mode;
  return p;
}

std::size_t entity_gating_param_count(std::size_t d, std::size_t d_ff) {
  return 4 * (d * d + d) + (d * d_ff + d_ff + d_ff * d + d) + 6 * d + d;
}

std::vector<ParamRef> gating_parameters(const EntityGatingParams& p) {
  const auto g = ParamGroup::kEntityGating;
  return {
      {"gate.attn.w_q", p.attn.w_q, g},     {"gate.attn.b_q", p.attn.b_q, g},
      {"gate.attn.w_ent", p.attn.w_ent, g}, {"gate.attn.b_ent", p.attn.b_ent, g},
      {"gate.attn.w_v", p.attn.w_v, g},     {"gate.attn.b_v", p.attn.b_v, g},
      {"gate.attn.w_o", p.attn.w_o, g},     {"gate.attn.b_o", p.attn.b_o, g},
      {"gate.ffn.w1", p.ffn.w1, g},         {"gate.ffn.b1", p.ffn.b1, g},
      {"gate.ffn.w2", p.ffn.w2, g},         {"gate.ffn.b2", p.ffn.b2, g},
      {"gate.ln_attn.gain", p.ln_attn.gain, g}, {"gate.ln_attn.bias", p.ln_attn.bias, g},
      {"gate.ln_ffn.gain", p.ln_ffn.gain, g},   {"gate.ln_ffn.bias", p.ln_ffn.bias, g},
      {"gate.ln_out.gain", p.ln_out.gain, g},   {"gate.ln_out.bias", p.ln_out.bias, g},
      {"gate.v", p.v_gate, g},
  };
}

std::size_t count_parameters(const EntityGatingParams& params) {
  std::size_t n = 0;
  for (const ParamRef& p : gating_parameters(params)) n += p.tensor.numel();
  return n;
}

Tensor entity_attention(const Tensor& h, const Tensor& entities, const EntityAttentionParams& p, std::size_t heads) {
  if (h.shape() != entities.shape()) {
    throw ShapeError("entity_attention: hidden " + shape_string(h.shape()) + " and entities " +
                     shape_string(entities.shape()) + " differ");
  }
  Tensor q = linear(h, p.w_q, p.b_q);
  Tensor k = linear(entities, p.w_ent, p.b_ent);
  Tensor v = linear(h, p.w_v, p.b_v);
  return linear(masked_attention(q, k, v, heads), p.w_o, p.b_o);
}

Tensor gate_coefficients(const Tensor& h, const Tensor& v_gate, double delta, GateMode mode) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw ValueError("gate flow rate delta must lie in [0, 1]");
  const std::size_t d = h.cols();
  if (v_gate.numel() != d) throw ShapeError("gate vector does not match hidden width");
  if (mode == GateMode::kScalar) {
    return scale(sigmoid(matmul(h, reshape(v_gate, {d, 1}))), delta);
  }
  Tensor tiled = matmul(Tensor::ones({h.rows(), 1}), reshape(v_gate, {1, d}));
  return scale(sigmoid(hadamard(h, tiled)), delta);
}

Tensor gate(const Tensor& eg_b, const Tensor& h, const Tensor& v_gate, double delta, GateMode mode) {
  if (eg_b.shape() != h.shape()) {
    throw ShapeError("gate: " + shape_string(eg_b.shape()) + " vs " + shape_string(h.shape()));
  }
  return blend(eg_b, h, gate_coefficients(h, v_gate, delta, mode));
}

Tensor entity_gating_forward(const Tensor& h, const Tensor& entities, const EntityGatingParams& p, double eps) {
  Tensor eg_a = add(layer_norm(entity_attention(h, entities, p.attn, p.heads), p.ln_attn.gain, p.ln_attn.bias, eps), h);
  Tensor eg_b = add(layer_norm(position_ffn(eg_a, p.ffn), p.ln_ffn.gain, p.ln_ffn.bias, eps), eg_a);
  Tensor z = gate(eg_b, h, p.v_gate, p.delta, p.mode);
  return layer_norm(z, p.ln_out.gain, p.ln_out.bias, eps);
}

CoreLM::CoreLM(DecoderModel base, EntityGatingParams gating) : base_(std::move(base)), gating_(std::move(gating)) {
  if (gating_.v_gate.numel() != base_.config().d_model) {
    throw ConfigError("entity gating width does not match the decoder's d_model");
  }
  apply_trainability();
}

CoreLM::CoreLM(const ModelConfig& config, std::uint64_t seed)
    : CoreLM(DecoderModel(config, seed), make_entity_gating(config, seed ^ 0x9E3779B97F4A7C15ULL)) {}

std::vector<ParamRef> CoreLM::parameters() const {
  std::vector<ParamRef> out = base_.parameters();
  for (ParamRef& p : gating_parameters(gating_)) out.push_back(std::move(p));
  return out;
}

CoreLM CoreLM::clone() const {
  EntityGatingParams g = gating_;
  const auto& a = gating_.attn;
  g.attn = {a.w_q.clone(), a.b_q.clone(), a.w_ent.clone(), a.b_ent.clone(),
            a.w_v.clone(), a.b_v.clone(), a.w_o.clone(), a.b_o.clone()};
  g.ffn = {gating_.ffn.w1.clone(), gating_.ffn.b1.clone(), gating_.ffn.w2.clone(), gating_.ffn.b2.clone()};
  g.ln_attn = {gating_.ln_attn.gain.clone(), gating_.ln_attn.bias.clone()};
  g.ln_ffn = {gating_.ln_ffn.gain.clone(), gating_.ln_ffn.bias.clone()};
  g.ln_out = {gating_.ln_out.gain.clone(), gating_.ln_out.bias.clone()};
  g.v_gate = gating_.v_gate.clone();
  return CoreLM(base_.clone(), std::move(g));
}

void CoreLM::apply_trainability() {
  base_.apply_trainability();
  for (ParamRef& p : gating_parameters(gating_)) p.tensor.set_requires_grad(gating_.trainable);
}

CoreLMOutput corelm_logits(const CoreLM& model, std::span<const TokenId> tokens, std::span<const EntityId> entity_ids,
                           const EntityStore& store) {
  std::vector<EntityId> defaulted;
  if (entity_ids.empty()) {
    defaulted.assign(tokens.size(), 0);
    entity_ids = defaulted;
  }
  if (entity_ids.size() != tokens.size()) {
    throw AlignmentError("token stream has " + std::to_string(tokens.size()) + " positions but entity stream has " +
                         std::to_string(entity_ids.size()));
  }
  if (store.dim() != model.config().d_model) throw ShapeError("entity store width does not match d_model");
  Tensor hidden = forward_base(model.base(), tokens);
  Tensor entities = lookup_entities(entity_ids, store);
  Tensor h_e = entity_gating_forward(hidden, entities, model.gating(), model.config().layer_norm_eps);
  return {hidden, lm_logits(h_e, model.base().embeddings().wte)};
}

Tensor corelm_forward(const CoreLM& model, std::span<const TokenId> tokens, std::span<const EntityId> entity_ids,
                      const EntityStore& store) {
  return softmax_rows(corelm_logits(model, tokens, entity_ids, store).logits);
}

Tensor CoreLM::next_token_log_probs(std::span<const TokenId> tokens, std::span<const EntityId> entity_ids,
                                    const EntityStore* store) const {
  if (store != nullptr) return log_softmax_rows(corelm_logits(*this, tokens, entity_ids, *store).logits);
  EntityStore empty(config().d_model);
  return log_softmax_rows(corelm_logits(*this, tokens, entity_ids, empty).logits);
}

namespace {

// Per-ID sums of hidden rows over [0, limit), in ascending ID order.
std::map<EntityId, std::pair<std::vector<double>, std::size_t>> mention_sums(std::span<const EntityId> ids,
                                                                              const Tensor& hidden,
                                                                              std::size_t row_offset,
                                                                              std::size_t limit) {
  std::map<EntityId, std::pair<std::vector<double>, std::size_t>> sums;
  const std::size_t d = hidden.cols();
  auto hv = hidden.data();
  for (std::size_t i = 0; i < limit; ++i) {
    const EntityId id = ids[row_offset + i];
    if (id < 0) throw FormatError("negative entity id " + std::to_string(id));
    if (id == 0) continue;
    auto& [acc, count] = sums[id];
    if (acc.empty()) acc.assign(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) acc[j] += hv[i * d + j];
    ++count;
  }
  return sums;
}

}  // namespace

void update_entity_representations(EntityStore& store, std::span<const EntityId> entity_ids, const Tensor& hidden) {
  if (hidden.rows() != entity_ids.size()) {
    throw AlignmentError("entity update: " + std::to_string(entity_ids.size()) + " ids for " +
                         std::to_string(hidden.rows()) + " hidden rows");
  }
  if (hidden.cols() != store.dim()) throw ShapeError("entity update: hidden width does not match the store");
  const double mu = store.momentum();
  for (auto& [id, entry] : mention_sums(entity_ids, hidden, 0, entity_ids.size())) {
    auto& [acc, count] = entry;
    auto current = store.resolve(id);
    std::vector<double> next(current.begin(), current.end());
    for (std::size_t j = 0; j < next.size(); ++j) {
      next[j] = (1.0 - mu) * next[j] + mu * (acc[j] / static_cast<double>(count));
    }
    store.set(id, next);
  }
}

void init_entities_from_context(EntityStore& store, const LanguageModel& model, std::span<const TokenId> tokens,
                                std::span<const EntityId> entity_ids, std::span<const WordSpan> words,
                                bool exclude_last_word) {
  if (tokens.size() != entity_ids.size()) {
    throw AlignmentError("context has " + std::to_string(tokens.size()) + " tokens but " +
                         std::to_string(entity_ids.size()) + " entity ids");
  }
  std::size_t cut = tokens.size();
  if (exclude_last_word && !words.empty()) cut = std::min(cut, words.back().begin);

  bool any = false;
  for (std::size_t i = 0; i < cut; ++i) any = any || entity_ids[i] > 0;
  if (!any) return;

  // Long contexts are read in consecutive non-overlapping windows.
  const std::size_t k = model.context_window();
  std::map<EntityId, std::pair<std::vector<double>, std::size_t>> totals;
  for (std::size_t start = 0; start < cut; start += k) {
    const std::size_t len = std::min(k, cut - start);
    Tensor hidden = model.entity_hidden(tokens.subspan(start, len));
    for (auto& [id, entry] : mention_sums(entity_ids, hidden, start, len)) {
      auto& [acc, count] = totals[id];
      if (acc.empty()) acc.assign(entry.first.size(), 0.0);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += entry.first[j];
      count += entry.second;
    }
  }
  for (auto& [id, entry] : totals) {
    std::vector<double> mean = entry.first;
    for (double& v : mean) v /= static_cast<double>(entry.second);
    store.set(id, mean);
  }
}

void reset_store(EntityStore& store) { store.reset(); }

}  // namespace corelm
