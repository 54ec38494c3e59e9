#include "corelm/decoder.hpp"

#include <cmath>
#include <random>

#include "corelm/error.hpp"
#include "corelm/ops.hpp"

namespace corelm {

void ModelConfig::validate() const {
  if (vocab_size == 0 || context_window == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || entity_heads == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (context_window < 2) throw ConfigError("context_window must be at least 2");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (d_model % entity_heads != 0) throw ConfigError("d_model must be divisible by entity_heads");
  if (!(delta >= 0.0 && delta <= 1.0)) throw ConfigError("delta must lie in [0, 1]");
  if (!(layer_norm_eps >= 0.0)) throw ConfigError("layer_norm_eps must be non-negative");
  if (bos_token && (*bos_token < 0 || static_cast<std::size_t>(*bos_token) >= vocab_size)) {
    throw ConfigError("bos_token must be inside the vocabulary");
  }
}

ModelConfig ModelConfig::gpt2_small() {
  ModelConfig c;
  c.vocab_size = 50257;
  c.context_window = 1024;
  c.d_model = 768;
  c.n_layers = 12;
  c.n_heads = 12;
  c.d_ff = 3072;
  c.entity_heads = 12;
  c.delta = 0.5;
  return c;
}

const char* param_group_name(ParamGroup group) {
  switch (group) {
    case ParamGroup::kTokenEmbedding: return "wte";
    case ParamGroup::kPositionEmbedding: return "wpe";
    case ParamGroup::kDecoderBlocks: return "decoder";
    case ParamGroup::kEntityGating: return "gating";
  }
  return "unknown";
}

namespace {

Tensor normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

AttentionParams make_attention(std::size_t d, double std, std::mt19937_64& rng) {
  AttentionParams p;
  p.w_q = normal_tensor({d, d}, std, rng);
  p.b_q = Tensor::zeros({d});
  p.w_k = normal_tensor({d, d}, std, rng);
  p.b_k = Tensor::zeros({d});
  p.w_v = normal_tensor({d, d}, std, rng);
  p.b_v = Tensor::zeros({d});
  p.w_o = normal_tensor({d, d}, std, rng);
  p.b_o = Tensor::zeros({d});
  return p;
}

FeedForwardParams make_ffn(std::size_t d, std::size_t d_ff, double std, std::mt19937_64& rng) {
  FeedForwardParams p;
  p.w1 = normal_tensor({d, d_ff}, std, rng);
  p.b1 = Tensor::zeros({d_ff});
  p.w2 = normal_tensor({d_ff, d}, std, rng);
  p.b2 = Tensor::zeros({d});
  return p;
}

AttentionParams clone_attention(const AttentionParams& a) {
  return {a.w_q.clone(), a.b_q.clone(), a.w_k.clone(), a.b_k.clone(),
          a.w_v.clone(), a.b_v.clone(), a.w_o.clone(), a.b_o.clone()};
}

}  // namespace

LayerNormParams make_layer_norm(std::size_t d) { return {Tensor::ones({d}), Tensor::zeros({d})}; }

DecoderModel::DecoderModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model;
  embeddings_.wte = normal_tensor({config_.vocab_size, d}, config_.init_std, rng);
  embeddings_.wpe = normal_tensor({config_.context_window, d}, config_.init_std, rng);
  blocks_.reserve(config_.n_layers);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    DecoderBlockParams b;
    b.attn = make_attention(d, config_.init_std, rng);
    b.ffn = make_ffn(d, config_.d_ff, config_.init_std, rng);
    b.ln1 = make_layer_norm(d);
    b.ln2 = make_layer_norm(d);
    blocks_.push_back(std::move(b));
  }
  apply_trainability();
}

std::vector<ParamRef> DecoderModel::parameters() const {
  std::vector<ParamRef> out;
  out.push_back({"wte", embeddings_.wte, ParamGroup::kTokenEmbedding});
  out.push_back({"wpe", embeddings_.wpe, ParamGroup::kPositionEmbedding});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    const std::string p = "block" + std::to_string(i) + ".";
    const auto g = ParamGroup::kDecoderBlocks;
    out.push_back({p + "attn.w_q", b.attn.w_q, g});
    out.push_back({p + "attn.b_q", b.attn.b_q, g});
    out.push_back({p + "attn.w_k", b.attn.w_k, g});
    out.push_back({p + "attn.b_k", b.attn.b_k, g});
    out.push_back({p + "attn.w_v", b.attn.w_v, g});
    out.push_back({p + "attn.b_v", b.attn.b_v, g});
    out.push_back({p + "attn.w_o", b.attn.w_o, g});
    out.push_back({p + "attn.b_o", b.attn.b_o, g});
    out.push_back({p + "ffn.w1", b.ffn.w1, g});
    out.push_back({p + "ffn.b1", b.ffn.b1, g});
    out.push_back({p + "ffn.w2", b.ffn.w2, g});
    out.push_back({p + "ffn.b2", b.ffn.b2, g});
    out.push_back({p + "ln1.gain", b.ln1.gain, g});
    out.push_back({p + "ln1.bias", b.ln1.bias, g});
    out.push_back({p + "ln2.gain", b.ln2.gain, g});
    out.push_back({p + "ln2.bias", b.ln2.bias, g});
  }
  return out;
}

DecoderModel DecoderModel::clone() const {
  DecoderModel copy(*this);
  copy.embeddings_.wte = embeddings_.wte.clone();
  copy.embeddings_.wpe = embeddings_.wpe.clone();
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    auto& c = copy.blocks_[i];
    c.attn = clone_attention(b.attn);
    c.ffn = {b.ffn.w1.clone(), b.ffn.b1.clone(), b.ffn.w2.clone(), b.ffn.b2.clone()};
    c.ln1 = {b.ln1.gain.clone(), b.ln1.bias.clone()};
    c.ln2 = {b.ln2.gain.clone(), b.ln2.bias.clone()};
  }
  return copy;
}

void DecoderModel::apply_trainability() {
  embeddings_.wte.set_requires_grad(embeddings_.wte_trainable);
  embeddings_.wpe.set_requires_grad(embeddings_.wpe_trainable);
  for (auto& b : blocks_) {
    for (Tensor* t : {&b.attn.w_q, &b.attn.b_q, &b.attn.w_k, &b.attn.b_k, &b.attn.w_v, &b.attn.b_v, &b.attn.w_o,
                      &b.attn.b_o, &b.ffn.w1, &b.ffn.b1, &b.ffn.w2, &b.ffn.b2, &b.ln1.gain, &b.ln1.bias,
                      &b.ln2.gain, &b.ln2.bias}) {
      t->set_requires_grad(b.trainable);
    }
  }
}

Tensor embed(const EmbeddingParams& params, const ModelConfig& config, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ValueError("embed: empty token sequence");
  if (tokens.size() > config.context_window) {
    throw ContextOverflowError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds context window " +
                               std::to_string(config.context_window));
  }
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
      throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of size " +
                            std::to_string(config.vocab_size));
    }
  }
  std::vector<std::int64_t> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int64_t>(i);
  return add(gather_rows(params.wte, tokens), gather_rows(params.wpe, positions));
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads) {
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) + ", v " +
                     shape_string(v.shape()) + " must agree");
  }
  const std::size_t len = q.rows();
  const std::size_t d_k = q.cols() / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_k));
  const Mask mask = Mask::causal(len);
  auto qs = split_heads(q, n_heads);
  auto ks = split_heads(k, n_heads);
  auto vs = split_heads(v, n_heads);
  std::vector<Tensor> outs;
  outs.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Tensor scores = scale(matmul(qs[h], transpose(ks[h])), inv_sqrt);
    outs.push_back(matmul(softmax_rows(scores, &mask), vs[h]));
  }
  return concat_heads(outs);
}

Tensor causal_self_attention(const Tensor& h, const AttentionParams& p, std::size_t n_heads) {
  Tensor q = linear(h, p.w_q, p.b_q);
  Tensor k = linear(h, p.w_k, p.b_k);
  Tensor v = linear(h, p.w_v, p.b_v);
  return linear(masked_attention(q, k, v, n_heads), p.w_o, p.b_o);
}

Tensor position_ffn(const Tensor& h, const FeedForwardParams& p) {
  return linear(relu(linear(h, p.w1, p.b1)), p.w2, p.b2);
}

Tensor decoder_block(const Tensor& h, const DecoderBlockParams& p, std::size_t n_heads, double eps) {
  Tensor a = add(layer_norm(causal_self_attention(h, p.attn, n_heads), p.ln1.gain, p.ln1.bias, eps), h);
  return add(layer_norm(position_ffn(a, p.ffn), p.ln2.gain, p.ln2.bias, eps), a);
}

Tensor forward_base(const DecoderModel& model, std::span<const TokenId> tokens) {
  const ModelConfig& c = model.config();
  Tensor h = embed(model.embeddings(), c, tokens);
  for (const auto& block : model.blocks()) h = decoder_block(h, block, c.n_heads, c.layer_norm_eps);
  return h;
}

Tensor lm_logits(const Tensor& hidden, const Tensor& wte) { return matmul(hidden, transpose(wte)); }

Tensor lm_head(const Tensor& hidden, const Tensor& wte) { return softmax_rows(lm_logits(hidden, wte)); }

Tensor DecoderModel::next_token_log_probs(std::span<const TokenId> tokens, std::span<const EntityId>,
                                          const EntityStore*) const {
  return log_softmax_rows(lm_logits(forward_base(*this, tokens), embeddings_.wte));
}

Tensor DecoderModel::entity_hidden(std::span<const TokenId> tokens) const { return forward_base(*this, tokens); }

double sequence_log_prob(const LanguageModel& model, std::span<const TokenId> tokens,
                         std::span<const EntityId> entity_ids, const EntityStore* store) {
  if (!entity_ids.empty() && entity_ids.size() != tokens.size()) {
    throw AlignmentError("sequence_log_prob: " + std::to_string(tokens.size()) + " tokens but " +
                         std::to_string(entity_ids.size()) + " entity ids");
  }
  std::vector<TokenId> seq;
  std::vector<EntityId> ents;
  if (auto bos = model.bos_token()) {
    seq.push_back(*bos);
    ents.push_back(0);
  }
  seq.insert(seq.end(), tokens.begin(), tokens.end());
  if (entity_ids.empty()) {
    ents.resize(seq.size(), 0);
  } else {
    ents.insert(ents.end(), entity_ids.begin(), entity_ids.end());
  }
  if (seq.size() < 2) throw ValueError("sequence_log_prob needs at least two positions");
  Tensor lp = model.next_token_log_probs(seq, ents, store);
  const std::size_t vocab = lp.cols();
  double total = 0.0;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    total += lp.data()[(i - 1) * vocab + static_cast<std::size_t>(seq[i])];
  }
  return total;
}

double sequence_log_prob(const DecoderModel& model, std::span<const TokenId> tokens) {
  return sequence_log_prob(static_cast<const LanguageModel&>(model), tokens, {}, nullptr);
}

}  // namespace corelm
