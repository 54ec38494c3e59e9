#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "corelm/decoder.hpp"
#include "corelm/tensor.hpp"
#include "corelm/types.hpp"

namespace corelm {

// Persistent entity representations for one discourse scope.
//
// ID 0 always resolves to the static all-ones vector and is never written.
// Any positive ID not yet in the table also resolves to all-ones; it is
// registered by resolve() or on its first update.
class EntityStore {
 public:
  explicit EntityStore(std::size_t dim, double momentum = 0.5, std::string scope = "default");

  std::size_t dim() const { return ones_.size(); }
  double momentum() const { return momentum_; }
  const std::string& scope() const { return scope_; }
  void set_scope(std::string scope) { scope_ = std::move(scope); }
  void set_momentum(double momentum);

  std::span<const double> e_zero() const { return ones_; }

  // Read-only lookup; never registers.
  std::span<const double> lookup(EntityId id) const;
  // Lookup that registers unknown positive IDs as all-ones.
  std::span<const double> resolve(EntityId id);
  void set(EntityId id, std::span<const double> value);

  bool contains(EntityId id) const { return table_.count(id) != 0; }
  std::size_t size() const { return table_.size(); }
  const std::map<EntityId, std::vector<double>>& entries() const { return table_; }

  // Drops every stored vector; e_zero is kept.
  void reset() { table_.clear(); }

 private:
  std::map<EntityId, std::vector<double>> table_;
  std::vector<double> ones_;
  double momentum_;
  std::string scope_;
};

// Archive with one `entity.{id}` tensor per entry, plus `<path>.manifest`
// holding dim, momentum and scope.
void save_store(const EntityStore& store, const std::filesystem::path& path);
EntityStore load_store(const std::filesystem::path& path);

// Row i = store[entity_ids[i]]; unknown positive IDs are registered.
Tensor resolve_entities(std::span<const EntityId> entity_ids, EntityStore& store);
// Same rows without registering; safe for concurrent readers.
Tensor lookup_entities(std::span<const EntityId> entity_ids, const EntityStore& store);

struct EntityAttentionParams {
  Tensor w_q, b_q;      // queries from h_l
  Tensor w_ent, b_ent;  // keys from the entity vectors
  Tensor w_v, b_v;      // values from h_l
  Tensor w_o, b_o;
};

struct EntityGatingParams {
  EntityAttentionParams attn;
  FeedForwardParams ffn;
  LayerNormParams ln_attn;  // wraps entity attention
  LayerNormParams ln_ffn;   // wraps the position-wise FFN
  LayerNormParams ln_out;   // applied after the gate
  Tensor v_gate;            // [d]
  double delta = 0.5;
  std::size_t heads = 1;
  GateMode mode = GateMode::kScalar;
  bool trainable = true;
};

EntityGatingParams make_entity_gating(const ModelConfig& config, std::uint64_t seed);

// Closed form for the number of scalars an Entity-Gating layer adds:
// 4(d^2 + d) attention + (d*d_ff + d_ff + d_ff*d + d) FFN + 6d layer norm + d gate.
std::size_t entity_gating_param_count(std::size_t d_model, std::size_t d_ff);
std::size_t count_parameters(const EntityGatingParams& params);

// Causal multi-head attention with queries and values from h and one key per
// position projected from the entity matrix.
Tensor entity_attention(const Tensor& h, const Tensor& entities, const EntityAttentionParams& params,
                        std::size_t heads);

// g_e = delta * sigmoid(v_gate . h_l), shape [L x 1] in scalar mode, [L x d]
// elementwise.
Tensor gate_coefficients(const Tensor& h, const Tensor& v_gate, double delta, GateMode mode);

// z_e = (1 - g_e) * eg_b + g_e * h_l
Tensor gate(const Tensor& eg_b, const Tensor& h, const Tensor& v_gate, double delta, GateMode mode);

// EG_A = LN(EntityAttention(h)) + h
// EG_B = LN(FFN(EG_A)) + EG_A
// h_e  = LN(Gate(EG_B, h))
Tensor entity_gating_forward(const Tensor& h, const Tensor& entities, const EntityGatingParams& params,
                             double eps);

// Decoder stack with the Entity-Gating layer appended before the tied LM head.
class CoreLM : public LanguageModel {
 public:
  CoreLM(DecoderModel base, EntityGatingParams gating);
  CoreLM(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return base_.config(); }
  DecoderModel& base() { return base_; }
  const DecoderModel& base() const { return base_; }
  EntityGatingParams& gating() { return gating_; }
  const EntityGatingParams& gating() const { return gating_; }

  // Base parameters followed by gate.* parameters.
  std::vector<ParamRef> parameters() const;
  CoreLM clone() const;
  void apply_trainability();

  std::size_t vocab_size() const override { return base_.vocab_size(); }
  std::size_t context_window() const override { return base_.context_window(); }
  Tensor next_token_log_probs(std::span<const TokenId> tokens, std::span<const EntityId> entity_ids,
                              const EntityStore* store) const override;
  Tensor entity_hidden(std::span<const TokenId> tokens) const override { return forward_base(base_, tokens); }
  std::optional<TokenId> bos_token() const override { return base_.bos_token(); }

 private:
  DecoderModel base_;
  EntityGatingParams gating_;
};

std::vector<ParamRef> gating_parameters(const EntityGatingParams& params);

struct CoreLMOutput {
  Tensor hidden;  // h_n, the decoder output feeding the gating layer
  Tensor logits;  // h_e W_e^T
};

// An empty entity stream means every position is outside any entity.
CoreLMOutput corelm_logits(const CoreLM& model, std::span<const TokenId> tokens,
                           std::span<const EntityId> entity_ids, const EntityStore& store);
Tensor corelm_forward(const CoreLM& model, std::span<const TokenId> tokens, std::span<const EntityId> entity_ids,
                      const EntityStore& store);

// For each positive ID present: E_i <- (1 - mu) E_i + mu * mean(hidden rows
// at its positions). Runs outside any tape.
void update_entity_representations(EntityStore& store, std::span<const EntityId> entity_ids,
                                   const Tensor& hidden);

// Sets each mentioned ID directly to the mean h_n over its mention
// positions. With exclude_last_word the final word's tokens are dropped
// before the forward pass, so they cannot influence any vector.
void init_entities_from_context(EntityStore& store, const LanguageModel& model, std::span<const TokenId> tokens,
                                std::span<const EntityId> entity_ids, std::span<const WordSpan> words,
                                bool exclude_last_word);

void reset_store(EntityStore& store);

}  // namespace corelm
