#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corelm/tensor.hpp"
#include "corelm/types.hpp"

namespace corelm {

class EntityStore;

enum class GateMode {
  kScalar,       // one gate coefficient per position: delta * sigmoid(v . h)
  kElementwise,  // one coefficient per feature: delta * sigmoid(v * h)
};

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t context_window = 32;  // k
  std::size_t d_model = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t entity_heads = 2;
  double delta = 0.5;
  double layer_norm_eps = 1e-5;
  double init_std = 0.02;
  GateMode gate_mode = GateMode::kScalar;
  // When set, this reserved token is prepended before scoring so that the
  // first real token is scored as well.
  std::optional<TokenId> bos_token;

  void validate() const;

  // 12 layers, 12 heads, d = 768, k = 1024, GPT2 vocabulary, delta = 0.5.
  static ModelConfig gpt2_small();
};

// Which optimizer group a parameter belongs to; the freeze schedule acts on groups.
enum class ParamGroup { kTokenEmbedding, kPositionEmbedding, kDecoderBlocks, kEntityGating };

const char* param_group_name(ParamGroup group);

struct ParamRef {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct AttentionParams {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
};

// max(0, x W1 + b1) W2 + b2
struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct DecoderBlockParams {
  AttentionParams attn;
  FeedForwardParams ffn;
  LayerNormParams ln1;
  LayerNormParams ln2;
  bool trainable = true;
};

// The LM head reuses wte transposed; there is no separate output matrix.
struct EmbeddingParams {
  Tensor wte;  // [vocab x d]
  Tensor wpe;  // [k x d]
  bool wte_trainable = true;
  bool wpe_trainable = true;
};

// Anything that can score token sequences. Row i of next_token_log_probs is
// log p(. | tokens[0..i]); entity-unaware models ignore the entity stream.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t context_window() const = 0;
  virtual Tensor next_token_log_probs(std::span<const TokenId> tokens, std::span<const EntityId> entity_ids,
                                      const EntityStore* store) const = 0;
  // Decoder-stack output h_n; the source for entity representations.
  virtual Tensor entity_hidden(std::span<const TokenId> tokens) const = 0;
  virtual std::optional<TokenId> bos_token() const { return std::nullopt; }
};

class DecoderModel : public LanguageModel {
 public:
  DecoderModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  EmbeddingParams& embeddings() { return embeddings_; }
  const EmbeddingParams& embeddings() const { return embeddings_; }
  std::vector<DecoderBlockParams>& blocks() { return blocks_; }
  const std::vector<DecoderBlockParams>& blocks() const { return blocks_; }

  // Canonical names: wte, wpe, block{i}.attn.*, block{i}.ffn.*, block{i}.ln{1,2}.*
  std::vector<ParamRef> parameters() const;
  DecoderModel clone() const;
  // Sets requires_grad on every tensor from the trainable flags.
  void apply_trainability();

  std::size_t vocab_size() const override { return config_.vocab_size; }
  std::size_t context_window() const override { return config_.context_window; }
  Tensor next_token_log_probs(std::span<const TokenId> tokens, std::span<const EntityId> entity_ids,
                              const EntityStore* store) const override;
  Tensor entity_hidden(std::span<const TokenId> tokens) const override;
  std::optional<TokenId> bos_token() const override { return config_.bos_token; }

 private:
  ModelConfig config_;
  EmbeddingParams embeddings_;
  std::vector<DecoderBlockParams> blocks_;
};

LayerNormParams make_layer_norm(std::size_t d);

// h0 = U W_e + W_p, row i = wte[token_i] + wpe[i]
Tensor embed(const EmbeddingParams& params, const ModelConfig& config, std::span<const TokenId> tokens);

// Multi-head softmax(q k^T / sqrt(d_k)) v with a strictly causal mask.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads);

Tensor causal_self_attention(const Tensor& h, const AttentionParams& params, std::size_t n_heads);
Tensor position_ffn(const Tensor& h, const FeedForwardParams& params);

// a = LN1(SelfAttn(h)) + h; out = LN2(FFN(a)) + a
Tensor decoder_block(const Tensor& h, const DecoderBlockParams& params, std::size_t n_heads, double eps);
Tensor forward_base(const DecoderModel& model, std::span<const TokenId> tokens);

Tensor lm_logits(const Tensor& hidden, const Tensor& wte);
Tensor lm_head(const Tensor& hidden, const Tensor& wte);

// Sum of log p(u_i | u_<i) under teacher forcing. Without a BOS token the
// first token is unconditioned and excluded.
double sequence_log_prob(const LanguageModel& model, std::span<const TokenId> tokens,
                         std::span<const EntityId> entity_ids = {}, const EntityStore* store = nullptr);
double sequence_log_prob(const DecoderModel& model, std::span<const TokenId> tokens);

}  // namespace corelm
