#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "corelm/decoder.hpp"
#include "corelm/entity.hpp"
#include "corelm/tokenizer.hpp"

namespace corelm {

// Which parameter groups receive updates. The defaults freeze every decoder
// block and train the (tied) token embedding, the position embedding and the
// Entity-Gating layer.
struct GroupTrainability {
  bool token_embedding = true;
  bool position_embedding = true;
  bool decoder_blocks = false;
  bool entity_gating = true;

  bool operator==(const GroupTrainability&) const = default;
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 128;  // sequences per step
  double lr_start = 1e-5;
  std::size_t warmup_steps = 100;
  std::uint64_t seed = 0;
  double momentum = 0.5;  // entity update rate mu
  GroupTrainability trainable;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

// Steps are numbered 1..total. Linear warmup to lr_start at warmup_steps,
// then linear decay reaching 0 at the final step.
double learning_rate(std::size_t step, std::size_t total_steps, const TrainConfig& config);

class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1, double beta2, double eps);
  // Applies one update from the accumulated gradients, then clears them.
  void step(double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

using StepCallback = std::function<void(const StepRecord&)>;

// Token range of one context window and whether its first token is scored.
struct TokenWindow {
  std::size_t begin = 0;
  std::size_t length = 0;
};

// Non-overlapping windows over n tokens. Without BOS each window holds up to
// k tokens and its first token is only context; with BOS each holds up to
// k - 1 tokens and all of them are scored. Windows with nothing to score are
// dropped.
std::vector<TokenWindow> context_windows(std::size_t n_tokens, std::size_t k, bool has_bos);

// Documents are shuffled per epoch and grouped batch_size at a time; step w
// of a group takes window w of every document in it, so entity vectors
// written after one window are visible to the next. Entity vectors are
// updated from that step's h_n after every optimizer step.
std::vector<StepRecord> fine_tune(CoreLM& model, EntityStore& store, std::span<const TokenizedInstance> docs,
                                  const TrainConfig& config, const StepCallback& on_step = {});

// Plain LM training of the decoder alone; every group is trainable and the
// entity streams are ignored.
std::vector<StepRecord> pretrain_base(DecoderModel& model, std::span<const TokenizedInstance> docs,
                                      const TrainConfig& config, const StepCallback& on_step = {});

std::string format_step_log(std::span<const StepRecord> log);

// Checkpoints: a tensor archive plus `<path>.json` describing the model.
void save_decoder(const std::filesystem::path& path, const DecoderModel& model);
DecoderModel load_decoder(const std::filesystem::path& path);
void save_corelm(const std::filesystem::path& path, const CoreLM& model);
CoreLM load_corelm(const std::filesystem::path& path);
// "decoder" or "corelm"
std::string checkpoint_kind(const std::filesystem::path& path);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace corelm
