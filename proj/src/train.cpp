#include "corelm/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "corelm/archive.hpp"
#include "corelm/corpus.hpp"
#include "corelm/error.hpp"
#include "corelm/ops.hpp"

namespace corelm {
namespace {

using json = nlohmann::json;

// One sequence fed to the model in a step: the window's tokens (BOS
// prepended when configured) with shifted targets.
struct StepSequence {
  std::size_t doc = 0;
  std::vector<TokenId> tokens;
  std::vector<EntityId> entities;
  std::vector<std::int64_t> targets;  // -1 = unscored
  std::size_t scored = 0;
};

StepSequence make_sequence(const TokenizedInstance& doc, std::size_t index, const TokenWindow& w,
                           std::optional<TokenId> bos) {
  StepSequence s;
  s.doc = index;
  if (bos) {
    s.tokens.push_back(*bos);
    s.entities.push_back(0);
  }
  s.tokens.insert(s.tokens.end(), doc.token_ids.begin() + static_cast<std::ptrdiff_t>(w.begin),
                  doc.token_ids.begin() + static_cast<std::ptrdiff_t>(w.begin + w.length));
  s.entities.insert(s.entities.end(), doc.entity_ids.begin() + static_cast<std::ptrdiff_t>(w.begin),
                    doc.entity_ids.begin() + static_cast<std::ptrdiff_t>(w.begin + w.length));
  s.targets.assign(s.tokens.size(), -1);
  for (std::size_t i = 0; i + 1 < s.tokens.size(); ++i) s.targets[i] = s.tokens[i + 1];
  s.scored = s.tokens.size() - 1;
  return s;
}

// The steps of one epoch: each inner vector is one optimizer step.
std::vector<std::vector<StepSequence>> plan_epoch(std::span<const TokenizedInstance> docs, const TrainConfig& config,
                                                  std::size_t epoch, std::size_t k, std::optional<TokenId> bos) {
  const auto order = seeded_permutation(docs.size(), config.seed + 0x51ED270B * (epoch + 1));
  std::vector<std::vector<StepSequence>> steps;
  for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
    const std::size_t end = std::min(order.size(), start + config.batch_size);
    std::vector<std::vector<TokenWindow>> windows;
    std::size_t depth = 0;
    for (std::size_t i = start; i < end; ++i) {
      windows.push_back(context_windows(docs[order[i]].token_ids.size(), k, bos.has_value()));
      depth = std::max(depth, windows.back().size());
    }
    for (std::size_t w = 0; w < depth; ++w) {
      std::vector<StepSequence> step;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ws = windows[i - start];
        if (w < ws.size()) step.push_back(make_sequence(docs[order[i]], order[i], ws[w], bos));
      }
      steps.push_back(std::move(step));
    }
  }
  return steps;
}

std::vector<Tensor> trainable_tensors(const std::vector<ParamRef>& params) {
  std::vector<Tensor> out;
  for (const auto& p : params)
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  return out;
}

void check_docs(std::span<const TokenizedInstance> docs, std::size_t vocab) {
  for (const auto& d : docs) {
    if (d.token_ids.size() != d.entity_ids.size()) {
      throw AlignmentError("document '" + d.id + "' has mismatched token and entity streams");
    }
    for (TokenId t : d.token_ids) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
        throw VocabularyError("document '" + d.id + "' has token " + std::to_string(t) + " outside vocabulary " +
                              std::to_string(vocab));
      }
    }
  }
}

// Shared driver. `loss_of` builds the summed loss of one sequence on the
// active tape together with the h_n rows that `after_step` hands to the
// entity update.
template <typename LossFn, typename AfterFn>
std::vector<StepRecord> run_training(std::span<const TokenizedInstance> docs, const TrainConfig& config,
                                     std::size_t k, std::optional<TokenId> bos, std::vector<Tensor> params,
                                     LossFn loss_of, AfterFn after_step, const StepCallback& on_step) {
  config.validate();
  std::vector<std::vector<std::vector<StepSequence>>> epochs;
  std::size_t total = 0;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    epochs.push_back(plan_epoch(docs, config, e, k, bos));
    total += epochs.back().size();
  }
  if (total == 0) throw ValueError("training set has no scoreable windows");
  if (params.empty()) throw ConfigError("every parameter group is frozen; nothing to train");

  Adam adam(std::move(params), config.adam_beta1, config.adam_beta2, config.adam_eps);
  std::vector<StepRecord> log;
  log.reserve(total);
  std::size_t step = 0;
  for (auto& epoch : epochs) {
    for (auto& sequences : epoch) {
      ++step;
      std::size_t scored = 0;
      for (const auto& s : sequences) scored += s.scored;

      std::vector<Tensor> hidden;
      double loss_value = 0.0;
      {
        GradientTape tape;
        TapeScope scope(tape);
        Tensor total_loss;
        bool first = true;
        for (const auto& s : sequences) {
          auto [loss, h] = loss_of(s);
          hidden.push_back(h);
          total_loss = first ? loss : add(total_loss, loss);
          first = false;
        }
        Tensor mean = scale(total_loss, 1.0 / static_cast<double>(scored));
        loss_value = mean.item();
        tape.backward(mean);
      }
      const double lr = learning_rate(step, total, config);
      adam.step(lr);
      after_step(sequences, hidden);

      StepRecord rec{step, loss_value, lr};
      log.push_back(rec);
      if (on_step) on_step(rec);
    }
  }
  return log;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::filesystem::path sidecar(const std::filesystem::path& path) { return path.string() + ".json"; }

void write_sidecar(const std::filesystem::path& path, const std::string& kind, const ModelConfig& config) {
  json j;
  j["kind"] = kind;
  j["config"] = json::parse(model_config_to_json(config));
  std::ofstream out(sidecar(path), std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + sidecar(path).string());
  out << j.dump(2) << "\n";
}

void save_params(const std::filesystem::path& path, const std::vector<ParamRef>& params) {
  std::vector<NamedTensor> tensors;
  for (const auto& p : params) tensors.push_back({p.name, p.tensor});
  save_archive(path, tensors);
}

void load_params(const std::filesystem::path& path, const std::vector<ParamRef>& params) {
  auto stored = load_archive(path);
  std::map<std::string, Tensor> by_name;
  for (auto& t : stored) by_name.emplace(t.name, t.tensor);
  if (by_name.size() != params.size()) {
    throw CheckpointError(path.string() + " holds " + std::to_string(by_name.size()) +
                          " tensors but the configured model has " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError(path.string() + " lacks tensor '" + p.name + "'");
    if (it->second.shape() != p.tensor.shape()) {
      throw CheckpointError("tensor '" + p.name + "' in " + path.string() + " has shape " +
                            shape_string(it->second.shape()) + ", model expects " + shape_string(p.tensor.shape()));
    }
    Tensor dst = p.tensor;
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.data().begin());
  }
}

json read_sidecar(const std::filesystem::path& path) {
  try {
    return json::parse(read_text(sidecar(path)));
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint description " + sidecar(path).string() + ": " + e.what());
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr_start > 0.0)) throw ConfigError("lr_start must be positive");
  if (!(momentum > 0.0 && momentum <= 1.0)) throw ConfigError("momentum must lie in (0, 1]");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
}

double learning_rate(std::size_t step, std::size_t total_steps, const TrainConfig& config) {
  if (step == 0 || step > total_steps) throw ValueError("step " + std::to_string(step) + " outside 1.." + std::to_string(total_steps));
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(config.warmup_steps);
  const double t = static_cast<double>(total_steps);
  if (step <= config.warmup_steps) return config.lr_start * s / w;
  return config.lr_start * (t - s) / (t - w);
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    const std::vector<double> g = p.grad();
    auto data = p.data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      data[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
    p.zero_grad();
  }
}

std::vector<TokenWindow> context_windows(std::size_t n_tokens, std::size_t k, bool has_bos) {
  if (k < 2) throw ConfigError("context window must hold at least two tokens");
  const std::size_t span = has_bos ? k - 1 : k;
  std::vector<TokenWindow> out;
  for (std::size_t b = 0; b < n_tokens; b += span) {
    const std::size_t len = std::min(span, n_tokens - b);
    if (len >= (has_bos ? 1u : 2u)) out.push_back({b, len});
  }
  return out;
}

std::vector<StepRecord> fine_tune(CoreLM& model, EntityStore& store, std::span<const TokenizedInstance> docs,
                                  const TrainConfig& config, const StepCallback& on_step) {
  if (docs.empty()) throw ValueError("fine_tune: empty training set");
  if (store.dim() != model.config().d_model) throw ShapeError("entity store width does not match d_model");
  store.set_momentum(config.momentum);
  check_docs(docs, model.vocab_size());

  model.base().embeddings().wte_trainable = config.trainable.token_embedding;
  model.base().embeddings().wpe_trainable = config.trainable.position_embedding;
  for (auto& b : model.base().blocks()) b.trainable = config.trainable.decoder_blocks;
  model.gating().trainable = config.trainable.entity_gating;
  model.apply_trainability();

  auto loss_of = [&](const StepSequence& s) {
    CoreLMOutput out = corelm_logits(model, s.tokens, s.entities, store);
    return std::pair{cross_entropy(out.logits, s.targets, Reduction::kSum), out.hidden};
  };
  auto after = [&](const std::vector<StepSequence>& seqs, const std::vector<Tensor>& hidden) {
    for (std::size_t i = 0; i < seqs.size(); ++i) update_entity_representations(store, seqs[i].entities, hidden[i]);
  };
  return run_training(docs, config, model.context_window(), model.bos_token(), trainable_tensors(model.parameters()),
                      loss_of, after, on_step);
}

std::vector<StepRecord> pretrain_base(DecoderModel& model, std::span<const TokenizedInstance> docs,
                                      const TrainConfig& config, const StepCallback& on_step) {
  if (docs.empty()) throw ValueError("pretrain_base: empty training set");
  check_docs(docs, model.vocab_size());
  model.embeddings().wte_trainable = true;
  model.embeddings().wpe_trainable = true;
  for (auto& b : model.blocks()) b.trainable = true;
  model.apply_trainability();

  auto loss_of = [&](const StepSequence& s) {
    Tensor logits = lm_logits(forward_base(model, s.tokens), model.embeddings().wte);
    return std::pair{cross_entropy(logits, s.targets, Reduction::kSum), Tensor()};
  };
  auto after = [](const std::vector<StepSequence>&, const std::vector<Tensor>&) {};
  return run_training(docs, config, model.context_window(), model.bos_token(), trainable_tensors(model.parameters()),
                      loss_of, after, on_step);
}

std::string format_step_log(std::span<const StepRecord> log) {
  std::string out = "step\tloss\tlr\n";
  char buf[96];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\n", r.step, r.loss, r.lr);
    out += buf;
  }
  return out;
}

std::string model_config_to_json(const ModelConfig& c) {
  json j;
  j["vocab_size"] = c.vocab_size;
  j["context_window"] = c.context_window;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["entity_heads"] = c.entity_heads;
  j["delta"] = c.delta;
  j["layer_norm_eps"] = c.layer_norm_eps;
  j["init_std"] = c.init_std;
  j["gate_mode"] = c.gate_mode == GateMode::kScalar ? "scalar" : "elementwise";
  j["bos_token"] = c.bos_token ? json(*c.bos_token) : json(nullptr);
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.context_window = j.at("context_window").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.entity_heads = j.at("entity_heads").get<std::size_t>();
    c.delta = j.at("delta").get<double>();
    c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
    c.init_std = j.at("init_std").get<double>();
    const auto mode = j.at("gate_mode").get<std::string>();
    if (mode != "scalar" && mode != "elementwise") throw ConfigError("unknown gate_mode '" + mode + "'");
    c.gate_mode = mode == "scalar" ? GateMode::kScalar : GateMode::kElementwise;
    if (!j.at("bos_token").is_null()) c.bos_token = j.at("bos_token").get<TokenId>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed model configuration: ") + e.what());
  }
}

void save_decoder(const std::filesystem::path& path, const DecoderModel& model) {
  save_params(path, model.parameters());
  write_sidecar(path, "decoder", model.config());
}

void save_corelm(const std::filesystem::path& path, const CoreLM& model) {
  save_params(path, model.parameters());
  write_sidecar(path, "corelm", model.config());
}

std::string checkpoint_kind(const std::filesystem::path& path) {
  const json j = read_sidecar(path);
  if (!j.contains("kind") || !j["kind"].is_string()) throw CheckpointError(sidecar(path).string() + " has no kind");
  return j["kind"].get<std::string>();
}

DecoderModel load_decoder(const std::filesystem::path& path) {
  const json j = read_sidecar(path);
  if (j.value("kind", "") != "decoder") {
    throw CheckpointError(path.string() + " is a '" + j.value("kind", "?") + "' checkpoint, expected a decoder");
  }
  DecoderModel model(model_config_from_json(j.at("config").dump()), 0);
  load_params(path, model.parameters());
  return model;
}

CoreLM load_corelm(const std::filesystem::path& path) {
  const json j = read_sidecar(path);
  if (j.value("kind", "") != "corelm") {
    throw CheckpointError(path.string() + " is a '" + j.value("kind", "?") + "' checkpoint, expected corelm");
  }
  CoreLM model(model_config_from_json(j.at("config").dump()), 0);
  load_params(path, model.parameters());
  return model;
}

}  // namespace corelm
