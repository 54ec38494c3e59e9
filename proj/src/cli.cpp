#include "corelm/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "corelm/cloze.hpp"
#include "corelm/corpus.hpp"
#include "corelm/entity.hpp"
#include "corelm/error.hpp"
#include "corelm/tokenizer.hpp"

namespace corelm {
namespace {

using json = nlohmann::json;

enum class Kind { kUint, kDouble, kBool, kString, kOptionalDouble };

struct KeySpec {
  const char* key;
  Kind kind;
  const char* fallback;  // nullptr = required
  std::vector<std::string> choices = {};
};

// The complete key set. Anything else in a config file is an error.
const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys = {
      {"run.seed", Kind::kUint, nullptr},
      {"paths.runs", Kind::kString, "runs"},
      {"paths.corpus", Kind::kString, ""},
      {"paths.cloze", Kind::kString, ""},
      {"data.holdout_fraction", Kind::kDouble, "0.1"},
      {"tokenizer.vocab_size", Kind::kUint, "512"},
      {"tokenizer.min_pair_count", Kind::kUint, "2"},
      {"model.context_window", Kind::kUint, "64"},
      {"model.d_model", Kind::kUint, "32"},
      {"model.n_layers", Kind::kUint, "2"},
      {"model.n_heads", Kind::kUint, "2"},
      {"model.d_ff", Kind::kUint, "128"},
      {"model.entity_heads", Kind::kUint, "2"},
      {"model.delta", Kind::kDouble, "0.5"},
      {"model.layer_norm_eps", Kind::kDouble, "1e-05"},
      {"model.init_std", Kind::kDouble, "0.02"},
      {"model.gate_mode", Kind::kString, "scalar", {"scalar", "elementwise"}},
      {"model.bos", Kind::kBool, "false"},
      {"pretrain.epochs", Kind::kUint, "1"},
      {"pretrain.batch_size", Kind::kUint, "16"},
      {"pretrain.lr_start", Kind::kDouble, "0.001"},
      {"pretrain.warmup_steps", Kind::kUint, "10"},
      {"pretrain.adam_beta1", Kind::kDouble, "0.9"},
      {"pretrain.adam_beta2", Kind::kDouble, "0.999"},
      {"pretrain.adam_eps", Kind::kDouble, "1e-08"},
      {"finetune.epochs", Kind::kUint, "1"},
      {"finetune.batch_size", Kind::kUint, "16"},
      {"finetune.lr_start", Kind::kDouble, "0.0001"},
      {"finetune.warmup_steps", Kind::kUint, "10"},
      {"finetune.momentum", Kind::kDouble, "0.5"},
      {"finetune.adam_beta1", Kind::kDouble, "0.9"},
      {"finetune.adam_beta2", Kind::kDouble, "0.999"},
      {"finetune.adam_eps", Kind::kDouble, "1e-08"},
      {"finetune.train_token_embedding", Kind::kBool, "true"},
      {"finetune.train_position_embedding", Kind::kBool, "true"},
      {"finetune.train_decoder_blocks", Kind::kBool, "false"},
      {"finetune.train_entity_gating", Kind::kBool, "true"},
      {"finetune.use_entities", Kind::kBool, "true"},
      {"eval.model", Kind::kString, "corelm", {"corelm", "base"}},
      {"eval.split", Kind::kString, "eval", {"eval", "train"}},
      {"eval.store_mode", Kind::kString, "frozen", {"frozen", "online", "reset"}},
      {"eval.use_entities", Kind::kBool, "true"},
      {"eval.use_coref", Kind::kBool, "false"},
      {"eval.stride", Kind::kUint, "0"},
      {"eval.delta", Kind::kOptionalDouble, ""},
  };
  return keys;
}

const KeySpec& spec_of(const std::string& key) {
  for (const auto& s : schema())
    if (key == s.key) return s;
  throw ConfigError("unknown configuration key '" + key + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Canonical spelling so that equal settings hash equally.
std::string normalize(const KeySpec& spec, const std::string& raw) {
  const std::string where = std::string(spec.key) + " = '" + raw + "'";
  switch (spec.kind) {
    case Kind::kUint: {
      if (raw.empty() || raw.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError(where + " is not a non-negative integer");
      }
      try {
        return std::to_string(std::stoull(raw));
      } catch (const std::exception&) {
        throw ConfigError(where + " is out of range");
      }
    }
    case Kind::kOptionalDouble:
      if (raw.empty()) return raw;
      [[fallthrough]];
    case Kind::kDouble: {
      char* end = nullptr;
      const double v = std::strtod(raw.c_str(), &end);
      if (raw.empty() || end != raw.c_str() + raw.size() || !std::isfinite(v)) {
        throw ConfigError(where + " is not a finite number");
      }
      return format_double(v);
    }
    case Kind::kBool:
      if (raw == "true" || raw == "1" || raw == "yes") return "true";
      if (raw == "false" || raw == "0" || raw == "no") return "false";
      throw ConfigError(where + " is not a boolean");
    case Kind::kString:
      if (!spec.choices.empty() && std::find(spec.choices.begin(), spec.choices.end(), raw) == spec.choices.end()) {
        std::string all;
        for (const auto& c : spec.choices) all += (all.empty() ? "" : ", ") + c;
        throw ConfigError(where + " is not one of " + all);
      }
      return raw;
  }
  return raw;
}

bool matches_prefix(const std::string& key, const std::string& prefix) {
  return key == prefix || (key.size() > prefix.size() && key.compare(0, prefix.size(), prefix) == 0 &&
                           key[prefix.size()] == '.');
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void make_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void require_stage(const std::filesystem::path& marker, const char* producer) {
  if (!std::filesystem::exists(marker)) {
    throw IoError("missing " + marker.string() + "; run `" + producer + "` with this configuration first");
  }
}

const std::vector<std::string> kDataKeys{"run", "paths.corpus", "data", "tokenizer"};

std::vector<std::string> with(std::vector<std::string> base, std::initializer_list<const char*> more) {
  for (const char* m : more) base.emplace_back(m);
  return base;
}

TrainConfig train_config(const RunConfig& c, const std::string& section) {
  TrainConfig t;
  t.epochs = c.get_uint(section + ".epochs");
  t.batch_size = c.get_uint(section + ".batch_size");
  t.lr_start = c.get_double(section + ".lr_start");
  t.warmup_steps = c.get_uint(section + ".warmup_steps");
  t.seed = c.get_uint("run.seed");
  t.adam_beta1 = c.get_double(section + ".adam_beta1");
  t.adam_beta2 = c.get_double(section + ".adam_beta2");
  t.adam_eps = c.get_double(section + ".adam_eps");
  t.validate();
  return t;
}

BpeTokenizer load_tokenizer(const std::filesystem::path& data_dir) { return BpeTokenizer::load(data_dir / "tokenizer.txt"); }

void log_steps(std::ostream& log, std::span<const StepRecord> steps) {
  if (steps.empty()) return;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu steps, loss %.4f -> %.4f\n", steps.size(), steps.front().loss, steps.back().loss);
  log << buf;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value'");
    const std::string key = trim(body.substr(0, eq));
    if (c.values_.count(key)) throw ConfigError("config line " + std::to_string(number) + ": '" + key + "' set twice");
    try {
      c.values_[key] = normalize(spec_of(key), trim(body.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
  for (const auto& s : schema()) {
    if (c.values_.count(s.key)) continue;
    if (!s.fallback) throw ConfigError(std::string("missing required key '") + s.key + "'");
    c.values_[s.key] = normalize(s, s.fallback);
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("config file " + path.string() + " does not exist");
  return parse(read_text(path));
}

void RunConfig::set(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  const std::string key = trim(assignment.substr(0, eq));
  values_[key] = normalize(spec_of(key), trim(assignment.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) {
    spec_of(key);  // throws for keys outside the schema
    throw ConfigError("missing required key '" + key + "'");
  }
  return it->second;
}

std::uint64_t RunConfig::get_uint(const std::string& key) const { return std::stoull(get(key)); }
double RunConfig::get_double(const std::string& key) const { return std::stod(get(key)); }
bool RunConfig::get_bool(const std::string& key) const { return get(key) == "true"; }
bool RunConfig::has(const std::string& key) const { return !get(key).empty(); }

std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";  // std::map keeps keys sorted
  return out;
}

std::string RunConfig::hash(const std::vector<std::string>& sections) const {
  std::string text;
  for (const auto& [k, v] : values_) {
    if (std::any_of(sections.begin(), sections.end(), [&](const std::string& p) { return matches_prefix(k, p); })) {
      text += k + " = " + v + "\n";
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

ModelConfig RunConfig::model_config(std::size_t tokenizer_vocab) const {
  ModelConfig m;
  m.vocab_size = tokenizer_vocab;
  m.context_window = get_uint("model.context_window");
  m.d_model = get_uint("model.d_model");
  m.n_layers = get_uint("model.n_layers");
  m.n_heads = get_uint("model.n_heads");
  m.d_ff = get_uint("model.d_ff");
  m.entity_heads = get_uint("model.entity_heads");
  m.delta = get_double("model.delta");
  m.layer_norm_eps = get_double("model.layer_norm_eps");
  m.init_std = get_double("model.init_std");
  m.gate_mode = get("model.gate_mode") == "scalar" ? GateMode::kScalar : GateMode::kElementwise;
  if (get_bool("model.bos")) {
    // The reserved BOS id sits just past the tokenizer's vocabulary.
    m.bos_token = static_cast<TokenId>(tokenizer_vocab);
    m.vocab_size = tokenizer_vocab + 1;
  }
  m.validate();
  return m;
}

TrainConfig RunConfig::pretrain_config() const { return train_config(*this, "pretrain"); }

TrainConfig RunConfig::finetune_config() const {
  TrainConfig t = train_config(*this, "finetune");
  t.momentum = get_double("finetune.momentum");
  t.trainable.token_embedding = get_bool("finetune.train_token_embedding");
  t.trainable.position_embedding = get_bool("finetune.train_position_embedding");
  t.trainable.decoder_blocks = get_bool("finetune.train_decoder_blocks");
  t.trainable.entity_gating = get_bool("finetune.train_entity_gating");
  t.validate();
  return t;
}

RunLayout run_layout(const RunConfig& config) {
  const std::filesystem::path root = config.get("paths.runs");
  const auto base_keys = with(kDataKeys, {"model", "pretrain"});
  const auto ft_keys = with(base_keys, {"finetune"});
  const auto eval_keys = with(ft_keys, {"eval", "paths.cloze"});
  return {root / ("data-" + config.hash(kDataKeys)), root / ("base-" + config.hash(base_keys)),
          root / ("finetune-" + config.hash(ft_keys)), root / ("eval-" + config.hash(eval_keys))};
}

std::vector<TokenizedInstance> load_split(const std::filesystem::path& data_dir, std::string_view split) {
  const BpeTokenizer tokenizer = load_tokenizer(data_dir);
  std::vector<TokenizedInstance> out;
  for (const auto& doc : read_corpus(data_dir / (std::string(split) + ".txt"))) out.push_back(tokenize_align(doc, tokenizer));
  return out;
}

std::filesystem::path cmd_prepare_data(const RunConfig& config, std::ostream& log) {
  if (!config.has("paths.corpus")) throw ConfigError("paths.corpus is required for prepare-data");
  const auto dir = run_layout(config).data;
  const auto docs = read_corpus(config.get("paths.corpus"));
  if (docs.empty()) throw ValueError("corpus " + config.get("paths.corpus") + " holds no documents");
  HoldoutSplit split = docs.size() == 1 ? HoldoutSplit{docs, {}, {"single document kept in train"}}
                                        : split_holdout(docs, config.get_double("data.holdout_fraction"),
                                                        config.get_uint("run.seed"));

  // Layers are expanded after the split so that no document straddles it,
  // and IDs are made unique over both halves.
  std::vector<AnnotatedDocument> instances;
  for (const auto& d : split.train)
    for (auto& e : expand_layers(d)) instances.push_back(std::move(e));
  const std::size_t n_train = instances.size();
  for (const auto& d : split.eval)
    for (auto& e : expand_layers(d)) instances.push_back(std::move(e));
  make_entity_ids_unique(instances);
  const std::span<const AnnotatedDocument> all(instances);

  std::vector<std::string> texts;
  for (const auto& d : split.train) {
    std::string t;
    for (std::size_t i = 0; i < d.words.size(); ++i) t += (i ? " " : "") + d.words[i];
    texts.push_back(std::move(t));
  }
  const BpeTokenizer tokenizer = BpeTokenizer::train(texts, config.get_uint("tokenizer.vocab_size"),
                                                     config.get_uint("tokenizer.min_pair_count"));

  make_dir(dir);
  write_corpus(dir / "train.txt", all.first(n_train));
  write_corpus(dir / "eval.txt", all.subspan(n_train));
  tokenizer.save(dir / "tokenizer.txt");
  json manifest;
  manifest["documents"] = docs.size();
  manifest["instances"] = instances.size();
  manifest["train_documents"] = split.train.size();
  manifest["eval_documents"] = split.eval.size();
  manifest["train_instances"] = n_train;
  manifest["eval_instances"] = instances.size() - n_train;
  manifest["tokenizer_vocab"] = tokenizer.vocab_size();
  manifest["warnings"] = split.warnings;
  write_text(dir / "config.resolved", config.resolved());
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  for (const auto& w : split.warnings) log << "warning: " << w << "\n";
  log << "documents " << docs.size() << ", instances " << instances.size() << ", vocabulary "
      << tokenizer.vocab_size() << "\n";
  return dir;
}

std::filesystem::path cmd_pretrain(const RunConfig& config, std::ostream& log) {
  const auto layout = run_layout(config);
  require_stage(layout.data / "manifest.json", "prepare-data");
  const auto docs = load_split(layout.data, "train");
  const ModelConfig mc = config.model_config(load_tokenizer(layout.data).vocab_size());
  DecoderModel model(mc, config.get_uint("run.seed"));
  const auto steps = pretrain_base(model, docs, config.pretrain_config());
  log_steps(log, steps);

  make_dir(layout.base);
  save_decoder(layout.base / "base.ckpt", model);
  write_text(layout.base / "steps.tsv", format_step_log(steps));
  write_text(layout.base / "config.resolved", config.resolved());
  return layout.base;
}

std::filesystem::path cmd_finetune(const RunConfig& config, std::ostream& log) {
  const auto layout = run_layout(config);
  require_stage(layout.base / "base.ckpt", "pretrain");
  const ModelConfig mc = config.model_config(load_tokenizer(layout.data).vocab_size());
  DecoderModel base = load_decoder(layout.base / "base.ckpt");
  if (model_config_to_json(base.config()) != model_config_to_json(mc)) {
    throw CheckpointError("base checkpoint " + (layout.base / "base.ckpt").string() +
                          " was built with a different model configuration");
  }
  CoreLM model(std::move(base), make_entity_gating(mc, config.get_uint("run.seed")));
  auto docs = load_split(layout.data, "train");
  if (!config.get_bool("finetune.use_entities")) {
    for (auto& d : docs) std::fill(d.entity_ids.begin(), d.entity_ids.end(), 0);
  }
  const TrainConfig tc = config.finetune_config();
  EntityStore store(mc.d_model, tc.momentum, "train");
  const auto steps = fine_tune(model, store, docs, tc);
  log_steps(log, steps);
  log << store.size() << " entity vectors\n";

  make_dir(layout.finetune);
  save_corelm(layout.finetune / "corelm.ckpt", model);
  save_store(store, layout.finetune / "store.archive");
  write_text(layout.finetune / "steps.tsv", format_step_log(steps));
  write_text(layout.finetune / "config.resolved", config.resolved());
  return layout.finetune;
}

std::filesystem::path cmd_eval(const RunConfig& config, std::string_view task, std::ostream& log) {
  if (task != "ppl" && task != "lambada" && task != "cbt") {
    throw ConfigError("unknown eval task '" + std::string(task) + "' (expected ppl, lambada or cbt)");
  }
  const auto layout = run_layout(config);
  const bool use_base = config.get("eval.model") == "base";
  require_stage(use_base ? layout.base / "base.ckpt" : layout.finetune / "corelm.ckpt", use_base ? "pretrain" : "finetune");
  const BpeTokenizer tokenizer = load_tokenizer(layout.data);

  std::optional<DecoderModel> base;
  std::optional<CoreLM> corelm;
  std::optional<EntityStore> store;
  const LanguageModel* model = nullptr;
  if (use_base) {
    base.emplace(load_decoder(layout.base / "base.ckpt"));
    store.emplace(base->config().d_model);
    model = &*base;
  } else {
    corelm.emplace(load_corelm(layout.finetune / "corelm.ckpt"));
    if (config.has("eval.delta")) {
      const double delta = config.get_double("eval.delta");
      if (!(delta >= 0.0 && delta <= 1.0)) throw ConfigError("eval.delta must lie in [0, 1]");
      corelm->gating().delta = delta;
    }
    store.emplace(load_store(layout.finetune / "store.archive"));
    model = &*corelm;
  }

  EvalReport report;
  if (task == "ppl") {
    const auto docs = load_split(layout.data, config.get("eval.split"));
    if (docs.empty()) throw ValueError("the '" + config.get("eval.split") + "' split is empty");
    PerplexityOptions o;
    o.store_mode = parse_store_mode(config.get("eval.store_mode"));
    o.use_entities = config.get_bool("eval.use_entities");
    o.stride = config.get_uint("eval.stride");
    report = eval_perplexity(*model, *store, docs, o);
  } else {
    if (!config.has("paths.cloze")) throw ConfigError("paths.cloze is required for eval " + std::string(task));
    const ClozeSet set = read_cloze(config.get("paths.cloze"));
    std::vector<ClozeInstance> instances;
    if (task == "lambada") {
      for (const auto& e : set.lambada) instances.push_back(format_lambada(e));
    } else {
      for (const auto& q : set.cbt)
        for (auto& v : format_cbt(q)) instances.push_back(std::move(v));
    }
    if (instances.empty()) throw ValueError(config.get("paths.cloze") + " has no " + std::string(task) + " entries");
    const bool coref = config.get_bool("eval.use_coref");
    report = task == "lambada" ? eval_lambada(*model, *store, instances, tokenizer, coref)
                               : eval_cbt(*model, *store, instances, tokenizer, coref);
  }

  make_dir(layout.eval);
  save_report(layout.eval / (std::string(task) + ".report"), report);
  write_text(layout.eval / "config.resolved", config.resolved());
  for (const auto& [k, v] : report.aggregates) log << k << "\t" << format_double(v) << "\n";
  return layout.eval;
}

TTestResult cmd_compare(const std::filesystem::path& report_a, const std::filesystem::path& report_b,
                        std::ostream& out) {
  const EvalReport a = load_report(report_a);
  const EvalReport b = load_report(report_b);
  if (a.task != b.task) throw ValueError("cannot compare a '" + a.task + "' report with a '" + b.task + "' report");
  const TTestResult t = paired_t_test(a, b);
  out << "t\t" << format_double(t.t) << "\n"
      << "p\t" << format_double(t.p) << "\n"
      << "n\t" << t.n << "\n"
      << "mean_difference\t" << format_double(t.mean_difference) << "\n";
  if (t.degenerate_variance) out << "note\tall paired differences are equal; variance is zero\n";
  for (const auto& [category, delta] : category_deltas(a, b)) out << "delta." << category << "\t" << format_double(delta) << "\n";
  return t;
}

void cmd_inspect_entities(const std::filesystem::path& store_path, std::ostream& out) {
  const EntityStore store = load_store(store_path);
  out << "# scope " << store.scope() << ", momentum " << format_double(store.momentum()) << ", " << store.size()
      << " entities\n";
  out << "id\tnorm\tdistance_to_ones\n";
  for (const auto& [id, vec] : store.entries()) {
    double norm = 0.0, dist = 0.0;
    for (double x : vec) {
      norm += x * x;
      dist += (x - 1.0) * (x - 1.0);
    }
    out << id << "\t" << format_double(std::sqrt(norm)) << "\t" << format_double(std::sqrt(dist)) << "\n";
  }
}

const char* error_category(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) return err->category().c_str();
  return "internal";
}

int exit_code_for(const std::exception& e) {
  const std::string c = error_category(e);
  if (c == "config") return 3;
  if (c == "io") return 4;
  if (c == "format") return 5;
  if (c == "checkpoint") return 6;
  return 1;
}

}  // namespace corelm
