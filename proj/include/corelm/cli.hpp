#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "corelm/decoder.hpp"
#include "corelm/eval.hpp"
#include "corelm/train.hpp"

namespace corelm {

// Flat `section.key = value` configuration. Every key must be declared in
// the schema; missing optional keys take their schema default.
class RunConfig {
 public:
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);

  // `key=value`, validated like a file line.
  void set(std::string_view assignment);

  const std::string& get(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  bool has(const std::string& key) const;  // explicitly set or defaulted non-empty

  // Every schema key in sorted order, defaults filled in.
  std::string resolved() const;
  // FNV-1a over the resolved lines whose section is in `sections`.
  std::string hash(const std::vector<std::string>& sections) const;

  // Typed views.
  ModelConfig model_config(std::size_t tokenizer_vocab) const;
  TrainConfig pretrain_config() const;
  TrainConfig finetune_config() const;

 private:
  std::map<std::string, std::string> values_;
};

std::uint64_t fnv1a64(std::string_view bytes);

// Stage directories under paths.runs, each named by the hash of the config
// sections that determine its contents.
struct RunLayout {
  std::filesystem::path data;
  std::filesystem::path base;
  std::filesystem::path finetune;
  std::filesystem::path eval;
};

RunLayout run_layout(const RunConfig& config);

// Each command returns the directory it wrote and never mutates upstream
// stages. Progress goes to `log`.
std::filesystem::path cmd_prepare_data(const RunConfig& config, std::ostream& log);
std::filesystem::path cmd_pretrain(const RunConfig& config, std::ostream& log);
std::filesystem::path cmd_finetune(const RunConfig& config, std::ostream& log);
std::filesystem::path cmd_eval(const RunConfig& config, std::string_view task, std::ostream& log);
TTestResult cmd_compare(const std::filesystem::path& report_a, const std::filesystem::path& report_b, std::ostream& out);
void cmd_inspect_entities(const std::filesystem::path& store, std::ostream& out);

// Short tag printed as error[<tag>]: ... and the matching exit status.
const char* error_category(const std::exception& e);
int exit_code_for(const std::exception& e);

// The instances of a prepared split, ready for training or scoring.
std::vector<TokenizedInstance> load_split(const std::filesystem::path& data_dir, std::string_view split);

}  // namespace corelm
