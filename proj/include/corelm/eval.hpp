#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "corelm/cloze.hpp"
#include "corelm/decoder.hpp"
#include "corelm/entity.hpp"
#include "corelm/tokenizer.hpp"

namespace corelm {

// How the entity store evolves while a document is scored. The caller's
// store is never modified; evaluators work on a copy.
enum class StoreMode {
  kFrozen,  // vectors as given, no updates
  kOnline,  // start from the given vectors, update after every window
  kReset,   // start every document from an empty store, update after every window
};

StoreMode parse_store_mode(std::string_view name);
const char* store_mode_name(StoreMode mode);

struct ExampleScore {
  std::string id;
  std::string category;
  double score = 0.0;      // summed log-prob, or 0/1 correctness
  std::size_t count = 1;   // scored tokens behind `score`

  bool operator==(const ExampleScore&) const = default;
};

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t n = 0;
  double mean_difference = 0.0;
  bool degenerate_variance = false;

  bool operator==(const TTestResult&) const = default;
};

struct EvalReport {
  std::string task;  // ppl, lambada or cbt
  std::vector<ExampleScore> examples;
  std::vector<std::pair<std::string, double>> aggregates;  // in insertion order
  std::optional<TTestResult> comparison;

  double aggregate(std::string_view key) const;
  bool operator==(const EvalReport&) const = default;
};

struct PerplexityOptions {
  StoreMode store_mode = StoreMode::kFrozen;
  bool use_entities = true;  // false feeds all-zero streams
  // 0 = non-overlapping windows. Otherwise windows start every `stride`
  // tokens and each token is scored once, in the first window that holds it
  // with the most left context.
  std::size_t stride = 0;
};

// PPL = exp(-(1/N) sum log p(u_i | u_<i)) over all scored tokens.
EvalReport eval_perplexity(const LanguageModel& model, const EntityStore& store, std::span<const TokenizedInstance> docs,
                           const PerplexityOptions& options = {});

// Summed log-prob of a document scored window by window, plus the token count.
std::pair<double, std::size_t> chunked_log_prob(const LanguageModel& model, std::span<const TokenId> tokens,
                                                std::span<const EntityId> entity_ids, const EntityStore* store);

// Correct iff greedy decoding of every target subtoken, each conditioned on
// the gold prefix, reproduces the target word exactly.
EvalReport eval_lambada(const LanguageModel& model, const EntityStore& store, std::span<const ClozeInstance> instances,
                        const BpeTokenizer& tokenizer, bool use_coref);

// `variants` holds the 10 conditioned documents of every question, in the
// order format_cbt emits them.
EvalReport eval_cbt(const LanguageModel& model, const EntityStore& store, std::span<const ClozeInstance> variants,
                    const BpeTokenizer& tokenizer, bool use_coref);

// Index of the largest value; ties go to the lowest index.
std::size_t argmax_first(std::span<const double> values);

// Two-sided paired t-test over the per-example scores of two reports with
// identical example IDs.
TTestResult paired_t_test(const EvalReport& a, const EvalReport& b);
// Two-sided p-value of Student's t with `dof` degrees of freedom.
double t_two_sided_p(double t, double dof);

// Per-category mean score of b minus that of a.
std::vector<std::pair<std::string, double>> category_deltas(const EvalReport& a, const EvalReport& b);

// report<TAB><task>
// <id><TAB><category><TAB><score><TAB><count>     one per example
// --
// <key><TAB><value>                                aggregates, then t-test
std::string serialize_report(const EvalReport& report);
EvalReport parse_report(std::string_view text);
void save_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport load_report(const std::filesystem::path& path);

}  // namespace corelm
