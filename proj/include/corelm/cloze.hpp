#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "corelm/tokenizer.hpp"
#include "corelm/types.hpp"

namespace corelm {

inline constexpr std::string_view kLastWordCategory = "last-word";
inline constexpr std::string_view kBlankMarker = "XXXXX";

// Raw last-word prediction entry.
struct LambadaEntry {
  std::string id;
  std::vector<std::string> words;
  std::vector<EntityId> entities;  // empty = unannotated

  bool operator==(const LambadaEntry&) const = default;
};

// Raw CBT question: the question holds exactly one blank marker.
struct CbtQuestion {
  std::string id;
  std::string category;  // CN, NE, V or P
  std::vector<std::string> passage;
  std::vector<std::string> question;
  std::vector<std::string> candidates;  // exactly 10
  std::size_t answer_index = 0;
  // Empty, or one stream per candidate over passage + filled question.
  std::vector<std::vector<EntityId>> entities;

  bool operator==(const CbtQuestion&) const = default;
};

// A fully instantiated document to score. For last-word entries the target
// is the final word; for CBT it is the filled blank.
struct ClozeInstance {
  std::string id;
  std::string category;
  std::vector<std::string> words;
  std::vector<EntityId> entity_ids;  // one per word
  std::vector<std::string> candidates;
  std::size_t answer_index = 0;
  std::size_t variant = 0;      // candidate this document is conditioned on
  std::size_t target_word = 0;  // index into words

  std::size_t context_words() const { return target_word; }
};

ClozeInstance format_lambada(const LambadaEntry& entry);
std::vector<ClozeInstance> format_cbt(const CbtQuestion& question);

// Record-oriented text, records separated by blank lines:
//
//   lambada<TAB><id>                cbt<TAB><id><TAB><category><TAB><answer>
//   words<TAB>...                   passage<TAB>...
//   [ents<TAB>...]                  question<TAB>...
//                                   cands<TAB>c0<TAB>...<TAB>c9
//                                   [ents<TAB>...]  x10, one per candidate
struct ClozeSet {
  std::vector<LambadaEntry> lambada;
  std::vector<CbtQuestion> cbt;
};

ClozeSet parse_cloze(std::string_view text);
std::string serialize_cloze(const ClozeSet& set);
ClozeSet read_cloze(const std::filesystem::path& path);
void write_cloze(const std::filesystem::path& path, const ClozeSet& set);

TokenizedInstance tokenize_cloze(const ClozeInstance& instance, const BpeTokenizer& tokenizer);

}  // namespace corelm
