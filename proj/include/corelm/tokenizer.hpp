#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "corelm/corpus.hpp"
#include "corelm/types.hpp"

namespace corelm {

// Byte-level BPE. Token ids 0..255 are the raw bytes; merge i creates id
// 256 + i. Text is split into pieces (an optional single leading space plus
// a run of non-space bytes) and merges never cross piece boundaries.
class BpeTokenizer {
 public:
  static constexpr std::size_t kByteAlphabet = 256;

  BpeTokenizer();

  // Greedy training: repeatedly merge the most frequent adjacent pair
  // (overlapping occurrences counted), ties to the lexicographically smaller
  // (left bytes, right bytes). Stops at vocab_size or when no pair occurs at
  // least min_pair_count times.
  static BpeTokenizer train(std::span<const std::string> corpus, std::size_t vocab_size,
                            std::size_t min_pair_count = 2);

  std::size_t vocab_size() const { return kByteAlphabet + merges_.size(); }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;
  const std::string& token_bytes(TokenId id) const;

  // Plain text: a "corelm-bpe <n>" header, then one "<left> <right>" id pair
  // per merge in rank order.
  std::string to_text() const;
  static BpeTokenizer from_text(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static BpeTokenizer load(const std::filesystem::path& path);

 private:
  void add_merge(TokenId left, TokenId right);

  std::vector<std::pair<TokenId, TokenId>> merges_;
  std::map<std::pair<TokenId, TokenId>, std::size_t> rank_;
  std::vector<std::string> bytes_;  // surface bytes per token id
};

// Splits text into BPE pieces; concatenating the result gives the input back.
std::vector<std::string_view> split_pieces(std::string_view text);

// Token stream plus word-level bookkeeping for one single-layer document.
struct TokenizedInstance {
  std::string id;
  std::vector<TokenId> token_ids;
  std::vector<EntityId> entity_ids;        // per token, inherited from its word
  std::vector<WordSpan> word_boundaries;  // token range of each word
};

// Word i is encoded as (i ? " " : "") + word, and every resulting token
// carries the word's entity ID.
TokenizedInstance tokenize_align(const AnnotatedDocument& doc, const BpeTokenizer& tokenizer);

}  // namespace corelm
