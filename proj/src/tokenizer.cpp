#include "corelm/tokenizer.hpp"

#include <charconv>
#include <fstream>
#include <limits>
#include <sstream>

#include "corelm/error.hpp"

namespace corelm {
namespace {

using Pair = std::pair<TokenId, TokenId>;

// Replaces every left-to-right non-overlapping occurrence of `pair`.
void apply_merge(std::vector<TokenId>& symbols, const Pair& pair, TokenId merged) {
  std::size_t out = 0;
  for (std::size_t i = 0; i < symbols.size(); ++out) {
    if (i + 1 < symbols.size() && symbols[i] == pair.first && symbols[i + 1] == pair.second) {
      symbols[out] = merged;
      i += 2;
    } else {
      symbols[out] = symbols[i];
      ++i;
    }
  }
  symbols.resize(out);
}

std::vector<TokenId> byte_symbols(std::string_view piece) {
  std::vector<TokenId> out;
  out.reserve(piece.size());
  for (unsigned char c : piece) out.push_back(static_cast<TokenId>(c));
  return out;
}

}  // namespace

std::vector<std::string_view> split_pieces(std::string_view text) {
  std::vector<std::string_view> pieces;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = i;
    if (text[j] == ' ') ++j;
    while (j < text.size() && text[j] != ' ') ++j;
    pieces.push_back(text.substr(i, j - i));
    i = j;
  }
  return pieces;
}

BpeTokenizer::BpeTokenizer() {
  bytes_.reserve(kByteAlphabet);
  for (std::size_t b = 0; b < kByteAlphabet; ++b) bytes_.emplace_back(1, static_cast<char>(b));
}

void BpeTokenizer::add_merge(TokenId left, TokenId right) {
  const auto n = static_cast<TokenId>(vocab_size());
  if (left < 0 || right < 0 || left >= n || right >= n) {
    throw FormatError("merge (" + std::to_string(left) + ", " + std::to_string(right) +
                      ") refers to a token that does not exist yet");
  }
  if (!rank_.try_emplace({left, right}, merges_.size()).second) {
    throw FormatError("duplicate merge (" + std::to_string(left) + ", " + std::to_string(right) + ")");
  }
  merges_.emplace_back(left, right);
  bytes_.push_back(bytes_[static_cast<std::size_t>(left)] + bytes_[static_cast<std::size_t>(right)]);
}

BpeTokenizer BpeTokenizer::train(std::span<const std::string> corpus, std::size_t vocab_size,
                                 std::size_t min_pair_count) {
  if (vocab_size < kByteAlphabet) {
    throw ValueError("vocabulary size " + std::to_string(vocab_size) + " is below the byte alphabet");
  }
  std::map<std::string_view, std::size_t> piece_counts;
  for (const auto& text : corpus)
    for (auto piece : split_pieces(text)) ++piece_counts[piece];

  std::vector<std::pair<std::vector<TokenId>, std::size_t>> words;
  words.reserve(piece_counts.size());
  for (const auto& [piece, count] : piece_counts) words.emplace_back(byte_symbols(piece), count);

  BpeTokenizer tok;
  while (tok.vocab_size() < vocab_size) {
    std::map<Pair, std::size_t> counts;
    for (const auto& [symbols, count] : words)
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) counts[{symbols[i], symbols[i + 1]}] += count;

    const Pair* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, count] : counts) {
      if (count < best_count) continue;
      if (count == best_count && best) {
        const auto& l = tok.token_bytes(pair.first);
        const auto& bl = tok.token_bytes(best->first);
        if (l > bl || (l == bl && tok.token_bytes(pair.second) >= tok.token_bytes(best->second))) continue;
      }
      best = &pair;
      best_count = count;
    }
    if (!best || best_count < std::max<std::size_t>(min_pair_count, 1)) break;

    const Pair chosen = *best;
    tok.add_merge(chosen.first, chosen.second);
    const auto merged = static_cast<TokenId>(tok.vocab_size() - 1);
    for (auto& [symbols, count] : words) apply_merge(symbols, chosen, merged);
  }
  return tok;
}

std::vector<TokenId> BpeTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (auto piece : split_pieces(text)) {
    std::vector<TokenId> symbols = byte_symbols(piece);
    while (symbols.size() > 1) {
      std::size_t best_rank = std::numeric_limits<std::size_t>::max();
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = rank_.find({symbols[i], symbols[i + 1]});
        if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
      }
      if (best_rank == std::numeric_limits<std::size_t>::max()) break;
      apply_merge(symbols, merges_[best_rank], static_cast<TokenId>(kByteAlphabet + best_rank));
    }
    out.insert(out.end(), symbols.begin(), symbols.end());
  }
  return out;
}

const std::string& BpeTokenizer::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= bytes_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size()));
  }
  return bytes_[static_cast<std::size_t>(id)];
}

std::string BpeTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_bytes(id);
  return out;
}

std::string BpeTokenizer::to_text() const {
  std::string out = "corelm-bpe " + std::to_string(merges_.size()) + "\n";
  for (const auto& [l, r] : merges_) out += std::to_string(l) + " " + std::to_string(r) + "\n";
  return out;
}

BpeTokenizer BpeTokenizer::from_text(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string magic;
  std::size_t count = 0;
  if (!(in >> magic >> count) || magic != "corelm-bpe") throw FormatError("tokenizer file lacks the 'corelm-bpe <n>' header");
  BpeTokenizer tok;
  for (std::size_t i = 0; i < count; ++i) {
    TokenId l = 0, r = 0;
    if (!(in >> l >> r)) throw FormatError("tokenizer file ends after " + std::to_string(i) + " of " + std::to_string(count) + " merges");
    tok.add_merge(l, r);
  }
  std::string extra;
  if (in >> extra) throw FormatError("trailing content in tokenizer file");
  return tok;
}

void BpeTokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write tokenizer " + path.string());
  out << to_text();
}

BpeTokenizer BpeTokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tokenizer " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

TokenizedInstance tokenize_align(const AnnotatedDocument& doc, const BpeTokenizer& tokenizer) {
  if (doc.entity_layers.size() != 1) {
    throw ValueError("tokenize_align expects a single-layer document; '" + doc.doc_id + "' has " +
                     std::to_string(doc.entity_layers.size()) + " layers");
  }
  const auto& layer = doc.entity_layers[0];
  if (layer.size() != doc.words.size()) throw AlignmentError("entity layer and words of '" + doc.doc_id + "' differ in length");
  TokenizedInstance inst;
  inst.id = doc.doc_id;
  for (std::size_t w = 0; w < doc.words.size(); ++w) {
    const auto ids = tokenizer.encode(w ? " " + doc.words[w] : doc.words[w]);
    const std::size_t begin = inst.token_ids.size();
    inst.token_ids.insert(inst.token_ids.end(), ids.begin(), ids.end());
    inst.entity_ids.insert(inst.entity_ids.end(), ids.size(), layer[w]);
    inst.word_boundaries.push_back({begin, inst.token_ids.size()});
  }
  return inst;
}

}  // namespace corelm
