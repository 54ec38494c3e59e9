#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "corelm/types.hpp"

namespace corelm {

// Words plus one or more parallel entity layers. Layer l+1 annotates
// mentions nested inside mentions of layer l.
struct AnnotatedDocument {
  std::string doc_id;
  std::string source_type;
  std::vector<std::string> words;
  std::vector<std::vector<EntityId>> entity_layers;

  bool operator==(const AnnotatedDocument&) const = default;
};

// One maximal run of a positive ID within a layer.
struct Mention {
  EntityId id = 0;
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive

  bool operator==(const Mention&) const = default;
};

std::vector<Mention> mention_spans(std::span<const EntityId> layer);

// Throws FormatError when lengths disagree, a word is not representable in
// the text format, an ID is negative, or a nested mention is not contained
// in a single mention of the layer above.
void validate_document(const AnnotatedDocument& doc);

// Text format, one record per document, records separated by a blank line:
//
//   doc<TAB><doc_id><TAB><source_type>
//   <word><TAB><word>...
//   <id><TAB><id>...        one line per layer; 0 (or ∅) = no entity
//
// A record without entity lines gets a single all-zero layer.
AnnotatedDocument parse_dual_stream(std::string_view text);
std::vector<AnnotatedDocument> parse_documents(std::string_view text);
std::string serialize_document(const AnnotatedDocument& doc);
std::string serialize_documents(std::span<const AnnotatedDocument> docs);

std::vector<AnnotatedDocument> read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, std::span<const AnnotatedDocument> docs);

// One single-layer document per layer. Layer 0 keeps the doc_id, layer l > 0
// is suffixed "/L<l>".
std::vector<AnnotatedDocument> expand_layers(const AnnotatedDocument& doc);

// Rewrites the positive IDs of every (single-layer) document so that no two
// documents share an ID. IDs are assigned 1, 2, ... in order of first
// mention, document by document.
void make_entity_ids_unique(std::span<AnnotatedDocument> docs);

struct HoldoutSplit {
  std::vector<AnnotatedDocument> train;
  std::vector<AnnotatedDocument> eval;
  std::vector<std::string> warnings;
};

// Per source type, floor(fraction * n) documents (at least 1 when n >= 2)
// go to eval. Both outputs keep input order.
HoldoutSplit split_holdout(std::span<const AnnotatedDocument> docs, double fraction, std::uint64_t seed);

// Fisher-Yates over [0, n) driven by mt19937_64; identical on every platform.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

}  // namespace corelm
