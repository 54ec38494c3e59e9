#include "corelm/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "corelm/error.hpp"

namespace corelm {
namespace {

constexpr std::string_view kEmptyMarker = "\xE2\x88\x85";  // U+2205

bool representable(std::string_view field) {
  return !field.empty() && field.find_first_of("\t\n\r") == std::string_view::npos;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) return out;
    start = tab + 1;
  }
}

std::string at_line(std::size_t line) { return "line " + std::to_string(line) + ": "; }

EntityId parse_entity_field(std::string_view field, std::size_t line) {
  if (field == "0" || field == kEmptyMarker) return 0;
  EntityId id = 0;
  const bool digits = !field.empty() && std::all_of(field.begin(), field.end(), [](char c) { return c >= '0' && c <= '9'; });
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), id);
  if (!digits || ec != std::errc() || ptr != field.data() + field.size()) {
    throw FormatError(at_line(line) + "entity field '" + std::string(field) + "' is not a non-negative integer");
  }
  return id;
}

struct Line {
  std::string_view text;
  std::size_t number;
};

AnnotatedDocument parse_record(std::span<const Line> lines) {
  const Line& head = lines[0];
  auto header = split_tabs(head.text);
  if (header.size() != 3 || header[0] != "doc") {
    throw FormatError(at_line(head.number) + "expected 'doc<TAB>id<TAB>source_type' header");
  }
  AnnotatedDocument doc;
  doc.doc_id = std::string(header[1]);
  doc.source_type = std::string(header[2]);
  if (doc.doc_id.empty()) throw FormatError(at_line(head.number) + "empty document id");
  if (lines.size() < 2) throw FormatError(at_line(head.number) + "document '" + doc.doc_id + "' has no words line");

  for (std::string_view w : split_tabs(lines[1].text)) {
    if (w.empty()) throw FormatError(at_line(lines[1].number) + "empty word field");
    doc.words.emplace_back(w);
  }
  for (std::size_t i = 2; i < lines.size(); ++i) {
    auto fields = split_tabs(lines[i].text);
    if (fields.size() != doc.words.size()) {
      throw FormatError(at_line(lines[i].number) + "entity layer has " + std::to_string(fields.size()) +
                        " fields but the words line has " + std::to_string(doc.words.size()));
    }
    std::vector<EntityId> layer;
    layer.reserve(fields.size());
    for (std::string_view f : fields) layer.push_back(parse_entity_field(f, lines[i].number));
    doc.entity_layers.push_back(std::move(layer));
  }
  if (doc.entity_layers.empty()) doc.entity_layers.emplace_back(doc.words.size(), 0);

  try {
    validate_document(doc);
  } catch (const FormatError& e) {
    throw FormatError(at_line(head.number) + e.what());
  }
  return doc;
}

void append_joined(std::string& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += '\t';
    out += fields[i];
  }
  out += '\n';
}

}  // namespace

std::vector<Mention> mention_spans(std::span<const EntityId> layer) {
  std::vector<Mention> spans;
  for (std::size_t i = 0; i < layer.size();) {
    if (layer[i] <= 0) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    while (j < layer.size() && layer[j] == layer[i]) ++j;
    spans.push_back({layer[i], i, j});
    i = j;
  }
  return spans;
}

void validate_document(const AnnotatedDocument& doc) {
  if (!representable(doc.doc_id)) throw FormatError("document id must be non-empty and free of tabs and newlines");
  if (doc.source_type.find_first_of("\t\n\r") != std::string::npos) {
    throw FormatError("source type of '" + doc.doc_id + "' contains a tab or newline");
  }
  if (doc.words.empty()) throw FormatError("document '" + doc.doc_id + "' has no words");
  for (const auto& w : doc.words) {
    if (!representable(w)) throw FormatError("document '" + doc.doc_id + "' has an empty word or one with a tab or newline");
  }
  if (doc.entity_layers.empty()) throw FormatError("document '" + doc.doc_id + "' has no entity layer");
  for (std::size_t l = 0; l < doc.entity_layers.size(); ++l) {
    const auto& layer = doc.entity_layers[l];
    if (layer.size() != doc.words.size()) {
      throw FormatError("document '" + doc.doc_id + "' layer " + std::to_string(l) + " has " +
                        std::to_string(layer.size()) + " ids for " + std::to_string(doc.words.size()) + " words");
    }
    for (EntityId id : layer) {
      if (id < 0) throw FormatError("document '" + doc.doc_id + "' has negative entity id " + std::to_string(id));
    }
    if (l == 0) continue;
    const auto outer = mention_spans(doc.entity_layers[l - 1]);
    for (const Mention& m : mention_spans(layer)) {
      const bool contained = std::any_of(outer.begin(), outer.end(), [&](const Mention& o) {
        return o.begin <= m.begin && m.end <= o.end;
      });
      if (!contained) {
        throw FormatError("document '" + doc.doc_id + "' layer " + std::to_string(l) + ": mention of " +
                          std::to_string(m.id) + " over words [" + std::to_string(m.begin) + ", " +
                          std::to_string(m.end) + ") is not inside a single mention of layer " +
                          std::to_string(l - 1));
      }
    }
  }
}

std::vector<AnnotatedDocument> parse_documents(std::string_view text) {
  std::vector<Line> lines;
  std::size_t start = 0, number = 1;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
    lines.push_back({text.substr(start, end - start), number++});
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }

  std::vector<AnnotatedDocument> docs;
  std::vector<Line> record;
  auto flush = [&] {
    if (!record.empty()) docs.push_back(parse_record(record));
    record.clear();
  };
  for (const Line& line : lines) {
    if (line.text.empty()) {
      flush();
    } else {
      record.push_back(line);
    }
  }
  flush();
  return docs;
}

AnnotatedDocument parse_dual_stream(std::string_view text) {
  auto docs = parse_documents(text);
  if (docs.size() != 1) {
    throw FormatError("expected exactly one document, found " + std::to_string(docs.size()));
  }
  return std::move(docs[0]);
}

std::string serialize_document(const AnnotatedDocument& doc) {
  validate_document(doc);
  std::string out = "doc\t" + doc.doc_id + "\t" + doc.source_type + "\n";
  append_joined(out, doc.words);
  for (const auto& layer : doc.entity_layers) {
    std::vector<std::string> fields;
    fields.reserve(layer.size());
    for (EntityId id : layer) fields.push_back(std::to_string(id));
    append_joined(out, fields);
  }
  return out;
}

std::string serialize_documents(std::span<const AnnotatedDocument> docs) {
  std::string out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i) out += '\n';
    out += serialize_document(docs[i]);
  }
  return out;
}

std::vector<AnnotatedDocument> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_documents(buf.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_corpus(const std::filesystem::path& path, std::span<const AnnotatedDocument> docs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus " + path.string());
  out << serialize_documents(docs);
}

std::vector<AnnotatedDocument> expand_layers(const AnnotatedDocument& doc) {
  validate_document(doc);
  std::vector<AnnotatedDocument> out;
  out.reserve(doc.entity_layers.size());
  for (std::size_t l = 0; l < doc.entity_layers.size(); ++l) {
    AnnotatedDocument inst{doc.doc_id, doc.source_type, doc.words, {doc.entity_layers[l]}};
    if (l > 0) inst.doc_id += "/L" + std::to_string(l);
    out.push_back(std::move(inst));
  }
  return out;
}

void make_entity_ids_unique(std::span<AnnotatedDocument> docs) {
  EntityId next = 1;
  for (auto& doc : docs) {
    if (doc.entity_layers.size() != 1) throw ValueError("make_entity_ids_unique expects single-layer documents");
    std::map<EntityId, EntityId> remap;
    for (EntityId& id : doc.entity_layers[0]) {
      if (id <= 0) continue;
      auto [it, fresh] = remap.try_emplace(id, next);
      if (fresh) ++next;
      id = it->second;
    }
  }
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::swap(perm[i - 1], perm[rng() % i]);
  }
  return perm;
}

HoldoutSplit split_holdout(std::span<const AnnotatedDocument> docs, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValueError("holdout fraction must lie in (0, 1)");
  std::map<std::string, std::vector<std::size_t>> by_type;
  for (std::size_t i = 0; i < docs.size(); ++i) by_type[docs[i].source_type].push_back(i);

  HoldoutSplit split;
  std::vector<bool> to_eval(docs.size(), false);
  std::uint64_t type_seed = seed;
  for (const auto& [type, members] : by_type) {
    const std::size_t n = members.size();
    if (n == 1) {
      split.warnings.push_back("source type '" + type + "' has a single document; kept in train");
      continue;
    }
    // The slack keeps e.g. 0.29 * 100 from flooring to 28.
    std::size_t take = static_cast<std::size_t>(fraction * static_cast<double>(n) + 1e-9);
    take = std::max<std::size_t>(take, 1);
    const auto perm = seeded_permutation(n, type_seed++);
    for (std::size_t i = 0; i < take; ++i) to_eval[members[perm[i]]] = true;
  }
  for (std::size_t i = 0; i < docs.size(); ++i) (to_eval[i] ? split.eval : split.train).push_back(docs[i]);
  return split;
}

}  // namespace corelm
