#include "corelm/cloze.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "corelm/corpus.hpp"
#include "corelm/error.hpp"

namespace corelm {
namespace {

constexpr std::size_t kCbtCandidates = 10;

bool valid_category(std::string_view c) { return c == "CN" || c == "NE" || c == "V" || c == "P"; }

std::vector<std::string> split_fields(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) return out;
    start = tab + 1;
  }
}

std::string at_line(std::size_t line) { return "line " + std::to_string(line) + ": "; }

std::size_t parse_index(const std::string& field, std::size_t line) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (field.empty() || ec != std::errc() || ptr != field.data() + field.size()) {
    throw FormatError(at_line(line) + "'" + field + "' is not an index");
  }
  return v;
}

std::vector<EntityId> parse_ids(std::span<const std::string> fields, std::size_t line) {
  std::vector<EntityId> ids;
  for (const auto& f : fields) {
    if (f == "\xE2\x88\x85") {
      ids.push_back(0);
      continue;
    }
    EntityId v = 0;
    auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
    if (f.empty() || ec != std::errc() || ptr != f.data() + f.size() || v < 0) {
      throw FormatError(at_line(line) + "entity field '" + f + "' is not a non-negative integer");
    }
    ids.push_back(v);
  }
  return ids;
}

void append(std::string& out, std::string_view tag, std::span<const std::string> fields) {
  out += tag;
  for (const auto& f : fields) {
    out += '\t';
    out += f;
  }
  out += '\n';
}

std::vector<std::string> id_fields(std::span<const EntityId> ids) {
  std::vector<std::string> out;
  for (EntityId id : ids) out.push_back(std::to_string(id));
  return out;
}

struct Line {
  std::vector<std::string> fields;
  std::size_t number;
};

void validate_cbt(const CbtQuestion& q) {
  if (!valid_category(q.category)) throw FormatError("question '" + q.id + "' has category '" + q.category + "', expected CN, NE, V or P");
  if (q.candidates.size() != kCbtCandidates) {
    throw FormatError("question '" + q.id + "' has " + std::to_string(q.candidates.size()) + " candidates, expected 10");
  }
  if (q.answer_index >= q.candidates.size()) throw FormatError("question '" + q.id + "' answer index out of range");
  if (std::count(q.question.begin(), q.question.end(), kBlankMarker) != 1) {
    throw FormatError("question '" + q.id + "' must contain exactly one " + std::string(kBlankMarker));
  }
  for (const auto& c : q.candidates) {
    if (c.empty() || c.find_first_of(" \t\n\r") != std::string::npos) {
      throw FormatError("question '" + q.id + "' has a candidate that is not a single word");
    }
  }
  const std::size_t len = q.passage.size() + q.question.size();
  if (!q.entities.empty()) {
    if (q.entities.size() != kCbtCandidates) {
      throw FormatError("question '" + q.id + "' needs one entity stream per candidate, got " + std::to_string(q.entities.size()));
    }
    for (const auto& e : q.entities) {
      if (e.size() != len) throw FormatError("question '" + q.id + "' entity stream length differs from the document");
    }
  }
}

LambadaEntry parse_lambada(std::span<const Line> rec) {
  if (rec[0].fields.size() != 2) throw FormatError(at_line(rec[0].number) + "expected 'lambada<TAB>id'");
  LambadaEntry e{rec[0].fields[1], {}, {}};
  for (std::size_t i = 1; i < rec.size(); ++i) {
    const auto& f = rec[i].fields;
    std::span<const std::string> rest(f.begin() + 1, f.end());
    if (f[0] == "words" && e.words.empty()) {
      e.words.assign(rest.begin(), rest.end());
    } else if (f[0] == "ents" && e.entities.empty()) {
      e.entities = parse_ids(rest, rec[i].number);
    } else {
      throw FormatError(at_line(rec[i].number) + "unexpected '" + f[0] + "' line in lambada record");
    }
  }
  if (!e.entities.empty() && e.entities.size() != e.words.size()) {
    throw FormatError(at_line(rec[0].number) + "entity stream length differs from the words line");
  }
  format_lambada(e);
  return e;
}

CbtQuestion parse_cbt(std::span<const Line> rec) {
  const auto& h = rec[0].fields;
  if (h.size() != 4) throw FormatError(at_line(rec[0].number) + "expected 'cbt<TAB>id<TAB>category<TAB>answer'");
  CbtQuestion q;
  q.id = h[1];
  q.category = h[2];
  q.answer_index = parse_index(h[3], rec[0].number);
  for (std::size_t i = 1; i < rec.size(); ++i) {
    const auto& f = rec[i].fields;
    std::span<const std::string> rest(f.begin() + 1, f.end());
    if (f[0] == "passage" && q.passage.empty()) {
      q.passage.assign(rest.begin(), rest.end());
    } else if (f[0] == "question" && q.question.empty()) {
      q.question.assign(rest.begin(), rest.end());
    } else if (f[0] == "cands" && q.candidates.empty()) {
      q.candidates.assign(rest.begin(), rest.end());
    } else if (f[0] == "ents") {
      q.entities.push_back(parse_ids(rest, rec[i].number));
    } else {
      throw FormatError(at_line(rec[i].number) + "unexpected '" + f[0] + "' line in cbt record");
    }
  }
  try {
    validate_cbt(q);
  } catch (const FormatError& e) {
    throw FormatError(at_line(rec[0].number) + e.what());
  }
  return q;
}

}  // namespace

ClozeInstance format_lambada(const LambadaEntry& entry) {
  if (entry.words.size() < 2) throw FormatError("entry '" + entry.id + "' needs at least two words");
  if (!entry.entities.empty() && entry.entities.size() != entry.words.size()) {
    throw FormatError("entry '" + entry.id + "' entity stream length differs from its words");
  }
  ClozeInstance inst;
  inst.id = entry.id;
  inst.category = std::string(kLastWordCategory);
  inst.words = entry.words;
  inst.entity_ids = entry.entities.empty() ? std::vector<EntityId>(entry.words.size(), 0) : entry.entities;
  inst.candidates = {entry.words.back()};
  inst.target_word = entry.words.size() - 1;
  return inst;
}

std::vector<ClozeInstance> format_cbt(const CbtQuestion& q) {
  validate_cbt(q);
  const std::size_t blank =
      q.passage.size() + static_cast<std::size_t>(std::find(q.question.begin(), q.question.end(), kBlankMarker) -
                                                  q.question.begin());
  std::vector<std::string> doc = q.passage;
  doc.insert(doc.end(), q.question.begin(), q.question.end());

  std::vector<ClozeInstance> out;
  for (std::size_t c = 0; c < q.candidates.size(); ++c) {
    ClozeInstance inst;
    inst.id = q.id;
    inst.category = q.category;
    inst.words = doc;
    inst.words[blank] = q.candidates[c];
    inst.entity_ids = q.entities.empty() ? std::vector<EntityId>(doc.size(), 0) : q.entities[c];
    inst.candidates = q.candidates;
    inst.answer_index = q.answer_index;
    inst.variant = c;
    inst.target_word = blank;
    out.push_back(std::move(inst));
  }
  return out;
}

ClozeSet parse_cloze(std::string_view text) {
  ClozeSet set;
  std::vector<Line> record;
  auto flush = [&] {
    if (record.empty()) return;
    const std::string& kind = record[0].fields[0];
    if (kind == "lambada") {
      set.lambada.push_back(parse_lambada(record));
    } else if (kind == "cbt") {
      set.cbt.push_back(parse_cbt(record));
    } else {
      throw FormatError(at_line(record[0].number) + "unknown record kind '" + kind + "'");
    }
    record.clear();
  };
  std::size_t start = 0, number = 1;
  while (start <= text.size()) {
    const std::size_t nl = text.find('\n', start);
    const std::string_view line = text.substr(start, (nl == std::string_view::npos ? text.size() : nl) - start);
    if (line.empty()) {
      flush();
    } else {
      record.push_back({split_fields(line), number});
    }
    if (nl == std::string_view::npos) break;
    start = nl + 1;
    ++number;
  }
  flush();
  return set;
}

std::string serialize_cloze(const ClozeSet& set) {
  std::string out;
  auto sep = [&] {
    if (!out.empty()) out += '\n';
  };
  for (const auto& e : set.lambada) {
    format_lambada(e);
    sep();
    out += "lambada\t" + e.id + "\n";
    append(out, "words", e.words);
    if (!e.entities.empty()) append(out, "ents", id_fields(e.entities));
  }
  for (const auto& q : set.cbt) {
    validate_cbt(q);
    sep();
    out += "cbt\t" + q.id + "\t" + q.category + "\t" + std::to_string(q.answer_index) + "\n";
    append(out, "passage", q.passage);
    append(out, "question", q.question);
    append(out, "cands", q.candidates);
    for (const auto& e : q.entities) append(out, "ents", id_fields(e));
  }
  return out;
}

ClozeSet read_cloze(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open cloze file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_cloze(buf.str());
}

void write_cloze(const std::filesystem::path& path, const ClozeSet& set) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write cloze file " + path.string());
  out << serialize_cloze(set);
}

TokenizedInstance tokenize_cloze(const ClozeInstance& instance, const BpeTokenizer& tokenizer) {
  AnnotatedDocument doc{instance.id, instance.category, instance.words, {instance.entity_ids}};
  return tokenize_align(doc, tokenizer);
}

}  // namespace corelm
