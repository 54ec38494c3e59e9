#include "corelm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <boost/math/special_functions/beta.hpp>

#include "corelm/error.hpp"

namespace corelm {
namespace {

// Window over [begin, begin + length); positions before `fresh` were already
// covered by an earlier window of the same document.
struct ScoringWindow {
  std::size_t begin = 0;
  std::size_t length = 0;
  std::size_t fresh = 0;
};

std::vector<ScoringWindow> scoring_windows(std::size_t n, std::size_t k, bool has_bos, std::size_t stride) {
  const std::size_t span = has_bos ? k - 1 : k;
  if (stride == 0 || stride >= span) {
    std::vector<ScoringWindow> out;
    for (std::size_t b = 0; b < n; b += span) out.push_back({b, std::min(span, n - b), b});
    return out;
  }
  std::vector<ScoringWindow> out;
  std::size_t covered = 0;
  for (std::size_t b = 0; covered < n; b += stride) {
    const std::size_t end = std::min(n, b + span);
    out.push_back({b, end - b, covered});
    covered = end;
  }
  return out;
}

struct Sequence {
  std::vector<TokenId> tokens;
  std::vector<EntityId> entities;
  std::size_t offset = 0;  // index of the first real token within `tokens`
};

Sequence with_bos(std::span<const TokenId> tokens, std::span<const EntityId> ids, std::optional<TokenId> bos) {
  Sequence s;
  if (bos) {
    s.tokens.push_back(*bos);
    s.entities.push_back(0);
    s.offset = 1;
  }
  s.tokens.insert(s.tokens.end(), tokens.begin(), tokens.end());
  s.entities.insert(s.entities.end(), ids.begin(), ids.end());
  return s;
}

bool any_entity(std::span<const EntityId> ids) {
  return std::any_of(ids.begin(), ids.end(), [](EntityId id) { return id > 0; });
}

void online_update(const LanguageModel& model, EntityStore& store, std::span<const TokenId> tokens,
                   std::span<const EntityId> ids) {
  if (!any_entity(ids)) return;
  update_entity_representations(store, ids, model.entity_hidden(tokens));
}

EntityStore empty_like(const EntityStore& store) { return EntityStore(store.dim(), store.momentum(), store.scope()); }

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw FormatError("report line " + std::to_string(line) + ": '" + s + "' is not a number");
  }
  return v;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, '\t')) out.push_back(field);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

void add_accuracy(EvalReport& report, const std::vector<std::string>& category_order) {
  double total = 0.0;
  for (const auto& e : report.examples) total += e.score;
  report.aggregates.emplace_back("accuracy", report.examples.empty() ? 0.0 : total / static_cast<double>(report.examples.size()));
  for (const auto& c : category_order) {
    double hit = 0.0, n = 0.0;
    for (const auto& e : report.examples) {
      if (e.category != c) continue;
      hit += e.score;
      n += 1.0;
    }
    if (n > 0) report.aggregates.emplace_back("accuracy." + c, hit / n);
  }
  report.aggregates.emplace_back("examples", static_cast<double>(report.examples.size()));
}

}  // namespace

StoreMode parse_store_mode(std::string_view name) {
  if (name == "frozen") return StoreMode::kFrozen;
  if (name == "online") return StoreMode::kOnline;
  if (name == "reset") return StoreMode::kReset;
  throw ConfigError("unknown store mode '" + std::string(name) + "' (expected frozen, online or reset)");
}

const char* store_mode_name(StoreMode mode) {
  switch (mode) {
    case StoreMode::kFrozen: return "frozen";
    case StoreMode::kOnline: return "online";
    case StoreMode::kReset: return "reset";
  }
  return "?";
}

double EvalReport::aggregate(std::string_view key) const {
  for (const auto& [k, v] : aggregates)
    if (k == key) return v;
  throw ValueError("report has no aggregate '" + std::string(key) + "'");
}

EvalReport eval_perplexity(const LanguageModel& model, const EntityStore& store, std::span<const TokenizedInstance> docs,
                           const PerplexityOptions& options) {
  const auto bos = model.bos_token();
  const std::size_t k = model.context_window();
  EvalReport report;
  report.task = "ppl";
  EntityStore carried = store;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& doc : docs) {
    if (doc.token_ids.size() != doc.entity_ids.size()) throw AlignmentError("document '" + doc.id + "' streams differ in length");
    EntityStore local = options.store_mode == StoreMode::kReset ? empty_like(store) : EntityStore(carried);
    const std::vector<EntityId> zeros(doc.token_ids.size(), 0);
    std::span<const EntityId> ids = options.use_entities ? std::span<const EntityId>(doc.entity_ids) : zeros;

    double doc_lp = 0.0;
    std::size_t doc_n = 0;
    for (const auto& w : scoring_windows(doc.token_ids.size(), k, bos.has_value(), options.stride)) {
      auto toks = std::span<const TokenId>(doc.token_ids).subspan(w.begin, w.length);
      auto wids = ids.subspan(w.begin, w.length);
      Sequence seq = with_bos(toks, wids, bos);
      // Position i of the window is scored from row offset + i - 1.
      const std::size_t first = std::max(w.fresh - w.begin, bos ? std::size_t{0} : std::size_t{1});
      if (first < w.length) {
        Tensor lp = model.next_token_log_probs(seq.tokens, seq.entities, &local);
        const std::size_t vocab = lp.cols();
        for (std::size_t i = first; i < w.length; ++i) {
          doc_lp += lp.data()[(seq.offset + i - 1) * vocab + static_cast<std::size_t>(toks[i])];
          ++doc_n;
        }
      }
      if (options.store_mode != StoreMode::kFrozen) {
        const std::size_t from = w.fresh - w.begin;
        online_update(model, local, toks.subspan(from), wids.subspan(from));
      }
    }
    if (options.store_mode == StoreMode::kOnline) carried = local;
    report.examples.push_back({doc.id, "ppl", doc_lp, doc_n});
    total += doc_lp;
    count += doc_n;
  }
  if (count == 0) throw ValueError("eval_perplexity: no scoreable tokens");
  report.aggregates.emplace_back("ppl", std::exp(-total / static_cast<double>(count)));
  report.aggregates.emplace_back("nll", -total / static_cast<double>(count));
  report.aggregates.emplace_back("tokens", static_cast<double>(count));
  return report;
}

std::pair<double, std::size_t> chunked_log_prob(const LanguageModel& model, std::span<const TokenId> tokens,
                                                std::span<const EntityId> entity_ids, const EntityStore* store) {
  if (entity_ids.size() != tokens.size()) throw AlignmentError("chunked_log_prob: stream lengths differ");
  const auto bos = model.bos_token();
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& w : scoring_windows(tokens.size(), model.context_window(), bos.has_value(), 0)) {
    auto toks = tokens.subspan(w.begin, w.length);
    Sequence seq = with_bos(toks, entity_ids.subspan(w.begin, w.length), bos);
    if (seq.tokens.size() < 2) continue;
    Tensor lp = model.next_token_log_probs(seq.tokens, seq.entities, store);
    const std::size_t vocab = lp.cols();
    for (std::size_t i = 1; i < seq.tokens.size(); ++i) {
      total += lp.data()[(i - 1) * vocab + static_cast<std::size_t>(seq.tokens[i])];
      ++n;
    }
  }
  return {total, n};
}

std::size_t argmax_first(std::span<const double> values) {
  if (values.empty()) throw ValueError("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

EvalReport eval_lambada(const LanguageModel& model, const EntityStore& store, std::span<const ClozeInstance> instances,
                        const BpeTokenizer& tokenizer, bool use_coref) {
  const auto bos = model.bos_token();
  const std::size_t span = bos ? model.context_window() - 1 : model.context_window();
  EvalReport report;
  report.task = "lambada";
  for (const auto& inst : instances) {
    const TokenizedInstance tok = tokenize_cloze(inst, tokenizer);
    const WordSpan target = tok.word_boundaries.at(inst.target_word);
    EntityStore local = use_coref ? empty_like(store) : store;
    std::vector<EntityId> ids(tok.token_ids.size(), 0);
    if (use_coref) {
      init_entities_from_context(local, model, tok.token_ids, tok.entity_ids, tok.word_boundaries, true);
      std::copy(tok.entity_ids.begin(), tok.entity_ids.begin() + static_cast<std::ptrdiff_t>(target.begin), ids.begin());
    }
    std::vector<TokenId> prefix(tok.token_ids.begin(), tok.token_ids.begin() + static_cast<std::ptrdiff_t>(target.begin));
    std::vector<EntityId> prefix_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(target.begin));

    bool correct = !prefix.empty() || bos.has_value();
    for (std::size_t j = target.begin; correct && j < target.end; ++j) {
      const std::size_t keep = std::min(span, prefix.size());
      Sequence seq = with_bos(std::span<const TokenId>(prefix).last(keep), std::span<const EntityId>(prefix_ids).last(keep), bos);
      Tensor lp = model.next_token_log_probs(seq.tokens, seq.entities, &local);
      const std::size_t vocab = lp.cols();
      const auto last = lp.data().subspan((seq.tokens.size() - 1) * vocab, vocab);
      if (static_cast<TokenId>(argmax_first(last)) != tok.token_ids[j]) correct = false;
      prefix.push_back(tok.token_ids[j]);
      // Target positions never carry an entity ID: their annotation would
      // reveal the answer.
      prefix_ids.push_back(0);
    }
    report.examples.push_back({inst.id, inst.category, correct ? 1.0 : 0.0, 1});
  }
  add_accuracy(report, {std::string(kLastWordCategory)});
  return report;
}

EvalReport eval_cbt(const LanguageModel& model, const EntityStore& store, std::span<const ClozeInstance> variants,
                    const BpeTokenizer& tokenizer, bool use_coref) {
  EvalReport report;
  report.task = "cbt";
  std::size_t i = 0;
  while (i < variants.size()) {
    const ClozeInstance& head = variants[i];
    if (head.category.empty()) throw ValueError("question '" + head.id + "' has no category label");
    if (head.category != "CN" && head.category != "NE" && head.category != "V" && head.category != "P") {
      throw ValueError("question '" + head.id + "' has unknown category '" + head.category + "'");
    }
    const std::size_t n = head.candidates.size();
    if (n == 0 || i + n > variants.size()) throw ValueError("question '" + head.id + "' is missing candidate variants");
    std::vector<double> scores(n);
    for (std::size_t c = 0; c < n; ++c) {
      const ClozeInstance& v = variants[i + c];
      if (v.id != head.id || v.variant != c) {
        throw ValueError("variants of question '" + head.id + "' are not contiguous and in candidate order");
      }
      const TokenizedInstance tok = tokenize_cloze(v, tokenizer);
      EntityStore local = use_coref ? empty_like(store) : store;
      std::vector<EntityId> ids(tok.token_ids.size(), 0);
      if (use_coref) {
        init_entities_from_context(local, model, tok.token_ids, tok.entity_ids, tok.word_boundaries, false);
        ids = tok.entity_ids;
      }
      scores[c] = chunked_log_prob(model, tok.token_ids, ids, &local).first;
    }
    const std::size_t predicted = argmax_first(scores);
    report.examples.push_back({head.id, head.category, predicted == head.answer_index ? 1.0 : 0.0, 1});
    i += n;
  }
  add_accuracy(report, {"CN", "NE", "V", "P"});
  return report;
}

double t_two_sided_p(double t, double dof) {
  if (!(dof > 0)) throw ValueError("t distribution needs positive degrees of freedom");
  if (std::isinf(t)) return 0.0;
  return boost::math::ibeta(dof / 2.0, 0.5, dof / (dof + t * t));
}

TTestResult paired_t_test(const EvalReport& a, const EvalReport& b) {
  std::map<std::string, double> score_b;
  for (const auto& e : b.examples) {
    if (!score_b.emplace(e.id, e.score).second) throw ValueError("report b repeats example '" + e.id + "'");
  }
  if (a.examples.size() != b.examples.size()) throw ValueError("reports cover different numbers of examples");
  std::vector<double> d;
  std::set<std::string> seen;
  for (const auto& e : a.examples) {
    if (!seen.insert(e.id).second) throw ValueError("report a repeats example '" + e.id + "'");
    auto it = score_b.find(e.id);
    if (it == score_b.end()) throw ValueError("example '" + e.id + "' is missing from report b");
    d.push_back(e.score - it->second);
  }
  if (d.empty()) throw ValueError("paired t-test over zero examples");

  TTestResult r;
  r.n = d.size();
  double sum = 0.0;
  for (double x : d) sum += x;
  r.mean_difference = sum / static_cast<double>(r.n);
  if (std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; })) return r;  // t = 0, p = 1
  if (r.n < 2 || std::all_of(d.begin(), d.end(), [&](double x) { return x == d[0]; })) {
    r.degenerate_variance = true;
    r.t = std::copysign(std::numeric_limits<double>::infinity(), r.mean_difference);
    r.p = 0.0;
    return r;
  }
  double ss = 0.0;
  for (double x : d) ss += (x - r.mean_difference) * (x - r.mean_difference);
  const double sd = std::sqrt(ss / static_cast<double>(r.n - 1));
  r.t = r.mean_difference / (sd / std::sqrt(static_cast<double>(r.n)));
  r.p = t_two_sided_p(r.t, static_cast<double>(r.n - 1));
  return r;
}

std::vector<std::pair<std::string, double>> category_deltas(const EvalReport& a, const EvalReport& b) {
  auto means = [](const EvalReport& r) {
    std::map<std::string, std::pair<double, double>> acc;
    for (const auto& e : r.examples) {
      acc[e.category].first += e.score;
      acc[e.category].second += 1.0;
    }
    return acc;
  };
  const auto ma = means(a), mb = means(b);
  std::set<std::string> cats;
  for (const auto& [c, _] : ma) cats.insert(c);
  for (const auto& [c, _] : mb) cats.insert(c);
  std::vector<std::pair<std::string, double>> out;
  for (const auto& c : cats) {
    auto mean_of = [&](const auto& m) {
      auto it = m.find(c);
      return it == m.end() ? 0.0 : it->second.first / it->second.second;
    };
    out.emplace_back(c, mean_of(mb) - mean_of(ma));
  }
  return out;
}

std::string serialize_report(const EvalReport& report) {
  std::string out = "report\t" + report.task + "\n";
  for (const auto& e : report.examples) {
    out += e.id + "\t" + e.category + "\t" + format_double(e.score) + "\t" + std::to_string(e.count) + "\n";
  }
  out += "--\n";
  for (const auto& [k, v] : report.aggregates) out += k + "\t" + format_double(v) + "\n";
  if (report.comparison) {
    const auto& c = *report.comparison;
    out += "t_test.t\t" + format_double(c.t) + "\n";
    out += "t_test.p\t" + format_double(c.p) + "\n";
    out += "t_test.n\t" + std::to_string(c.n) + "\n";
    out += "t_test.mean_difference\t" + format_double(c.mean_difference) + "\n";
    out += std::string("t_test.degenerate\t") + (c.degenerate_variance ? "1" : "0") + "\n";
  }
  return out;
}

EvalReport parse_report(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 1;
  if (!std::getline(in, line) || line.rfind("report\t", 0) != 0) throw FormatError("report line 1: missing 'report<TAB>task' header");
  EvalReport r;
  r.task = line.substr(7);
  bool footer = false;
  TTestResult t;
  bool has_t = false;
  while (std::getline(in, line)) {
    ++number;
    if (line == "--") {
      footer = true;
      continue;
    }
    auto f = split_tabs(line);
    if (!footer) {
      if (f.size() != 4) throw FormatError("report line " + std::to_string(number) + ": expected 4 fields");
      r.examples.push_back({f[0], f[1], parse_double(f[2], number),
                            static_cast<std::size_t>(parse_double(f[3], number))});
      continue;
    }
    if (f.size() != 2) throw FormatError("report line " + std::to_string(number) + ": expected key and value");
    if (f[0].rfind("t_test.", 0) == 0) {
      has_t = true;
      const double v = parse_double(f[1], number);
      if (f[0] == "t_test.t") t.t = v;
      else if (f[0] == "t_test.p") t.p = v;
      else if (f[0] == "t_test.n") t.n = static_cast<std::size_t>(v);
      else if (f[0] == "t_test.mean_difference") t.mean_difference = v;
      else if (f[0] == "t_test.degenerate") t.degenerate_variance = v != 0.0;
      else throw FormatError("report line " + std::to_string(number) + ": unknown key '" + f[0] + "'");
    } else {
      r.aggregates.emplace_back(f[0], parse_double(f[1], number));
    }
  }
  if (!footer) throw FormatError("report lacks the '--' footer separator");
  if (has_t) r.comparison = t;
  return r;
}

void save_report(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write report " + path.string());
  out << serialize_report(report);
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open report " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_report(buf.str());
}

}  // namespace corelm
