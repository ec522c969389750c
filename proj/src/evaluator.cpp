#include "lmsub/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "lmsub/error.hpp"
#include "lmsub/text.hpp"

namespace lmsub::eval {

namespace {

bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v' || c == 0xA0 ||
         c == 0x2028 || c == 0x2029;
}

bool is_terminal(char32_t c) { return c == U'.' || c == U'!' || c == U'?'; }

// Closing quotes and brackets that may trail terminal punctuation.
bool is_closer(char32_t c) {
  return c == U'"' || c == U'\'' || c == U')' || c == U']' || c == 0x201D || c == 0x2019;
}

std::string lower_ascii(std::u32string_view w) {
  std::string out;
  for (char32_t c : w) {
    if (c >= 0x80) return {};
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

// The word ending at a '.' at position dot, without the dot itself.
bool guarded(const std::u32string& t, std::size_t dot) {
  std::size_t b = dot;
  while (b > 0 && !is_space(t[b - 1]) && t[b - 1] != U'(' && t[b - 1] != U'"') --b;
  const auto word = lower_ascii(std::u32string_view(t).substr(b, dot - b));
  return !word.empty() && abbreviation_guard().count(word) > 0;
}

std::vector<Span> merged(std::vector<Span> spans) {
  std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
  std::vector<Span> out;
  for (const auto& s : spans) {
    if (s.end <= s.start) continue;
    if (!out.empty() && s.start <= out.back().end) {
      out.back().end = std::max(out.back().end, s.end);
    } else {
      out.push_back(s);
    }
  }
  return out;
}

std::size_t overlap(std::size_t a0, std::size_t a1, std::size_t b0, std::size_t b1) {
  const auto lo = std::max(a0, b0);
  const auto hi = std::min(a1, b1);
  return hi > lo ? hi - lo : 0;
}

bool member_merged(const SentenceSpan& s, const std::vector<Span>& spans) {
  std::size_t covered = 0;
  for (const auto& sp : spans) covered += overlap(s.start, s.end, sp.start, sp.end);
  return s.end > s.start && 2 * covered >= s.end - s.start;
}

std::optional<double> mean(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

Json rate_json(const Counts& c) {
  Json j{{"hits", c.hits}, {"selected", c.selected}};
  const auto r = c.rate();
  j["rate"] = r ? Json(*r) : Json(nullptr);
  return j;
}

std::string fmt_rate(const std::optional<double>& r) {
  if (!r) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << *r;
  return os.str();
}

std::string fmt_pct(const std::optional<double>& r) {
  if (!r) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << *r << "%";
  return os.str();
}

std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}

template <typename F>
void for_each_json_line(const std::filesystem::path& path, F&& fn) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot open " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(Json::parse(line));
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::kInvalidArgument, path.string() + " line " + std::to_string(n) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.code(), path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
}

Span read_span(const Json& j) {
  const auto start = j.at("start").get<std::int64_t>();
  const auto end = j.at("end").get<std::int64_t>();
  if (start < 0 || end < start) throw Error(ErrorCode::kInvalidArgument, "bad span");
  return {static_cast<std::size_t>(start), static_cast<std::size_t>(end)};
}

}  // namespace

const std::set<std::string>& abbreviation_guard() {
  static const std::set<std::string> guard{
      "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "ft", "no", "vs", "etc", "e.g", "i.e",
      "inc", "co", "corp", "ltd", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept", "oct",
      "nov", "dec", "u.s", "a.m", "p.m", "approx", "dept", "gov", "rev", "gen", "sen", "rep", "hon"};
  return guard;
}

std::vector<SentenceSpan> split_sentences(std::string_view text, std::string_view letter_id) {
  const auto t = text::decode_utf8(text);
  std::vector<SentenceSpan> out;
  std::size_t i = 0;
  const auto n = t.size();
  while (i < n) {
    while (i < n && is_space(t[i])) ++i;
    if (i == n) break;
    const auto start = i;
    std::size_t end = n;
    for (std::size_t j = i; j < n; ++j) {
      if (!is_terminal(t[j])) continue;
      std::size_t k = j + 1;
      while (k < n && (is_terminal(t[k]) || is_closer(t[k]))) ++k;
      if (k < n && !is_space(t[k])) continue;
      if (t[j] == U'.' && k == j + 1 && guarded(t, j)) continue;
      end = k;
      break;
    }
    std::size_t trimmed = end;
    while (trimmed > start && is_space(t[trimmed - 1])) --trimmed;
    out.push_back({std::string(letter_id), out.size(), start, trimmed});
    i = end;
  }
  return out;
}

bool member(const SentenceSpan& sentence, const std::vector<Span>& spans) {
  return member_merged(sentence, merged(spans));
}

QuoteMetrics quote_metrics(const std::vector<SentenceSpan>& sentences, const std::vector<Span>& quote_spans,
                           const std::vector<Span>& sme_spans) {
  const auto q = merged(quote_spans);
  const auto s = merged(sme_spans);
  QuoteMetrics m;
  for (const auto& sent : sentences) {
    const bool in_q = member_merged(sent, q);
    const bool in_s = member_merged(sent, s);
    if (in_q) {
      ++m.precision.selected;
      if (in_s) ++m.precision.hits;
    }
    if (in_s) {
      ++m.recall.selected;
      if (in_q) ++m.recall.hits;
    }
  }
  return m;
}

BinningMetrics binning_metrics(const std::set<std::string>& sme_bins, const std::set<std::string>& system_bins) {
  std::size_t shared = 0;
  for (const auto& b : sme_bins) shared += system_bins.count(b);
  return {.recall = {sme_bins.size(), shared}, .precision = {system_bins.size(), shared}};
}

std::optional<double> length_variability(const std::vector<double>& lengths) {
  if (lengths.size() < 2) return std::nullopt;
  const double mu = *mean(lengths);
  if (!(mu > 0)) return std::nullopt;
  double ss = 0;
  for (double x : lengths) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / static_cast<double>(lengths.size())) / mu * 100.0;
}

ConfusionCounts confusion_counts(const std::vector<SentenceSpan>& sentences, const std::vector<TruthComment>& truth,
                                 const std::vector<SystemQuote>& system) {
  std::map<std::string, std::vector<const TruthComment*>> truth_by;
  std::map<std::string, std::vector<const SystemQuote*>> sys_by;
  for (const auto& c : truth) truth_by[c.letter_id].push_back(&c);
  for (const auto& q : system) sys_by[q.letter_id].push_back(&q);
  std::map<std::string, std::pair<std::vector<Span>, std::vector<Span>>> spans_by;
  for (const auto& [id, cs] : truth_by) {
    std::vector<Span> v;
    for (const auto* c : cs) v.push_back(c->span);
    spans_by[id].first = merged(std::move(v));
  }
  for (const auto& [id, qs] : sys_by) {
    std::vector<Span> v;
    for (const auto* q : qs) v.push_back(q->span);
    spans_by[id].second = merged(std::move(v));
  }

  ConfusionCounts counts;
  for (const auto& s : sentences) {
    const auto it = spans_by.find(s.letter_id);
    if (it == spans_by.end()) continue;
    if (!member_merged(s, it->second.first) || !member_merged(s, it->second.second)) continue;
    // SME bin: the comment with the largest overlap, earliest on ties.
    const TruthComment* best = nullptr;
    std::size_t best_overlap = 0;
    for (const auto* c : truth_by[s.letter_id]) {
      const auto o = overlap(s.start, s.end, c->span.start, c->span.end);
      if (o > best_overlap || (o == best_overlap && o > 0 && best && c->span.start < best->span.start)) {
        best = c;
        best_overlap = o;
      }
    }
    if (!best) continue;
    std::set<std::string> sys_bins;
    for (const auto* q : sys_by[s.letter_id]) {
      if (overlap(s.start, s.end, q->span.start, q->span.end) == 0) continue;
      sys_bins.insert(q->bins.begin(), q->bins.end());
    }
    for (const auto& b : sys_bins) ++counts[{best->bin_name, b}];
  }
  return counts;
}

std::vector<LengthBucket> recall_vs_length(const std::vector<std::pair<std::size_t, std::optional<double>>>& letters,
                                           const std::vector<double>& edges) {
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i - 1] < edges[i])) throw Error(ErrorCode::kInvalidArgument, "bucket edges must increase");
  }
  std::vector<LengthBucket> out;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    std::vector<double> recalls;
    for (const auto& [len, recall] : letters) {
      const auto l = static_cast<double>(len);
      if (recall && l >= edges[i] && l < edges[i + 1]) recalls.push_back(*recall);
    }
    out.push_back({edges[i], edges[i + 1], mean(recalls), recalls.size()});
  }
  return out;
}

std::vector<TruthComment> load_truth(const std::filesystem::path& path) {
  std::vector<TruthComment> out;
  for_each_json_line(path, [&](const Json& j) {
    out.push_back({j.at("letter_id").get<std::string>(), read_span(j), j.at("bin_name").get<std::string>()});
  });
  return out;
}

std::vector<SystemQuote> load_system_output(const std::filesystem::path& path) {
  std::vector<SystemQuote> out;
  for_each_json_line(path, [&](const Json& j) {
    SystemQuote q{j.at("letter_id").get<std::string>(), read_span(j), {}};
    if (j.contains("bins")) q.bins = j.at("bins").get<std::vector<std::string>>();
    out.push_back(std::move(q));
  });
  return out;
}

EvalReport evaluate(const std::vector<LetterText>& letters, const std::vector<TruthComment>& truth,
                    const std::vector<SystemQuote>& system, const std::vector<double>& length_edges) {
  EvalReport r;
  std::map<std::string, std::size_t> lengths;
  std::vector<SentenceSpan> all_sentences;
  std::vector<std::pair<std::size_t, std::optional<double>>> recall_points;
  for (const auto& l : letters) {
    const auto len = text::length(l.text);
    lengths[l.letter_id] = len;
    auto sentences = split_sentences(l.text, l.letter_id);
    std::vector<Span> sme, quotes;
    std::set<std::string> sme_bins, sys_bins;
    for (const auto& c : truth) {
      if (c.letter_id != l.letter_id) continue;
      if (c.span.end > len) throw Error(ErrorCode::kOutOfRange, "ground truth span outside letter " + l.letter_id);
      sme.push_back(c.span);
      sme_bins.insert(c.bin_name);
    }
    for (const auto& q : system) {
      if (q.letter_id != l.letter_id) continue;
      if (q.span.end > len) throw Error(ErrorCode::kOutOfRange, "system span outside letter " + l.letter_id);
      quotes.push_back(q.span);
      sys_bins.insert(q.bins.begin(), q.bins.end());
    }
    LetterReport lr{l.letter_id, len, sentences.size(), quote_metrics(sentences, quotes, sme),
                    binning_metrics(sme_bins, sys_bins)};
    r.quotes.precision += lr.quotes.precision;
    r.quotes.recall += lr.quotes.recall;
    r.binning.precision += lr.binning.precision;
    r.binning.recall += lr.binning.recall;
    recall_points.emplace_back(len, lr.quotes.recall.rate());
    r.letters.push_back(std::move(lr));
    all_sentences.insert(all_sentences.end(), sentences.begin(), sentences.end());
  }
  std::vector<double> sme_lengths, sys_lengths;
  for (const auto& c : truth) {
    if (lengths.count(c.letter_id)) sme_lengths.push_back(static_cast<double>(c.span.end - c.span.start));
  }
  for (const auto& q : system) {
    if (lengths.count(q.letter_id)) sys_lengths.push_back(static_cast<double>(q.span.end - q.span.start));
  }
  r.sme_length_variability = length_variability(sme_lengths);
  r.system_length_variability = length_variability(sys_lengths);
  auto edges = length_edges;
  if (edges.empty()) {
    std::size_t longest = 0;
    for (const auto& [_, len] : lengths) longest = std::max(longest, len);
    edges = {0, 500, 1000, 2000, 4000};
    while (edges.back() <= static_cast<double>(longest)) edges.push_back(edges.back() * 2);
  }
  r.recall_by_length = recall_vs_length(recall_points, edges);
  r.confusion = confusion_counts(all_sentences, truth, system);
  return r;
}

Json EvalReport::to_json() const {
  Json per = Json::array();
  for (const auto& l : letters) {
    per.push_back({{"letter_id", l.letter_id},
                   {"length", l.length},
                   {"sentences", l.sentences},
                   {"quote_precision", rate_json(l.quotes.precision)},
                   {"quote_recall", rate_json(l.quotes.recall)},
                   {"binning_precision", rate_json(l.binning.precision)},
                   {"binning_recall", rate_json(l.binning.recall)}});
  }
  Json buckets = Json::array();
  for (const auto& b : recall_by_length) {
    buckets.push_back({{"lo", b.lo},
                       {"hi", b.hi},
                       {"letters", b.letters},
                       {"mean_recall", b.mean_recall ? Json(*b.mean_recall) : Json(nullptr)}});
  }
  Json confusion_rows = Json::array();
  for (const auto& [k, v] : confusion) {
    confusion_rows.push_back({{"sme_bin", k.first}, {"system_bin", k.second}, {"count", v}});
  }
  auto opt = [](const std::optional<double>& x) { return x ? Json(*x) : Json(nullptr); };
  return {{"aggregation", "pooled sentence counts across letters"},
          {"membership_threshold", 0.5},
          {"letters", per},
          {"aggregate",
           {{"quote_precision", rate_json(quotes.precision)},
            {"quote_recall", rate_json(quotes.recall)},
            {"binning_precision", rate_json(binning.precision)},
            {"binning_recall", rate_json(binning.recall)}}},
          {"length_variability_percent", {{"sme", opt(sme_length_variability)}, {"system", opt(system_length_variability)}}},
          {"recall_by_length", buckets},
          {"confusion", confusion_rows}};
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "Aggregates pool sentence counts across letters (micro-average).\n"
     << "A sentence is selected when >= 50% of its characters are covered.\n\n";
  os << pad("letter", 16) << pad("length", 8) << pad("sent", 6) << pad("q_prec", 8) << pad("q_rec", 8)
     << pad("b_prec", 8) << "b_rec\n";
  for (const auto& l : letters) {
    os << pad(l.letter_id, 16) << pad(std::to_string(l.length), 8) << pad(std::to_string(l.sentences), 6)
       << pad(fmt_rate(l.quotes.precision.rate()), 8) << pad(fmt_rate(l.quotes.recall.rate()), 8)
       << pad(fmt_rate(l.binning.precision.rate()), 8) << fmt_rate(l.binning.recall.rate()) << "\n";
  }
  os << pad("all", 30) << pad(fmt_rate(quotes.precision.rate()), 8) << pad(fmt_rate(quotes.recall.rate()), 8)
     << pad(fmt_rate(binning.precision.rate()), 8) << fmt_rate(binning.recall.rate()) << "\n\n";
  os << "Normalized length stdev: SME " << fmt_pct(sme_length_variability) << ", system "
     << fmt_pct(system_length_variability) << "\n\n";
  os << "Recall by letter length\n";
  for (const auto& b : recall_by_length) {
    os << "  [" << static_cast<long long>(b.lo) << ", " << static_cast<long long>(b.hi) << ")  "
       << pad(std::to_string(b.letters) + " letters", 12) << fmt_rate(b.mean_recall) << "\n";
  }
  os << "\nConfusion (SME bin x system bin)\n";
  if (confusion.empty()) os << "  (no shared sentences)\n";
  for (const auto& [k, v] : confusion) os << "  " << pad(k.first, 24) << pad(k.second, 24) << v << "\n";
  return os.str();
}

}  // namespace lmsub::eval
