#pragma once

// Comparison of pipeline output against reviewer annotations.
//
// Each letter is split into sentences, and inclusion of a sentence is
// treated as a binary decision on both sides. A sentence belongs to a
// selection when at least half of its characters lie inside the union of
// that selection's spans. Aggregate rates pool sentence counts across
// letters. All offsets are code point indices.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lmsub/json.hpp"

namespace lmsub::eval {

struct Span {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  friend bool operator==(const Span&, const Span&) = default;
};

struct SentenceSpan {
  std::string letter_id;
  std::size_t index = 0;
  std::size_t start = 0;
  std::size_t end = 0;
};

// Terminal punctuation (. ! ?) followed by whitespace or end of text ends a
// sentence, except after a guarded abbreviation such as "Dr." or "e.g.".
std::vector<SentenceSpan> split_sentences(std::string_view text, std::string_view letter_id = {});
const std::set<std::string>& abbreviation_guard();

// Whether at least half of [start, end) is covered by the union of spans.
bool member(const SentenceSpan& sentence, const std::vector<Span>& spans);

struct Counts {
  std::size_t selected = 0;  // sentences in the conditioning set
  std::size_t hits = 0;      // of those, also in the other set
  std::optional<double> rate() const {
    if (selected == 0) return std::nullopt;
    return static_cast<double>(hits) / static_cast<double>(selected);
  }
  Counts& operator+=(const Counts& o) {
    selected += o.selected;
    hits += o.hits;
    return *this;
  }
  friend bool operator==(const Counts&, const Counts&) = default;
};

struct QuoteMetrics {
  Counts precision;  // conditioned on Quotes
  Counts recall;     // conditioned on SME comments
  friend bool operator==(const QuoteMetrics&, const QuoteMetrics&) = default;
};

QuoteMetrics quote_metrics(const std::vector<SentenceSpan>& sentences, const std::vector<Span>& quote_spans,
                           const std::vector<Span>& sme_spans);

struct BinningMetrics {
  Counts recall;     // |SME ∩ system| over |SME|
  Counts precision;  // |SME ∩ system| over |system|
  friend bool operator==(const BinningMetrics&, const BinningMetrics&) = default;
};

BinningMetrics binning_metrics(const std::set<std::string>& sme_bins, const std::set<std::string>& system_bins);

// Population stdev of the lengths over their mean, as a percentage. Needs at
// least two lengths and a positive mean; returns nullopt otherwise.
std::optional<double> length_variability(const std::vector<double>& lengths);

struct TruthComment {
  std::string letter_id;
  Span span;
  std::string bin_name;
};

struct SystemQuote {
  std::string letter_id;
  Span span;
  std::vector<std::string> bins;
};

using ConfusionCounts = std::map<std::pair<std::string, std::string>, std::size_t>;

// Over sentences in both selections: the SME bin (of the comment covering
// most of the sentence) crossed with every bin of every system quote that
// overlaps the sentence.
ConfusionCounts confusion_counts(const std::vector<SentenceSpan>& sentences, const std::vector<TruthComment>& truth,
                                 const std::vector<SystemQuote>& system);

struct LengthBucket {
  double lo = 0;
  double hi = 0;  // [lo, hi)
  std::optional<double> mean_recall;
  std::size_t letters = 0;
};

// Letters grouped by character length into [edges[i], edges[i+1]); letters
// without a defined recall are skipped.
std::vector<LengthBucket> recall_vs_length(const std::vector<std::pair<std::size_t, std::optional<double>>>& letters,
                                           const std::vector<double>& edges);

std::vector<TruthComment> load_truth(const std::filesystem::path& path);
std::vector<SystemQuote> load_system_output(const std::filesystem::path& path);

struct LetterText {
  std::string letter_id;
  std::string text;
};

struct LetterReport {
  std::string letter_id;
  std::size_t length = 0;
  std::size_t sentences = 0;
  QuoteMetrics quotes;
  BinningMetrics binning;
};

struct EvalReport {
  std::vector<LetterReport> letters;
  QuoteMetrics quotes;      // pooled
  BinningMetrics binning;   // pooled
  std::optional<double> sme_length_variability;
  std::optional<double> system_length_variability;
  std::vector<LengthBucket> recall_by_length;
  ConfusionCounts confusion;

  Json to_json() const;
  std::string to_text() const;
};

EvalReport evaluate(const std::vector<LetterText>& letters, const std::vector<TruthComment>& truth,
                    const std::vector<SystemQuote>& system, const std::vector<double>& length_edges = {});

}  // namespace lmsub::eval
