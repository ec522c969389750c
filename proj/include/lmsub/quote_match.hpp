#pragma once

// Fuzzy verification that a quoted passage appears in its source letter.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

namespace lmsub::nepa {

inline constexpr double kDefaultMatchThreshold = 0.85;
inline constexpr double kWindowSlack = 0.20;

struct QuoteSpan {
  std::string raw_quote;
  std::size_t start = 0;  // code point offsets into the letter, [start, end)
  std::size_t end = 0;
  double similarity = 0.0;

  friend bool operator==(const QuoteSpan&, const QuoteSpan&) = default;
};

std::size_t edit_distance(std::u32string_view a, std::u32string_view b);

// 1 - edit_distance / max(|a|, |b|); 1 for two empty strings.
double normalized_similarity(std::u32string_view a, std::u32string_view b);
double normalized_similarity(std::string_view a, std::string_view b);

// Candidate window lengths for a quote of m code points:
// [floor(0.8 m), ceil(1.2 m)], at least 1 and at most the letter length.
struct WindowRange {
  std::size_t min_length;
  std::size_t max_length;
};
WindowRange window_range(std::size_t quote_length, std::size_t text_length);

// Best window of the letter by normalized similarity over the window range.
// Ties go to the earliest start, then the shorter window. Returns nullopt
// for an empty quote or an empty letter.
std::optional<QuoteSpan> best_window(std::string_view quote, std::string_view letter_text);

// best_window, kept only if its similarity reaches threshold.
std::optional<QuoteSpan> verify_quote(std::string_view quote, std::string_view letter_text,
                                      double threshold = kDefaultMatchThreshold);

}  // namespace lmsub::nepa
