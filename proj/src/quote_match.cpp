#include "lmsub/quote_match.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lmsub/text.hpp"

namespace lmsub::nepa {

std::size_t edit_distance(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> row(b.size() + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({up + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

double normalized_similarity(std::u32string_view a, std::u32string_view b) {
  const std::size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 1.0;
  return 1.0 - static_cast<double>(edit_distance(a, b)) / static_cast<double>(longest);
}

double normalized_similarity(std::string_view a, std::string_view b) {
  return normalized_similarity(text::decode_utf8(a), text::decode_utf8(b));
}

WindowRange window_range(std::size_t quote_length, std::size_t text_length) {
  const double m = static_cast<double>(quote_length);
  auto lo = static_cast<std::size_t>(std::floor(m * (1.0 - kWindowSlack)));
  auto hi = static_cast<std::size_t>(std::ceil(m * (1.0 + kWindowSlack)));
  lo = std::max<std::size_t>(lo, 1);
  hi = std::min(hi, text_length);
  lo = std::min(lo, hi);
  return {lo, hi};
}

namespace {

double similarity_of(std::size_t distance, std::size_t quote_length, std::size_t window_length) {
  return 1.0 - static_cast<double>(distance) / static_cast<double>(std::max(quote_length, window_length));
}

// Minimum edit distance of the quote against any substring of the text that
// ends at each position e (exclusive end), via semi-global alignment.
std::vector<std::size_t> min_distance_by_end(std::u32string_view quote, std::u32string_view text) {
  const std::size_t m = quote.size();
  std::vector<std::size_t> col(m + 1);
  std::iota(col.begin(), col.end(), std::size_t{0});
  std::vector<std::size_t> best(text.size() + 1);
  best[0] = m;
  for (std::size_t e = 1; e <= text.size(); ++e) {
    std::size_t diag = col[0];
    col[0] = 0;
    for (std::size_t i = 1; i <= m; ++i) {
      const std::size_t left = col[i];
      col[i] = std::min({left + 1, col[i - 1] + 1, diag + (quote[i - 1] == text[e - 1] ? 0 : 1)});
      diag = left;
    }
    best[e] = col[m];
  }
  return best;
}

}  // namespace

std::optional<QuoteSpan> best_window(std::string_view quote, std::string_view letter_text) {
  const auto q = text::decode_utf8(quote);
  const auto t = text::decode_utf8(letter_text);
  if (q.empty() || t.empty()) return std::nullopt;

  const auto range = window_range(q.size(), t.size());
  const auto min_by_end = min_distance_by_end(q, t);
  const double ceiling_norm = static_cast<double>(std::max(q.size(), range.max_length));

  // Visit window ends in order of their similarity upper bound; stop once
  // the bound falls below the best similarity found.
  std::vector<std::size_t> ends;
  for (std::size_t e = range.min_length; e <= t.size(); ++e) ends.push_back(e);
  auto bound = [&](std::size_t e) { return 1.0 - static_cast<double>(min_by_end[e]) / ceiling_norm; };
  std::stable_sort(ends.begin(), ends.end(), [&](std::size_t a, std::size_t b) { return bound(a) > bound(b); });

  std::optional<QuoteSpan> best;
  auto better = [&](double sim, std::size_t start, std::size_t len) {
    if (!best) return true;
    if (sim != best->similarity) return sim > best->similarity;
    if (start != best->start) return start < best->start;
    return len < best->end - best->start;
  };

  // Reverse alignment: dist[j] = edit distance between the whole quote and
  // the j code points ending at e.
  const std::size_t m = q.size();
  std::vector<std::size_t> prev(range.max_length + 1), cur(range.max_length + 1);
  for (std::size_t e : ends) {
    if (best && bound(e) < best->similarity) break;
    const std::size_t max_len = std::min(range.max_length, e);
    for (std::size_t j = 0; j <= max_len; ++j) prev[j] = j;
    for (std::size_t i = 1; i <= m; ++i) {
      cur[0] = i;
      const char32_t qc = q[m - i];
      for (std::size_t j = 1; j <= max_len; ++j) {
        cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (qc == t[e - j] ? 0 : 1)});
      }
      std::swap(prev, cur);
    }
    for (std::size_t len = range.min_length; len <= max_len; ++len) {
      const double sim = similarity_of(prev[len], m, len);
      if (better(sim, e - len, len)) best = QuoteSpan{std::string(quote), e - len, e, sim};
    }
  }
  return best;
}

std::optional<QuoteSpan> verify_quote(std::string_view quote, std::string_view letter_text, double threshold) {
  auto span = best_window(quote, letter_text);
  if (!span || span->similarity < threshold) return std::nullopt;
  return span;
}

}  // namespace lmsub::nepa
