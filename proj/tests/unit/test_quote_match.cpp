#include <algorithm>
#include <random>

#include "doctest.h"
#include "lmsub/quote_match.hpp"
#include "lmsub/text.hpp"

using namespace lmsub;
using namespace lmsub::nepa;

namespace {

// Textbook full-matrix Levenshtein, written independently of the library.
std::size_t oracle_distance(const std::u32string& a, const std::u32string& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
  }
  return d[a.size()][b.size()];
}

// Exhaustive window scan with the same tie-break order.
std::optional<QuoteSpan> oracle_best(const std::string& quote, const std::string& letter) {
  const auto q = text::decode_utf8(quote);
  const auto t = text::decode_utf8(letter);
  if (q.empty() || t.empty()) return std::nullopt;
  const auto range = window_range(q.size(), t.size());
  std::optional<QuoteSpan> best;
  for (std::size_t start = 0; start < t.size(); ++start) {
    for (std::size_t len = range.min_length; len <= range.max_length && start + len <= t.size(); ++len) {
      const auto w = t.substr(start, len);
      const double sim = 1.0 - static_cast<double>(oracle_distance(q, w)) / static_cast<double>(std::max(q.size(), w.size()));
      const bool better = !best || sim > best->similarity + 1e-15 ||
                          (std::abs(sim - best->similarity) <= 1e-15 &&
                           (start < best->start || (start == best->start && len < best->end - best->start)));
      if (better) best = QuoteSpan{quote, start, start + len, sim};
    }
  }
  return best;
}

}  // namespace

TEST_CASE("edit distance matches the full-matrix oracle") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    std::u32string a, b;
    for (std::size_t k = rng() % 12; k > 0; --k) a.push_back(U'a' + rng() % 4);
    for (std::size_t k = rng() % 12; k > 0; --k) b.push_back(U'a' + rng() % 4);
    CHECK(edit_distance(a, b) == oracle_distance(a, b));
  }
}

TEST_CASE("verify_quote examples") {
  const std::string letter = "I support solar power. Alternative 5 is the most sensible option here. Thanks.";
  auto exact = verify_quote("Alternative 5 is the most sensible option here.", letter);
  REQUIRE(exact);
  CHECK(exact->similarity == 1.0);
  CHECK(text::slice(letter, exact->start, exact->end) == "Alternative 5 is the most sensible option here.");

  auto near = verify_quote("Alternative 5 is the most sensible option", letter);
  REQUIRE(near);
  CHECK(near->similarity > 0.9);
  CHECK(text::slice(letter, near->start, near->end).find("Alternative 5") == 0);

  CHECK_FALSE(verify_quote("Migratory birds nest along the riverbank every spring.", letter));
  const auto unrelated = oracle_best("Migratory birds nest along the riverbank every spring.", letter);
  CHECK(unrelated->similarity < 0.85);
}

TEST_CASE("a single typo in 60 characters keeps similarity at least 0.98") {
  const std::string sentence = "The proposed transmission corridor crosses critical habitat.";
  REQUIRE(sentence.size() == 60);
  std::string typo = sentence;
  typo[10] = 'X';
  const auto span = verify_quote(typo, "Opening words. " + sentence + " Closing words.");
  REQUIRE(span);
  CHECK(span->similarity >= 0.98);
}

TEST_CASE("offsets are code points") {
  const std::string letter = "Caf\xC3\xA9 owners agree: the r\xC3\xA9serve must stay.";
  const auto span = verify_quote("the r\xC3\xA9serve must stay.", letter);
  REQUIRE(span);
  CHECK(span->similarity == 1.0);
  CHECK(span->start == 19);
  CHECK(text::slice(letter, span->start, span->end) == "the r\xC3\xA9serve must stay.");
}

TEST_CASE("property: best_window equals exhaustive search") {
  std::mt19937_64 rng(17);
  const std::string alphabet = "abcd e";
  for (int trial = 0; trial < 300; ++trial) {
    std::string letter, quote;
    for (std::size_t k = 1 + rng() % 40; k > 0; --k) letter.push_back(alphabet[rng() % alphabet.size()]);
    if (rng() % 2 && letter.size() > 4) {
      const std::size_t s = rng() % (letter.size() - 3);
      quote = letter.substr(s, 1 + rng() % std::min<std::size_t>(12, letter.size() - s));
      if (!quote.empty() && rng() % 2) quote[rng() % quote.size()] = 'z';
    } else {
      for (std::size_t k = 1 + rng() % 10; k > 0; --k) quote.push_back(alphabet[rng() % alphabet.size()]);
    }
    const auto got = best_window(quote, letter);
    const auto want = oracle_best(quote, letter);
    REQUIRE(got.has_value() == want.has_value());
    if (!got) continue;
    CHECK(got->similarity == doctest::Approx(want->similarity).epsilon(1e-12));
    CHECK(got->start == want->start);
    CHECK(got->end == want->end);
  }
}
