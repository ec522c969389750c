#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "lmsub/demo.hpp"
#include "lmsub/evaluator.hpp"
#include "lmsub/text.hpp"

using namespace lmsub;
using namespace lmsub::eval;

namespace {

// Character-bitmap membership, independent of the interval code.
std::vector<bool> coverage(std::size_t n, const std::vector<Span>& spans) {
  std::vector<bool> bits(n, false);
  for (const auto& s : spans) {
    for (std::size_t i = s.start; i < s.end && i < n; ++i) bits[i] = true;
  }
  return bits;
}

bool brute_member(const SentenceSpan& s, const std::vector<bool>& bits) {
  std::size_t c = 0;
  for (std::size_t i = s.start; i < s.end; ++i) c += bits[i] ? 1 : 0;
  return 2 * c >= s.end - s.start;
}

struct Corpus {
  std::vector<LetterText> letters;
  std::vector<TruthComment> truth;
  std::vector<SystemQuote> system;
};

const std::vector<std::string> kBins{"A", "B", "C", "D"};

Corpus random_corpus(std::mt19937_64& rng, int n_letters, int max_sentences) {
  Corpus c;
  const std::vector<std::string> words{"gravel", "trucks", "water", "dust", "noise", "wells", "owl", "road"};
  for (int l = 0; l < n_letters; ++l) {
    std::string text;
    const int ns = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(max_sentences));
    for (int s = 0; s < ns; ++s) {
      const int nw = 1 + static_cast<int>(rng() % 8);
      for (int w = 0; w < nw; ++w) text += (w ? " " : "") + words[rng() % words.size()];
      text += (rng() % 3 == 0 ? "!  " : ". ");
    }
    const std::string id = "L" + std::to_string(l);
    const auto len = text::length(text);
    auto rand_span = [&] {
      const std::size_t a = rng() % len;
      const std::size_t b = a + 1 + rng() % std::min<std::size_t>(len - a, 80);
      return Span{a, b};
    };
    for (int k = static_cast<int>(rng() % 4); k > 0; --k) c.truth.push_back({id, rand_span(), kBins[rng() % 4]});
    for (int k = static_cast<int>(rng() % 4); k > 0; --k) {
      SystemQuote q{id, rand_span(), {}};
      for (const auto& b : kBins) {
        if (rng() % 3 == 0) q.bins.push_back(b);
      }
      c.system.push_back(q);
    }
    c.letters.push_back({id, text});
  }
  return c;
}

}  // namespace

TEST_CASE("split_sentences examples and coverage") {
  CHECK(split_sentences("A. B? C!").size() == 3);
  CHECK(split_sentences("Dr. Smith agrees.").size() == 1);
  const auto one = split_sentences("no terminal punctuation here");
  REQUIRE(one.size() == 1);
  CHECK(one[0].start == 0);
  CHECK(one[0].end == 28);
  CHECK(split_sentences("Costs rose 3.5 percent. Then fell.").size() == 2);
  CHECK(split_sentences("It ended (finally.) Next one.").size() == 2);
  CHECK(split_sentences("Ask e.g. the county. Done.").size() == 2);
  CHECK(abbreviation_guard().count("dr") == 1);

  std::mt19937_64 rng(5);
  for (int round = 0; round < 50; ++round) {
    const auto corpus = random_corpus(rng, 1, 12);
    const auto& t = corpus.letters[0].text;
    const auto cps = text::decode_utf8(t);
    const auto spans = split_sentences(t);
    std::vector<bool> covered(cps.size(), false);
    for (std::size_t i = 0; i < spans.size(); ++i) {
      CHECK(spans[i].index == i);
      CHECK(spans[i].start < spans[i].end);
      if (i) CHECK(spans[i - 1].end <= spans[i].start);
      for (auto k = spans[i].start; k < spans[i].end; ++k) covered[k] = true;
    }
    for (std::size_t k = 0; k < cps.size(); ++k) {
      if (cps[k] != U' ') CHECK(covered[k]);
    }
  }
}

TEST_CASE("quote_metrics examples") {
  std::vector<SentenceSpan> sentences;
  for (std::size_t i = 0; i < 10; ++i) sentences.push_back({"L", i, i * 10, i * 10 + 9});
  auto sel = [&](std::vector<std::size_t> idx) {
    std::vector<Span> v;
    for (auto i : idx) v.push_back({sentences[i].start, sentences[i].end});
    return v;
  };
  const auto m = quote_metrics(sentences, sel({1, 2, 6}), sel({0, 1, 2, 3, 4, 5}));
  CHECK(m.precision.rate() == doctest::Approx(2.0 / 3.0));
  CHECK(m.recall.rate() == doctest::Approx(1.0 / 3.0));
  const auto same = quote_metrics(sentences, sel({0, 4}), sel({0, 4}));
  CHECK(*same.precision.rate() == 1.0);
  CHECK(*same.recall.rate() == 1.0);
  const auto disjoint = quote_metrics(sentences, sel({0}), sel({1}));
  CHECK(*disjoint.precision.rate() == 0.0);
  CHECK(*disjoint.recall.rate() == 0.0);
  CHECK_FALSE(quote_metrics(sentences, {}, sel({1})).precision.rate().has_value());
  // Half coverage counts; just under half does not.
  const SentenceSpan s{"L", 0, 0, 10};
  CHECK(member(s, {{0, 3}, {7, 9}}));
  CHECK_FALSE(member(s, {{0, 4}}));
  CHECK(member(s, {{0, 4}, {2, 5}}));
}

TEST_CASE("quote_metrics matches brute force on random corpora") {
  std::mt19937_64 rng(17);
  for (int round = 0; round < 40; ++round) {
    const auto c = random_corpus(rng, 6, 30);
    std::size_t total_sentences = 0;
    const auto report = evaluate(c.letters, c.truth, c.system);
    Counts pooled_p, pooled_r;
    for (std::size_t li = 0; li < c.letters.size(); ++li) {
      const auto& l = c.letters[li];
      const auto n = text::length(l.text);
      std::vector<Span> q, s;
      for (const auto& x : c.system) {
        if (x.letter_id == l.letter_id) q.push_back(x.span);
      }
      for (const auto& x : c.truth) {
        if (x.letter_id == l.letter_id) s.push_back(x.span);
      }
      const auto qb = coverage(n, q);
      const auto sb = coverage(n, s);
      Counts p, r;
      const auto sentences = split_sentences(l.text, l.letter_id);
      total_sentences += sentences.size();
      for (const auto& sent : sentences) {
        const bool iq = brute_member(sent, qb), is = brute_member(sent, sb);
        p.selected += iq;
        p.hits += iq && is;
        r.selected += is;
        r.hits += iq && is;
      }
      CHECK(report.letters[li].quotes.precision == p);
      CHECK(report.letters[li].quotes.recall == r);
      pooled_p += p;
      pooled_r += r;
    }
    CHECK(total_sentences <= 1000);
    CHECK(report.quotes.precision == pooled_p);
    CHECK(report.quotes.recall == pooled_r);
    for (const auto& rate : {report.quotes.precision.rate(), report.quotes.recall.rate()}) {
      if (rate) CHECK((*rate >= 0.0 && *rate <= 1.0));
    }
  }
}

TEST_CASE("binning_metrics") {
  const auto m = binning_metrics({"A", "B", "C"}, {"B", "C", "D"});
  CHECK(*m.recall.rate() == doctest::Approx(2.0 / 3.0));
  CHECK(*m.precision.rate() == doctest::Approx(2.0 / 3.0));
  const auto same = binning_metrics({"A"}, {"A"});
  CHECK(*same.recall.rate() == 1.0);
  const auto empty = binning_metrics({"A"}, {});
  CHECK(*empty.recall.rate() == 0.0);
  CHECK_FALSE(empty.precision.rate().has_value());

  std::mt19937_64 rng(3);
  for (int round = 0; round < 200; ++round) {
    std::set<std::string> a, b;
    for (const auto& x : kBins) {
      if (rng() % 2) a.insert(x);
      if (rng() % 2) b.insert(x);
    }
    std::size_t shared = 0;
    for (const auto& x : kBins) shared += a.count(x) && b.count(x);
    const auto r = binning_metrics(a, b);
    CHECK(r.recall == Counts{a.size(), shared});
    CHECK(r.precision == Counts{b.size(), shared});
  }
}

TEST_CASE("length_variability") {
  CHECK(*length_variability({10, 20, 30}) == doctest::Approx(40.8248).epsilon(1e-4));
  CHECK(std::abs(*length_variability({10, 20, 30}) - 40.8) < 0.05);
  CHECK(*length_variability({5, 5, 5}) == 0.0);
  CHECK(*length_variability({1, 3}) == doctest::Approx(50.0));
  CHECK_FALSE(length_variability({4}).has_value());

  std::mt19937_64 rng(9);
  for (int round = 0; round < 100; ++round) {
    std::vector<double> xs;
    for (int i = 0, n = 2 + static_cast<int>(rng() % 20); i < n; ++i) xs.push_back(1 + static_cast<double>(rng() % 500));
    // Two-pass brute force via E[x^2] - E[x]^2 on exact integers.
    long double s = 0, s2 = 0;
    for (double x : xs) {
      s += x;
      s2 += x * x;
    }
    const long double n = xs.size();
    const long double var = s2 / n - (s / n) * (s / n);
    const double expected = static_cast<double>(std::sqrt(std::max<long double>(var, 0)) / (s / n) * 100);
    CHECK(*length_variability(xs) == doctest::Approx(expected).epsilon(1e-9));
  }
}

TEST_CASE("recall_vs_length buckets") {
  std::vector<std::pair<std::size_t, std::optional<double>>> letters{{100, 1.0}, {150, 1.0}, {900, 0.0},
                                                                      {950, 0.0}, {120, std::nullopt}};
  const auto two = recall_vs_length(letters, {0, 500, 1000});
  REQUIRE(two.size() == 2);
  CHECK(*two[0].mean_recall == 1.0);
  CHECK(*two[1].mean_recall == 0.0);
  CHECK(two[0].letters == 2);
  const auto one = recall_vs_length(letters, {0, 2000});
  CHECK(*one[0].mean_recall == doctest::Approx(0.5));
  const auto gap = recall_vs_length(letters, {0, 500, 800, 1000});
  CHECK_FALSE(gap[1].mean_recall.has_value());
  CHECK_THROWS(recall_vs_length(letters, {0, 0}));
}

TEST_CASE("confusion_counts examples and brute force") {
  const std::vector<SentenceSpan> one{{"L", 0, 0, 10}};
  CHECK(confusion_counts(one, {{"L", {0, 10}, "A"}}, {{"L", {0, 10}, {"A"}}}) == ConfusionCounts{{{"A", "A"}, 1}});
  CHECK(confusion_counts(one, {{"L", {0, 10}, "A"}}, {{"L", {0, 6}, {"A"}}, {"L", {4, 10}, {"B"}}}) ==
        ConfusionCounts{{{"A", "A"}, 1}, {{"A", "B"}, 1}});
  CHECK(confusion_counts(one, {{"L", {0, 10}, "A"}}, {{"L", {0, 2}, {"A"}}}).empty());

  std::mt19937_64 rng(23);
  for (int round = 0; round < 40; ++round) {
    const auto c = random_corpus(rng, 5, 20);
    std::vector<SentenceSpan> sentences;
    for (const auto& l : c.letters) {
      auto s = split_sentences(l.text, l.letter_id);
      sentences.insert(sentences.end(), s.begin(), s.end());
    }
    ConfusionCounts expected;
    for (const auto& l : c.letters) {
      const auto n = text::length(l.text);
      std::vector<Span> q, s;
      for (const auto& x : c.system) {
        if (x.letter_id == l.letter_id) q.push_back(x.span);
      }
      for (const auto& x : c.truth) {
        if (x.letter_id == l.letter_id) s.push_back(x.span);
      }
      const auto qb = coverage(n, q), sb = coverage(n, s);
      for (const auto& sent : sentences) {
        if (sent.letter_id != l.letter_id || !brute_member(sent, qb) || !brute_member(sent, sb)) continue;
        // SME comment with the most characters in the sentence, earliest start on ties.
        const TruthComment* best = nullptr;
        std::size_t best_n = 0;
        for (const auto& t : c.truth) {
          if (t.letter_id != l.letter_id) continue;
          std::size_t k = 0;
          for (auto i = sent.start; i < sent.end; ++i) k += i >= t.span.start && i < t.span.end;
          if (k > best_n || (k == best_n && k > 0 && t.span.start < best->span.start)) {
            best = &t;
            best_n = k;
          }
        }
        std::set<std::string> bins;
        for (const auto& x : c.system) {
          if (x.letter_id != l.letter_id) continue;
          for (auto i = sent.start; i < sent.end; ++i) {
            if (i >= x.span.start && i < x.span.end) {
              bins.insert(x.bins.begin(), x.bins.end());
              break;
            }
          }
        }
        for (const auto& b : bins) ++expected[{best->bin_name, b}];
      }
    }
    CHECK(confusion_counts(sentences, c.truth, c.system) == expected);
  }
}

TEST_CASE("truth and system-output loaders") {
  const auto dir = std::filesystem::temp_directory_path() / "lmsub_eval_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "truth.jsonl") << R"({"letter_id":"L","start":0,"end":5,"bin_name":"A"})" << "\n\n";
    std::ofstream(dir / "sys.jsonl") << R"({"letter_id":"L","start":0,"end":5,"bins":["A","B"]})" << "\n";
    std::ofstream(dir / "bad.jsonl") << R"({"letter_id":"L","start":5,"end":2,"bin_name":"A"})" << "\n";
  }
  const auto truth = load_truth(dir / "truth.jsonl");
  REQUIRE(truth.size() == 1);
  CHECK(truth[0].bin_name == "A");
  CHECK(load_system_output(dir / "sys.jsonl")[0].bins.size() == 2);
  CHECK_THROWS_WITH(load_truth(dir / "bad.jsonl"), doctest::Contains("line 1"));
  CHECK_THROWS(load_truth(dir / "missing.jsonl"));
  const auto report = evaluate({{"L", "Hello there."}}, truth, load_system_output(dir / "sys.jsonl"));
  CHECK(report.to_json()["aggregate"]["quote_precision"]["hits"] == 0);
  CHECK(report.to_text().find("micro-average") != std::string::npos);
  CHECK_THROWS(evaluate({{"L", "Hi."}}, {{"L", {0, 50}, "A"}}, {}));
  std::filesystem::remove_all(dir);
}

TEST_CASE("rare letters oracle and smoothing") {
  CHECK(demo::rare_letters_oracle("Pack my box with five dozen liquor jugs.") == 4);
  CHECK(demo::rare_letters_oracle("Pack my box", "JXQZ") == 1);
  CHECK(demo::rare_letters_oracle("") == 0);
  for (const auto& s : demo::pangram_pool()) {
    // Brute force over whitespace-split words.
    std::istringstream in(s);
    std::string w;
    int n = 0;
    while (in >> w) {
      bool hit = false;
      for (char ch : w) hit = hit || std::string("qwxzQWXZ").find(ch) != std::string::npos;
      n += hit;
    }
    CHECK(demo::rare_letters_oracle(s) == n);
  }
  std::mt19937_64 rng(1);
  for (std::size_t n : {1u, 7u, 100u, 500u}) {
    std::vector<double> xs(n);
    for (auto& x : xs) x = static_cast<double>(rng() % 2);
    const auto sm = demo::gaussian_smooth(xs, 15);
    double a = 0, b = 0;
    for (std::size_t i = 0; i < n; ++i) {
      a += xs[i];
      b += sm[i];
    }
    CHECK(std::abs(a / n - b / n) < 1e-6);
  }
}

TEST_CASE("rare letters demo with a perfect arm and determinism") {
  ScriptedBackend perfect(fixtures::rare_letters_config({0.0}), 1);
  demo::DemoConfig cfg;
  cfg.trials = 30;
  const auto r = demo::rare_letters_demo(perfect, cfg);
  double total = 0;
  for (const auto& t : r.trials) total += t.loss;
  CHECK(total == 0.0);

  ScriptedBackend mixed(ScriptedConfig::from_json(Json::parse(default_scripted_profiles())), 4);
  cfg.trials = 60;
  cfg.seed = 4;
  const auto dir = std::filesystem::temp_directory_path() / "lmsub_demo_test";
  std::filesystem::remove_all(dir);
  demo::rare_letters_demo(mixed, cfg).write(dir / "a");
  ScriptedBackend mixed2(ScriptedConfig::from_json(Json::parse(default_scripted_profiles())), 4);
  demo::rare_letters_demo(mixed2, cfg).write(dir / "b");
  for (const auto* f : {"loss_trace.csv", "arm_trace.csv", "arms.json", "loss.svg", "arms.svg"}) {
    std::ifstream a(dir / "a" / f), b(dir / "b" / f);
    const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    CHECK_FALSE(sa.empty());
    CHECK(sa == sb);
  }
  std::filesystem::remove_all(dir);
}
