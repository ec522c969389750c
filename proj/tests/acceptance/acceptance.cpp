// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "lmsub/critique.hpp"
#include "lmsub/demo.hpp"
#include "lmsub/error.hpp"
#include "lmsub/evaluator.hpp"
#include "lmsub/pipeline.hpp"
#include "lmsub/service.hpp"
#include "lmsub/task_queue.hpp"
#include "lmsub/text.hpp"

namespace fs = std::filesystem;
using namespace lmsub;

namespace {

const fs::path kData = LMSUB_TEST_DATA;
const fs::path kCli = LMSUB_CLI;

struct Check {
  std::vector<std::string> failures;
  std::vector<std::string> notes;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(double x, int precision = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << x;
  return os.str();
}

Json default_pools() { return Json::parse(default_scripted_profiles()); }

// ---------------------------------------------------------------------------
// 1. Boltzmann sampling distribution

void boltzmann(Check& c) {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0, 1);
  std::size_t sum_bad = 0, oracle_bad = 0, uniform_bad = 0, monotone_bad = 0;
  for (int round = 0; round < 10000; ++round) {
    bandit::BanditState s;
    const int k = static_cast<int>(rng() % 9);
    for (int i = 0; i < k; ++i) {
      bandit::ArmStats a;
      a.arm_id = "arm-" + std::to_string(i);
      a.pull_count = static_cast<std::int64_t>(rng() % 20);
      a.loss_count = rng() % 4 == 0 ? 0 : 1 + static_cast<std::int64_t>(rng() % 20);
      for (std::int64_t j = 0; j < a.loss_count; ++j) a.loss_sum += u(rng);
      s.arms.push_back(a);
    }
    s.beta = round % 10 == 0 ? 0.0 : u(rng) * 50;
    const auto d = bandit::sample_distribution(s);

    // Oracle: losses per arm, explore arm at the mean of scored means.
    std::vector<double> losses;
    double scored_sum = 0;
    int scored = 0;
    for (const auto& a : s.arms) {
      if (a.loss_count > 0) {
        scored_sum += a.loss_sum / static_cast<double>(a.loss_count);
        ++scored;
      }
    }
    const double explore = scored ? scored_sum / scored : bandit::kDefaultExplorePrior;
    for (const auto& a : s.arms) losses.push_back(a.loss_count ? a.loss_sum / static_cast<double>(a.loss_count) : explore);
    losses.push_back(explore);
    long double z = 0;
    std::vector<long double> w;
    for (double l : losses) {
      w.push_back(std::exp(-static_cast<long double>(s.beta) * l));
      z += w.back();
    }

    double total = 0;
    for (std::size_t i = 0; i < d.entries.size(); ++i) {
      total += d.entries[i].probability;
      if (std::abs(d.entries[i].probability - static_cast<double>(w[i] / z)) > 1e-12) ++oracle_bad;
    }
    if (d.entries.size() != losses.size() || std::abs(total - 1.0) > 1e-12) ++sum_bad;
    if (s.beta == 0.0) {
      for (const auto& e : d.entries) {
        if (std::abs(e.probability - 1.0 / static_cast<double>(d.entries.size())) > 1e-12) ++uniform_bad;
      }
    }
    for (std::size_t i = 0; i < d.entries.size(); ++i) {
      for (std::size_t j = 0; j < d.entries.size(); ++j) {
        if (d.entries[i].loss < d.entries[j].loss && d.entries[i].probability < d.entries[j].probability) {
          ++monotone_bad;
        }
      }
    }
  }
  c.expect(sum_bad == 0, std::to_string(sum_bad) + " states with sum off by > 1e-12");
  c.expect(oracle_bad == 0, std::to_string(oracle_bad) + " probabilities differ from the direct formula");
  c.expect(uniform_bad == 0, "beta 0 not uniform in " + std::to_string(uniform_bad) + " entries");
  c.expect(monotone_bad == 0, std::to_string(monotone_bad) + " monotonicity violations");

  bandit::BanditState ex;
  ex.beta = 1.0;
  ex.arms = {{"a", 1, 1, 0.2}, {"b", 1, 1, 0.8}};
  const auto d = bandit::sample_distribution(ex);
  const double want[] = {0.4368, 0.2397, 0.3236};
  for (int i = 0; i < 3; ++i) {
    c.expect(std::abs(d.entries[static_cast<std::size_t>(i)].probability - want[i]) <= 1e-4,
             "example entry " + std::to_string(i) + " = " + fmt(d.entries[static_cast<std::size_t>(i)].probability));
  }
  c.note("10^4 random states; example (" + fmt(d.entries[0].probability) + ", " + fmt(d.entries[1].probability) +
         ", " + fmt(d.entries[2].probability) + ")");
}

// ---------------------------------------------------------------------------
// 2. Bandit convergence on the rare-letters task

void convergence(Check& c) {
  int improved = 0, modal_arm = 0, modal_class = 0;
  std::ostringstream detail;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ScriptedBackend backend(ScriptedConfig::from_json(default_pools()), seed);
    demo::DemoConfig cfg;
    cfg.trials = 500;
    cfg.seed = seed;
    cfg.schedule = bandit::BetaSchedule::linear(0.0, 1.0, 100);
    const auto r = demo::rare_letters_demo(backend, cfg);
    const double lead = r.mean_loss(0, 100), trail = r.mean_loss(400, 500);
    if (trail < lead) ++improved;

    std::map<std::string, int> by_arm;
    std::map<double, int> by_rate;
    for (std::size_t i = 400; i < 500; ++i) {
      const auto& t = r.trials[i];
      ++by_arm[t.arm_id];
      const auto prompt = r.arm_prompts.at(static_cast<std::size_t>(t.arm_index));
      const auto profile = backend.profile_for(prompt);
      ++by_rate[profile ? profile->error_rate : -1.0];
    }
    const auto top_arm = std::max_element(by_arm.begin(), by_arm.end(),
                                          [](const auto& a, const auto& b) { return a.second < b.second; });
    const auto top_profile = backend.profile_for(
        r.arm_prompts.at(static_cast<std::size_t>(std::find(r.arm_ids.begin(), r.arm_ids.end(), top_arm->first) -
                                                  r.arm_ids.begin())));
    if (top_profile && top_profile->error_rate == 0.1) ++modal_arm;
    const auto top_rate = std::max_element(by_rate.begin(), by_rate.end(),
                                           [](const auto& a, const auto& b) { return a.second < b.second; });
    if (top_rate->first == 0.1) ++modal_class;
    detail << " " << fmt(lead, 2) << "->" << fmt(trail, 2);
  }
  c.expect(improved >= 8, "trailing mean below leading mean in only " + std::to_string(improved) + "/10 seeds");
  c.expect(modal_arm >= 7, "0.1-rate prompt modal in only " + std::to_string(modal_arm) + "/10 seeds");
  c.note("improved " + std::to_string(improved) + "/10, modal prompt 0.1-rate " + std::to_string(modal_arm) +
         "/10 (by rate class " + std::to_string(modal_class) + "/10); lead->trail" + detail.str());
}

// ---------------------------------------------------------------------------
// 3. Rare letters oracle and a perfect arm

void rare_letters(Check& c) {
  const int n = demo::rare_letters_oracle("Pack my box with five dozen liquor jugs.");
  c.expect(n == 4, "oracle returned " + std::to_string(n));
  ScriptedConfig cfg;
  PoolEntry e;
  e.prompt = "Count the words with rare letters carefully.";
  e.profile.error_rate = 0.0;
  e.profile.correct_behavior = "rare_letters_count";
  e.profile.incorrect_behavior = "rare_letters_wrong";
  cfg.pools["rare_letters"].push_back(e);
  ScriptedBackend backend(cfg, 3);
  demo::DemoConfig dc;
  dc.trials = 100;
  const auto r = demo::rare_letters_demo(backend, dc);
  double total = 0;
  for (const auto& t : r.trials) total += t.loss;
  c.expect(total == 0.0, "perfect arm cumulative loss " + fmt(total));
  c.note("oracle 4, perfect-arm loss " + fmt(total, 1) + " over 100 trials");
}

// ---------------------------------------------------------------------------
// 4 and 5. Critique alignment and the self-critique loop

SubroutineSpec summarizer_spec() {
  SubroutineSpec s;
  s.name = "summarizer";
  s.task_doc = "Summarize the letter.";
  s.input_schema = Schema({FieldSpec::text("letter_text")});
  s.output_schema = Schema({FieldSpec::text("scratch_work"), FieldSpec::text("summary")});
  return s;
}

const std::vector<RatingDimension> kQuality{{"quality", 0, 10, ""}};

ScriptedConfig loop_config(const std::string& ratings) {
  ScriptedConfig c;
  PoolEntry t;
  t.prompt = "Summarize well.";
  t.profile.correct_behavior = t.profile.incorrect_behavior = "summary_lead";
  c.pools["summarizer"].push_back(t);
  PoolEntry k;
  k.prompt = "Critique summaries.";
  k.profile.correct_behavior = k.profile.incorrect_behavior = "critique_sequence:" + ratings;
  c.pools["summarizer_critique"].push_back(k);
  return c;
}

using ArmMap = std::map<std::pair<std::string, std::string>, bandit::ArmStats>;

ArmMap all_arms(const Store& store) {
  ArmMap out;
  for (const auto& s : store.subroutines()) {
    for (const auto& a : store.arms(s.subroutine_id)) out[{s.subroutine_id, a.stats.arm_id}] = a.stats;
  }
  return out;
}

void critique_alignment(Check& c) {
  c.expect(critique_loss(0.37, 0.37) == 0.0, "(x,x) != 0");
  c.expect(critique_loss(1.0, 0.0) == 1.0, "(1,0) != 1");
  c.expect(critique_loss(0.2, 0.7) == 0.25, "(0.2,0.7) = " + fmt(critique_loss(0.2, 0.7), 17));

  Store store(":memory:");
  ScriptedBackend backend(loop_config("4,6,5"), 0);
  Engine engine(store, backend);
  const auto pair = declare_with_critique(engine, summarizer_spec(), kQuality);
  // A second critique subroutine and several letters so unrelated arms exist.
  std::vector<LoopResult> loops;
  for (int i = 0; i < 4; ++i) {
    LoopOptions o;
    o.key_prefix = "letter-" + std::to_string(i);
    loops.push_back(self_critique_loop(engine, pair,
                                       Json{{"letter_text", "Point " + std::to_string(i) + " here. And more."}}, {}, o));
  }
  const auto& rated = loops[0].best().candidate;
  const auto before = all_arms(store);
  SmeSubmission s{rated.invocation_id, Json{{"quality", 8}}, "reviewer", "submission-1", "", false};
  propagate_sme_feedback(store, s);
  const auto after = all_arms(store);

  std::set<std::pair<std::string, std::string>> expected{{rated.subroutine_id, rated.arm_id}};
  for (const auto& k : store.critiques_of(rated.invocation_id)) expected.insert({k.subroutine_id, k.arm_id});
  std::set<std::pair<std::string, std::string>> changed;
  for (const auto& [key, stats] : after) {
    if (!before.count(key) || !(before.at(key) == stats)) changed.insert(key);
  }
  c.expect(changed == expected, "arm diff touched " + std::to_string(changed.size()) + " arms, expected " +
                                    std::to_string(expected.size()));
  c.expect(before.size() == after.size(), "arm set changed");
  c.note("critique_loss identities exact; diff touched " + std::to_string(changed.size()) + " of " +
         std::to_string(after.size()) + " arms");
}

void loop_exits(Check& c) {
  struct Case {
    std::string ratings;  // critique ratings on a 0..10 scale per revision
    LoopExit exit;
    int selected;
  };
  // losses [0.6, 0.4, 0.5] and [0.9, 0.8, 0.7]
  for (const Case& k : {Case{"4,6,5", LoopExit::kNoImprovement, 2}, Case{"1,2,3", LoopExit::kMaxIters, 3}}) {
    Store store(":memory:");
    ScriptedBackend backend(loop_config(k.ratings), 0);
    Engine engine(store, backend);
    const auto pair = declare_with_critique(engine, summarizer_spec(), kQuality);
    LoopOptions o;
    o.key_prefix = "letter";
    o.config = LoopConfig{3, 0.1};
    const auto r = self_critique_loop(engine, pair, Json{{"letter_text", "One point. Another point."}}, {}, o);
    std::string losses;
    for (const auto& it : r.iterations) losses += (losses.empty() ? "" : ",") + fmt(it.loss.value_or(-1), 1);
    c.expect(r.exit == k.exit, "losses [" + losses + "] exit " + std::string(to_string(r.exit)));
    c.expect(r.selected == k.selected, "losses [" + losses + "] selected " + std::to_string(r.selected));
    c.note("[" + losses + "] -> " + std::string(to_string(r.exit)) + ", selected " + std::to_string(r.selected));
  }
}

// ---------------------------------------------------------------------------
// 6. Quote guarantee

std::vector<Letter> synthetic_letters(int n, std::uint64_t seed) {
  static const std::vector<std::string> openers{
      "Blasting at the quarry will crack the foundations of homes on Ridge Road.",
      "Our drinking water wells draw from the aquifer beneath the expansion area.",
      "Gravel trucks already back up traffic at the school crossing every morning.",
      "The wetland behind the pit is the last nesting site for herons in the valley.",
      "Silica dust settles on our gardens and the playground next to the site."};
  static const std::vector<std::string> middles{
      "The county should require independent monitoring before any permit is issued.",
      "Nobody from the company has answered our letters about this problem.",
      "Property values on our street have already fallen since the first phase.",
      "Night work would make the noise unbearable for families with small children.",
      "The environmental assessment ignores the cumulative effect of both pits."};
  static const std::vector<std::string> closers{
      "Please deny the expansion until these concerns are addressed in full.",
      "I ask the board to hold a public hearing in the evening so workers can attend.",
      "Thank you for considering the health of everyone who lives near the quarry.",
      "We deserve a clear answer about who pays when wells run dry."};
  std::mt19937_64 rng(seed);
  std::vector<Letter> out;
  for (int i = 0; i < n; ++i) {
    std::string text = openers[rng() % openers.size()];
    for (int k = static_cast<int>(rng() % 3); k >= 0; --k) text += " " + middles[rng() % middles.size()];
    text += " " + closers[rng() % closers.size()];
    char id[16];
    std::snprintf(id, sizeof id, "S%03d", i);
    out.push_back({id, text, Json::object()});
  }
  return out;
}

void quote_guarantee(Check& c) {
  auto pools = default_pools();
  pools["pools"]["extract"] = Json::array(
      {{{"prompt", "Extract every concern with exact supporting quotes."},
        {"error_rate", 0.0},
        {"correct", "extract_mixed"},
        {"incorrect", "extract_mixed"}}});
  Store store(":memory:");
  ScriptedBackend backend(ScriptedConfig::from_json(pools), 6);
  PipelineConfig pc;
  pc.batch_size = 25;
  pc.workers = 4;
  Pipeline pipeline(store, backend, EngineConfig{.seed = 6}, pc);
  const auto letters = synthetic_letters(50, 6);
  const auto run_id = pipeline.run(letters, load_guidance(kData / "guidance.json"));

  std::map<std::string, std::string> text_of;
  for (const auto& l : letters) text_of[l.letter_id] = l.text;
  std::size_t exact = 0, typo = 0, spans = 0, recompute_failures = 0, fabricated_persisted = 0, letters_ok = 0;
  std::size_t rejected = 0;
  std::map<std::string, std::pair<bool, bool>> seen;  // letter -> (exact retained, typo retained)
  for (const auto& b : store.batches(run_id)) {
    rejected += store.events(b.batch_id, "quote_rejected").size();
    for (const auto& concern : load_concerns(store, b.batch_id)) {
      const auto& text = text_of.at(concern.letter_id);
      for (const auto& q : concern.quotes) {
        ++spans;
        const auto window = text::slice(text, q.start, q.end);
        const double sim = nepa::normalized_similarity(q.raw_quote, window);
        const auto again = nepa::verify_quote(q.raw_quote, text, pc.quote_threshold);
        if (q.end > text::length(text) || q.similarity < 0.85 || std::abs(sim - q.similarity) > 1e-12 || !again ||
            again->start != q.start || again->end != q.end) {
          ++recompute_failures;
        }
        if (q.raw_quote.find("free electricity") != std::string::npos) ++fabricated_persisted;
        if (text.find(q.raw_quote) != std::string::npos) {
          ++exact;
          seen[concern.letter_id].first = true;
        } else {
          ++typo;
          seen[concern.letter_id].second = true;
        }
      }
    }
  }
  for (const auto& [_, s] : seen) letters_ok += s.first && s.second;
  c.expect(letters_ok == 50, "exact and typo quotes retained in " + std::to_string(letters_ok) + "/50 letters");
  c.expect(fabricated_persisted == 0, std::to_string(fabricated_persisted) + " fabricated quotes persisted");
  c.expect(rejected >= 50, "only " + std::to_string(rejected) + " quote rejections recorded");
  c.expect(recompute_failures == 0, std::to_string(recompute_failures) + " persisted spans fail recomputation");
  c.note(std::to_string(spans) + " spans (" + std::to_string(exact) + " exact, " + std::to_string(typo) +
         " typo), " + std::to_string(rejected) + " rejected, 0 recomputation failures required");
}

// ---------------------------------------------------------------------------
// 7. Evaluator equivalence with brute force

void evaluator_equivalence(Check& c) {
  std::mt19937_64 rng(77);
  const std::vector<std::string> words{"gravel", "trucks", "water", "dust", "noise", "Dr.", "wells", "e.g.", "road"};
  const std::vector<std::string> bins{"A", "B", "C", "D"};
  std::size_t mismatches = 0, sentences_total = 0, rounds = 0;
  for (int round = 0; round < 30; ++round, ++rounds) {
    std::vector<eval::LetterText> letters;
    std::vector<eval::TruthComment> truth;
    std::vector<eval::SystemQuote> system;
    for (int l = 0; l < 8; ++l) {
      std::string t;
      for (int s = 0, ns = 1 + static_cast<int>(rng() % 15); s < ns; ++s) {
        for (int w = 0, nw = 1 + static_cast<int>(rng() % 9); w < nw; ++w) t += (w ? " " : "") + words[rng() % words.size()];
        t += rng() % 4 == 0 ? "?  " : ". ";
      }
      const std::string id = "L" + std::to_string(l);
      const auto len = text::length(t);
      auto span = [&] {
        const std::size_t a = rng() % len;
        return eval::Span{a, a + 1 + rng() % std::min<std::size_t>(len - a, 90)};
      };
      for (int k = static_cast<int>(rng() % 5); k > 0; --k) truth.push_back({id, span(), bins[rng() % bins.size()]});
      for (int k = static_cast<int>(rng() % 5); k > 0; --k) {
        eval::SystemQuote q{id, span(), {}};
        for (const auto& b : bins) {
          if (rng() % 3 == 0) q.bins.push_back(b);
        }
        system.push_back(q);
      }
      letters.push_back({id, t});
    }
    const auto report = eval::evaluate(letters, truth, system);

    // Brute force per letter over character bitmaps.
    eval::ConfusionCounts confusion;
    eval::Counts qp, qr, bp, br;
    for (std::size_t li = 0; li < letters.size(); ++li) {
      const auto& l = letters[li];
      const auto n = text::length(l.text);
      std::vector<bool> qb(n), sb(n);
      std::set<std::string> sme_bins, sys_bins;
      for (const auto& x : truth) {
        if (x.letter_id != l.letter_id) continue;
        sme_bins.insert(x.bin_name);
        for (auto i = x.span.start; i < x.span.end; ++i) sb[i] = true;
      }
      for (const auto& x : system) {
        if (x.letter_id != l.letter_id) continue;
        sys_bins.insert(x.bins.begin(), x.bins.end());
        for (auto i = x.span.start; i < x.span.end; ++i) qb[i] = true;
      }
      const auto sentences = eval::split_sentences(l.text, l.letter_id);
      sentences_total += sentences.size();
      eval::Counts p, r;
      for (const auto& s : sentences) {
        std::size_t cq = 0, cs = 0;
        for (auto i = s.start; i < s.end; ++i) {
          cq += qb[i];
          cs += sb[i];
        }
        const bool iq = 2 * cq >= s.end - s.start, is = 2 * cs >= s.end - s.start;
        p.selected += iq;
        p.hits += iq && is;
        r.selected += is;
        r.hits += iq && is;
        if (!(iq && is)) continue;
        const eval::TruthComment* best = nullptr;
        std::size_t best_n = 0;
        for (const auto& x : truth) {
          if (x.letter_id != l.letter_id) continue;
          std::size_t k = 0;
          for (auto i = s.start; i < s.end; ++i) k += i >= x.span.start && i < x.span.end;
          if (k > best_n || (k == best_n && k > 0 && x.span.start < best->span.start)) {
            best = &x;
            best_n = k;
          }
        }
        std::set<std::string> cited;
        for (const auto& x : system) {
          if (x.letter_id != l.letter_id) continue;
          bool hit = false;
          for (auto i = s.start; i < s.end && !hit; ++i) hit = i >= x.span.start && i < x.span.end;
          if (hit) cited.insert(x.bins.begin(), x.bins.end());
        }
        for (const auto& b : cited) ++confusion[{best->bin_name, b}];
      }
      std::size_t shared = 0;
      for (const auto& b : sme_bins) shared += sys_bins.count(b);
      const auto& lr = report.letters[li];
      if (!(lr.quotes.precision == p) || !(lr.quotes.recall == r)) ++mismatches;
      if (!(lr.binning.recall == eval::Counts{sme_bins.size(), shared}) ||
          !(lr.binning.precision == eval::Counts{sys_bins.size(), shared})) {
        ++mismatches;
      }
      qp += p;
      qr += r;
      br += eval::Counts{sme_bins.size(), shared};
      bp += eval::Counts{sys_bins.size(), shared};
    }
    if (!(report.quotes.precision == qp) || !(report.quotes.recall == qr) || !(report.binning.precision == bp) ||
        !(report.binning.recall == br)) {
      ++mismatches;
    }
    if (report.confusion != confusion) ++mismatches;

    std::vector<double> lens;
    for (const auto& x : truth) lens.push_back(static_cast<double>(x.span.end - x.span.start));
    if (lens.size() >= 2) {
      double mu = 0, var = 0;
      for (double x : lens) mu += x;
      mu /= static_cast<double>(lens.size());
      for (double x : lens) var += (x - mu) * (x - mu);
      const double expected = std::sqrt(var / static_cast<double>(lens.size())) / mu * 100;
      if (std::abs(*report.sme_length_variability - expected) > 1e-9 * expected) ++mismatches;
    }
  }
  c.expect(mismatches == 0, std::to_string(mismatches) + " mismatches against brute force");
  const double lv = *eval::length_variability({10, 20, 30});
  c.expect(std::abs(lv - 40.8) <= 0.05, "length_variability([10,20,30]) = " + fmt(lv, 3));
  c.note(std::to_string(rounds) + " corpora, " + std::to_string(sentences_total) + " sentences; [10,20,30] -> " +
         fmt(lv, 2) + "%");
}

// ---------------------------------------------------------------------------
// 8. Audit closure, acyclicity, replay

void audit(Check& c) {
  Store store(":memory:");
  ScriptedBackend backend(ScriptedConfig::from_json(default_pools()), 8);
  PipelineConfig pc;
  pc.batch_size = 10;
  pc.project_context = "Quarry expansion permit.";
  Pipeline pipeline(store, backend, EngineConfig{.seed = 8}, pc);
  const auto run_id = pipeline.run(load_corpus(kData / "letters.jsonl"), load_guidance(kData / "guidance.json"));

  std::size_t summaries = 0, reaching = 0;
  for (const auto& b : store.batches(run_id)) {
    for (const auto& s : load_bin_summaries(store, b.batch_id)) {
      ++summaries;
      const auto t = store.trace(s.invocation_id);
      std::set<std::string> stages;
      std::set<std::string> ingested;
      for (const auto& n : t.nodes) {
        const auto sub = store.subroutine(n.invocation.subroutine_id);
        if (sub) stages.insert(sub->name);
        if (n.invocation.role == "ingest") ingested.insert(n.invocation.input.value("letter_id", ""));
      }
      std::set<std::string> cited;
      for (const auto& ci : s.citations) cited.insert(ci.letter_id);
      bool ok = stages.count("summarize") && stages.count("extract") && stages.count("bin") && !ingested.empty();
      for (const auto& l : cited) ok = ok && ingested.count(l);
      reaching += ok;
    }
  }
  c.expect(summaries > 0, "no bin summaries");
  c.expect(reaching == summaries, std::to_string(summaries - reaching) + " bin-summary traces miss an ancestor stage");

  // Kahn's algorithm over every recorded edge.
  std::map<std::string, int> indegree;
  std::map<std::string, std::vector<std::string>> children;
  for (const auto& inv : store.invocations()) indegree[inv.invocation_id];
  const auto edges = store.edges();
  for (const auto& e : edges) {
    ++indegree[e.child];
    children[e.parent].push_back(e.child);
  }
  std::vector<std::string> ready;
  for (const auto& [id, d] : indegree) {
    if (d == 0) ready.push_back(id);
  }
  std::size_t visited = 0;
  while (!ready.empty()) {
    const auto id = ready.back();
    ready.pop_back();
    ++visited;
    for (const auto& ch : children[id]) {
      if (--indegree[ch] == 0) ready.push_back(ch);
    }
  }
  c.expect(visited == indegree.size(), "dependency graph has a cycle");

  std::size_t replayed = 0, mismatched = 0;
  for (const auto& inv : store.invocations()) {
    if (inv.status != InvocationStatus::kSucceeded || inv.arm_id.empty()) continue;
    ++replayed;
    if (!pipeline.engine().replay(inv.invocation_id).matches()) ++mismatched;
  }
  c.expect(mismatched == 0, std::to_string(mismatched) + " replays differ");
  c.note(std::to_string(summaries) + " bin-summary traces reach ingest; " + std::to_string(indegree.size()) +
         " nodes, " + std::to_string(edges.size()) + " edges acyclic; " + std::to_string(replayed) +
         " replays byte-exact");
}

// ---------------------------------------------------------------------------
// 9. Durability under SIGKILL

int run_cli(const std::vector<std::string>& args, std::optional<std::chrono::milliseconds> kill_after, bool* killed) {
  const pid_t pid = fork();
  if (pid == 0) {
    const int devnull = ::open("/dev/null", O_WRONLY);
    if (devnull >= 0) {
      dup2(devnull, 1);
      dup2(devnull, 2);
    }
    std::vector<char*> argv;
    argv.push_back(const_cast<char*>(kCli.c_str()));
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    execv(kCli.c_str(), argv.data());
    _exit(127);
  }
  if (kill_after) {
    const auto deadline = std::chrono::steady_clock::now() + *kill_after;
    int status = 0;
    while (std::chrono::steady_clock::now() < deadline) {
      if (waitpid(pid, &status, WNOHANG) == pid) {
        if (killed) *killed = false;
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
    kill(pid, SIGKILL);
    waitpid(pid, &status, 0);
    if (killed) *killed = WIFSIGNALED(status) && WTERMSIG(status) == SIGKILL;
    return -1;
  }
  int status = 0;
  waitpid(pid, &status, 0);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> outputs_by_key(const Store& store) {
  std::map<std::string, std::string> out;
  for (const auto& inv : store.invocations()) out[inv.idempotency_key.value_or(inv.invocation_id)] = inv.raw_output;
  return out;
}

void durability(Check& c) {
  const auto dir = fs::temp_directory_path() / ("lmsub_durability_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto pools = default_pools();
  pools["latency_ms"] = 3;  // stretch the run so kills land mid-flight
  {
    std::ofstream(dir / "pools.json") << pools.dump();
  }
  auto args = [&](const fs::path& store) {
    return std::vector<std::string>{"run",        "--corpus",          (kData / "letters.jsonl").string(),
                                    "--guidance", (kData / "guidance.json").string(),
                                    "--context",  (kData / "context.txt").string(),
                                    "--batch-size", "5", "--workers", "1", "--seed", "9",
                                    "--scripted-config", (dir / "pools.json").string(),
                                    "--store", store.string()};
  };

  const auto ref_path = dir / "reference.db";
  const auto t0 = std::chrono::steady_clock::now();
  if (run_cli(args(ref_path), std::nullopt, nullptr) != 0) {
    c.expect(false, "reference run failed");
    return;
  }
  const auto ref_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0);
  std::map<std::string, std::string> reference;
  {
    Store ref(ref_path.string());
    reference = outputs_by_key(ref);
  }

  std::mt19937_64 rng(2024);
  int passing = 0, attempts = 0;
  std::vector<std::string> problems;
  while (passing < 10 && attempts < 40) {
    ++attempts;
    const auto path = dir / ("trial-" + std::to_string(attempts) + ".db");
    const auto delay = std::chrono::milliseconds(5 + static_cast<long>(rng() % static_cast<std::uint64_t>(std::max<long>(ref_ms.count() - 10, 10))));
    bool killed = false;
    run_cli(args(path), delay, &killed);
    if (!killed) continue;  // finished before the kill; not a trial
    if (run_cli(args(path), std::nullopt, nullptr) != 0) {
      problems.push_back("restart failed after kill at " + std::to_string(delay.count()) + "ms");
      continue;
    }
    Store store(path.string());
    TaskQueue queue(store);
    std::vector<std::string> bad;
    // No duplicate invocations: one per idempotency key, same set and
    // outputs as the uninterrupted run.
    const auto invs = store.invocations();
    std::set<std::string> keys;
    for (const auto& inv : invs) {
      if (inv.idempotency_key && !keys.insert(*inv.idempotency_key).second) bad.push_back("duplicate key");
    }
    if (outputs_by_key(store) != reference) bad.push_back("invocations differ from the uninterrupted run");
    // No lost tasks.
    if (queue.unfinished() != 0) bad.push_back("unfinished tasks");
    if (!queue.tasks(TaskState::kDead).empty()) bad.push_back("dead tasks");
    for (const auto& b : store.batches()) {
      if (b.state == "processing") bad.push_back("batch still processing");
      for (auto stage : {kStageSummarize, kStageExtract}) {
        if (store.list_review_items(b.batch_id, stage).size() != b.letter_ids.size()) bad.push_back("missing item");
      }
    }
    if (bad.empty()) {
      ++passing;
    } else {
      problems.push_back("kill at " + std::to_string(delay.count()) + "ms: " + bad.front());
    }
  }
  c.expect(passing == 10 && problems.empty(),
           std::to_string(passing) + " passing trials; " + (problems.empty() ? "" : problems.front()));
  c.note(std::to_string(passing) + " kill/restart trials (reference run " + std::to_string(ref_ms.count()) +
         "ms) match the uninterrupted run");
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// 10. Batch freeze

void batch_freeze(Check& c) {
  Store store(":memory:");
  ScriptedBackend backend(ScriptedConfig::from_json(default_pools()), 10);
  PipelineConfig pc;
  pc.batch_size = 5;
  Pipeline pipeline(store, backend, EngineConfig{.seed = 10}, pc);
  Service service(store);
  const auto& summarize = pipeline.stage(kStageSummarize);
  const std::string sid = summarize.target.subroutine_id;

  std::map<std::string, Snapshot> frozen;  // sid -> batch-0 snapshot
  std::string first_batch;
  bandit::BanditState live_after_feedback;
  int status = 0;
  bool posted = false;
  pipeline.run(load_corpus(kData / "letters.jsonl"), load_guidance(kData / "guidance.json"),
               [&](const BatchRecord& b) {
                 if (b.ordinal != 0) return;
                 first_batch = b.batch_id;
                 for (const auto& s : store.subroutines()) {
                   if (auto snap = store.snapshot(b.batch_id, s.subroutine_id)) frozen[s.subroutine_id] = *snap;
                 }
                 const auto items = store.list_review_items(b.batch_id, kStageSummarize);
                 for (const auto& item : items) {
                   if (!item.invocation) continue;
                   Json body{{"invocation_id", item.invocation->invocation_id},
                             {"reviewer_id", "sme-1"},
                             {"submission_id", "review-" + item.item_key},
                             {"ratings", {{"coverage", 1}, {"brevity", 1}}}};
                   const auto r = service.submit_feedback(body.dump(), "");
                   status = r.status;
                   posted = posted || r.status == 201;
                 }
                 live_after_feedback = store.bandit_state(sid);
               });
  c.expect(posted, "feedback not accepted (status " + std::to_string(status) + ")");
  std::size_t changed = 0;
  for (const auto& [s, snap] : frozen) {
    const auto now = store.snapshot(first_batch, s);
    if (!now || !(now->state.arms == snap.state.arms) || now->snapshot_id != snap.snapshot_id) ++changed;
  }
  c.expect(!frozen.empty() && changed == 0, std::to_string(changed) + " batch-1 snapshots changed");

  const auto batches = store.batches();
  std::optional<Snapshot> second;
  for (const auto& b : batches) {
    if (b.ordinal == 1) second = store.snapshot(b.batch_id, sid);
  }
  c.expect(second.has_value(), "no batch-2 snapshot");
  if (!second) return;
  c.expect(second->state.arms == live_after_feedback.arms, "batch-2 snapshot does not include the feedback");
  std::int64_t sme_losses = 0;
  for (const auto& f : store.feedback("sme")) sme_losses += f.loss == 1.0;
  std::int64_t before = 0, after = 0;
  for (const auto& a : frozen.at(sid).state.arms) before += a.loss_count;
  for (const auto& a : second->state.arms) after += a.loss_count;
  c.expect(after >= before + sme_losses, "batch-2 loss counts do not include the reviewer losses");
  const auto d0 = bandit::sample_distribution(frozen.at(sid).state);
  const auto d1 = bandit::sample_distribution(second->state);
  bool differs = d0.entries.size() != d1.entries.size();
  for (std::size_t i = 0; !differs && i < d0.entries.size(); ++i) differs = d0.entries[i].loss != d1.entries[i].loss;
  c.expect(differs, "batch-2 sampling losses identical to batch-1");
  c.note(std::to_string(frozen.size()) + " batch-1 snapshots unchanged; " + std::to_string(sme_losses) +
         " reviewer ratings visible in batch-2 statistics");
}

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;  // 0 = no runtime bound
  std::function<void(Check&)> fn;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "boltzmann sampling distribution", 10, boltzmann},
      {2, "bandit convergence on rare letters", 30, convergence},
      {3, "rare letters oracle and perfect arm", 5, rare_letters},
      {4, "critique alignment and feedback propagation", 0, critique_alignment},
      {5, "self-critique loop exits", 0, loop_exits},
      {6, "quote guarantee", 0, quote_guarantee},
      {7, "evaluator equals brute force", 0, evaluator_equivalence},
      {8, "audit closure, acyclicity, replay", 0, audit},
      {9, "durability under worker kill", 0, durability},
      {10, "batch snapshot freeze", 0, batch_freeze},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& k : criteria) {
    if (!only.empty() && !only.count(k.id)) continue;
    Check check;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      k.fn(check);
    } catch (const std::exception& e) {
      check.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (k.budget_seconds > 0 && secs >= k.budget_seconds) {
      check.failures.push_back("took " + fmt(secs, 2) + "s, limit " + fmt(k.budget_seconds, 0) + "s");
    }
    const bool ok = check.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << k.id << ": " << k.name << " (" << fmt(secs, 2) << "s)";
    for (const auto& n : check.notes) std::cout << " | " << n;
    for (const auto& f : check.failures) std::cout << " | " << f;
    std::cout << "\n" << std::flush;
  }
  return failed == 0 ? 0 : 1;
}
