#include "lmsub/demo.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "lmsub/error.hpp"
#include "lmsub/hashing.hpp"

namespace lmsub::demo {

namespace {

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

std::string num(double x, int precision = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, x);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(ErrorCode::kInvalidArgument, "cannot write " + p.string());
  out << content;
}

struct Plot {
  double width = 720, height = 360, left = 56, right = 16, top = 32, bottom = 44;
  double x_max = 1, y_min = 0, y_max = 1;
  std::ostringstream body;

  double px(double x) const { return left + (width - left - right) * (x / x_max); }
  double py(double y) const { return top + (height - top - bottom) * (1 - (y - y_min) / (y_max - y_min)); }

  std::string render(const std::string& title, const std::string& x_label, const std::string& y_label,
                     const std::vector<double>& y_ticks) const {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width, 0) << "\" height=\"" << num(height, 0)
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << num(width / 2, 0) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << title
       << "</text>\n";
    os << "<line x1=\"" << num(left) << "\" y1=\"" << num(py(y_min)) << "\" x2=\"" << num(width - right)
       << "\" y2=\"" << num(py(y_min)) << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << num(left) << "\" y1=\"" << num(top) << "\" x2=\"" << num(left) << "\" y2=\""
       << num(py(y_min)) << "\" stroke=\"black\"/>\n";
    for (double t : y_ticks) {
      os << "<text x=\"" << num(left - 6) << "\" y=\"" << num(py(t) + 4) << "\" text-anchor=\"end\">"
         << (t == std::floor(t) ? num(t, 0) : num(t, 1)) << "</text>\n";
    }
    const int steps = 5;
    for (int i = 0; i <= steps; ++i) {
      const double x = x_max * i / steps;
      os << "<text x=\"" << num(px(x)) << "\" y=\"" << num(py(y_min) + 16) << "\" text-anchor=\"middle\">"
         << num(std::round(x), 0) << "</text>\n";
    }
    os << "<text x=\"" << num(width / 2, 0) << "\" y=\"" << num(height - 6) << "\" text-anchor=\"middle\">"
       << x_label << "</text>\n";
    os << "<text x=\"14\" y=\"" << num(height / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
       << num(height / 2) << ")\">" << y_label << "</text>\n";
    os << body.str() << "</svg>\n";
    return os.str();
  }
};

}  // namespace

int rare_letters_oracle(std::string_view sentence, std::string_view letters) {
  const auto rare = upper(letters);
  int count = 0;
  bool in_word = false, hit = false;
  for (std::size_t i = 0; i <= sentence.size(); ++i) {
    const bool space = i == sentence.size() || std::isspace(static_cast<unsigned char>(sentence[i]));
    if (space) {
      if (in_word && hit) ++count;
      in_word = hit = false;
      continue;
    }
    in_word = true;
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(sentence[i])));
    if (rare.find(c) != std::string::npos) hit = true;
  }
  return count;
}

const std::vector<std::string>& pangram_pool() {
  static const std::vector<std::string> pool{
      "The quick brown fox jumps over the lazy dog.",
      "Pack my box with five dozen liquor jugs.",
      "Sphinx of black quartz, judge my vow.",
      "How vexingly quick daft zebras jump!",
      "The five boxing wizards jump quickly.",
      "Jackdaws love my big sphinx of quartz.",
      "Waltz, bad nymph, for quick jigs vex.",
      "Quick zephyrs blow, vexing daft Jim.",
      "Two driven jocks help fax my big quiz.",
      "Five quacking zephyrs jolt my wax bed.",
      "The jay, pig, fox, zebra and my wolves quack!",
      "Crazy Frederick bought many very exquisite opal jewels.",
      "We promptly judged antique ivory buckles for the next prize.",
      "A mad boxer shot a quick, gloved jab to the jaw of his dizzy opponent.",
      "Jaded zombies acted quaintly but kept driving their oxen forward.",
      "Amazingly few discotheques provide jukeboxes.",
      "Heavy boxes perform quick waltzes and jigs.",
      "Bright vixens jump; dozy fowl quack.",
      "Grumpy wizards make toxic brew for the evil queen and jack.",
      "Just keep examining every low bid quoted for zinc etchings.",
  };
  return pool;
}

SubroutineSpec rare_letters_spec(std::string_view letters) {
  SubroutineSpec s;
  s.name = "rare_letters";
  s.task_doc = "Count the words in the text that contain at least one of the letters " + upper(letters) +
               " (either case). A word is a run of non-space characters.";
  s.input_schema = Schema({FieldSpec::text("given_text", "text to inspect")});
  s.output_schema = Schema({FieldSpec::text("scratch_work", "the matching words, listed one by one"),
                            FieldSpec::integer("character_count", "number of matching words")});
  return s;
}

std::vector<double> gaussian_smooth(const std::vector<double>& xs, double sigma) {
  if (xs.empty() || !(sigma > 0)) return xs;
  const auto radius = static_cast<long>(std::ceil(4 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (long k = -radius; k <= radius; ++k) {
    const double w = std::exp(-0.5 * (k / sigma) * (k / sigma));
    kernel[static_cast<std::size_t>(k + radius)] = w;
    total += w;
  }
  for (auto& w : kernel) w /= total;
  const auto n = static_cast<long>(xs.size());
  std::vector<double> out(xs.size(), 0.0);
  for (long i = 0; i < n; ++i) {
    double acc = 0;
    for (long k = -radius; k <= radius; ++k) {
      const long j = ((i + k) % n + n) % n;
      acc += kernel[static_cast<std::size_t>(k + radius)] * xs[static_cast<std::size_t>(j)];
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

double DemoResult::mean_loss(std::size_t from, std::size_t to) const {
  to = std::min(to, trials.size());
  if (from >= to) return 0;
  double s = 0;
  for (std::size_t i = from; i < to; ++i) s += trials[i].loss;
  return s / static_cast<double>(to - from);
}

void DemoResult::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ostringstream loss_csv, arm_csv;
  loss_csv << "trial,beta,expected,answer,loss,smoothed_loss\n";
  arm_csv << "trial,arm_index,arm_id,invocation_id,sentence\n";
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto& t = trials[i];
    loss_csv << t.trial << "," << num(t.beta, 4) << "," << t.expected << ","
             << (t.answer ? std::to_string(*t.answer) : std::string()) << "," << num(t.loss, 1) << ","
             << num(smoothed_loss[i], 6) << "\n";
    arm_csv << t.trial << "," << t.arm_index << "," << t.arm_id << "," << t.invocation_id << ","
            << csv_field(t.sentence) << "\n";
  }
  write_file(dir / "loss_trace.csv", loss_csv.str());
  write_file(dir / "arm_trace.csv", arm_csv.str());

  Json arms = Json::array();
  for (std::size_t i = 0; i < arm_ids.size(); ++i) {
    arms.push_back({{"arm_index", i}, {"arm_id", arm_ids[i]}, {"prompt", arm_prompts[i]}});
  }
  write_file(dir / "arms.json", Json{{"subroutine_id", subroutine_id}, {"arms", arms}}.dump(2) + "\n");

  const double n = static_cast<double>(std::max<std::size_t>(trials.size(), 1));
  {
    Plot p;
    p.x_max = n;
    p.y_min = -0.05;
    p.y_max = 1.05;
    for (const auto& t : trials) {
      p.body << "<circle cx=\"" << num(p.px(t.trial)) << "\" cy=\"" << num(p.py(t.loss)) << "\" r=\"2\" fill=\"#999\"/>\n";
    }
    p.body << "<polyline fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < trials.size(); ++i) {
      p.body << (i ? " " : "") << num(p.px(trials[i].trial)) << "," << num(p.py(smoothed_loss[i]));
    }
    p.body << "\"/>\n";
    write_file(dir / "loss.svg", p.render("Loss per trial (smoothed, sigma 15)", "trial", "loss", {0, 0.5, 1}));
  }
  {
    Plot p;
    p.x_max = n;
    p.y_min = -0.5;
    p.y_max = std::max<double>(static_cast<double>(arm_ids.size()) - 0.5, 0.5);
    for (const auto& t : trials) {
      if (t.arm_index < 0) continue;
      p.body << "<circle cx=\"" << num(p.px(t.trial)) << "\" cy=\"" << num(p.py(t.arm_index)) << "\" r=\"2.5\" fill=\""
             << (t.loss == 0 ? "#2a9d4b" : "#c0392b") << "\"/>\n";
    }
    std::vector<double> ticks;
    const std::size_t stride = std::max<std::size_t>(1, arm_ids.size() / 10);
    for (std::size_t i = 0; i < arm_ids.size(); i += stride) ticks.push_back(static_cast<double>(i));
    write_file(dir / "arms.svg", p.render("Prompt selected per trial", "trial", "prompt index", ticks));
  }
}

DemoResult rare_letters_demo(Engine& engine, const DemoConfig& config) {
  if (config.trials < 0) throw Error(ErrorCode::kInvalidArgument, "trials must be nonnegative");
  const auto handle = engine.declare(rare_letters_spec(config.letters));
  DemoResult result;
  result.subroutine_id = handle.subroutine_id;
  const auto& pool = pangram_pool();
  std::map<std::string, int> index_of;
  std::vector<double> losses;
  for (int i = 0; i < config.trials; ++i) {
    DemoTrial t;
    t.trial = i;
    t.beta = engine.active_beta(handle.subroutine_id);
    t.sentence = pool[mix64(config.seed ^ hash64("sentence/" + std::to_string(i))) % pool.size()];
    t.expected = rare_letters_oracle(t.sentence, config.letters);
    InvokeOptions opts;
    opts.idempotency_key = "demo/" + std::to_string(config.seed) + "/trial-" + std::to_string(i);
    Invocation inv;
    try {
      inv = engine.invoke(handle, Json{{"given_text", t.sentence}}, {}, opts);
    } catch (const Error&) {
      // Synthesis failed before any arm existed; nothing to attribute.
      t.loss = 1.0;
      t.arm_index = -1;
      losses.push_back(t.loss);
      result.trials.push_back(std::move(t));
      continue;
    }
    t.invocation_id = inv.invocation_id;
    t.arm_id = inv.arm_id;
    auto [it, fresh] = index_of.emplace(t.arm_id, static_cast<int>(result.arm_ids.size()));
    if (fresh) {
      result.arm_ids.push_back(t.arm_id);
      const auto arm = engine.store().arm(handle.subroutine_id, t.arm_id);
      result.arm_prompts.push_back(arm ? arm->prompt : std::string());
    }
    t.arm_index = it->second;
    if (inv.status == InvocationStatus::kSucceeded && inv.output) {
      // Failed invocations already carry a system loss of 1.
      const auto& out = *inv.output;
      if (out.contains("character_count") && out["character_count"].is_number_integer()) {
        t.answer = out["character_count"].get<std::int64_t>();
      }
      t.loss = t.answer && *t.answer == t.expected ? 0.0 : 1.0;
      FeedbackRecord fb;
      fb.invocation_id = inv.invocation_id;
      fb.source = "oracle";
      fb.loss = t.loss;
      fb.ratings = Json{{"expected", t.expected}};
      fb.dedup_key = "oracle:" + inv.invocation_id;
      engine.store().record_feedback(fb, {{handle.subroutine_id, t.arm_id, t.loss}});
    } else {
      t.loss = 1.0;
    }
    losses.push_back(t.loss);
    result.trials.push_back(std::move(t));
  }
  result.smoothed_loss = gaussian_smooth(losses, config.sigma);
  return result;
}

DemoResult rare_letters_demo(Backend& backend, const DemoConfig& config) {
  Store store(":memory:");
  EngineConfig ec;
  ec.schedule = config.schedule;
  ec.seed = config.seed;
  Engine engine(store, backend, ec);
  return rare_letters_demo(engine, config);
}

}  // namespace lmsub::demo
