#include "lmsub/backend.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <thread>

#include "lmsub/error.hpp"
#include "lmsub/hashing.hpp"
#include "lmsub/prompt_format.hpp"

namespace lmsub {

ValidatedGeneration generate_validated(Backend& backend, GenerationRequest request, const Schema& output_schema,
                                       int max_retries) {
  ValidatedGeneration out;
  const int first = request.attempt;
  for (int attempt = first; attempt <= first + max_retries; ++attempt) {
    request.attempt = attempt;
    out.attempt = attempt;
    try {
      out.raw_text = backend.generate(request).raw_text;
    } catch (const Error& e) {
      out.error = std::string(to_string(e.code())) + ": " + e.what();
      return out;
    }
    auto result = validate_payload_text(output_schema, out.raw_text);
    if (result.ok()) {
      out.record = std::move(result.record);
      return out;
    }
    out.violations.push_back(std::string(to_string(result.violation->reason)) + " at " + result.violation->field +
                             ": " + result.violation->message);
  }
  out.error = "constraint-violation: " + std::to_string(max_retries + 1) + " attempts failed validation; last: " +
              out.violations.back();
  return out;
}

// ---------------------------------------------------------------------------
// Generators

namespace {

std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

// Crude sentence split for canned outputs: break after . ! ? followed by
// whitespace. Returned sentences are exact substrings of the text.
std::vector<std::string> rough_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  auto push = [&](std::size_t end) {
    auto s = text.substr(start, end - start);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    if (!s.empty()) out.emplace_back(s);
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') &&
        (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1])))) {
      push(i + 1);
      start = i + 1;
    }
  }
  push(text.size());
  return out;
}

Json default_value(const Json& field) {
  const std::string type = field.value("type", "string");
  if (field.contains("enum")) return field["enum"][0];
  if (type == "string") return "";
  if (type == "integer") return field.contains("minimum") ? field["minimum"] : Json(0);
  if (type == "array") {
    Json arr = Json::array();
    for (std::int64_t i = 0; i < field.value("minItems", std::int64_t{0}); ++i) arr.push_back(default_value(field["items"]));
    return arr;
  }
  Json obj = Json::object();
  if (field.contains("properties")) {
    for (const auto& [k, v] : field["properties"].items()) obj[k] = default_value(v);
  }
  return obj;
}

// Fills declared fields the generator left out.
void fill_missing(Json& out, const Json& constraint) {
  if (!constraint.contains("properties")) return;
  for (const auto& [k, v] : constraint["properties"].items()) {
    if (!out.contains(k)) out[k] = default_value(v);
  }
}

std::string section_or_empty(const PayloadSections& s, std::string_view name) {
  const auto* v = find_section(s, name);
  return v ? *v : std::string();
}

// Text of the first section, used when the expected field name is absent.
std::string primary_text(const PayloadSections& s, std::string_view preferred) {
  if (const auto* v = find_section(s, preferred)) return *v;
  return s.empty() ? std::string() : s.front().second;
}

Json parse_or(const std::string& text, Json fallback) {
  auto j = Json::parse(text, nullptr, false);
  return j.is_discarded() ? fallback : j;
}

int revision_of(const Json& candidate) {
  if (!candidate.is_object() || !candidate.contains("scratch_work") || !candidate["scratch_work"].is_string()) {
    return 0;
  }
  const auto s = candidate["scratch_work"].get<std::string>();
  if (s.rfind("[rev ", 0) != 0) return 0;
  return std::atoi(s.c_str() + 5);
}

std::vector<std::int64_t> parse_int_list(std::string_view arg) {
  std::vector<std::int64_t> out;
  std::string cur;
  for (char c : std::string(arg) + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stoll(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  return out;
}

std::string first_integer_field(const Json& constraint, std::string_view preferred) {
  if (!constraint.contains("properties")) return std::string(preferred);
  if (constraint["properties"].contains(std::string(preferred))) return std::string(preferred);
  for (const auto& [k, v] : constraint["properties"].items()) {
    if (v.value("type", "") == "integer") return k;
  }
  return std::string(preferred);
}

Json rare_letters(const PayloadSections& s, const Json& constraint, std::string_view letters, bool wrong,
                  std::uint64_t draw) {
  const std::string rare = upper(letters.empty() ? std::string("QWXZ") : std::string(letters));
  std::vector<std::string> hits;
  for (const auto& w : words_of(primary_text(s, "given_text"))) {
    if (upper(w).find_first_of(rare) != std::string::npos) hits.push_back(w);
  }
  std::int64_t count = static_cast<std::int64_t>(hits.size());
  if (wrong) count += 1 + static_cast<std::int64_t>(draw % 2);
  std::string scratch = "Words containing any of " + rare + ":";
  for (const auto& h : hits) scratch += " " + h;
  Json out = Json::object();
  out["scratch_work"] = scratch;
  out[first_integer_field(constraint, "character_count")] = count;
  return out;
}

Json summary_lead(const PayloadSections& s, std::string_view arg) {
  const std::size_t n = arg.empty() ? 2 : static_cast<std::size_t>(std::stoul(std::string(arg)));
  const auto sentences = rough_sentences(primary_text(s, "letter_text"));
  std::string summary;
  for (std::size_t i = 0; i < sentences.size() && i < n; ++i) summary += (i ? " " : "") + sentences[i];
  Json out = Json::object();
  out["scratch_work"] = "Lead sentences of the letter.";
  out["summary"] = "The commenter writes: " + summary;
  return out;
}

std::string with_typo(std::string quote) {
  // Substitute one ASCII letter near the middle.
  for (std::size_t off = 0; off < quote.size(); ++off) {
    const std::size_t i = (quote.size() / 2 + off) % quote.size();
    if (std::isalpha(static_cast<unsigned char>(quote[i]))) {
      quote[i] = quote[i] == 'e' ? 'a' : 'e';
      break;
    }
  }
  return quote;
}

// Sentences shorter than this are too short to quote.
bool text_length_ok(const std::string& sentence) { return sentence.size() >= 12; }

constexpr const char* kFabricatedQuote =
    "The applicant has promised free electricity to every household in the county for fifty years.";

Json concern(const std::string& statement, std::vector<std::string> quotes) {
  return Json{{"statement", statement}, {"quotes", quotes}};
}

// mode: exact | fabricated | typo | mixed
Json extract(const PayloadSections& s, std::string_view mode, std::size_t n) {
  const auto sentences = rough_sentences(primary_text(s, "letter_text"));
  Json concerns = Json::array();
  for (std::size_t i = 0; i < sentences.size() && concerns.size() < n; ++i) {
    if (text_length_ok(sentences[i])) {
      const std::string statement = "The commenter states: " + sentences[i];
      if (mode == "typo") {
        concerns.push_back(concern(statement, {with_typo(sentences[i])}));
      } else {
        concerns.push_back(concern(statement, {sentences[i]}));
      }
    }
  }
  if (mode == "fabricated") {
    concerns.push_back(concern("The commenter expects free electricity.", {kFabricatedQuote}));
  }
  if (mode == "mixed" && !sentences.empty()) {
    const auto& last = sentences.back();
    concerns.push_back(concern("The commenter also states: " + last, {with_typo(last)}));
    concerns.push_back(concern("The commenter expects free electricity.", {kFabricatedQuote}));
  }
  Json out = Json::object();
  out["scratch_work"] = "Concerns taken from the letter's sentences.";
  out["concerns"] = concerns;
  return out;
}

std::vector<std::string> assignment_keys(const Json& constraint) {
  std::vector<std::string> keys;
  if (constraint.contains("properties") && constraint["properties"].contains("assignments")) {
    const auto& a = constraint["properties"]["assignments"];
    if (a.contains("properties")) {
      for (const auto& [k, v] : a["properties"].items()) keys.push_back(k);
    }
  }
  return keys;
}

std::vector<std::string> bin_names(const PayloadSections& s, const Json& constraint) {
  std::vector<std::string> names;
  const auto bins = parse_or(section_or_empty(s, "bins"), Json::array());
  for (const auto& b : bins) {
    if (b.is_object() && b.contains("name")) names.push_back(b["name"].get<std::string>());
  }
  if (names.empty()) {
    // Fall back to the enumeration in the constraint.
    for (const auto& key : assignment_keys(constraint)) {
      const auto& item = constraint["properties"]["assignments"]["properties"][key]["items"];
      if (item.contains("enum")) return item["enum"].get<std::vector<std::string>>();
    }
  }
  return names;
}

Json bin(const PayloadSections& s, const Json& constraint, std::string_view mode, std::uint64_t draw) {
  const auto names = bin_names(s, constraint);
  const auto concerns = parse_or(section_or_empty(s, "concerns"), Json::array());
  Json assignments = Json::object();
  std::size_t index = 0;
  for (const auto& key : assignment_keys(constraint)) {
    std::string statement;
    for (const auto& c : concerns) {
      if (c.value("key", "") == key) statement = lower(c.value("statement", ""));
    }
    std::vector<std::string> chosen;
    if (mode == "unknown") {
      chosen.push_back("not_a_bin");
    } else if (!names.empty()) {
      if (mode == "keyword") {
        for (const auto& name : names) {
          std::string token;
          bool hit = false;
          for (char c : lower(name) + "_") {
            if (c == '_' || c == ' ' || c == '-') {
              if (token.size() >= 4 && statement.find(token) != std::string::npos) hit = true;
              token.clear();
            } else {
              token.push_back(c);
            }
          }
          if (hit) chosen.push_back(name);
        }
      }
      if (chosen.empty()) chosen.push_back(names[mix64(draw + index) % names.size()]);
    }
    assignments[key] = chosen;
    ++index;
  }
  Json out = Json::object();
  out["scratch_work"] = "Matched concern wording against bin names.";
  out["assignments"] = assignments;
  return out;
}

Json bin_summary(const PayloadSections& s, bool foreign) {
  const std::string bin_name = section_or_empty(s, "bin_name");
  const auto concerns = parse_or(section_or_empty(s, "concerns"), Json::array());
  std::string summary = "Commenters raised " + std::to_string(concerns.size()) + " concern(s) about " + bin_name + ".";
  Json citations = Json::array();
  for (const auto& c : concerns) {
    summary += " " + c.value("statement", "");
    if (citations.size() < 5 && c.contains("quotes") && !c["quotes"].empty()) {
      citations.push_back({{"letter_id", foreign ? std::string("letter-not-assigned") : c.value("letter_id", "")},
                           {"quote", c["quotes"][0]}});
    }
  }
  Json out = Json::object();
  out["scratch_work"] = "Summary assembled from the assigned concerns.";
  out["summary"] = summary;
  out["citations"] = citations;
  return out;
}

Json critique(const PayloadSections& s, const Json& constraint, std::string_view mode, std::string_view arg,
              std::uint64_t draw) {
  const auto target_output = parse_or(section_or_empty(s, "output"), Json::object());
  const int rev = std::max(1, revision_of(target_output));
  Json out = Json::object();
  out["explanation"] = "Assessment of revision " + std::to_string(rev) + ".";
  if (!constraint.contains("properties")) return out;
  const auto sequence = parse_int_list(arg);
  for (const auto& [name, field] : constraint["properties"].items()) {
    if (name == "explanation" || !field.contains("minimum")) continue;
    const auto lo = field["minimum"].get<std::int64_t>();
    const auto hi = field["maximum"].get<std::int64_t>();
    std::int64_t rating = lo;
    if (mode == "sequence" && !sequence.empty()) {
      rating = sequence[std::min<std::size_t>(static_cast<std::size_t>(rev), sequence.size()) - 1];
    } else if (mode == "fixed" && !sequence.empty()) {
      rating = sequence.front();
    } else {
      rating = lo + static_cast<std::int64_t>(mix64(draw ^ hash64(name)) % static_cast<std::uint64_t>(hi - lo + 1));
    }
    out[name] = std::clamp(rating, lo, hi);
  }
  return out;
}

}  // namespace

std::string run_generator(std::string_view behavior, std::string_view user_payload, const Json& constraint,
                          std::uint64_t draw) {
  const auto colon = behavior.find(':');
  const std::string name(behavior.substr(0, colon));
  const std::string arg = colon == std::string_view::npos ? std::string() : std::string(behavior.substr(colon + 1));
  const auto sections = parse_user_payload(user_payload);
  const std::size_t n = arg.empty() ? 2 : static_cast<std::size_t>(std::atoi(arg.c_str()));

  Json out;
  if (name == "rare_letters_count") out = rare_letters(sections, constraint, arg, false, draw);
  else if (name == "rare_letters_wrong") out = rare_letters(sections, constraint, arg, true, draw);
  else if (name == "summary_lead") out = summary_lead(sections, arg);
  else if (name == "extract_sentences") out = extract(sections, "exact", n);
  else if (name == "extract_fabricated") out = extract(sections, "fabricated", n);
  else if (name == "extract_typo") out = extract(sections, "typo", n);
  else if (name == "extract_mixed") out = extract(sections, "mixed", 1);
  else if (name == "bin_keyword") out = bin(sections, constraint, "keyword", draw);
  else if (name == "bin_random") out = bin(sections, constraint, "random", draw);
  else if (name == "bin_unknown") out = bin(sections, constraint, "unknown", draw);
  else if (name == "bin_summary_cite") out = bin_summary(sections, false);
  else if (name == "bin_summary_foreign") out = bin_summary(sections, true);
  else if (name == "critique_hash") out = critique(sections, constraint, "hash", arg, draw);
  else if (name == "critique_sequence") out = critique(sections, constraint, "sequence", arg, draw);
  else if (name == "critique_fixed") out = critique(sections, constraint, "fixed", arg, draw);
  else if (name == "schema_fill") out = Json::object();
  else throw Error(ErrorCode::kInvalidArgument, "unknown scripted behavior " + name);

  fill_missing(out, constraint);
  // Candidates carry their revision number so scripted critiques can rate
  // revisions without hidden state.
  if (out.contains("scratch_work") && out["scratch_work"].is_string()) {
    const auto* prev = find_section(sections, "previous_candidate");
    const int rev = 1 + (prev ? revision_of(parse_or(*prev, Json::object())) : 0);
    out["scratch_work"] = "[rev " + std::to_string(rev) + "] " + out["scratch_work"].get<std::string>();
  }
  // Keep declaration order of the constraint for stable output text.
  if (constraint.contains("properties")) {
    Json ordered = Json::object();
    for (const auto& [k, v] : constraint["properties"].items()) {
      if (out.contains(k)) ordered[k] = out[k];
    }
    for (const auto& [k, v] : out.items()) {
      if (!ordered.contains(k)) ordered[k] = v;
    }
    out = std::move(ordered);
  }
  return out.dump();
}

// ---------------------------------------------------------------------------
// Scripted backend

namespace {

ScriptedArmProfile profile_from_json(const Json& j, const std::string& fingerprint) {
  ScriptedArmProfile p;
  p.prompt_fingerprint = fingerprint;
  p.error_rate = j.value("error_rate", 0.0);
  p.correct_behavior = j.value("correct", "schema_fill");
  p.incorrect_behavior = j.value("incorrect", "schema_fill");
  if (!(p.error_rate >= 0.0 && p.error_rate <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "scripted error_rate must lie in [0, 1]");
  }
  return p;
}

Json profile_to_json(const ScriptedArmProfile& p) {
  return Json{{"error_rate", p.error_rate}, {"correct", p.correct_behavior}, {"incorrect", p.incorrect_behavior}};
}

}  // namespace

ScriptedConfig ScriptedConfig::from_json(const Json& j) {
  ScriptedConfig c;
  c.strict = j.value("strict", true);
  c.fallback_error_rate = j.value("fallback_error_rate", 0.5);
  c.fallback_correct = j.value("fallback_correct", std::string("schema_fill"));
  c.fallback_incorrect = j.value("fallback_incorrect", std::string("schema_fill"));
  c.latency = std::chrono::milliseconds(j.value("latency_ms", 0));
  if (j.contains("pools")) {
    for (const auto& [name, entries] : j["pools"].items()) {
      auto& pool = c.pools[name];
      for (const auto& e : entries) {
        const auto prompt = e.at("prompt").get<std::string>();
        pool.push_back(PoolEntry{prompt, profile_from_json(e, sha256_hex(prompt))});
      }
    }
  }
  if (j.contains("profiles")) {
    for (const auto& e : j["profiles"]) {
      const auto fp = e.contains("fingerprint") ? e["fingerprint"].get<std::string>()
                                                : sha256_hex(e.at("prompt").get<std::string>());
      c.profiles.push_back(profile_from_json(e, fp));
    }
  }
  return c;
}

Json ScriptedConfig::to_json() const {
  Json j = Json::object();
  j["strict"] = strict;
  j["fallback_error_rate"] = fallback_error_rate;
  j["latency_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(latency).count();
  Json p = Json::object();
  for (const auto& [name, entries] : pools) {
    Json arr = Json::array();
    for (const auto& e : entries) {
      Json item = profile_to_json(e.profile);
      item["prompt"] = e.prompt;
      arr.push_back(item);
    }
    p[name] = arr;
  }
  j["pools"] = p;
  Json profs = Json::array();
  for (const auto& pr : profiles) {
    Json item = profile_to_json(pr);
    item["fingerprint"] = pr.prompt_fingerprint;
    profs.push_back(item);
  }
  j["profiles"] = profs;
  return j;
}

ScriptedBackend::ScriptedBackend(ScriptedConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  for (const auto& p : config_.profiles) by_fingerprint_[p.prompt_fingerprint] = p;
}

std::optional<ScriptedArmProfile> ScriptedBackend::profile_for(std::string_view system_prompt) const {
  if (auto it = by_fingerprint_.find(sha256_hex(system_prompt)); it != by_fingerprint_.end()) return it->second;
  const PoolEntry* best = nullptr;
  for (const auto& [name, pool] : config_.pools) {
    for (const auto& e : pool) {
      if (system_prompt.substr(0, e.prompt.size()) == e.prompt && (!best || e.prompt.size() > best->prompt.size())) {
        best = &e;
      }
    }
  }
  if (best) return best->profile;
  return std::nullopt;
}

GenerationResult ScriptedBackend::generate(const GenerationRequest& request) {
  const auto start = std::chrono::steady_clock::now();
  if (request.system_prompt.empty()) throw Error(ErrorCode::kInvalidArgument, "system prompt must be nonempty");
  auto profile = profile_for(request.system_prompt);
  if (!profile) {
    if (config_.strict) {
      throw Error(ErrorCode::kUnknownFingerprint,
                  "no scripted profile for prompt " + sha256_hex(request.system_prompt).substr(0, 12));
    }
    profile = ScriptedArmProfile{sha256_hex(request.system_prompt), config_.fallback_error_rate,
                                 config_.fallback_correct, config_.fallback_incorrect};
  }
  const std::uint64_t draw = hash64(sha256_hex(request.system_prompt) + "\n" + request.user_payload + "\n" +
                                    std::to_string(request.seed.value_or(0)) + "\n" + std::to_string(request.attempt));
  const bool correct = unit_interval(draw) >= profile->error_rate;
  const Json constraint = request.constraint.empty() ? Json::object() : Json::parse(request.constraint);
  GenerationResult result;
  result.raw_text = run_generator(correct ? profile->correct_behavior : profile->incorrect_behavior,
                                  request.user_payload, constraint, mix64(draw));
  result.backend_id = id();
  if (config_.latency.count() > 0) std::this_thread::sleep_for(config_.latency);
  result.latency = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - start);
  return result;
}

std::string scripted_prompt(std::string_view base, std::int64_t variant, const SubroutineSpec& spec,
                            const std::optional<std::string>& context) {
  std::string prompt(base);
  if (variant > 0) prompt += "\n\nVariant " + std::to_string(variant) + ": restate the task in your own words first.";
  prompt += "\n\n" + render_schema_block(spec.output_schema);
  if (context && !context->empty()) prompt += "\nContext:\n" + *context + "\n";
  return prompt;
}

std::string ScriptedBackend::synthesize_prompt(const SynthesisRequest& request) {
  const SubroutineSpec& spec = *request.spec;
  auto it = config_.pools.find(spec.name);
  if (it == config_.pools.end() || it->second.empty()) {
    if (config_.strict) throw Error(ErrorCode::kUnknownFingerprint, "no scripted prompt pool for " + spec.name);
    const std::string base = "You are a careful assistant. " + spec.task_doc;
    return scripted_prompt(base, request.ordinal, spec, request.context);
  }
  const auto& pool = it->second;
  const auto k = static_cast<std::int64_t>(pool.size());
  // Seeded permutation of the pool.
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  const std::uint64_t base_seed = mix64(seed_ ^ hash64(spec.name));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::pair(mix64(base_seed + a), a) < std::pair(mix64(base_seed + b), b);
  });
  const auto& entry = pool[order[static_cast<std::size_t>(request.ordinal % k)]];
  return scripted_prompt(entry.prompt, request.ordinal / k, spec, request.context);
}

}  // namespace lmsub
