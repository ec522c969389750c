#include "lmsub/pipeline.hpp"

#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "lmsub/error.hpp"
#include "lmsub/hashing.hpp"
#include "lmsub/task_queue.hpp"
#include "lmsub/text.hpp"
#include "store_impl.hpp"

namespace lmsub {

// ---------------------------------------------------------------------------
// Inputs

std::vector<Letter> parse_corpus(std::istream& in) {
  std::vector<Letter> letters;
  std::set<std::string> seen;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = Json::parse(line, nullptr, false);
    const std::string where = "corpus line " + std::to_string(number);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::kInvalidArgument, where + ": not a JSON object");
    if (!j.contains("id") || !j["id"].is_string() || j["id"].get<std::string>().empty()) {
      throw Error(ErrorCode::kInvalidArgument, where + ": missing string id");
    }
    if (!j.contains("text") || !j["text"].is_string()) {
      throw Error(ErrorCode::kInvalidArgument, where + ": missing string text");
    }
    Letter l{j["id"].get<std::string>(), j["text"].get<std::string>(),
             j.contains("metadata") ? j["metadata"] : Json::object()};
    if (!seen.insert(l.letter_id).second) {
      throw Error(ErrorCode::kInvalidArgument, where + ": duplicate id " + l.letter_id);
    }
    letters.push_back(std::move(l));
  }
  return letters;
}

std::vector<Letter> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot read corpus " + path.string());
  return parse_corpus(in);
}

Guidance parse_guidance(const Json& j) {
  Guidance g;
  const Json* bins = &j;
  if (j.is_object()) {
    g.instructions = j.value("instructions", std::string());
    if (!j.contains("bins")) throw Error(ErrorCode::kInvalidArgument, "guidance needs a bins list");
    bins = &j["bins"];
  }
  if (!bins->is_array() || bins->empty()) throw Error(ErrorCode::kInvalidArgument, "guidance bins must be a list");
  std::set<std::string> names;
  for (const auto& b : *bins) {
    if (!b.is_object() || !b.contains("name") || !b["name"].is_string() || b["name"].get<std::string>().empty()) {
      throw Error(ErrorCode::kInvalidArgument, "every bin needs a nonempty name");
    }
    BinDef def{b["name"].get<std::string>(), b.value("guidance", std::string())};
    if (!names.insert(def.name).second) throw Error(ErrorCode::kInvalidArgument, "duplicate bin " + def.name);
    g.bins.push_back(std::move(def));
  }
  return g;
}

Guidance load_guidance(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot read guidance " + path.string());
  auto j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error(ErrorCode::kInvalidArgument, "guidance " + path.string() + " is not JSON");
  return parse_guidance(j);
}

// ---------------------------------------------------------------------------
// Stage declarations

std::vector<StageDefinition> stage_definitions(const std::optional<std::string>& project_context) {
  auto quotes = FieldSpec::list("quotes", FieldSpec::text("quote"), "verbatim passages from the letter", 1);
  std::vector<StageDefinition> out;

  SubroutineSpec summarize;
  summarize.name = std::string(kStageSummarize);
  summarize.task_doc = "Summarize a public comment letter on a proposed project in a few sentences, keeping every "
                       "distinct point the commenter makes.";
  summarize.input_schema = Schema({FieldSpec::text("letter_text", "full text of the letter"),
                                   FieldSpec::text("project_context", "description of the proposed project")});
  summarize.output_schema = Schema({FieldSpec::text("scratch_work", "working notes"),
                                    FieldSpec::text("summary", "the summary")});
  summarize.context = project_context;
  out.push_back({summarize, {{"coverage", 1, 5, "all points covered"}, {"brevity", 1, 5, "no padding"}}});

  SubroutineSpec extract;
  extract.name = std::string(kStageExtract);
  extract.task_doc = "List each substantive concern the letter raises about the project. State each concern in "
                     "one sentence and support it with verbatim quotes from the letter.";
  extract.input_schema = Schema({FieldSpec::text("letter_text", "full text of the letter"),
                                 FieldSpec::text("summary", "summary of the letter"),
                                 FieldSpec::text("project_context", "description of the proposed project")});
  extract.output_schema = Schema(
      {FieldSpec::text("scratch_work", "working notes"),
       FieldSpec::list("concerns",
                       FieldSpec::record("concern", {FieldSpec::text("statement", "the concern"), quotes}),
                       "concerns raised in the letter")});
  extract.context = project_context;
  out.push_back({extract, {{"faithfulness", 1, 5, "quotes support the concerns"},
                           {"completeness", 1, 5, "no concern missed"}}});

  SubroutineSpec bin;
  bin.name = std::string(kStageBin);
  bin.task_doc = "Assign every concern to one or more of the given bins, following the guidance for each bin.";
  bin.input_schema = Schema(
      {FieldSpec::list("concerns",
                       FieldSpec::record("concern", {FieldSpec::text("key", "concern key"),
                                                     FieldSpec::text("statement", "the concern"), quotes}),
                       "concerns to assign"),
       FieldSpec::list("bins", FieldSpec::record("bin", {FieldSpec::text("name"), FieldSpec::text("guidance")}),
                       "available bins"),
       FieldSpec::text("guidance", "general binning instructions")});
  bin.output_schema = Schema(
      {FieldSpec::text("scratch_work", "working notes"),
       FieldSpec::list("assignments",
                       FieldSpec::record("assignment", {FieldSpec::text("key"),
                                                        FieldSpec::list("bins", FieldSpec::text("bin"), {}, 1)}),
                       "bins per concern key")});
  bin.context = project_context;
  out.push_back({bin, {{"correctness", 1, 5, "assignments follow the guidance"}}});

  SubroutineSpec bin_summary;
  bin_summary.name = std::string(kStageBinSummary);
  bin_summary.task_doc = "Summarize the concerns assigned to one bin for the project team, citing the letters "
                         "that raise them with verbatim quotes.";
  bin_summary.input_schema = Schema(
      {FieldSpec::text("bin_name", "the bin"), FieldSpec::text("guidance", "what the bin covers"),
       FieldSpec::list("concerns",
                       FieldSpec::record("concern", {FieldSpec::text("letter_id"),
                                                     FieldSpec::text("statement", "the concern"), quotes}),
                       "concerns assigned to the bin")});
  bin_summary.output_schema = Schema(
      {FieldSpec::text("scratch_work", "working notes"), FieldSpec::text("summary", "summary of the bin"),
       FieldSpec::list("citations",
                       FieldSpec::record("citation", {FieldSpec::text("letter_id"),
                                                      FieldSpec::text("quote", "verbatim passage")}),
                       "supporting citations", 1)});
  bin_summary.context = project_context;
  out.push_back({bin_summary, {{"coverage", 1, 5, "all concerns represented"},
                               {"citation_quality", 1, 5, "citations support the summary"}}});
  return out;
}

Schema bin_output_schema(const std::vector<std::string>& keys, const std::vector<std::string>& bin_names) {
  std::vector<FieldSpec> per_key;
  for (const auto& k : keys) {
    per_key.push_back(FieldSpec::list(k, FieldSpec::enumeration("bin", bin_names), {}, 1));
  }
  return Schema({FieldSpec::text("scratch_work", "working notes"),
                 FieldSpec::record("assignments", per_key, "bins per concern key")});
}

// ---------------------------------------------------------------------------
// Artifact tables

namespace {

std::vector<nepa::QuoteSpan> read_spans(sql::Database& db, const char* sql, std::string_view a,
                                        std::optional<std::string_view> b = std::nullopt,
                                        std::vector<std::string>* letter_ids = nullptr) {
  std::vector<nepa::QuoteSpan> out;
  auto st = db.prepare(sql);
  if (b) {
    st.bind_all(a, *b);
  } else {
    st.bind_all(a);
  }
  while (st.step()) {
    out.push_back(nepa::QuoteSpan{st.text(0), static_cast<std::size_t>(st.integer(1)),
                                  static_cast<std::size_t>(st.integer(2)), st.real(3)});
    if (letter_ids) letter_ids->push_back(st.text(4));
  }
  return out;
}

}  // namespace

std::vector<ConcernRow> load_concerns(const Store& store, std::string_view batch_id) {
  auto& impl = store.impl();
  auto batch = store.batch(batch_id);
  auto rows = impl.read([&] {
    std::vector<ConcernRow> out;
    auto st = impl.db.prepare(
        "SELECT concern_id, batch_id, letter_id, ordinal, statement, invocation_id FROM concerns WHERE batch_id = ?");
    st.bind_all(batch_id);
    while (st.step()) {
      out.push_back(ConcernRow{st.text(0), st.text(1), st.text(2), static_cast<int>(st.integer(3)), st.text(4),
                               st.text(5), {}});
    }
    for (auto& c : out) {
      c.quotes = read_spans(impl.db,
                            "SELECT raw_quote, start_offset, end_offset, similarity FROM quote_spans "
                            "WHERE concern_id = ? ORDER BY ordinal",
                            c.concern_id);
    }
    return out;
  });
  std::map<std::string, std::size_t> letter_pos;
  if (batch) {
    for (std::size_t i = 0; i < batch->letter_ids.size(); ++i) letter_pos[batch->letter_ids[i]] = i;
  }
  std::sort(rows.begin(), rows.end(), [&](const ConcernRow& a, const ConcernRow& b) {
    return std::tie(letter_pos[a.letter_id], a.letter_id, a.ordinal) <
           std::tie(letter_pos[b.letter_id], b.letter_id, b.ordinal);
  });
  return rows;
}

std::map<std::string, std::vector<std::string>> load_bin_assignments(const Store& store,
                                                                     std::string_view batch_id) {
  auto& impl = store.impl();
  return impl.read([&] {
    std::map<std::string, std::vector<std::string>> out;
    auto st = impl.db.prepare(
        "SELECT a.concern_id, a.bin_name FROM bin_assignments a JOIN concerns c ON c.concern_id = a.concern_id "
        "WHERE c.batch_id = ? ORDER BY a.concern_id, a.bin_name");
    st.bind_all(batch_id);
    while (st.step()) out[st.text(0)].push_back(st.text(1));
    return out;
  });
}

std::vector<BinSummaryRow> load_bin_summaries(const Store& store, std::string_view batch_id) {
  auto& impl = store.impl();
  return impl.read([&] {
    std::vector<BinSummaryRow> out;
    auto st = impl.db.prepare(
        "SELECT batch_id, bin_name, summary, invocation_id FROM bin_summaries WHERE batch_id = ? ORDER BY bin_name");
    st.bind_all(batch_id);
    while (st.step()) out.push_back(BinSummaryRow{st.text(0), st.text(1), st.text(2), st.text(3), {}});
    for (auto& row : out) {
      std::vector<std::string> letters;
      auto spans = read_spans(impl.db,
                              "SELECT raw_quote, start_offset, end_offset, similarity, letter_id FROM bin_citations "
                              "WHERE batch_id = ? AND bin_name = ? ORDER BY ordinal",
                              row.batch_id, row.bin_name, &letters);
      for (std::size_t i = 0; i < spans.size(); ++i) row.citations.push_back(Citation{letters[i], spans[i]});
    }
    return out;
  });
}

std::optional<StoredLetter> load_letter(const Store& store, std::string_view run_id, std::string_view letter_id) {
  auto& impl = store.impl();
  return impl.read([&]() -> std::optional<StoredLetter> {
    auto st = impl.db.prepare(
        "SELECT letter_id, text, metadata, run_id, ingest_invocation_id FROM letters WHERE run_id = ? AND letter_id = ?");
    st.bind_all(run_id, letter_id);
    if (!st.step()) return std::nullopt;
    return StoredLetter{Letter{st.text(0), st.text(1), Json::parse(st.text(2))}, st.text(3), st.optional_text(4)};
  });
}

std::vector<std::string> run_ids(const Store& store) {
  auto& impl = store.impl();
  return impl.read([&] {
    std::vector<std::string> out;
    auto st = impl.db.prepare("SELECT run_id FROM runs ORDER BY created_at, run_id");
    while (st.step()) out.push_back(st.text(0));
    return out;
  });
}

Json batch_report(const Store& store, std::string_view batch_id) {
  auto batch = store.batch(batch_id);
  if (!batch) throw Error(ErrorCode::kNotFound, "unknown batch " + std::string(batch_id));
  const auto concerns = load_concerns(store, batch_id);
  const auto assignments = load_bin_assignments(store, batch_id);
  std::map<std::string, int> per_bin;
  for (const auto& [cid, bins] : assignments) {
    for (const auto& b : bins) ++per_bin[b];
  }
  Json bins = Json::array();
  for (const auto& s : load_bin_summaries(store, batch_id)) {
    Json cites = Json::array();
    for (const auto& c : s.citations) {
      cites.push_back({{"letter_id", c.letter_id},
                       {"start", c.span.start},
                       {"end", c.span.end},
                       {"quote", c.span.raw_quote},
                       {"similarity", c.span.similarity}});
    }
    bins.push_back({{"bin_name", s.bin_name},
                    {"concern_count", per_bin[s.bin_name]},
                    {"summary", s.summary},
                    {"invocation_id", s.invocation_id},
                    {"citations", cites}});
  }
  std::map<std::string, int> event_counts;
  for (const auto& e : store.events(batch_id)) ++event_counts[e.kind];
  return Json{{"batch_id", batch->batch_id},
              {"run_id", batch->run_id},
              {"ordinal", batch->ordinal},
              {"state", batch->state},
              {"letters", batch->letter_ids.size()},
              {"concerns", concerns.size()},
              {"bins", bins},
              {"events", Json(event_counts)}};
}

std::vector<Json> export_system_output(const Store& store, std::string_view run_id) {
  std::vector<Json> rows;
  for (const auto& batch : store.batches(run_id)) {
    const auto assignments = load_bin_assignments(store, batch.batch_id);
    for (const auto& c : load_concerns(store, batch.batch_id)) {
      auto it = assignments.find(c.concern_id);
      const Json bins = it == assignments.end() ? Json::array() : Json(it->second);
      for (const auto& q : c.quotes) {
        rows.push_back(Json{{"letter_id", c.letter_id}, {"start", q.start}, {"end", q.end}, {"bins", bins}});
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Orchestration

struct Pipeline::State {
  explicit State(Store& store) : queue(store) {}
  TaskQueue queue;
  Guidance guidance;
  std::string run_id;
};

Pipeline::Pipeline(Store& store, Backend& backend, EngineConfig engine_config, PipelineConfig config)
    : store_(store),
      engine_(store, backend, engine_config),
      config_(std::move(config)),
      state_(std::make_unique<State>(store)) {
  if (config_.batch_size < 1) throw Error(ErrorCode::kInvalidArgument, "batch size must be at least 1");
  if (config_.chunk_size < 1) throw Error(ErrorCode::kInvalidArgument, "chunk size must be at least 1");
  std::optional<std::string> context;
  if (!config_.project_context.empty()) context = config_.project_context;
  for (auto& def : stage_definitions(context)) {
    const std::string name = def.spec.name;
    stages_.emplace(name, declare_with_critique(engine_, std::move(def.spec), std::move(def.dims)));
  }
}

Pipeline::~Pipeline() = default;

const CritiquePair& Pipeline::stage(std::string_view name) const {
  auto it = stages_.find(name);
  if (it == stages_.end()) throw Error(ErrorCode::kNotFound, "unknown stage " + std::string(name));
  return it->second;
}

std::string Pipeline::run_id_for(const std::vector<Letter>& letters, const Guidance& guidance) const {
  Json material = Json::object();
  Json ls = Json::array();
  for (const auto& l : letters) ls.push_back({l.letter_id, l.text, l.metadata});
  Json bins = Json::array();
  for (const auto& b : guidance.bins) bins.push_back({b.name, b.guidance});
  material["letters"] = ls;
  material["bins"] = bins;
  material["instructions"] = guidance.instructions;
  material["context"] = config_.project_context;
  material["batch_size"] = config_.batch_size;
  material["chunk_size"] = config_.chunk_size;
  material["loop"] = {config_.loop.max_iters, config_.loop.threshold};
  material["threshold"] = config_.quote_threshold;
  material["seed"] = engine_.config().seed;
  return "run-" + sha256_hex(material.dump()).substr(0, 12);
}

namespace {

void record_event(Store& store, const std::string& batch_id, const std::optional<std::string>& invocation_id,
                  const std::string& kind, const Json& detail, const std::string& key) {
  store.record_event(AuditEvent{0, batch_id, invocation_id, kind, detail, 0}, kind + ":" + key);
}

std::vector<std::string> unique_keys(const std::vector<std::string>& concern_ids) {
  for (std::size_t len = 9;; ++len) {
    std::set<std::string> seen;
    std::vector<std::string> keys;
    for (const auto& id : concern_ids) keys.push_back(id.substr(0, len));
    for (const auto& k : keys) seen.insert(k);
    if (seen.size() == keys.size() || len >= concern_ids.front().size()) return keys;
  }
}

struct Handlers {
  Store& store;
  Engine& engine;
  const PipelineConfig& config;
  const std::map<std::string, CritiquePair, std::less<>>& stages;
  TaskQueue& queue;
  const Guidance& guidance;
  const std::string& run_id;

  const CritiquePair& pair(std::string_view name) const { return stages.find(name)->second; }

  std::optional<LoopResult> loop(std::string_view stage, const std::string& batch_id, const std::string& item,
                                 const Json& input, const std::vector<std::string>& parents,
                                 const std::optional<Schema>& output_schema = std::nullopt) {
    LoopOptions o;
    o.config = config.loop;
    o.key_prefix = batch_id + "/" + std::string(stage) + "/" + item;
    o.batch_id = batch_id;
    o.output_schema = output_schema;
    try {
      return self_critique_loop(engine, pair(stage), input, parents, o);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kLoopFailed) throw;
      store.record_stage_output(batch_id, stage, item, std::nullopt, "failed", Json{{"error", e.what()}});
      record_event(store, batch_id, std::nullopt, "loop_failed", Json{{"stage", stage}, {"item", item},
                                                                      {"error", e.what()}},
                   o.key_prefix);
      return std::nullopt;
    }
  }

  void summarize(const Task& t) {
    const auto batch_id = t.payload["batch_id"].get<std::string>();
    const auto letter_id = t.payload["letter_id"].get<std::string>();
    const auto letter = load_letter(store, run_id, letter_id);
    if (!letter) throw Error(ErrorCode::kNotFound, "letter " + letter_id + " not loaded");
    const auto ingest = engine.ingest(letter_id, letter->letter.text, letter->letter.metadata, batch_id);
    auto& impl = store.impl();
    impl.transaction([&] {
      impl.db.prepare("UPDATE letters SET ingest_invocation_id = ? WHERE run_id = ? AND letter_id = ?")
          .bind_all(ingest.invocation_id, run_id, letter_id)
          .run();
    });
    auto result = loop(kStageSummarize, batch_id, letter_id,
                       Json{{"letter_text", letter->letter.text}, {"project_context", config.project_context}},
                       {ingest.invocation_id});
    Json next{{"batch_id", batch_id}, {"letter_id", letter_id}, {"ingest", ingest.invocation_id},
              {"summary", ""}, {"summary_invocation", nullptr}};
    if (result) {
      const auto& best = result->best().candidate;
      store.record_stage_output(batch_id, kStageSummarize, letter_id, best.invocation_id, "succeeded",
                                Json{{"letter_id", letter_id}, {"summary", (*best.output)["summary"]},
                                     {"loop", result->to_json()}});
      next["summary"] = (*best.output)["summary"];
      next["summary_invocation"] = best.invocation_id;
    }
    queue.enqueue("extract", next, batch_id + "/extract/" + letter_id, batch_id);
  }

  void extract(const Task& t) {
    const auto batch_id = t.payload["batch_id"].get<std::string>();
    const auto letter_id = t.payload["letter_id"].get<std::string>();
    const auto letter = load_letter(store, run_id, letter_id);
    if (!letter) throw Error(ErrorCode::kNotFound, "letter " + letter_id + " not loaded");
    std::vector<std::string> parents{t.payload["ingest"].get<std::string>()};
    if (t.payload["summary_invocation"].is_string()) parents.push_back(t.payload["summary_invocation"]);
    auto result = loop(kStageExtract, batch_id, letter_id,
                       Json{{"letter_text", letter->letter.text},
                            {"summary", t.payload["summary"]},
                            {"project_context", config.project_context}},
                       parents);
    if (!result) return;
    const auto& best = result->best().candidate;

    std::vector<ConcernRow> kept;
    int rejected = 0;
    int ordinal = 0;
    for (const auto& c : (*best.output)["concerns"]) {
      const auto statement = c["statement"].get<std::string>();
      ConcernRow row;
      row.concern_id = "c" + sha256_hex(batch_id + "\n" + letter_id + "\n" + std::to_string(ordinal) + "\n" +
                                        statement)
                                 .substr(0, 16);
      row.batch_id = batch_id;
      row.letter_id = letter_id;
      row.ordinal = ordinal++;
      row.statement = statement;
      row.invocation_id = best.invocation_id;
      int q = 0;
      for (const auto& quote : c["quotes"]) {
        const auto raw = quote.get<std::string>();
        auto span = nepa::best_window(raw, letter->letter.text);
        if (span && span->similarity >= config.quote_threshold) {
          row.quotes.push_back(*span);
        } else {
          ++rejected;
          record_event(store, batch_id, best.invocation_id, "quote_rejected",
                       Json{{"letter_id", letter_id}, {"quote", raw},
                            {"best_similarity", span ? span->similarity : 0.0}},
                       row.concern_id + "/" + std::to_string(q));
        }
        ++q;
      }
      if (row.quotes.empty()) {
        record_event(store, batch_id, best.invocation_id, "concern_dropped",
                     Json{{"letter_id", letter_id}, {"statement", statement}}, row.concern_id);
        continue;
      }
      kept.push_back(std::move(row));
    }

    auto& impl = store.impl();
    impl.transaction([&] {
      for (const auto& row : kept) {
        impl.db
            .prepare("INSERT OR IGNORE INTO concerns(concern_id, batch_id, letter_id, ordinal, statement, "
                     "invocation_id) VALUES (?, ?, ?, ?, ?, ?)")
            .bind_all(row.concern_id, row.batch_id, row.letter_id, row.ordinal, row.statement, row.invocation_id)
            .run();
        for (std::size_t i = 0; i < row.quotes.size(); ++i) {
          const auto& s = row.quotes[i];
          impl.db
              .prepare("INSERT OR IGNORE INTO quote_spans(concern_id, ordinal, raw_quote, start_offset, end_offset, "
                       "similarity) VALUES (?, ?, ?, ?, ?, ?)")
              .bind_all(row.concern_id, static_cast<std::int64_t>(i), s.raw_quote, static_cast<std::int64_t>(s.start),
                        static_cast<std::int64_t>(s.end), s.similarity)
              .run();
        }
      }
      Json ids = Json::array();
      for (const auto& row : kept) ids.push_back(row.concern_id);
      store.record_stage_output(batch_id, kStageExtract, letter_id, best.invocation_id, "succeeded",
                                Json{{"letter_id", letter_id}, {"concern_ids", ids},
                                     {"rejected_quotes", rejected}, {"loop", result->to_json()}});
    });
  }

  void bin(const Task& t) {
    const auto batch_id = t.payload["batch_id"].get<std::string>();
    const auto item = t.payload["item"].get<std::string>();
    const auto ids = t.payload["concern_ids"].get<std::vector<std::string>>();
    std::map<std::string, ConcernRow> by_id;
    for (auto& c : load_concerns(store, batch_id)) by_id[c.concern_id] = c;
    const auto keys = unique_keys(ids);

    Json concerns = Json::array();
    std::set<std::string> parent_set;
    std::vector<std::string> parents;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto& c = by_id.at(ids[i]);
      Json quotes = Json::array();
      for (const auto& q : c.quotes) quotes.push_back(q.raw_quote);
      concerns.push_back({{"key", keys[i]}, {"statement", c.statement}, {"quotes", quotes}});
      if (parent_set.insert(c.invocation_id).second) parents.push_back(c.invocation_id);
    }
    Json bins = Json::array();
    std::vector<std::string> names;
    for (const auto& b : guidance.bins) {
      bins.push_back({{"name", b.name}, {"guidance", b.guidance}});
      names.push_back(b.name);
    }
    auto result = loop(kStageBin, batch_id, item,
                       Json{{"concerns", concerns}, {"bins", bins}, {"guidance", guidance.instructions}},
                       parents, bin_output_schema(keys, names));
    if (!result) return;
    const auto& best = result->best().candidate;
    const auto& assignments = (*best.output)["assignments"];
    auto& impl = store.impl();
    impl.transaction([&] {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (const auto& b : assignments[keys[i]]) {
          impl.db.prepare("INSERT OR IGNORE INTO bin_assignments(concern_id, bin_name, invocation_id) VALUES (?, ?, ?)")
              .bind_all(ids[i], b.get<std::string>(), best.invocation_id)
              .run();
        }
      }
      store.record_stage_output(batch_id, kStageBin, item, best.invocation_id, "succeeded",
                                Json{{"concern_ids", ids}, {"keys", keys}, {"assignments", assignments},
                                     {"loop", result->to_json()}});
    });
  }

  void bin_summary(const Task& t) {
    const auto batch_id = t.payload["batch_id"].get<std::string>();
    const auto bin_name = t.payload["bin_name"].get<std::string>();
    const auto ids = t.payload["concern_ids"].get<std::vector<std::string>>();
    std::map<std::string, ConcernRow> by_id;
    for (auto& c : load_concerns(store, batch_id)) by_id[c.concern_id] = c;
    std::string bin_guidance;
    for (const auto& b : guidance.bins) {
      if (b.name == bin_name) bin_guidance = b.guidance;
    }
    // Parents: the binning invocations that placed these concerns here.
    std::vector<std::string> parents;
    {
      auto& impl = store.impl();
      impl.read([&] {
        std::set<std::string> seen;
        for (const auto& id : ids) {
          auto st = impl.db.prepare("SELECT invocation_id FROM bin_assignments WHERE concern_id = ? AND bin_name = ?");
          st.bind_all(id, bin_name);
          while (st.step()) {
            if (seen.insert(st.text(0)).second) parents.push_back(st.text(0));
          }
        }
      });
    }
    Json concerns = Json::array();
    std::set<std::string> letters;
    for (const auto& id : ids) {
      const auto& c = by_id.at(id);
      Json quotes = Json::array();
      for (const auto& q : c.quotes) quotes.push_back(q.raw_quote);
      concerns.push_back({{"letter_id", c.letter_id}, {"statement", c.statement}, {"quotes", quotes}});
      letters.insert(c.letter_id);
    }
    auto result = loop(kStageBinSummary, batch_id, bin_name,
                       Json{{"bin_name", bin_name}, {"guidance", bin_guidance}, {"concerns", concerns}}, parents);
    if (!result) return;
    const auto& best = result->best().candidate;

    std::vector<Citation> kept;
    int index = 0;
    for (const auto& c : (*best.output)["citations"]) {
      const auto letter_id = c["letter_id"].get<std::string>();
      const auto quote = c["quote"].get<std::string>();
      const std::string key = best.invocation_id + "/" + std::to_string(index++);
      if (!letters.count(letter_id)) {
        record_event(store, batch_id, best.invocation_id, "citation_rejected",
                     Json{{"bin_name", bin_name}, {"letter_id", letter_id}, {"quote", quote},
                          {"reason", "letter not assigned to bin"}},
                     key);
        continue;
      }
      const auto letter = load_letter(store, run_id, letter_id);
      auto span = letter ? nepa::best_window(quote, letter->letter.text) : std::nullopt;
      if (!span || span->similarity < config.quote_threshold) {
        record_event(store, batch_id, best.invocation_id, "citation_rejected",
                     Json{{"bin_name", bin_name}, {"letter_id", letter_id}, {"quote", quote},
                          {"reason", "quote not found in letter"},
                          {"best_similarity", span ? span->similarity : 0.0}},
                     key);
        continue;
      }
      kept.push_back(Citation{letter_id, *span});
    }
    if (kept.empty()) {
      record_event(store, batch_id, best.invocation_id, "bin_summary_rejected",
                   Json{{"bin_name", bin_name}, {"reason", "no verifiable citation"}}, batch_id + "/" + bin_name);
      store.record_stage_output(batch_id, kStageBinSummary, bin_name, best.invocation_id, "failed",
                                Json{{"bin_name", bin_name}, {"error", "no verifiable citation"},
                                     {"loop", result->to_json()}});
      return;
    }
    auto& impl = store.impl();
    impl.transaction([&] {
      impl.db
          .prepare("INSERT OR IGNORE INTO bin_summaries(batch_id, bin_name, summary, invocation_id) VALUES (?, ?, ?, ?)")
          .bind_all(batch_id, bin_name, (*best.output)["summary"].get<std::string>(), best.invocation_id)
          .run();
      for (std::size_t i = 0; i < kept.size(); ++i) {
        const auto& s = kept[i].span;
        impl.db
            .prepare("INSERT OR IGNORE INTO bin_citations(batch_id, bin_name, ordinal, letter_id, raw_quote, "
                     "start_offset, end_offset, similarity) VALUES (?, ?, ?, ?, ?, ?, ?, ?)")
            .bind_all(batch_id, bin_name, static_cast<std::int64_t>(i), kept[i].letter_id, s.raw_quote,
                      static_cast<std::int64_t>(s.start), static_cast<std::int64_t>(s.end), s.similarity)
            .run();
      }
      store.record_stage_output(batch_id, kStageBinSummary, bin_name, best.invocation_id, "succeeded",
                                Json{{"bin_name", bin_name}, {"citations", kept.size()},
                                     {"loop", result->to_json()}});
    });
  }
};

void wait_for(const TaskQueue& queue, const std::string& batch_id) {
  while (queue.unfinished(batch_id) > 0) std::this_thread::sleep_for(std::chrono::milliseconds(2));
}

}  // namespace

std::string Pipeline::run(const std::vector<Letter>& letters, const Guidance& guidance, BatchCallback on_reviewable) {
  if (guidance.bins.empty()) throw Error(ErrorCode::kInvalidArgument, "guidance has no bins");
  auto& st = *state_;
  st.guidance = guidance;
  st.run_id = run_id_for(letters, guidance);
  auto& impl = store_.impl();
  impl.transaction([&] {
    impl.db.prepare("INSERT OR IGNORE INTO runs(run_id, config, state, created_at) VALUES (?, ?, 'running', ?)")
        .bind_all(st.run_id,
                  Json{{"batch_size", config_.batch_size},
                       {"workers", config_.workers},
                       {"chunk_size", config_.chunk_size},
                       {"max_iters", config_.loop.max_iters},
                       {"threshold", config_.loop.threshold},
                       {"letters", letters.size()},
                       {"bins", guidance.bins.size()}}
                      .dump(),
                  impl.next_timestamp())
        .run();
  });
  st.queue.reclaim_leases();

  Handlers h{store_, engine_, config_, stages_, st.queue, st.guidance, st.run_id};
  WorkerPool pool(st.queue, config_.workers, "worker-" + std::to_string(::getpid()));
  pool.on("summarize", [&](const Task& t) { h.summarize(t); });
  pool.on("extract", [&](const Task& t) { h.extract(t); });
  pool.on("bin", [&](const Task& t) { h.bin(t); });
  pool.on("bin_summary", [&](const Task& t) { h.bin_summary(t); });
  pool.start();

  std::optional<std::string> previous;
  for (std::size_t start = 0, ordinal = 0; start < letters.size(); start += config_.batch_size, ++ordinal) {
    const auto end = std::min(letters.size(), start + config_.batch_size);
    std::vector<std::string> ids;
    for (std::size_t i = start; i < end; ++i) ids.push_back(letters[i].letter_id);
    const auto batch = store_.ensure_batch(st.run_id, static_cast<int>(ordinal), ids);
    if (previous) {
      auto prev = store_.batch(*previous);
      if (prev && prev->state == "reviewable") store_.set_batch_state(*previous, "superseded");
    }
    previous = batch.batch_id;
    if (batch.state != "processing") continue;

    impl.transaction([&] {
      for (std::size_t i = start; i < end; ++i) {
        impl.db
            .prepare("INSERT OR IGNORE INTO letters(letter_id, run_id, text, metadata) VALUES (?, ?, ?, ?)")
            .bind_all(letters[i].letter_id, st.run_id, letters[i].text, letters[i].metadata.dump())
            .run();
      }
    });
    for (const auto& [name, pair] : stages_) {
      store_.ensure_snapshot(batch.batch_id, pair.target.subroutine_id);
      store_.ensure_snapshot(batch.batch_id, pair.critique.subroutine_id);
    }

    for (const auto& id : ids) {
      st.queue.enqueue("summarize", Json{{"batch_id", batch.batch_id}, {"letter_id", id}},
                       batch.batch_id + "/summarize/" + id, batch.batch_id);
    }
    wait_for(st.queue, batch.batch_id);

    const auto concerns = load_concerns(store_, batch.batch_id);
    for (std::size_t c = 0, chunk = 0; c < concerns.size(); c += config_.chunk_size, ++chunk) {
      std::vector<std::string> chunk_ids;
      for (std::size_t i = c; i < std::min(concerns.size(), c + config_.chunk_size); ++i) {
        chunk_ids.push_back(concerns[i].concern_id);
      }
      const std::string item = "chunk-" + std::to_string(chunk);
      st.queue.enqueue("bin", Json{{"batch_id", batch.batch_id}, {"item", item}, {"concern_ids", chunk_ids}},
                       batch.batch_id + "/bin/" + item, batch.batch_id);
    }
    wait_for(st.queue, batch.batch_id);

    const auto assignments = load_bin_assignments(store_, batch.batch_id);
    for (const auto& b : guidance.bins) {
      std::vector<std::string> members;
      for (const auto& c : concerns) {
        auto it = assignments.find(c.concern_id);
        if (it != assignments.end() && std::count(it->second.begin(), it->second.end(), b.name)) {
          members.push_back(c.concern_id);
        }
      }
      if (members.empty()) continue;
      st.queue.enqueue("bin_summary",
                       Json{{"batch_id", batch.batch_id}, {"bin_name", b.name}, {"concern_ids", members}},
                       batch.batch_id + "/bin_summary/" + b.name, batch.batch_id);
    }
    wait_for(st.queue, batch.batch_id);

    for (const auto& t : st.queue.tasks(TaskState::kDead)) {
      if (t.batch_id == batch.batch_id) {
        record_event(store_, batch.batch_id, std::nullopt, "task_dead",
                     Json{{"task_id", t.task_id}, {"kind", t.kind}, {"reason", t.reason}}, t.task_id);
      }
    }
    store_.set_batch_state(batch.batch_id, "reviewable");
    if (on_reviewable) on_reviewable(*store_.batch(batch.batch_id));
  }
  pool.stop();
  impl.transaction([&] {
    impl.db.prepare("UPDATE runs SET state = 'complete' WHERE run_id = ?").bind_all(st.run_id).run();
  });
  return st.run_id;
}

}  // namespace lmsub
