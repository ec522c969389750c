#include <sstream>

#include "doctest.h"
#include "lmsub/error.hpp"
#include "lmsub/pipeline.hpp"
#include "lmsub/task_queue.hpp"
#include "lmsub/text.hpp"

using namespace lmsub;

namespace {

const std::filesystem::path kData = LMSUB_TEST_DATA;

PipelineConfig small_config() {
  PipelineConfig c;
  c.batch_size = 5;
  c.workers = 2;
  c.project_context = "Quarry expansion.";
  return c;
}

}  // namespace

TEST_CASE("corpus and guidance parsing") {
  std::istringstream ok(R"({"id":"a","text":"x"}
{"id":"b","text":"y","metadata":{"k":1}}
)");
  const auto letters = parse_corpus(ok);
  REQUIRE(letters.size() == 2);
  CHECK(letters[1].metadata["k"] == 1);
  std::istringstream dup("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n");
  CHECK_THROWS_AS(parse_corpus(dup), Error);
  std::istringstream bad("{\"id\":\"a\"}\n");
  CHECK_THROWS_WITH_AS(parse_corpus(bad), doctest::Contains("line 1"), Error);
  CHECK(parse_guidance(Json::parse(R"([{"name":"a","guidance":"g"}])")).bins.size() == 1);
  CHECK_THROWS_AS(parse_guidance(Json::parse(R"({"bins":[{"name":"a"},{"name":"a"}]})")), Error);
  CHECK_THROWS_AS(parse_guidance(Json::parse(R"({"bins":[]})")), Error);
  CHECK_THROWS_AS(load_corpus(kData / "missing.jsonl"), Error);
  CHECK(load_corpus(kData / "letters.jsonl").size() == 10);
}

TEST_CASE("bin output schema enumerates bins per key") {
  const auto s = bin_output_schema({"c1", "c2"}, {"a", "b"});
  CHECK(validate_payload(s, Json::parse(R"({"scratch_work":"","assignments":{"c1":["a"],"c2":["a","b"]}})")).ok());
  CHECK_FALSE(validate_payload(s, Json::parse(R"({"scratch_work":"","assignments":{"c1":[],"c2":["a"]}})")).ok());
  CHECK_FALSE(validate_payload(s, Json::parse(R"({"scratch_work":"","assignments":{"c1":["z"],"c2":["a"]}})")).ok());
}

TEST_CASE("end-to-end scripted run over two batches") {
  Store store(":memory:");
  ScriptedBackend backend(ScriptedConfig::from_json(Json::parse(default_scripted_profiles())), 1);
  Pipeline pipeline(store, backend, EngineConfig{.seed = 3}, small_config());
  const auto letters = load_corpus(kData / "letters.jsonl");
  const auto guidance = load_guidance(kData / "guidance.json");
  std::vector<std::string> reviewable;
  const auto run_id = pipeline.run(letters, guidance, [&](const BatchRecord& b) { reviewable.push_back(b.batch_id); });
  CHECK(run_id == pipeline.run_id_for(letters, guidance));
  REQUIRE(reviewable.size() == 2);
  const auto batches = store.batches(run_id);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].state == "superseded");
  CHECK(batches[1].state == "reviewable");

  TaskQueue queue(store);
  CHECK(queue.tasks(TaskState::kDead).empty());
  CHECK(queue.unfinished() == 0);

  std::size_t spans = 0;
  for (const auto& b : batches) {
    CHECK(store.list_review_items(b.batch_id, "summarize").size() == 5);
    CHECK(store.list_review_items(b.batch_id, "extract").size() == 5);
    for (const auto& c : load_concerns(store, b.batch_id)) {
      REQUIRE_FALSE(c.quotes.empty());
      const auto letter = load_letter(store, run_id, c.letter_id);
      for (const auto& q : c.quotes) {
        ++spans;
        const auto window = text::slice(letter->letter.text, q.start, q.end);
        CHECK(nepa::normalized_similarity(q.raw_quote, window) == doctest::Approx(q.similarity));
        CHECK(q.similarity >= 0.85);
      }
    }
    for (const auto& s : load_bin_summaries(store, b.batch_id)) {
      CHECK_FALSE(s.citations.empty());
      const auto trace = store.trace(s.invocation_id);
      bool reaches_ingest = false;
      for (const auto& n : trace.nodes) reaches_ingest = reaches_ingest || n.invocation.role == "ingest";
      CHECK(reaches_ingest);
    }
    const auto report = batch_report(store, b.batch_id);
    CHECK(report["letters"] == 5);
  }
  CHECK(spans > 0);
  CHECK(export_system_output(store, run_id).size() == spans);

  for (const auto& inv : store.invocations()) {
    if (inv.status == InvocationStatus::kSucceeded) CHECK(pipeline.engine().replay(inv.invocation_id).matches());
  }

  // A second run over the same inputs is a no-op.
  const auto count = store.invocation_count();
  pipeline.run(letters, guidance);
  CHECK(store.invocation_count() == count);
}
