#pragma once

// Four-stage comment-letter pipeline: summarize each letter, extract
// concerns with supporting quotes, bin concerns into guidance categories,
// and summarize each bin with citations. Letters are processed in batches;
// each stage runs as durable queue tasks and every LM step goes through a
// self-critique loop sampling from the batch's frozen arm snapshot.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lmsub/critique.hpp"
#include "lmsub/engine.hpp"
#include "lmsub/quote_match.hpp"
#include "lmsub/store.hpp"

namespace lmsub {

struct Letter {
  std::string letter_id;
  std::string text;
  Json metadata = Json::object();
};

struct BinDef {
  std::string name;
  std::string guidance;
};

struct Guidance {
  std::string instructions;
  std::vector<BinDef> bins;
};

// JSONL, one {"id", "text", "metadata"} object per line. Throws
// kInvalidArgument naming the line on malformed input or duplicate ids.
std::vector<Letter> parse_corpus(std::istream& in);
std::vector<Letter> load_corpus(const std::filesystem::path& path);

// {"instructions": "...", "bins": [{"name", "guidance"}]} or a bare list of
// bins. Bin names must be unique and nonempty.
Guidance parse_guidance(const Json& j);
Guidance load_guidance(const std::filesystem::path& path);

inline constexpr std::string_view kStageSummarize = "summarize";
inline constexpr std::string_view kStageExtract = "extract";
inline constexpr std::string_view kStageBin = "bin";
inline constexpr std::string_view kStageBinSummary = "bin_summary";

struct StageDefinition {
  SubroutineSpec spec;
  std::vector<RatingDimension> dims;
};

// The four stage declarations, in pipeline order.
std::vector<StageDefinition> stage_definitions(const std::optional<std::string>& project_context);

// Output schema the bin stage uses for one chunk: one nonempty list of bin
// names per concern key.
Schema bin_output_schema(const std::vector<std::string>& keys, const std::vector<std::string>& bin_names);

struct PipelineConfig {
  std::size_t batch_size = 10;
  LoopConfig loop;
  int workers = 4;
  std::size_t chunk_size = 20;
  double quote_threshold = nepa::kDefaultMatchThreshold;
  std::string project_context;
};

struct ConcernRow {
  std::string concern_id;
  std::string batch_id;
  std::string letter_id;
  int ordinal = 0;
  std::string statement;
  std::string invocation_id;
  std::vector<nepa::QuoteSpan> quotes;
};

struct Citation {
  std::string letter_id;
  nepa::QuoteSpan span;
};

struct BinSummaryRow {
  std::string batch_id;
  std::string bin_name;
  std::string summary;
  std::string invocation_id;
  std::vector<Citation> citations;
};

struct StoredLetter {
  Letter letter;
  std::string run_id;
  std::optional<std::string> ingest_invocation_id;
};

// Read access to pipeline artifacts.
std::vector<ConcernRow> load_concerns(const Store& store, std::string_view batch_id);
// concern id -> bin names
std::map<std::string, std::vector<std::string>> load_bin_assignments(const Store& store, std::string_view batch_id);
std::vector<BinSummaryRow> load_bin_summaries(const Store& store, std::string_view batch_id);
std::optional<StoredLetter> load_letter(const Store& store, std::string_view run_id, std::string_view letter_id);
std::vector<std::string> run_ids(const Store& store);

Json batch_report(const Store& store, std::string_view batch_id);

// One row per retained quote span: {"letter_id", "start", "end", "bins"}.
std::vector<Json> export_system_output(const Store& store, std::string_view run_id);

class Pipeline {
 public:
  using BatchCallback = std::function<void(const BatchRecord&)>;

  Pipeline(Store& store, Backend& backend, EngineConfig engine_config, PipelineConfig config);
  ~Pipeline();

  // Deterministic in the corpus, guidance and configuration, so a restarted
  // run resumes the same batches.
  std::string run_id_for(const std::vector<Letter>& letters, const Guidance& guidance) const;

  // Processes every batch not yet reviewable and returns the run id. The
  // callback fires after each batch becomes reviewable, before the next
  // batch's snapshots are taken.
  std::string run(const std::vector<Letter>& letters, const Guidance& guidance, BatchCallback on_reviewable = {});

  const CritiquePair& stage(std::string_view name) const;
  Engine& engine() { return engine_; }
  const PipelineConfig& config() const { return config_; }

 private:
  struct State;
  Store& store_;
  Engine engine_;
  PipelineConfig config_;
  std::map<std::string, CritiquePair, std::less<>> stages_;
  std::unique_ptr<State> state_;
};

}  // namespace lmsub
