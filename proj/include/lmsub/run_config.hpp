#pragma once

// Run configuration shared by `lmsub run` and POST /runs.
//
//   {
//     "corpus": "letters.jsonl",      required
//     "guidance": "guidance.json",    required
//     "context": "context.txt",       optional project description
//     "batch_size": 10,
//     "backend": "scripted",          scripted | http
//     "scripted_config": "pools.json", optional, scripted backend only
//     "seed": 0,
//     "workers": 4,
//     "max_iters": 3,
//     "loss_threshold": 0.1
//   }
//
// The http backend reads LMSUB_ENDPOINT, LMSUB_API_KEY and LMSUB_MODEL.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "lmsub/backend.hpp"
#include "lmsub/pipeline.hpp"

namespace lmsub {

struct RunConfig {
  std::filesystem::path corpus;
  std::filesystem::path guidance;
  std::optional<std::filesystem::path> context;
  std::size_t batch_size = 10;
  std::string backend = "scripted";
  std::optional<std::filesystem::path> scripted_config;
  std::uint64_t seed = 0;
  int workers = 4;
  int max_iters = 3;
  double loss_threshold = 0.1;

  // Throws kInvalidArgument on unknown keys or bad values.
  static RunConfig from_json(const Json& j);
  Json to_json() const;
};

struct RunInputs {
  std::vector<Letter> letters;
  Guidance guidance;
  std::string context;
};

// Throws kNotFound naming the first missing file.
RunInputs load_run_inputs(const RunConfig& config);

std::unique_ptr<Backend> make_backend(const RunConfig& config);

EngineConfig engine_config(const RunConfig& config);
PipelineConfig pipeline_config(const RunConfig& config, const std::string& context);

}  // namespace lmsub
