#pragma once

// Declares subroutines and invokes them: sample an arm (synthesizing a new
// prompt on exploration), generate under the output constraint with
// retries, and persist the invocation with its dependency edges.

#include <atomic>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lmsub/backend.hpp"
#include "lmsub/bandit.hpp"
#include "lmsub/json.hpp"
#include "lmsub/prompt_format.hpp"
#include "lmsub/schema.hpp"
#include "lmsub/store.hpp"

namespace lmsub {

struct EngineConfig {
  bandit::BetaSchedule schedule = bandit::BetaSchedule::linear(0.0, 1.0, 100);
  double explore_prior = bandit::kDefaultExplorePrior;
  double temperature = kDefaultTaskTemperature;
  int max_retries = kDefaultMaxRetries;
  std::uint64_t seed = 0;
};

struct SubroutineHandle {
  std::string subroutine_id;
  SubroutineSpec spec;
};

// name + "-" + first 12 hex of sha256(declaration and constraint documents).
std::string subroutine_id_for(const SubroutineSpec& spec);

struct InvokeOptions {
  std::optional<std::string> idempotency_key;
  std::optional<std::string> batch_id;  // sample from the batch snapshot
  std::optional<RevisionContext> revision;
  std::optional<Schema> input_schema;   // per-call overrides
  std::optional<Schema> output_schema;
  std::string role = "target";
  std::optional<std::string> critiques;
};

struct ReplayResult {
  std::string recorded;
  std::string replayed;
  bool matches() const { return recorded == replayed; }
};

class Engine {
 public:
  Engine(Store& store, Backend& backend, EngineConfig config = {});

  Store& store() { return store_; }
  Backend& backend() { return backend_; }
  const EngineConfig& config() const { return config_; }

  // Validates the spec and registers it. Idempotent.
  SubroutineHandle declare(SubroutineSpec spec);

  // Throws kInputInvalid (nothing persisted), kBackendUnreachable or
  // kEmptyGeneration from synthesis (nothing persisted). Generation failures
  // after retries are persisted as failed invocations and returned.
  Invocation invoke(const SubroutineHandle& handle, const Json& input, const std::vector<std::string>& parents = {},
                    const InvokeOptions& options = {});

  // Sampling distribution at the active beta: the batch snapshot when given,
  // else live statistics.
  bandit::Distribution distribution(std::string_view subroutine_id,
                                    const std::optional<std::string>& batch_id = std::nullopt) const;
  double active_beta(std::string_view subroutine_id, const std::optional<std::string>& batch_id = std::nullopt) const;

  // Non-LM record of a letter entering the system.
  Invocation ingest(const std::string& letter_id, const std::string& text, const Json& metadata,
                    const std::optional<std::string>& batch_id = std::nullopt);

  // Re-sends a recorded invocation's (prompt, payload, constraint, seed,
  // attempt) to the backend.
  ReplayResult replay(std::string_view invocation_id);

 private:
  bandit::BanditState state_for(std::string_view subroutine_id, const std::optional<std::string>& batch_id,
                                std::vector<std::string>* prompts, std::optional<std::string>* snapshot_id) const;

  Store& store_;
  Backend& backend_;
  EngineConfig config_;
  std::atomic<std::uint64_t> counter_{0};
};

}  // namespace lmsub
