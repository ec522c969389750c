#pragma once

// Text-generation backends.
//
// HttpBackend talks to a remote model service. ScriptedBackend is a pure
// function of (profile table, seed, request) that simulates prompt quality:
// each known prompt carries an error rate and two named generators, and a
// hash of the request decides which generator answers.

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "lmsub/json.hpp"
#include "lmsub/schema.hpp"

namespace lmsub {

inline constexpr int kDefaultMaxRetries = 2;
inline constexpr double kDefaultTaskTemperature = 0.2;
inline constexpr double kDefaultSynthesisTemperature = 1.0;

struct GenerationRequest {
  std::string system_prompt;
  std::string user_payload;
  std::string constraint;  // constraint document; empty for free text
  double temperature = kDefaultTaskTemperature;
  std::optional<std::uint64_t> seed;
  int attempt = 0;  // retry index, folded into the scripted draw
};

struct GenerationResult {
  std::string raw_text;
  std::string backend_id;
  std::chrono::microseconds latency{0};
};

struct SynthesisRequest {
  const SubroutineSpec* spec = nullptr;
  std::optional<std::string> context;
  // Number of arms the subroutine already has; the scripted backend uses it
  // to walk its pool without repeating.
  std::int64_t ordinal = 0;
  std::uint64_t seed = 0;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string id() const = 0;
  // Throws Error(kBackendUnreachable) or Error(kUnknownFingerprint).
  virtual GenerationResult generate(const GenerationRequest& request) = 0;
  // Throws Error(kBackendUnreachable) or Error(kEmptyGeneration).
  virtual std::string synthesize_prompt(const SynthesisRequest& request) = 0;
};

// Outcome of generate-then-validate with retries.
struct ValidatedGeneration {
  std::optional<Json> record;  // set on success
  std::string raw_text;        // text of the last attempt
  int attempt = 0;             // index of the last attempt
  std::string error;           // set on failure
  std::vector<std::string> violations;
};

// Validates each response against the schema; a violation triggers a retry
// with attempt + 1, up to max_retries retries. Backend errors are not
// retried and end up in `error`.
ValidatedGeneration generate_validated(Backend& backend, GenerationRequest request, const Schema& output_schema,
                                       int max_retries = kDefaultMaxRetries);

// ---------------------------------------------------------------------------
// Scripted backend

struct ScriptedArmProfile {
  std::string prompt_fingerprint;
  double error_rate = 0.0;
  std::string correct_behavior;    // generator name, optionally "name:arg"
  std::string incorrect_behavior;
};

struct PoolEntry {
  std::string prompt;
  ScriptedArmProfile profile;
};

struct ScriptedConfig {
  bool strict = true;                       // unknown prompts error when set
  double fallback_error_rate = 0.5;         // non-strict fallback
  std::string fallback_correct = "schema_fill";
  std::string fallback_incorrect = "schema_fill";
  std::map<std::string, std::vector<PoolEntry>> pools;  // keyed by subroutine name
  std::vector<ScriptedArmProfile> profiles;             // extra fingerprints
  std::chrono::microseconds latency{0};                 // simulated per call

  // {"strict": bool, "fallback_error_rate": x, "latency_ms": n,
  //  "pools": {name: [{"prompt", "error_rate", "correct", "incorrect"}]},
  //  "profiles": [{"fingerprint" | "prompt", "error_rate", "correct", "incorrect"}]}
  static ScriptedConfig from_json(const Json& j);
  Json to_json() const;
};

class ScriptedBackend final : public Backend {
 public:
  ScriptedBackend(ScriptedConfig config, std::uint64_t seed);

  std::string id() const override { return "scripted"; }
  GenerationResult generate(const GenerationRequest& request) override;
  std::string synthesize_prompt(const SynthesisRequest& request) override;

  // Profile for a prompt: exact fingerprint, else the longest pool prompt
  // that prefixes it (variants inherit their base prompt's profile).
  std::optional<ScriptedArmProfile> profile_for(std::string_view system_prompt) const;

  const ScriptedConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

 private:
  ScriptedConfig config_;
  std::uint64_t seed_;
  std::map<std::string, ScriptedArmProfile> by_fingerprint_;
};

// Profiles for the four pipeline stages, shipped as
// assets/scripted_profiles.json.
std::string_view default_scripted_profiles();

// Runs one named generator. Exposed for tests.
std::string run_generator(std::string_view behavior, std::string_view user_payload, const Json& constraint,
                          std::uint64_t draw);

// Prompts the scripted backend builds for a spec: pool text, optional
// variant marker, the output schema block, and the context section.
std::string scripted_prompt(std::string_view base, std::int64_t variant, const SubroutineSpec& spec,
                            const std::optional<std::string>& context);

// ---------------------------------------------------------------------------
// HTTP backend
//
// POST <endpoint> with body
//   {"model", "system", "user", "constraint" (object or null), "temperature", "seed" (or null)}
// and header "Authorization: Bearer <key>" when a key is configured. The
// response body must be {"text": "..."}.

struct HttpConfig {
  std::string endpoint;  // LMSUB_ENDPOINT, e.g. http://localhost:8000/v1/generate
  std::string api_key;   // LMSUB_API_KEY
  std::string model;     // LMSUB_MODEL
  int max_in_flight = 8;
  double synthesis_temperature = kDefaultSynthesisTemperature;
  std::chrono::seconds timeout{120};

  static HttpConfig from_env();
};

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpConfig config);

  std::string id() const override { return "http:" + config_.model; }
  GenerationResult generate(const GenerationRequest& request) override;
  std::string synthesize_prompt(const SynthesisRequest& request) override;

 private:
  HttpConfig config_;
  std::string scheme_host_;
  std::string path_;
  std::counting_semaphore<1024> in_flight_;
};

}  // namespace lmsub
