#include <cstdlib>

#include "httplib.h"
#include "lmsub/backend.hpp"
#include "lmsub/error.hpp"
#include "lmsub/prompt_format.hpp"

namespace lmsub {

namespace {

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : std::move(fallback);
}

// Releases a semaphore slot on scope exit.
struct SlotGuard {
  std::counting_semaphore<1024>& s;
  explicit SlotGuard(std::counting_semaphore<1024>& sem) : s(sem) { s.acquire(); }
  ~SlotGuard() { s.release(); }
};

}  // namespace

HttpConfig HttpConfig::from_env() {
  HttpConfig c;
  c.endpoint = env_or("LMSUB_ENDPOINT", "");
  c.api_key = env_or("LMSUB_API_KEY", "");
  c.model = env_or("LMSUB_MODEL", "default");
  return c;
}

HttpBackend::HttpBackend(HttpConfig config)
    : config_(std::move(config)), in_flight_(std::clamp(config_.max_in_flight, 1, 1024)) {
  const auto scheme_end = config_.endpoint.find("://");
  if (config_.endpoint.empty() || scheme_end == std::string::npos) {
    throw Error(ErrorCode::kInvalidArgument, "LMSUB_ENDPOINT must be an absolute http URL");
  }
  if (config_.endpoint.substr(0, scheme_end) != "http") {
    throw Error(ErrorCode::kInvalidArgument, "only plain http endpoints are supported: " + config_.endpoint);
  }
  const auto path_start = config_.endpoint.find('/', scheme_end + 3);
  scheme_host_ = config_.endpoint.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : config_.endpoint.substr(path_start);
}

namespace {

std::string post(const std::string& scheme_host, const std::string& path, const HttpConfig& config,
                 const Json& body) {
  httplib::Client client(scheme_host);
  client.set_connection_timeout(config.timeout);
  client.set_read_timeout(config.timeout);
  httplib::Headers headers;
  if (!config.api_key.empty()) headers.emplace("Authorization", "Bearer " + config.api_key);
  auto res = client.Post(path, headers, body.dump(), "application/json");
  if (!res) {
    throw Error(ErrorCode::kBackendUnreachable, scheme_host + path + ": " + httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw Error(ErrorCode::kBackendUnreachable, scheme_host + path + ": HTTP " + std::to_string(res->status));
  }
  auto reply = Json::parse(res->body, nullptr, false);
  if (reply.is_discarded() || !reply.contains("text") || !reply["text"].is_string()) {
    throw Error(ErrorCode::kBackendUnreachable, "malformed backend response (expected {\"text\": ...})");
  }
  return reply["text"].get<std::string>();
}

}  // namespace

GenerationResult HttpBackend::generate(const GenerationRequest& request) {
  const auto start = std::chrono::steady_clock::now();
  Json body = {{"model", config_.model},
               {"system", request.system_prompt},
               {"user", request.user_payload},
               {"constraint", request.constraint.empty() ? Json(nullptr) : Json::parse(request.constraint)},
               {"temperature", request.temperature},
               {"seed", request.seed ? Json(*request.seed) : Json(nullptr)}};
  GenerationResult result;
  {
    SlotGuard slot(in_flight_);
    result.raw_text = post(scheme_host_, path_, config_, body);
  }
  result.backend_id = id();
  result.latency = std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - start);
  return result;
}

std::string HttpBackend::synthesize_prompt(const SynthesisRequest& request) {
  std::string user = serialize_declaration(*request.spec);
  Json body = {{"model", config_.model},
               {"system", std::string(meta_prompt())},
               {"user", user},
               {"constraint", nullptr},
               {"temperature", config_.synthesis_temperature},
               {"seed", request.seed}};
  std::string text;
  {
    SlotGuard slot(in_flight_);
    text = post(scheme_host_, path_, config_, body);
  }
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    throw Error(ErrorCode::kEmptyGeneration, "prompt engineer returned an empty prompt for " + request.spec->name);
  }
  text += "\n\n" + render_schema_block(request.spec->output_schema);
  return text;
}

}  // namespace lmsub
