#include "lmsub/run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "lmsub/error.hpp"

namespace lmsub {

namespace {

std::string read_text(const std::filesystem::path& path, std::string_view what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot read " + std::string(what) + " " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

RunConfig RunConfig::from_json(const Json& j) {
  if (!j.is_object()) throw Error(ErrorCode::kInvalidArgument, "run configuration must be an object");
  static const std::set<std::string> known{"corpus",  "guidance", "context", "batch_size", "backend",
                                           "scripted_config", "seed", "workers", "max_iters", "loss_threshold"};
  for (const auto& [k, _] : j.items()) {
    if (!known.count(k)) throw Error(ErrorCode::kInvalidArgument, "unknown run configuration key " + k);
  }
  RunConfig c;
  try {
    if (!j.contains("corpus") || !j.contains("guidance")) {
      throw Error(ErrorCode::kInvalidArgument, "run configuration needs corpus and guidance");
    }
    c.corpus = j.at("corpus").get<std::string>();
    c.guidance = j.at("guidance").get<std::string>();
    if (j.contains("context") && !j["context"].is_null()) c.context = j["context"].get<std::string>();
    if (j.contains("scripted_config") && !j["scripted_config"].is_null()) {
      c.scripted_config = j["scripted_config"].get<std::string>();
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.backend = j.value("backend", c.backend);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.max_iters = j.value("max_iters", c.max_iters);
    c.loss_threshold = j.value("loss_threshold", c.loss_threshold);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("run configuration: ") + e.what());
  }
  if (c.backend != "scripted" && c.backend != "http") {
    throw Error(ErrorCode::kInvalidArgument, "backend must be scripted or http, got " + c.backend);
  }
  if (c.batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch_size must be positive");
  if (c.workers < 1) throw Error(ErrorCode::kInvalidArgument, "workers must be positive");
  if (c.max_iters < 1) throw Error(ErrorCode::kInvalidArgument, "max_iters must be positive");
  if (!(c.loss_threshold >= 0 && c.loss_threshold <= 1)) {
    throw Error(ErrorCode::kInvalidArgument, "loss_threshold must lie in [0, 1]");
  }
  return c;
}

Json RunConfig::to_json() const {
  Json j{{"corpus", corpus.string()},   {"guidance", guidance.string()}, {"batch_size", batch_size},
         {"backend", backend},          {"seed", seed},                  {"workers", workers},
         {"max_iters", max_iters},      {"loss_threshold", loss_threshold}};
  j["context"] = context ? Json(context->string()) : Json(nullptr);
  j["scripted_config"] = scripted_config ? Json(scripted_config->string()) : Json(nullptr);
  return j;
}

RunInputs load_run_inputs(const RunConfig& config) {
  for (const auto* p : {&config.corpus, &config.guidance}) {
    if (!std::filesystem::exists(*p)) throw Error(ErrorCode::kNotFound, "no such file: " + p->string());
  }
  if (config.context && !std::filesystem::exists(*config.context)) {
    throw Error(ErrorCode::kNotFound, "no such file: " + config.context->string());
  }
  RunInputs in;
  in.letters = load_corpus(config.corpus);
  in.guidance = load_guidance(config.guidance);
  if (config.context) in.context = read_text(*config.context, "context");
  while (!in.context.empty() && (in.context.back() == '\n' || in.context.back() == '\r')) in.context.pop_back();
  return in;
}

std::unique_ptr<Backend> make_backend(const RunConfig& config) {
  if (config.backend == "http") return std::make_unique<HttpBackend>(HttpConfig::from_env());
  Json pools;
  if (config.scripted_config) {
    pools = Json::parse(read_text(*config.scripted_config, "scripted config"), nullptr, false);
    if (pools.is_discarded()) {
      throw Error(ErrorCode::kInvalidArgument, config.scripted_config->string() + " is not JSON");
    }
  } else {
    pools = Json::parse(default_scripted_profiles());
  }
  return std::make_unique<ScriptedBackend>(ScriptedConfig::from_json(pools), config.seed);
}

EngineConfig engine_config(const RunConfig& config) {
  EngineConfig e;
  e.seed = config.seed;
  return e;
}

PipelineConfig pipeline_config(const RunConfig& config, const std::string& context) {
  PipelineConfig p;
  p.batch_size = config.batch_size;
  p.workers = config.workers;
  p.loop.max_iters = config.max_iters;
  p.loop.threshold = config.loss_threshold;
  p.project_context = context;
  return p;
}

}  // namespace lmsub
