// lmsub: run the comment-letter pipeline, the bandit demo, evaluation,
// the review API, and trace inspection.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "lmsub/demo.hpp"
#include "lmsub/error.hpp"
#include "lmsub/evaluator.hpp"
#include "lmsub/pipeline.hpp"
#include "lmsub/run_config.hpp"
#include "lmsub/service.hpp"
#include "lmsub/views.hpp"

namespace fs = std::filesystem;
using namespace lmsub;

namespace {

std::string default_store() {
  const char* env = std::getenv("LMSUB_STORE");
  return env && *env ? env : "lmsub.db";
}

void require_file(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw Error(ErrorCode::kNotFound, "no such file: " + p.string());
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(ErrorCode::kInvalidArgument, "cannot write " + p.string());
  out << s;
}

void write_jsonl(const fs::path& p, const std::vector<Json>& rows) {
  std::string s;
  for (const auto& r : rows) s += r.dump() + "\n";
  write_text(p, s);
}

int exit_code(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kNotFound:
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kInputInvalid:
    case ErrorCode::kSchemaInvalid:
    case ErrorCode::kOutOfRange:
      return 2;
    default:
      return 1;
  }
}

struct RunArgs {
  std::string config_file, corpus, guidance, context, backend = "scripted", scripted_config, export_path;
  std::size_t batch_size = 10;
  std::uint64_t seed = 0;
  int workers = 4;
  int max_iters = 3;
  std::string store = default_store();
};

int cmd_run(const RunArgs& a) {
  Json j = Json::object();
  if (!a.config_file.empty()) {
    require_file(a.config_file);
    std::ifstream in(a.config_file);
    j = Json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::kInvalidArgument, a.config_file + " is not JSON");
  }
  // Flags override the configuration file.
  if (!a.corpus.empty()) j["corpus"] = a.corpus;
  if (!a.guidance.empty()) j["guidance"] = a.guidance;
  if (!a.context.empty()) j["context"] = a.context;
  if (!a.scripted_config.empty()) j["scripted_config"] = a.scripted_config;
  if (a.config_file.empty() || a.backend != "scripted") j["backend"] = a.backend;
  if (a.config_file.empty() || a.batch_size != 10) j["batch_size"] = a.batch_size;
  if (a.config_file.empty() || a.seed != 0) j["seed"] = a.seed;
  if (a.config_file.empty() || a.workers != 4) j["workers"] = a.workers;
  if (a.config_file.empty() || a.max_iters != 3) j["max_iters"] = a.max_iters;
  const auto config = RunConfig::from_json(j);
  const auto inputs = load_run_inputs(config);
  if (config.scripted_config) require_file(*config.scripted_config);

  Store store(a.store);
  auto backend = make_backend(config);
  Pipeline pipeline(store, *backend, engine_config(config), pipeline_config(config, inputs.context));
  const auto run_id = pipeline.run(inputs.letters, inputs.guidance, [&](const BatchRecord& b) {
    const auto report = batch_report(store, b.batch_id);
    std::cout << "batch " << b.batch_id << " reviewable: " << report["letters"] << " letters, "
              << report["concerns"] << " concerns, " << report["bins"].size() << " bins\n";
  });
  std::cout << "run " << run_id << " complete\n";
  if (!a.export_path.empty()) {
    write_jsonl(a.export_path, export_system_output(store, run_id));
    std::cout << "system output written to " << a.export_path << "\n";
  }
  return 0;
}

struct DemoArgs {
  int trials = 100;
  std::uint64_t seed = 0;
  std::string out;
  std::string backend = "scripted";
  std::string scripted_config;
  std::string letters = "QWXZ";
  std::int64_t ramp = 100;
};

int cmd_demo(const DemoArgs& a) {
  RunConfig rc;
  rc.backend = a.backend;
  rc.seed = a.seed;
  if (!a.scripted_config.empty()) {
    require_file(a.scripted_config);
    rc.scripted_config = a.scripted_config;
  }
  auto backend = make_backend(rc);
  demo::DemoConfig cfg;
  cfg.trials = a.trials;
  cfg.seed = a.seed;
  cfg.letters = a.letters;
  cfg.schedule = bandit::BetaSchedule::linear(0.0, 1.0, a.ramp);
  const auto result = demo::rare_letters_demo(*backend, cfg);
  result.write(a.out);
  const auto n = result.trials.size();
  const auto window = std::min<std::size_t>(n, 100);
  std::cout << "trials " << n << ", prompts " << result.arm_ids.size() << ", mean loss first " << window << ": "
            << result.mean_loss(0, window) << ", last " << window << ": " << result.mean_loss(n - window, n) << "\n"
            << "traces written to " << a.out << "\n";
  return 0;
}

int cmd_eval(const std::string& system_output, const std::string& truth, const std::string& corpus,
             const std::string& out) {
  for (const auto& p : {system_output, truth, corpus}) require_file(p);
  std::vector<eval::LetterText> letters;
  for (const auto& l : load_corpus(corpus)) letters.push_back({l.letter_id, l.text});
  const auto report = eval::evaluate(letters, eval::load_truth(truth), eval::load_system_output(system_output));
  fs::create_directories(out);
  write_text(fs::path(out) / "report.json", report.to_json().dump(2) + "\n");
  const auto text = report.to_text();
  write_text(fs::path(out) / "report.txt", text);
  std::cout << text;
  return 0;
}

int cmd_trace(const std::string& store_path, const std::string& id, bool json) {
  require_file(store_path);
  Store store(store_path);
  const auto t = store.trace(id);
  std::cout << (json ? views::trace(t).dump(2) + "\n" : views::trace_text(t));
  return 0;
}

int cmd_export(const std::string& store_path, std::string run_id, const std::string& out) {
  require_file(store_path);
  Store store(store_path);
  if (run_id.empty()) {
    const auto ids = run_ids(store);
    if (ids.size() != 1) throw Error(ErrorCode::kInvalidArgument, "store holds " + std::to_string(ids.size()) +
                                                                      " runs; pass --run");
    run_id = ids[0];
  }
  const auto rows = export_system_output(store, run_id);
  write_jsonl(out, rows);
  std::cout << rows.size() << " spans written to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lmsub: adaptive LM subroutines for public comment analysis"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "process a letter corpus in review batches");
  run_cmd->add_option("--config", run.config_file, "run configuration JSON");
  run_cmd->add_option("--corpus", run.corpus, "letters, JSONL");
  run_cmd->add_option("--guidance", run.guidance, "bin guidance, JSON");
  run_cmd->add_option("--context", run.context, "project description, text");
  run_cmd->add_option("--batch-size", run.batch_size, "letters per review batch");
  run_cmd->add_option("--backend", run.backend, "scripted or http")->check(CLI::IsMember({"scripted", "http"}));
  run_cmd->add_option("--scripted-config", run.scripted_config, "scripted backend pools, JSON");
  run_cmd->add_option("--seed", run.seed);
  run_cmd->add_option("--workers", run.workers);
  run_cmd->add_option("--max-iters", run.max_iters, "self-critique iterations");
  run_cmd->add_option("--store", run.store, "SQLite store (env LMSUB_STORE)");
  run_cmd->add_option("--export", run.export_path, "write system output spans, JSONL");

  DemoArgs demo_args;
  auto* demo_cmd = app.add_subcommand("demo-bandit", "rare-letters bandit demonstration");
  demo_cmd->add_option("--trials", demo_args.trials)->check(CLI::NonNegativeNumber);
  demo_cmd->add_option("--seed", demo_args.seed);
  demo_cmd->add_option("--out", demo_args.out, "output directory")->required();
  demo_cmd->add_option("--backend", demo_args.backend)->check(CLI::IsMember({"scripted", "http"}));
  demo_cmd->add_option("--scripted-config", demo_args.scripted_config);
  demo_cmd->add_option("--letters", demo_args.letters, "rare letter set");
  demo_cmd->add_option("--ramp", demo_args.ramp, "trials over which beta rises from 0 to 1");

  std::string sys_out, truth, eval_corpus, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "compare system output with reviewer annotations");
  eval_cmd->add_option("--system-output", sys_out, "spans, JSONL")->required();
  eval_cmd->add_option("--truth", truth, "reviewer comments, JSONL")->required();
  eval_cmd->add_option("--corpus", eval_corpus, "letters, JSONL")->required();
  eval_cmd->add_option("--out", eval_out, "report directory")->required();

  int port = 8080;
  std::string host = "127.0.0.1";
  std::string serve_store = default_store();
  auto* serve_cmd = app.add_subcommand("serve", "review API");
  serve_cmd->add_option("--port", port);
  serve_cmd->add_option("--host", host);
  serve_cmd->add_option("--store", serve_store);

  std::string trace_id, trace_store = default_store();
  bool trace_json = false;
  auto* trace_cmd = app.add_subcommand("trace", "print an invocation's audit trace");
  trace_cmd->add_option("--invocation", trace_id)->required();
  trace_cmd->add_option("--store", trace_store);
  trace_cmd->add_flag("--json", trace_json);

  std::string export_store = default_store(), export_run, export_out;
  auto* export_cmd = app.add_subcommand("export", "write a run's quote spans for evaluation");
  export_cmd->add_option("--store", export_store);
  export_cmd->add_option("--run", export_run);
  export_cmd->add_option("--out", export_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) {
      if (run.config_file.empty() && (run.corpus.empty() || run.guidance.empty())) {
        std::cerr << "run: --corpus and --guidance are required without --config\n";
        return 2;
      }
      return cmd_run(run);
    }
    if (*demo_cmd) return cmd_demo(demo_args);
    if (*eval_cmd) return cmd_eval(sys_out, truth, eval_corpus, eval_out);
    if (*serve_cmd) {
      Store store(serve_store);
      std::cout << "serving " << serve_store << " on http://" << host << ":" << port << "\n" << std::flush;
      serve(store, host, port);
      return 0;
    }
    if (*trace_cmd) return cmd_trace(trace_store, trace_id, trace_json);
    if (*export_cmd) return cmd_export(export_store, export_run, export_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
