#include "lmsub/service.hpp"

#include <algorithm>
#include <set>

#include "httplib.h"
#include "lmsub/critique.hpp"
#include "lmsub/error.hpp"
#include "lmsub/pipeline.hpp"
#include "lmsub/run_config.hpp"
#include "lmsub/views.hpp"

namespace lmsub {

namespace {

const std::vector<std::string_view> kStages{kStageSummarize, kStageExtract, kStageBin, kStageBinSummary};

HttpResponse error_response(int status, const std::string& message, std::string_view code = {}) {
  Json body{{"error", message}};
  if (!code.empty()) body["code"] = std::string(code);
  return {status, body};
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound:
    case ErrorCode::kUnknownArm:
      return 404;
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kOutOfRange:
    case ErrorCode::kInputInvalid:
    case ErrorCode::kSchemaInvalid:
      return 422;
    case ErrorCode::kBackendUnreachable:
      return 502;
    default:
      return 500;
  }
}

template <typename F>
HttpResponse guarded(F&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    return error_response(status_for(e.code()), e.what(), to_string(e.code()));
  } catch (const Json::exception& e) {
    return error_response(400, std::string("malformed JSON: ") + e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

void reply(httplib::Response& res, const HttpResponse& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

}  // namespace

Service::Service(Store& store, ServiceConfig config) : store_(store), config_(config) {}

Service::~Service() { wait_for_runs(); }

void Service::wait_for_runs() {
  std::vector<std::thread> threads;
  {
    std::lock_guard lock(mutex_);
    threads.swap(threads_);
  }
  for (auto& t : threads) t.join();
}

HttpResponse Service::list_batches(const std::string& run_id) const {
  return guarded([&] {
    Json out = Json::array();
    for (const auto& b : store_.batches(run_id)) {
      Json j = views::batch(b);
      Json stages = Json::object();
      for (auto stage : kStages) {
        std::size_t ok = 0, failed = 0;
        for (const auto& item : store_.list_review_items(b.batch_id, stage)) {
          (item.status == "succeeded" ? ok : failed) += 1;
        }
        stages[std::string(stage)] = {{"succeeded", ok}, {"failed", failed}};
      }
      j["stages"] = stages;
      out.push_back(std::move(j));
    }
    return HttpResponse{200, Json{{"batches", out}}};
  });
}

HttpResponse Service::batch_items(const std::string& batch_id, const std::string& stage) const {
  return guarded([&] {
    if (!stage.empty() && std::find(kStages.begin(), kStages.end(), stage) == kStages.end()) {
      return error_response(422, "unknown stage " + stage);
    }
    if (!store_.batch(batch_id)) return error_response(404, "unknown batch " + batch_id);
    Json items = Json::array();
    for (auto s : kStages) {
      if (!stage.empty() && s != stage) continue;
      for (const auto& item : store_.list_review_items(batch_id, s)) items.push_back(views::review_item(item));
    }
    return HttpResponse{200, Json{{"batch_id", batch_id}, {"items", items}}};
  });
}

HttpResponse Service::submit_feedback(const std::string& body, const std::string& reviewer_header) {
  return guarded([&] {
    const auto j = Json::parse(body);
    if (!j.is_object() || !j.contains("invocation_id") || !j["invocation_id"].is_string()) {
      return error_response(422, "invocation_id is required");
    }
    if (!j.contains("ratings") || !j["ratings"].is_object()) return error_response(422, "ratings must be an object");
    SmeSubmission sub;
    sub.invocation_id = j["invocation_id"].get<std::string>();
    sub.ratings = j["ratings"];
    if (j.contains("reviewer_id") && j["reviewer_id"].is_string()) {
      sub.reviewer_id = j["reviewer_id"].get<std::string>();
    } else if (!reviewer_header.empty()) {
      sub.reviewer_id = reviewer_header;
    }
    if (j.contains("submission_id") && j["submission_id"].is_string()) {
      sub.submission_id = j["submission_id"].get<std::string>();
    }
    if (j.contains("comment") && j["comment"].is_string()) sub.rationale = j["comment"].get<std::string>();

    const auto inv = store_.invocation(sub.invocation_id);
    if (!inv) return error_response(404, "unknown invocation " + sub.invocation_id);
    if (inv->batch_id) {
      const auto b = store_.batch(*inv->batch_id);
      sub.late = b && b->state == "superseded";
    }
    const auto commit = propagate_sme_feedback(store_, sub);
    const bool late = commit.record.late;

    Json updated = Json::array();
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& u : commit.applied) {
      if (!seen.insert({u.subroutine_id, u.arm_id}).second) continue;
      if (auto a = store_.arm(u.subroutine_id, u.arm_id)) updated.push_back(views::arm(*a));
    }
    Json arms = Json::array();
    for (const auto& a : store_.arms(inv->subroutine_id)) arms.push_back(views::arm(a));
    Json out{{"feedback", views::feedback(commit.record)},
             {"inserted", commit.inserted},
             {"late", late},
             {"updated_arms", updated},
             {"subroutine_id", inv->subroutine_id},
             {"arms", arms}};
    return HttpResponse{late ? 409 : (commit.inserted ? 201 : 200), out};
  });
}

HttpResponse Service::invocation_trace(const std::string& invocation_id) const {
  return guarded([&] { return HttpResponse{200, views::trace(store_.trace(invocation_id))}; });
}

HttpResponse Service::subroutine_arms(const std::string& subroutine_id, const std::string& batch_id) const {
  return guarded([&] {
    const auto sub = store_.subroutine(subroutine_id);
    if (!sub) return error_response(404, "unknown subroutine " + subroutine_id);
    bandit::BanditState state;
    std::vector<std::string> prompts;
    if (!batch_id.empty()) {
      const auto snap = store_.snapshot(batch_id, subroutine_id);
      if (!snap) return error_response(404, "no snapshot of " + subroutine_id + " for batch " + batch_id);
      state = snap->state;
      prompts = snap->prompts;
    } else {
      state = store_.bandit_state(subroutine_id);
      for (const auto& a : store_.arms(subroutine_id)) prompts.push_back(a.prompt);
    }
    state.beta = bandit::beta_at(config_.schedule, state.trial_index);
    const auto dist = bandit::sample_distribution(state, config_.explore_prior);
    Json arms = Json::array();
    for (std::size_t i = 0; i < state.arms.size(); ++i) {
      Json a = views::arm_stats(state.arms[i]);
      a["prompt"] = i < prompts.size() ? prompts[i] : "";
      a["probability"] = dist.probability(state.arms[i].arm_id);
      arms.push_back(std::move(a));
    }
    Json out{{"subroutine_id", subroutine_id},
             {"name", sub->name},
             {"batch_id", batch_id.empty() ? Json(nullptr) : Json(batch_id)},
             {"trial_index", state.trial_index},
             {"beta", state.beta},
             {"explore_prior", config_.explore_prior},
             {"explore_loss", bandit::explore_loss(state.arms, config_.explore_prior)},
             {"explore_probability", dist.explore_probability()},
             {"arms", arms},
             {"distribution", views::distribution(dist)}};
    return HttpResponse{200, out};
  });
}

HttpResponse Service::list_subroutines() const {
  return guarded([&] {
    Json out = Json::array();
    for (const auto& s : store_.subroutines()) {
      out.push_back({{"subroutine_id", s.subroutine_id},
                     {"name", s.name},
                     {"rating_dims", s.rating_dims},
                     {"critique_of", s.critique_of ? Json(*s.critique_of) : Json(nullptr)},
                     {"critique_id", s.critique_id ? Json(*s.critique_id) : Json(nullptr)},
                     {"arm_count", store_.arms(s.subroutine_id).size()}});
    }
    return HttpResponse{200, Json{{"subroutines", out}}};
  });
}

HttpResponse Service::start_run(const std::string& body) {
  return guarded([&] {
    const auto config = RunConfig::from_json(Json::parse(body));
    auto inputs = std::make_shared<RunInputs>(load_run_inputs(config));
    std::shared_ptr<Backend> backend = make_backend(config);
    auto ec = engine_config(config);
    ec.schedule = config_.schedule;
    ec.explore_prior = config_.explore_prior;
    auto pipeline =
        std::make_shared<Pipeline>(store_, *backend, ec, pipeline_config(config, inputs->context));
    const auto run_id = pipeline->run_id_for(inputs->letters, inputs->guidance);

    std::lock_guard lock(mutex_);
    if (auto it = jobs_.find(run_id); it != jobs_.end() && it->second.state != "failed") {
      return HttpResponse{200, Json{{"run_id", run_id}, {"state", it->second.state}}};
    }
    jobs_[run_id] = Job{"running", "", config.to_json()};
    threads_.emplace_back([this, run_id, inputs, backend, pipeline] {
      std::string state = "completed", error;
      try {
        pipeline->run(inputs->letters, inputs->guidance);
      } catch (const std::exception& e) {
        state = "failed";
        error = e.what();
      }
      std::lock_guard l(mutex_);
      jobs_[run_id].state = state;
      jobs_[run_id].error = error;
    });
    return HttpResponse{202, Json{{"run_id", run_id}, {"state", "running"}}};
  });
}

HttpResponse Service::run_status(const std::string& run_id) const {
  return guarded([&] {
    Json out{{"run_id", run_id}};
    {
      std::lock_guard lock(mutex_);
      if (auto it = jobs_.find(run_id); it != jobs_.end()) {
        out["state"] = it->second.state;
        out["config"] = it->second.config;
        if (!it->second.error.empty()) out["error"] = it->second.error;
      }
    }
    const auto batches = store_.batches(run_id);
    if (!out.contains("state")) {
      if (batches.empty()) return error_response(404, "unknown run " + run_id);
      bool done = true;
      for (const auto& b : batches) done = done && b.state != "processing";
      out["state"] = done ? "completed" : "incomplete";
    }
    Json bs = Json::array();
    for (const auto& b : batches) bs.push_back({{"batch_id", b.batch_id}, {"state", b.state}});
    out["batches"] = bs;
    return HttpResponse{200, out};
  });
}

void Service::mount(httplib::Server& server) {
  server.Get("/batches", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, list_batches(req.has_param("run_id") ? req.get_param_value("run_id") : ""));
  });
  // Batch ids contain '/', so the id pattern is greedy up to the last
  // "/items".
  server.Get(R"(/batches/(.+)/items)", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, batch_items(req.matches[1], req.has_param("stage") ? req.get_param_value("stage") : ""));
  });
  server.Post("/feedback", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, submit_feedback(req.body, req.get_header_value("X-Reviewer-Id")));
  });
  server.Get(R"(/invocations/([^/]+)/trace)", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, invocation_trace(req.matches[1]));
  });
  server.Get("/subroutines", [this](const httplib::Request&, httplib::Response& res) { reply(res, list_subroutines()); });
  server.Get(R"(/subroutines/([^/]+)/arms)", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, subroutine_arms(req.matches[1], req.has_param("batch") ? req.get_param_value("batch") : ""));
  });
  server.Post("/runs", [this](const httplib::Request& req, httplib::Response& res) { reply(res, start_run(req.body)); });
  server.Get(R"(/runs/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
    reply(res, run_status(req.matches[1]));
  });
}

void serve(Store& store, const std::string& host, int port, ServiceConfig config) {
  Service service(store, config);
  httplib::Server server;
  service.mount(server);
  if (!server.listen(host, port)) {
    throw Error(ErrorCode::kInvalidArgument, "cannot listen on " + host + ":" + std::to_string(port));
  }
}

}  // namespace lmsub
