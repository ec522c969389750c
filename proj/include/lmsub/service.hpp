#pragma once

// HTTP review API over a shared store. Routes and payloads are documented
// in docs/api.md.

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "lmsub/bandit.hpp"
#include "lmsub/store.hpp"

namespace httplib {
class Server;
}

namespace lmsub {

struct ServiceConfig {
  // Must match the engine configuration the pipeline runs with, so the
  // reported distribution is the one being sampled.
  bandit::BetaSchedule schedule = bandit::BetaSchedule::linear(0.0, 1.0, 100);
  double explore_prior = bandit::kDefaultExplorePrior;
};

struct HttpResponse {
  int status = 200;
  Json body;
};

class Service {
 public:
  explicit Service(Store& store, ServiceConfig config = {});
  ~Service();  // waits for runs started through POST /runs
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void mount(httplib::Server& server);

  HttpResponse list_batches(const std::string& run_id) const;
  HttpResponse batch_items(const std::string& batch_id, const std::string& stage) const;
  HttpResponse submit_feedback(const std::string& body, const std::string& reviewer_header);
  HttpResponse invocation_trace(const std::string& invocation_id) const;
  HttpResponse subroutine_arms(const std::string& subroutine_id, const std::string& batch_id) const;
  HttpResponse list_subroutines() const;
  HttpResponse start_run(const std::string& body);
  HttpResponse run_status(const std::string& run_id) const;

  void wait_for_runs();

 private:
  struct Job {
    std::string state;  // running | completed | failed
    std::string error;
    Json config;
  };

  Store& store_;
  ServiceConfig config_;
  mutable std::mutex mutex_;
  std::map<std::string, Job> jobs_;
  std::vector<std::thread> threads_;
};

// Blocks serving on host:port until the process is stopped.
void serve(Store& store, const std::string& host, int port, ServiceConfig config = {});

}  // namespace lmsub
