#pragma once

// Durable at-least-once task queue kept in the audit store, and a pool of
// worker threads that drains it.
//
// A task moves pending -> leased -> done, or back to pending on nack, or to
// dead once max_attempts leases have been used. A leased task whose lease
// expires is leasable again; a lease that would exceed max_attempts marks
// the task dead instead.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "lmsub/json.hpp"
#include "lmsub/store.hpp"

namespace lmsub {

enum class TaskState { kPending, kLeased, kDone, kDead };
std::string_view to_string(TaskState state);

struct Task {
  std::string task_id;
  std::string kind;
  Json payload;
  std::string idempotency_key;
  int attempts = 0;
  int max_attempts = 3;
  TaskState state = TaskState::kPending;
  std::optional<std::string> lease_owner;
  std::optional<std::int64_t> lease_expiry;  // microseconds, store clock
  std::string reason;
  std::optional<std::string> batch_id;
  std::int64_t created_at = 0;
  std::int64_t updated_at = 0;
};

struct QueueOptions {
  int max_attempts = 3;
  std::chrono::microseconds lease_duration = std::chrono::minutes(5);
};

class TaskQueue {
 public:
  explicit TaskQueue(Store& store, QueueOptions options = {});

  // Returns the existing task id when the key was enqueued before, whatever
  // its state. Throws Error(kInvalidArgument) for an empty key.
  std::string enqueue(std::string_view kind, const Json& payload, std::string_view idempotency_key,
                      const std::optional<std::string>& batch_id = std::nullopt);

  std::optional<Task> lease(std::string_view worker_id,
                            std::optional<std::chrono::microseconds> lease_duration = std::nullopt);

  // Both throw Error(kLeaseNotHeld) unless worker_id holds the task's lease.
  void ack(std::string_view task_id, std::string_view worker_id);
  void nack(std::string_view task_id, std::string_view worker_id, std::string_view reason);

  // Returns every leased task to pending, keeping its attempt count. Called
  // by a process that restarts as the queue's only consumer, so leases held
  // by a killed predecessor do not have to wait out their expiry.
  std::int64_t reclaim_leases();

  std::optional<Task> task(std::string_view task_id) const;
  std::vector<Task> tasks(std::optional<TaskState> state = std::nullopt) const;
  // Tasks of a batch not yet done or dead.
  std::int64_t unfinished(std::string_view batch_id) const;
  std::int64_t unfinished() const;

  Store& store() { return store_; }
  const QueueOptions& options() const { return options_; }

 private:
  Store& store_;
  QueueOptions options_;
};

class WorkerPool {
 public:
  // A handler throws to nack the task; returning normally acks it.
  using Handler = std::function<void(const Task&)>;

  WorkerPool(TaskQueue& queue, int threads, std::string worker_prefix = "worker");
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  void on(std::string kind, Handler handler);
  void start();
  void stop();

  // Blocks until no task is pending or leased.
  void wait_idle() const;

 private:
  void loop(std::string worker_id);

  TaskQueue& queue_;
  int threads_;
  std::string prefix_;
  std::map<std::string, Handler> handlers_;
  std::vector<std::thread> workers_;
  std::atomic<bool> running_{false};
};

}  // namespace lmsub
