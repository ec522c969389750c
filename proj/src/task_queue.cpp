#include "lmsub/task_queue.hpp"

#include "lmsub/error.hpp"
#include "lmsub/hashing.hpp"
#include "store_impl.hpp"

namespace lmsub {
namespace {

constexpr const char* kTaskColumns =
    "task_id, kind, payload, idempotency_key, attempts, max_attempts, state, lease_owner, lease_expiry, reason, "
    "batch_id, created_at, updated_at";

TaskState parse_state(const std::string& s) {
  if (s == "pending") return TaskState::kPending;
  if (s == "leased") return TaskState::kLeased;
  if (s == "done") return TaskState::kDone;
  return TaskState::kDead;
}

Task read_task(const sql::Statement& st) {
  Task t;
  t.task_id = st.text(0);
  t.kind = st.text(1);
  t.payload = Json::parse(st.text(2));
  t.idempotency_key = st.text(3);
  t.attempts = static_cast<int>(st.integer(4));
  t.max_attempts = static_cast<int>(st.integer(5));
  t.state = parse_state(st.text(6));
  t.lease_owner = st.optional_text(7);
  if (!st.is_null(8)) t.lease_expiry = st.integer(8);
  t.reason = st.text(9);
  t.batch_id = st.optional_text(10);
  t.created_at = st.integer(11);
  t.updated_at = st.integer(12);
  return t;
}

std::optional<Task> load_task(sql::Database& db, std::string_view task_id) {
  auto st = db.prepare(std::string("SELECT ") + kTaskColumns + " FROM tasks WHERE task_id = ?");
  st.bind_all(task_id);
  if (!st.step()) return std::nullopt;
  return read_task(st);
}

Task held_task(sql::Database& db, std::string_view task_id, std::string_view worker_id) {
  auto t = load_task(db, task_id);
  if (!t) throw Error(ErrorCode::kNotFound, "unknown task " + std::string(task_id));
  if (t->state != TaskState::kLeased || t->lease_owner != std::string(worker_id)) {
    throw Error(ErrorCode::kLeaseNotHeld, "worker " + std::string(worker_id) + " does not hold task " +
                                              std::string(task_id));
  }
  return *t;
}

}  // namespace

std::string_view to_string(TaskState state) {
  switch (state) {
    case TaskState::kPending: return "pending";
    case TaskState::kLeased: return "leased";
    case TaskState::kDone: return "done";
    case TaskState::kDead: return "dead";
  }
  return "dead";
}

TaskQueue::TaskQueue(Store& store, QueueOptions options) : store_(store), options_(options) {
  if (options_.max_attempts < 1) throw Error(ErrorCode::kInvalidArgument, "max_attempts must be >= 1");
}

std::string TaskQueue::enqueue(std::string_view kind, const Json& payload, std::string_view idempotency_key,
                               const std::optional<std::string>& batch_id) {
  if (idempotency_key.empty()) throw Error(ErrorCode::kInvalidArgument, "task idempotency key must be nonempty");
  auto& impl = store_.impl();
  return impl.transaction([&] {
    auto existing = impl.db.prepare("SELECT task_id FROM tasks WHERE idempotency_key = ?");
    existing.bind_all(idempotency_key);
    if (existing.step()) return existing.text(0);
    const std::string task_id = "task-" + sha256_hex(idempotency_key).substr(0, 24);
    const auto now = impl.next_timestamp();
    impl.db
        .prepare("INSERT INTO tasks(task_id, kind, payload, idempotency_key, attempts, max_attempts, state, "
                 "batch_id, created_at, updated_at) VALUES (?, ?, ?, ?, 0, ?, 'pending', ?, ?, ?)")
        .bind_all(task_id, kind, payload.dump(), idempotency_key, options_.max_attempts, batch_id, now, now)
        .run();
    return task_id;
  });
}

std::optional<Task> TaskQueue::lease(std::string_view worker_id,
                                     std::optional<std::chrono::microseconds> lease_duration) {
  const auto duration = lease_duration.value_or(options_.lease_duration).count();
  auto& impl = store_.impl();
  return impl.transaction([&]() -> std::optional<Task> {
    auto& db = impl.db;
    for (;;) {
      const auto now = impl.clock->now_us();
      auto st = db.prepare(std::string("SELECT ") + kTaskColumns +
                           " FROM tasks WHERE state = 'pending' OR (state = 'leased' AND lease_expiry <= ?) "
                           "ORDER BY created_at, task_id LIMIT 1");
      st.bind_all(now);
      if (!st.step()) return std::nullopt;
      Task t = read_task(st);
      const auto stamp = impl.next_timestamp();
      if (t.attempts >= t.max_attempts) {
        db.prepare("UPDATE tasks SET state = 'dead', lease_owner = NULL, lease_expiry = NULL, reason = ?, "
                   "updated_at = ? WHERE task_id = ?")
            .bind_all("lease expired after " + std::to_string(t.attempts) + " attempts", stamp, t.task_id)
            .run();
        continue;
      }
      db.prepare("UPDATE tasks SET state = 'leased', attempts = attempts + 1, lease_owner = ?, lease_expiry = ?, "
                 "updated_at = ? WHERE task_id = ?")
          .bind_all(worker_id, now + duration, stamp, t.task_id)
          .run();
      return load_task(db, t.task_id);
    }
  });
}

void TaskQueue::ack(std::string_view task_id, std::string_view worker_id) {
  auto& impl = store_.impl();
  impl.transaction([&] {
    held_task(impl.db, task_id, worker_id);
    impl.db
        .prepare("UPDATE tasks SET state = 'done', lease_owner = NULL, lease_expiry = NULL, updated_at = ? "
                 "WHERE task_id = ?")
        .bind_all(impl.next_timestamp(), task_id)
        .run();
  });
}

void TaskQueue::nack(std::string_view task_id, std::string_view worker_id, std::string_view reason) {
  auto& impl = store_.impl();
  impl.transaction([&] {
    const Task t = held_task(impl.db, task_id, worker_id);
    const char* next = t.attempts < t.max_attempts ? "pending" : "dead";
    impl.db
        .prepare("UPDATE tasks SET state = ?, lease_owner = NULL, lease_expiry = NULL, reason = ?, updated_at = ? "
                 "WHERE task_id = ?")
        .bind_all(next, reason, impl.next_timestamp(), task_id)
        .run();
  });
}

std::int64_t TaskQueue::reclaim_leases() {
  auto& impl = store_.impl();
  return impl.transaction([&] {
    return impl.db
        .prepare("UPDATE tasks SET state = 'pending', lease_owner = NULL, lease_expiry = NULL, "
                 "reason = 'lease reclaimed', updated_at = ? WHERE state = 'leased'")
        .bind_all(impl.next_timestamp())
        .run();
  });
}

std::optional<Task> TaskQueue::task(std::string_view task_id) const {
  auto& impl = store_.impl();
  return impl.read([&] { return load_task(impl.db, task_id); });
}

std::vector<Task> TaskQueue::tasks(std::optional<TaskState> state) const {
  auto& impl = store_.impl();
  return impl.read([&] {
    std::vector<Task> out;
    std::string q = std::string("SELECT ") + kTaskColumns + " FROM tasks";
    if (state) q += " WHERE state = ?";
    q += " ORDER BY created_at, task_id";
    auto st = impl.db.prepare(q);
    if (state) st.bind_all(to_string(*state));
    while (st.step()) out.push_back(read_task(st));
    return out;
  });
}

std::int64_t TaskQueue::unfinished(std::string_view batch_id) const {
  auto& impl = store_.impl();
  return impl.read([&] {
    auto st = impl.db.prepare("SELECT COUNT(*) FROM tasks WHERE batch_id = ? AND state IN ('pending', 'leased')");
    st.bind_all(batch_id);
    st.step();
    return st.integer(0);
  });
}

std::int64_t TaskQueue::unfinished() const {
  auto& impl = store_.impl();
  return impl.read([&] {
    auto st = impl.db.prepare("SELECT COUNT(*) FROM tasks WHERE state IN ('pending', 'leased')");
    st.step();
    return st.integer(0);
  });
}

WorkerPool::WorkerPool(TaskQueue& queue, int threads, std::string worker_prefix)
    : queue_(queue), threads_(threads), prefix_(std::move(worker_prefix)) {
  if (threads_ < 1) throw Error(ErrorCode::kInvalidArgument, "worker pool needs at least one thread");
}

WorkerPool::~WorkerPool() { stop(); }

void WorkerPool::on(std::string kind, Handler handler) { handlers_[std::move(kind)] = std::move(handler); }

void WorkerPool::start() {
  if (running_.exchange(true)) return;
  for (int i = 0; i < threads_; ++i) {
    workers_.emplace_back(&WorkerPool::loop, this, prefix_ + "-" + std::to_string(i));
  }
}

void WorkerPool::stop() {
  running_ = false;
  for (auto& w : workers_) {
    if (w.joinable()) w.join();
  }
  workers_.clear();
}

void WorkerPool::wait_idle() const {
  while (queue_.unfinished() > 0) std::this_thread::sleep_for(std::chrono::milliseconds(5));
}

void WorkerPool::loop(std::string worker_id) {
  while (running_) {
    std::optional<Task> task;
    try {
      task = queue_.lease(worker_id);
    } catch (const std::exception&) {
      task.reset();
    }
    if (!task) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
      continue;
    }
    auto it = handlers_.find(task->kind);
    try {
      if (it == handlers_.end()) throw Error(ErrorCode::kNotFound, "no handler for task kind " + task->kind);
      it->second(*task);
      queue_.ack(task->task_id, worker_id);
    } catch (const std::exception& e) {
      try {
        queue_.nack(task->task_id, worker_id, e.what());
      } catch (const std::exception&) {
        // Lease lost to another worker; that worker now owns the task.
      }
    }
  }
}

}  // namespace lmsub
