#pragma once

#include <memory>
#include <mutex>

#include "lmsub/store.hpp"
#include "sqlite.hpp"

namespace lmsub {

struct Store::Impl {
  Impl(const std::string& path, std::shared_ptr<const Clock> clk);

  sql::Database db;
  std::shared_ptr<const Clock> clock;
  mutable std::recursive_mutex mutex;
  int depth = 0;

  // Store-assigned timestamp: wall clock, forced strictly increasing.
  // Must be called inside a transaction.
  std::int64_t next_timestamp();

  // Runs fn inside BEGIN IMMEDIATE ... COMMIT, rolling back on exception.
  // Nested calls join the outer transaction.
  template <typename F>
  auto transaction(F&& fn) -> decltype(fn()) {
    std::lock_guard lock(mutex);
    if (depth > 0) return fn();
    db.exec("BEGIN IMMEDIATE");
    ++depth;
    try {
      if constexpr (std::is_void_v<decltype(fn())>) {
        fn();
        --depth;
        db.exec("COMMIT");
      } else {
        auto result = fn();
        --depth;
        db.exec("COMMIT");
        return result;
      }
    } catch (...) {
      --depth;
      try {
        db.exec("ROLLBACK");
      } catch (...) {
      }
      throw;
    }
  }

  template <typename F>
  auto read(F&& fn) const -> decltype(fn()) {
    std::lock_guard lock(mutex);
    return fn();
  }
};

Invocation read_invocation_row(sql::Statement& st);
extern const char* const kInvocationColumns;
FeedbackRecord read_feedback_row(const sql::Statement& st);
extern const char* const kFeedbackColumns;

}  // namespace lmsub
