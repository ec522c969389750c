#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>

namespace lmsub {

// Microseconds since the Unix epoch.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::int64_t now_us() const = 0;
};

class SystemClock final : public Clock {
 public:
  std::int64_t now_us() const override {
    return std::chrono::duration_cast<std::chrono::microseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  }
};

// Virtual clock for deterministic lease-expiry tests.
class ManualClock final : public Clock {
 public:
  explicit ManualClock(std::int64_t start_us = 1'000'000) : now_(start_us) {}
  std::int64_t now_us() const override { return now_.load(); }
  void advance_us(std::int64_t delta) { now_ += delta; }
  void advance(std::chrono::microseconds delta) { now_ += delta.count(); }

 private:
  std::atomic<std::int64_t> now_;
};

}  // namespace lmsub
