#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>

namespace rlab {

// Monotonic millisecond time source injected into the protocol engine.
// Wall-clock time never drives phase transitions.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::int64_t now_ms() const = 0;
  virtual void sleep_until(std::int64_t deadline_ms) = 0;
  // True when time only advances through sleep_until (tests, simulation).
  virtual bool is_virtual() const = 0;
  // Wake any sleeper early; used for shutdown.
  virtual void interrupt() {}
  void sleep_for(std::int64_t ms) { sleep_until(now_ms() + ms); }
};

class VirtualClock final : public Clock {
 public:
  explicit VirtualClock(std::int64_t start_ms = 0) : now_(start_ms) {}

  std::int64_t now_ms() const override { return now_.load(); }
  void sleep_until(std::int64_t deadline_ms) override {
    std::int64_t cur = now_.load();
    while (deadline_ms > cur && !now_.compare_exchange_weak(cur, deadline_ms)) {
    }
  }
  bool is_virtual() const override { return true; }
  void advance(std::int64_t ms) { now_ += ms; }

 private:
  std::atomic<std::int64_t> now_;
};

class SteadyClock final : public Clock {
 public:
  SteadyClock() : origin_(std::chrono::steady_clock::now()) {}

  std::int64_t now_ms() const override {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - origin_)
        .count();
  }

  void sleep_until(std::int64_t deadline_ms) override {
    std::unique_lock lock(mu_);
    cv_.wait_until(lock, origin_ + std::chrono::milliseconds(deadline_ms), [this] { return interrupted_; });
  }

  bool is_virtual() const override { return false; }

  void interrupt() override {
    {
      std::lock_guard lock(mu_);
      interrupted_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::chrono::steady_clock::time_point origin_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool interrupted_ = false;
};

}  // namespace rlab
