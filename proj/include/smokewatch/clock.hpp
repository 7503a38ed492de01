#pragma once

#include <atomic>
#include <chrono>
#include <string>
#include <string_view>

namespace smokewatch {

using Millis = std::chrono::milliseconds;
using Seconds = std::chrono::seconds;
using Timestamp = std::chrono::sys_time<Millis>;

/// Every timing decision in the service goes through a Clock so tests can
/// drive the scheduler, backoff and cooldowns deterministically.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual Timestamp now() const = 0;
};

class SystemClock final : public Clock {
 public:
  Timestamp now() const override;
};

class SimulatedClock final : public Clock {
 public:
  explicit SimulatedClock(Timestamp start = Timestamp{Millis{1'700'000'000'000}}) : ms_(start.time_since_epoch().count()) {}

  Timestamp now() const override { return Timestamp{Millis{ms_.load()}}; }
  void advance(Millis d) { ms_ += d.count(); }
  void set(Timestamp t) { ms_ = t.time_since_epoch().count(); }

 private:
  std::atomic<Millis::rep> ms_;
};

/// "2026-10-16T13:36:00.123Z"
std::string format_timestamp(Timestamp t);
/// Accepts the format produced by format_timestamp (fraction optional).
/// Throws std::invalid_argument on anything else.
Timestamp parse_timestamp(std::string_view text);

}  // namespace smokewatch
