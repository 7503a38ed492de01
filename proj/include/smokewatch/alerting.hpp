#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "smokewatch/clock.hpp"
#include "smokewatch/geometry.hpp"
#include "smokewatch/http.hpp"

namespace smokewatch::alerting {

struct AlarmParams {
  std::uint32_t n = 5;   // window length
  std::uint32_t k = 3;   // positives in window needed to raise
  std::uint32_t m = 10;  // consecutive negatives needed to clear
  Seconds cooldown{300};

  void validate() const;
  bool operator==(const AlarmParams&) const = default;
};

struct FrameObservation {
  std::string camera_id;
  std::uint64_t frame_seq = 0;
  Timestamp at{};
  bool positive = false;
  double max_confidence = 0;
  std::uint32_t detection_count = 0;

  bool operator==(const FrameObservation&) const = default;
};

/// positive iff at least one detection has confidence >= threshold.
FrameObservation observe(std::string camera_id, std::uint64_t frame_seq, Timestamp at,
                         std::span<const Detection> dets, double threshold);

enum class AlarmPhase { kIdle, kActive, kAcknowledged, kCooldown };
std::string_view to_string(AlarmPhase p) noexcept;
AlarmPhase alarm_phase_from_string(std::string_view s);

struct WindowEntry {
  std::uint64_t frame_seq = 0;
  bool positive = false;
  double max_confidence = 0;

  bool operator==(const WindowEntry&) const = default;
};

struct AlarmState {
  std::string camera_id;
  AlarmPhase phase = AlarmPhase::kIdle;
  std::deque<WindowEntry> window;  // newest at the back, at most n entries
  std::uint32_t negative_run = 0;
  std::optional<std::uint64_t> last_seq;
  std::optional<std::string> active_alert_id;
  std::optional<Timestamp> cooldown_until;
  std::uint64_t alerts_raised = 0;

  bool operator==(const AlarmState&) const = default;
};

enum class EventKind { kRaised, kAcknowledged, kCleared };
std::string_view to_string(EventKind k) noexcept;
EventKind event_kind_from_string(std::string_view s);

struct AlertEvent {
  std::string alert_id;
  std::string camera_id;
  EventKind kind = EventKind::kRaised;
  Timestamp at{};
  std::uint64_t frame_seq = 0;
  std::uint32_t positives = 0;    // positives in the window at the transition
  std::uint32_t window_size = 0;
  double max_confidence = 0;      // over the window
  std::optional<std::string> operator_name;

  bool operator==(const AlertEvent&) const = default;
};

class OrderingError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
class NotFoundError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class InvalidStateError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UpdateResult {
  AlarmState state;
  std::vector<AlertEvent> events;
};

/// Applies one observation. Frame sequence numbers must strictly increase.
UpdateResult update(AlarmState state, const FrameObservation& obs, const AlarmParams& params);

struct AckResult {
  AlarmState state;
  AlertEvent event;
};

AckResult acknowledge(AlarmState state, const std::string& alert_id, const std::string& operator_name, Timestamp at);

// ---------------------------------------------------------------------------
// dispatch

struct DeliveryResult {
  std::string sink;
  bool ok = false;
  int attempts = 0;
  std::string error;
};

class Sink {
 public:
  virtual ~Sink() = default;
  virtual std::string name() const = 0;
  /// Must not throw; failures are reported in the result.
  virtual DeliveryResult deliver(const AlertEvent& event) = 0;
};

using PostFn = std::function<http::Response(const std::string& url, const std::string& body)>;
using SleepFn = std::function<void(Millis)>;

/// POSTs the event as JSON. A 2xx answer counts as delivered; anything else
/// is retried after each of `retry_delays`.
class WebhookSink final : public Sink {
 public:
  static inline const std::vector<Millis> kDefaultRetryDelays{Millis{1000}, Millis{5000}, Millis{25000}};

  explicit WebhookSink(std::string url, PostFn post = {}, SleepFn sleep = {},
                       std::vector<Millis> retry_delays = kDefaultRetryDelays);
  std::string name() const override { return "webhook:" + url_; }
  DeliveryResult deliver(const AlertEvent& event) override;

 private:
  std::string url_;
  PostFn post_;
  SleepFn sleep_;
  std::vector<Millis> retry_delays_;
};

/// Appends one JSON line per event.
class LogSink final : public Sink {
 public:
  explicit LogSink(std::string path);
  std::string name() const override { return "log:" + path_; }
  DeliveryResult deliver(const AlertEvent& event) override;

 private:
  std::string path_;
  std::mutex mu_;
};

/// Attempts every sink; one failure never stops the others.
std::vector<DeliveryResult> dispatch(const AlertEvent& event, std::span<const std::shared_ptr<Sink>> sinks);

/// Runs dispatch on a background thread so webhook retries never stall the
/// pipeline. Events are delivered in submission order.
class AsyncDispatcher {
 public:
  using ResultFn = std::function<void(const AlertEvent&, const std::vector<DeliveryResult>&)>;

  AsyncDispatcher(std::vector<std::shared_ptr<Sink>> sinks, ResultFn on_result = {});
  ~AsyncDispatcher();
  AsyncDispatcher(const AsyncDispatcher&) = delete;
  AsyncDispatcher& operator=(const AsyncDispatcher&) = delete;

  void submit(AlertEvent event);
  /// Blocks until every submitted event has been dispatched.
  void flush();

 private:
  void run();

  std::vector<std::shared_ptr<Sink>> sinks_;
  ResultFn on_result_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::deque<AlertEvent> queue_;
  bool busy_ = false;
  bool stop_ = false;
  std::thread worker_;
};

}  // namespace smokewatch::alerting
