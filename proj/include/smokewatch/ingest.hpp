#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "smokewatch/clock.hpp"
#include "smokewatch/detector.hpp"
#include "smokewatch/http.hpp"
#include "smokewatch/image.hpp"

namespace smokewatch::ingest {

inline constexpr Seconds kDefaultPollInterval{30};
inline constexpr Millis kMaxBackoff{15 * 60 * 1000};

struct CameraConfig {
  std::string id;
  std::string name;
  std::string url;
  Seconds poll_interval = kDefaultPollInterval;
  double conf_threshold = detector::kDefaultConfFloor;
  std::vector<detector::ExclusionMask> masks;
  bool enabled = true;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const CameraConfig&) const = default;
};

/// Ids appear in URLs and file names: [A-Za-z0-9_-], 1..64 chars.
bool valid_camera_id(std::string_view id) noexcept;

struct Frame {
  std::string camera_id;
  std::uint64_t seq = 0;
  Timestamp fetched_at{};
  Image image;
  std::string encoded;  // body as fetched
};

enum class PollState { kOk, kBackingOff, kDisabled };
enum class FailureKind { kNone, kNetwork, kHttpStatus, kDecode };

std::string_view to_string(PollState s) noexcept;
std::string_view to_string(FailureKind k) noexcept;
PollState poll_state_from_string(std::string_view s);
FailureKind failure_kind_from_string(std::string_view s);

struct PollStatus {
  std::string camera_id;
  PollState state = PollState::kOk;
  std::uint32_t consecutive_failures = 0;
  Timestamp next_attempt{};
  std::uint64_t last_seq = 0;  // seq of the last delivered frame
  FailureKind last_failure = FailureKind::kNone;
  std::string last_error;
  std::optional<Timestamp> last_success;

  bool operator==(const PollStatus&) const = default;
};

struct PollFailure {
  FailureKind kind = FailureKind::kNetwork;
  int http_status = 0;
  std::string message;
};

using PollResult = std::variant<Frame, PollFailure>;

/// min(interval * 2^failures, 15 min); failures = 0 gives the plain interval.
Millis backoff_delay(Seconds interval, std::uint32_t failures) noexcept;

/// Fetches and decodes one still. The frame gets seq = status.last_seq + 1.
PollResult fetch_frame(const CameraConfig& cam, const PollStatus& status, Timestamp now, const http::GetFn& get);

/// Status after a poll outcome. Success resets the backoff; failure counts up
/// and schedules now + backoff_delay(interval, failures).
PollStatus record_success(const PollStatus& prev, const CameraConfig& cam, const Frame& frame);
PollStatus record_failure(const PollStatus& prev, const CameraConfig& cam, Timestamp now, const PollFailure& f);

/// fetch_frame followed by the matching record_* update.
PollResult poll_camera(const CameraConfig& cam, PollStatus& status, const Clock& clock, const http::GetFn& get);

/// GET with the poller's user agent, timeout and redirect limit.
http::GetFn default_get(Millis timeout = Millis{10'000});

/// Enabled cameras with next_attempt <= now that are not already in flight,
/// ordered by id.
std::vector<std::string> scheduler_tick(Timestamp now, const std::map<std::string, CameraConfig>& cameras,
                                        const std::map<std::string, PollStatus>& statuses,
                                        const std::set<std::string>& in_flight);

/// Tracks cameras with a fetch in progress so each has at most one.
class InFlight {
 public:
  /// Marks due cameras in flight and returns them.
  std::vector<std::string> claim(std::vector<std::string> due);
  void release(const std::string& camera_id);
  std::set<std::string> current() const;

 private:
  mutable std::mutex mu_;
  std::set<std::string> ids_;
};

}  // namespace smokewatch::ingest
