#include "smokewatch/ingest.hpp"

#include <algorithm>
#include <stdexcept>

#include <fmt/format.h>

namespace smokewatch::ingest {

bool valid_camera_id(std::string_view id) noexcept {
  if (id.empty() || id.size() > 64) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
  });
}

void CameraConfig::validate() const {
  if (!valid_camera_id(id)) throw std::invalid_argument("id: must match [A-Za-z0-9_-]{1,64}");
  if (url.rfind("http://", 0) != 0 && url.rfind("https://", 0) != 0) {
    throw std::invalid_argument("url: must be an http:// or https:// URL");
  }
  if (poll_interval < Seconds{1}) throw std::invalid_argument("poll_interval: must be at least 1 s");
  if (!(conf_threshold >= 0 && conf_threshold <= 1)) throw std::invalid_argument("conf_threshold: must lie in [0,1]");
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (!masks[i].valid()) throw std::invalid_argument(fmt::format("masks[{}]: not a valid normalized rectangle", i));
  }
}

std::string_view to_string(PollState s) noexcept {
  switch (s) {
    case PollState::kOk: return "ok";
    case PollState::kBackingOff: return "backing_off";
    case PollState::kDisabled: return "disabled";
  }
  return "ok";
}

std::string_view to_string(FailureKind k) noexcept {
  switch (k) {
    case FailureKind::kNone: return "none";
    case FailureKind::kNetwork: return "network";
    case FailureKind::kHttpStatus: return "http_status";
    case FailureKind::kDecode: return "decode";
  }
  return "none";
}

PollState poll_state_from_string(std::string_view s) {
  if (s == "ok") return PollState::kOk;
  if (s == "backing_off") return PollState::kBackingOff;
  if (s == "disabled") return PollState::kDisabled;
  throw std::invalid_argument(fmt::format("unknown poll state '{}'", s));
}

FailureKind failure_kind_from_string(std::string_view s) {
  if (s == "none") return FailureKind::kNone;
  if (s == "network") return FailureKind::kNetwork;
  if (s == "http_status") return FailureKind::kHttpStatus;
  if (s == "decode") return FailureKind::kDecode;
  throw std::invalid_argument(fmt::format("unknown failure kind '{}'", s));
}

Millis backoff_delay(Seconds interval, std::uint32_t failures) noexcept {
  Millis d = interval;
  for (std::uint32_t i = 0; i < failures && d < kMaxBackoff; ++i) d *= 2;
  return std::min(d, kMaxBackoff);
}

PollResult fetch_frame(const CameraConfig& cam, const PollStatus& status, Timestamp now, const http::GetFn& get) {
  http::Response resp;
  try {
    resp = get(cam.url);
  } catch (const std::exception& e) {
    return PollFailure{FailureKind::kNetwork, 0, e.what()};
  }
  if (resp.status < 200 || resp.status > 299) {
    return PollFailure{FailureKind::kHttpStatus, resp.status, fmt::format("HTTP {}", resp.status)};
  }
  Frame f;
  try {
    f.image = decode_image(resp.body);
  } catch (const DecodeError& e) {
    return PollFailure{FailureKind::kDecode, resp.status, e.what()};
  }
  f.camera_id = cam.id;
  f.seq = status.last_seq + 1;
  f.fetched_at = now;
  f.encoded = std::move(resp.body);
  return f;
}

PollStatus record_success(const PollStatus& prev, const CameraConfig& cam, const Frame& frame) {
  PollStatus s = prev;
  s.camera_id = cam.id;
  s.state = PollState::kOk;
  s.consecutive_failures = 0;
  s.next_attempt = frame.fetched_at + backoff_delay(cam.poll_interval, 0);
  s.last_seq = frame.seq;
  s.last_failure = FailureKind::kNone;
  s.last_error.clear();
  s.last_success = frame.fetched_at;
  return s;
}

PollStatus record_failure(const PollStatus& prev, const CameraConfig& cam, Timestamp now, const PollFailure& f) {
  PollStatus s = prev;
  s.camera_id = cam.id;
  s.state = PollState::kBackingOff;
  s.consecutive_failures = prev.consecutive_failures + 1;
  s.next_attempt = now + backoff_delay(cam.poll_interval, s.consecutive_failures);
  s.last_failure = f.kind;
  s.last_error = f.message;
  return s;
}

PollResult poll_camera(const CameraConfig& cam, PollStatus& status, const Clock& clock, const http::GetFn& get) {
  const Timestamp now = clock.now();
  PollResult r = fetch_frame(cam, status, now, get);
  if (const auto* frame = std::get_if<Frame>(&r)) {
    status = record_success(status, cam, *frame);
  } else {
    status = record_failure(status, cam, now, std::get<PollFailure>(r));
  }
  return r;
}

http::GetFn default_get(Millis timeout) {
  return [timeout](const std::string& url) {
    http::Options opts;
    opts.timeout = timeout;
    opts.follow_redirects = true;
    return http::get(url, opts);
  };
}

std::vector<std::string> scheduler_tick(Timestamp now, const std::map<std::string, CameraConfig>& cameras,
                                        const std::map<std::string, PollStatus>& statuses,
                                        const std::set<std::string>& in_flight) {
  std::vector<std::string> due;
  for (const auto& [id, cam] : cameras) {
    if (!cam.enabled || in_flight.contains(id)) continue;
    auto it = statuses.find(id);
    if (it != statuses.end() && (it->second.state == PollState::kDisabled || it->second.next_attempt > now)) continue;
    due.push_back(id);
  }
  return due;
}

std::vector<std::string> InFlight::claim(std::vector<std::string> due) {
  std::lock_guard lock(mu_);
  std::vector<std::string> claimed;
  for (auto& id : due) {
    if (ids_.insert(id).second) claimed.push_back(std::move(id));
  }
  return claimed;
}

void InFlight::release(const std::string& camera_id) {
  std::lock_guard lock(mu_);
  ids_.erase(camera_id);
}

std::set<std::string> InFlight::current() const {
  std::lock_guard lock(mu_);
  return ids_;
}

}  // namespace smokewatch::ingest
