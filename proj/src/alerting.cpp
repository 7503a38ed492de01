#include "smokewatch/alerting.hpp"

#include <algorithm>
#include <fstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "smokewatch/codec.hpp"

namespace smokewatch::alerting {

void AlarmParams::validate() const {
  if (n < 1) throw std::invalid_argument("alerting n must be at least 1");
  if (k < 1 || k > n) throw std::invalid_argument("alerting k must lie in [1, n]");
  if (m < 1) throw std::invalid_argument("alerting m must be at least 1");
  if (cooldown < Seconds{0}) throw std::invalid_argument("alerting cooldown must not be negative");
}

FrameObservation observe(std::string camera_id, std::uint64_t frame_seq, Timestamp at,
                         std::span<const Detection> dets, double threshold) {
  FrameObservation obs;
  obs.camera_id = std::move(camera_id);
  obs.frame_seq = frame_seq;
  obs.at = at;
  for (const auto& d : dets) {
    obs.max_confidence = std::max(obs.max_confidence, d.confidence);
    if (d.confidence >= threshold) {
      obs.positive = true;
      ++obs.detection_count;
    }
  }
  return obs;
}

std::string_view to_string(AlarmPhase p) noexcept {
  switch (p) {
    case AlarmPhase::kIdle: return "idle";
    case AlarmPhase::kActive: return "active";
    case AlarmPhase::kAcknowledged: return "acknowledged";
    case AlarmPhase::kCooldown: return "cooldown";
  }
  return "idle";
}

AlarmPhase alarm_phase_from_string(std::string_view s) {
  if (s == "idle") return AlarmPhase::kIdle;
  if (s == "active") return AlarmPhase::kActive;
  if (s == "acknowledged") return AlarmPhase::kAcknowledged;
  if (s == "cooldown") return AlarmPhase::kCooldown;
  throw std::invalid_argument(fmt::format("unknown alarm phase '{}'", s));
}

std::string_view to_string(EventKind k) noexcept {
  switch (k) {
    case EventKind::kRaised: return "raised";
    case EventKind::kAcknowledged: return "acknowledged";
    case EventKind::kCleared: return "cleared";
  }
  return "raised";
}

EventKind event_kind_from_string(std::string_view s) {
  if (s == "raised") return EventKind::kRaised;
  if (s == "acknowledged") return EventKind::kAcknowledged;
  if (s == "cleared") return EventKind::kCleared;
  throw std::invalid_argument(fmt::format("unknown alert event kind '{}'", s));
}

namespace {

AlertEvent make_event(const AlarmState& s, EventKind kind, Timestamp at) {
  AlertEvent ev;
  ev.alert_id = s.active_alert_id.value_or("");
  ev.camera_id = s.camera_id;
  ev.kind = kind;
  ev.at = at;
  ev.frame_seq = s.last_seq.value_or(0);
  ev.window_size = static_cast<std::uint32_t>(s.window.size());
  for (const auto& w : s.window) {
    ev.positives += w.positive ? 1 : 0;
    ev.max_confidence = std::max(ev.max_confidence, w.max_confidence);
  }
  return ev;
}

}  // namespace

UpdateResult update(AlarmState state, const FrameObservation& obs, const AlarmParams& params) {
  if (!state.camera_id.empty() && obs.camera_id != state.camera_id) {
    throw std::invalid_argument(
        fmt::format("observation for camera '{}' applied to '{}'", obs.camera_id, state.camera_id));
  }
  if (state.last_seq && obs.frame_seq <= *state.last_seq) {
    throw OrderingError(fmt::format("camera '{}': frame {} arrived after frame {}", obs.camera_id, obs.frame_seq,
                                    *state.last_seq));
  }
  UpdateResult out;
  state.camera_id = obs.camera_id;
  state.last_seq = obs.frame_seq;
  state.window.push_back({obs.frame_seq, obs.positive, obs.max_confidence});
  while (state.window.size() > params.n) state.window.pop_front();
  state.negative_run = obs.positive ? 0 : state.negative_run + 1;

  if (state.phase == AlarmPhase::kCooldown && (!state.cooldown_until || obs.at >= *state.cooldown_until)) {
    state.phase = AlarmPhase::kIdle;
  }

  switch (state.phase) {
    case AlarmPhase::kIdle: {
      const auto positives = std::count_if(state.window.begin(), state.window.end(),
                                           [](const WindowEntry& w) { return w.positive; });
      const bool cooled = !state.cooldown_until || obs.at >= *state.cooldown_until;
      if (positives >= static_cast<long>(params.k) && cooled) {
        ++state.alerts_raised;
        state.active_alert_id = fmt::format("{}-{}", state.camera_id, state.alerts_raised);
        state.phase = AlarmPhase::kActive;
        out.events.push_back(make_event(state, EventKind::kRaised, obs.at));
      }
      break;
    }
    case AlarmPhase::kActive:
    case AlarmPhase::kAcknowledged:
      if (state.negative_run >= params.m) {
        out.events.push_back(make_event(state, EventKind::kCleared, obs.at));
        state.active_alert_id.reset();
        state.cooldown_until = obs.at + params.cooldown;
        state.phase = params.cooldown > Seconds{0} ? AlarmPhase::kCooldown : AlarmPhase::kIdle;
      }
      break;
    case AlarmPhase::kCooldown:
      break;
  }
  out.state = std::move(state);
  return out;
}

AckResult acknowledge(AlarmState state, const std::string& alert_id, const std::string& operator_name, Timestamp at) {
  if (!state.active_alert_id || *state.active_alert_id != alert_id) {
    throw NotFoundError(fmt::format("no open alert '{}'", alert_id));
  }
  if (state.phase != AlarmPhase::kActive) {
    throw InvalidStateError(fmt::format("alert '{}' is already {}", alert_id, to_string(state.phase)));
  }
  state.phase = AlarmPhase::kAcknowledged;
  AlertEvent ev = make_event(state, EventKind::kAcknowledged, at);
  ev.operator_name = operator_name;
  return {std::move(state), std::move(ev)};
}

// ---------------------------------------------------------------------------
// sinks

WebhookSink::WebhookSink(std::string url, PostFn post, SleepFn sleep, std::vector<Millis> retry_delays)
    : url_(std::move(url)), post_(std::move(post)), sleep_(std::move(sleep)), retry_delays_(std::move(retry_delays)) {
  if (!post_) {
    post_ = [](const std::string& url, const std::string& body) {
      return http::post(url, body, "application/json");
    };
  }
  if (!sleep_) sleep_ = [](Millis d) { std::this_thread::sleep_for(d); };
}

DeliveryResult WebhookSink::deliver(const AlertEvent& event) {
  DeliveryResult r;
  r.sink = name();
  const std::string body = nlohmann::json(event).dump();
  for (std::size_t attempt = 0;; ++attempt) {
    ++r.attempts;
    try {
      const auto resp = post_(url_, body);
      if (resp.status >= 200 && resp.status <= 299) {
        r.ok = true;
        r.error.clear();
        return r;
      }
      r.error = fmt::format("HTTP {}", resp.status);
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    if (attempt >= retry_delays_.size()) break;
    sleep_(retry_delays_[attempt]);
  }
  return r;
}

LogSink::LogSink(std::string path) : path_(std::move(path)) {}

DeliveryResult LogSink::deliver(const AlertEvent& event) {
  DeliveryResult r;
  r.sink = name();
  r.attempts = 1;
  std::lock_guard lock(mu_);
  std::ofstream out(path_, std::ios::app);
  out << nlohmann::json(event).dump() << '\n';
  out.flush();
  r.ok = static_cast<bool>(out);
  if (!r.ok) r.error = "cannot append to " + path_;
  return r;
}

std::vector<DeliveryResult> dispatch(const AlertEvent& event, std::span<const std::shared_ptr<Sink>> sinks) {
  std::vector<DeliveryResult> results;
  results.reserve(sinks.size());
  for (const auto& sink : sinks) {
    try {
      results.push_back(sink->deliver(event));
    } catch (const std::exception& e) {
      results.push_back({sink->name(), false, 1, e.what()});
    }
    if (!results.back().ok) {
      spdlog::warn("alert {} {}: delivery to {} failed after {} attempt(s): {}", event.alert_id,
                   to_string(event.kind), results.back().sink, results.back().attempts, results.back().error);
    }
  }
  return results;
}

AsyncDispatcher::AsyncDispatcher(std::vector<std::shared_ptr<Sink>> sinks, ResultFn on_result)
    : sinks_(std::move(sinks)), on_result_(std::move(on_result)), worker_([this] { run(); }) {}

AsyncDispatcher::~AsyncDispatcher() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

void AsyncDispatcher::submit(AlertEvent event) {
  {
    std::lock_guard lock(mu_);
    queue_.push_back(std::move(event));
  }
  cv_.notify_all();
}

void AsyncDispatcher::flush() {
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [this] { return queue_.empty() && !busy_; });
}

void AsyncDispatcher::run() {
  std::unique_lock lock(mu_);
  while (true) {
    cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
    if (queue_.empty()) return;  // stopping with nothing left
    AlertEvent ev = std::move(queue_.front());
    queue_.pop_front();
    busy_ = true;
    lock.unlock();
    auto results = dispatch(ev, sinks_);
    if (on_result_) on_result_(ev, results);
    lock.lock();
    busy_ = false;
    idle_cv_.notify_all();
  }
}

}  // namespace smokewatch::alerting
