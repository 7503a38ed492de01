#include "smokewatch/service.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "smokewatch/codec.hpp"

namespace smokewatch::service {

using nlohmann::json;
using store::RecordKind;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// metrics

namespace {

const char* const kCounters[] = {
    "frames_polled",  "poll_failures",       "frames_dropped",          "frames_processed",
    "detections",     "backend_errors",      "alerts_raised",           "alerts_acknowledged",
    "alerts_cleared", "alert_deliveries",    "alert_delivery_failures", "events_logged",
};
const char* const kStages[] = {"fetch", "detect", "postprocess", "pipeline"};

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

Metrics::Metrics() {
  for (const char* c : kCounters) data_.counters[c] = 0;
  for (const char* s : kStages) data_.latencies[s] = {};
}

void Metrics::inc(const std::string& name, std::uint64_t n) {
  std::lock_guard lock(mu_);
  data_.counters[name] += n;
}

void Metrics::observe(const std::string& stage, double ms) {
  std::lock_guard lock(mu_);
  auto& l = data_.latencies[stage];
  ++l.count;
  l.sum_ms += ms;
  l.max_ms = std::max(l.max_ms, ms);
}

MetricsSnapshot Metrics::snapshot() const {
  std::lock_guard lock(mu_);
  return data_;
}

std::string render_metrics_text(const MetricsSnapshot& m) {
  std::string out;
  for (const auto& [name, v] : m.counters) out += fmt::format("smokewatch_{}_total {}\n", name, v);
  for (const auto& [stage, l] : m.latencies) {
    out += fmt::format("smokewatch_{}_latency_ms_count {}\n", stage, l.count);
    out += fmt::format("smokewatch_{}_latency_ms_sum {}\n", stage, l.sum_ms);
    out += fmt::format("smokewatch_{}_latency_ms_max {}\n", stage, l.max_ms);
  }
  return out;
}

json metrics_json(const MetricsSnapshot& m) {
  json lat = json::object();
  for (const auto& [stage, l] : m.latencies) {
    lat[stage] = {{"count", l.count}, {"sum_ms", l.sum_ms}, {"max_ms", l.max_ms},
                  {"mean_ms", l.count ? l.sum_ms / static_cast<double>(l.count) : 0.0}};
  }
  return json{{"counters", m.counters}, {"latencies_ms", lat}};
}

// ---------------------------------------------------------------------------
// construction

Service::Service(config::ServiceConfig cfg, Dependencies deps) : cfg_(std::move(cfg)) {
  cfg_.validate();
  clock_ = deps.clock ? deps.clock : std::make_shared<SystemClock>();
  get_ = deps.get ? deps.get : ingest::default_get(cfg_.ingest.fetch_timeout);
  detector_ = deps.detector ? deps.detector : std::shared_ptr<detector::Detector>(detector::make_detector(cfg_.detector));

  fs::create_directories(cfg_.store.dir);
  frames_dir_ = (fs::path(cfg_.store.dir) / "frames").string();
  fs::create_directories(frames_dir_);
  snapshot_path_ = (fs::path(cfg_.store.dir) / "snapshot.json").string();
  log_ = std::make_unique<store::EventLog>((fs::path(cfg_.store.dir) / "events.log").string(), cfg_.store.fsync);

  try {
    state_ = store::load_state(snapshot_path_, *log_);
  } catch (const store::StorageError& e) {
    spdlog::warn("{}; replaying the full log instead", e.what());
    state_ = store::replay(log_->read_since(0));
  }
  spdlog::info("store {}: replayed to seq {} ({} cameras, {} alerts)", cfg_.store.dir, state_.last_seq,
               state_.cameras.size(), state_.alerts.size());

  std::vector<std::shared_ptr<alerting::Sink>> sinks;
  if (deps.sinks) {
    sinks = *deps.sinks;
  } else {
    for (const auto& url : cfg_.webhooks) sinks.push_back(std::make_shared<alerting::WebhookSink>(url));
    sinks.push_back(std::make_shared<alerting::LogSink>(
        cfg_.alert_log.value_or((fs::path(cfg_.store.dir) / "alerts.log").string())));
  }
  dispatcher_ = std::make_unique<alerting::AsyncDispatcher>(
      std::move(sinks), [this](const alerting::AlertEvent&, const std::vector<alerting::DeliveryResult>& results) {
        for (const auto& r : results) metrics_.inc(r.ok ? "alert_deliveries" : "alert_delivery_failures");
      });

  std::lock_guard lock(state_mu_);
  if (state_.params != cfg_.alarm) commit_locked(RecordKind::kCameraConfig, store::alarm_params_payload(cfg_.alarm));
  for (const auto& cam : cfg_.cameras) {
    if (!state_.cameras.contains(cam.id)) commit_locked(RecordKind::kCameraConfig, store::camera_create_payload(cam));
  }
}

Service::~Service() { stop(); }

// ---------------------------------------------------------------------------
// log + state

Service::Commit Service::commit_locked(RecordKind kind, json payload) {
  store::LogRecord rec{state_.last_seq + 1, clock_->now(), kind, std::move(payload)};
  Commit c;
  c.events = store::apply(state_, rec);
  try {
    c.seq = log_->append(rec.at, kind, std::move(rec.payload));
  } catch (const store::StorageError& e) {
    spdlog::critical("event log write failed, state is ahead of the log: {}", e.what());
    throw;
  }
  metrics_.inc("events_logged");
  if (cfg_.store.snapshot_every > 0 && c.seq % cfg_.store.snapshot_every == 0) {
    try {
      store::write_snapshot(snapshot_path_, state_);
    } catch (const std::exception& e) {
      spdlog::warn("snapshot at seq {} failed: {}", c.seq, e.what());
    }
  }
  return c;
}

void Service::publish_events_locked(const std::vector<alerting::AlertEvent>& events) {
  for (const auto& ev : events) {
    commit_locked(RecordKind::kAlert, json(ev));
    switch (ev.kind) {
      case alerting::EventKind::kRaised: metrics_.inc("alerts_raised"); break;
      case alerting::EventKind::kAcknowledged: metrics_.inc("alerts_acknowledged"); break;
      case alerting::EventKind::kCleared: metrics_.inc("alerts_cleared"); break;
    }
    spdlog::info("alert {} {} (camera {}, frame {}, {}/{} positive, max conf {:.3f})", ev.alert_id,
                 alerting::to_string(ev.kind), ev.camera_id, ev.frame_seq, ev.positives, ev.window_size,
                 ev.max_confidence);
    dispatcher_->submit(ev);
  }
}

store::ServiceState Service::state() const {
  std::lock_guard lock(state_mu_);
  return state_;
}

void Service::write_snapshot() {
  std::lock_guard lock(state_mu_);
  store::write_snapshot(snapshot_path_, state_);
}

void Service::flush_alerts() { dispatcher_->flush(); }

std::string Service::frame_path(const std::string& camera_id) const {
  return (fs::path(frames_dir_) / (camera_id + ".jpg")).string();
}

// ---------------------------------------------------------------------------
// commands

ingest::CameraConfig Service::add_camera(ingest::CameraConfig cam) {
  if (cam.name.empty()) cam.name = cam.id;
  try {
    cam.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  std::lock_guard lock(state_mu_);
  if (state_.cameras.contains(cam.id)) throw ConflictError(fmt::format("camera '{}' already exists", cam.id));
  commit_locked(RecordKind::kCameraConfig, store::camera_create_payload(cam));
  return cam;
}

ingest::CameraConfig Service::patch_camera(const std::string& id, const CameraPatch& patch) {
  std::lock_guard lock(state_mu_);
  auto it = state_.cameras.find(id);
  if (it == state_.cameras.end()) throw NotFoundError(fmt::format("camera '{}' does not exist", id));
  ingest::CameraConfig cam = it->second;
  if (patch.name) cam.name = *patch.name;
  if (patch.url) cam.url = *patch.url;
  if (patch.poll_interval) cam.poll_interval = *patch.poll_interval;
  if (patch.conf_threshold) cam.conf_threshold = *patch.conf_threshold;
  if (patch.masks) cam.masks = *patch.masks;
  if (patch.enabled) cam.enabled = *patch.enabled;
  try {
    cam.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  if (cam == it->second) return cam;
  commit_locked(RecordKind::kCameraConfig, store::camera_update_payload(cam));
  return cam;
}

alerting::AlertEvent Service::acknowledge(const std::string& alert_id, const std::string& operator_name) {
  std::lock_guard lock(state_mu_);
  auto it = state_.alerts.find(alert_id);
  if (it == state_.alerts.end()) throw NotFoundError(fmt::format("alert '{}' does not exist", alert_id));
  if (it->second.state != "active") {
    throw InvalidStateError(fmt::format("alert '{}' is {}, only active alerts can be acknowledged", alert_id,
                                        it->second.state));
  }
  auto c = commit_locked(RecordKind::kAck, store::ack_payload(alert_id, operator_name));
  publish_events_locked(c.events);
  return c.events.at(0);
}

namespace {

std::vector<store::LabeledDetection> label(const std::vector<Detection>& dets, const detector::RawInference& raw) {
  std::map<int, std::string> names;
  for (std::size_t i = 0; i < raw.detections.size() && i < raw.class_names.size(); ++i) {
    names.emplace(raw.detections[i].class_id, raw.class_names[i]);
  }
  std::vector<store::LabeledDetection> out;
  out.reserve(dets.size());
  for (const auto& d : dets) {
    auto it = names.find(d.class_id);
    out.push_back({d, it != names.end() ? it->second : std::string{}});
  }
  return out;
}

}  // namespace

DetectResult Service::detect_once(const Image& img, std::optional<std::string> image_id) {
  const auto t = letterbox_plan(img.width, img.height, detector_->input_side());
  const auto started = std::chrono::steady_clock::now();
  const std::string id = image_id ? *image_id : fmt::format("adhoc/{:06}", ++adhoc_counter_);
  const auto raw = detector_->detect(img, id);
  DetectResult r;
  r.image_id = id;
  r.model_id = raw.model_id;
  r.latency_ms = elapsed_ms(started);
  r.width = img.width;
  r.height = img.height;
  r.detections = label(detector::postprocess(raw, t, cfg_.detector, {}), raw);
  return r;
}

// ---------------------------------------------------------------------------
// pipeline

void Service::poll_one(const std::string& camera_id) {
  ingest::CameraConfig cam;
  ingest::PollStatus status;
  {
    std::lock_guard lock(state_mu_);
    auto it = state_.cameras.find(camera_id);
    if (it == state_.cameras.end()) return;
    cam = it->second;
    status = state_.poll.at(camera_id);
  }
  const Timestamp now = clock_->now();
  const auto started = std::chrono::steady_clock::now();
  auto result = ingest::fetch_frame(cam, status, now, get_);
  metrics_.observe("fetch", elapsed_ms(started));

  if (auto* frame = std::get_if<ingest::Frame>(&result)) {
    metrics_.inc("frames_polled");
    std::lock_guard lock(state_mu_);
    commit_locked(RecordKind::kPollStatus, json(ingest::record_success(state_.poll.at(camera_id), cam, *frame)));
  } else {
    const auto& failure = std::get<ingest::PollFailure>(result);
    metrics_.inc("poll_failures");
    std::lock_guard lock(state_mu_);
    const auto next = ingest::record_failure(state_.poll.at(camera_id), cam, now, failure);
    spdlog::warn("camera {}: {} failure ({}), retry in {} s", camera_id, ingest::to_string(failure.kind),
                 failure.message, std::chrono::duration_cast<Seconds>(next.next_attempt - now).count());
    commit_locked(RecordKind::kPollStatus, json(next));
    return;
  }
  enqueue(std::move(std::get<ingest::Frame>(result)));
}

void Service::enqueue(ingest::Frame frame) {
  {
    std::lock_guard lock(queue_mu_);
    if (queue_.size() >= cfg_.ingest.queue_capacity) {
      auto victim = std::find_if(queue_.begin(), queue_.end(),
                                 [&](const ingest::Frame& f) { return f.camera_id == frame.camera_id; });
      if (victim == queue_.end()) victim = queue_.begin();
      spdlog::warn("frame queue full, dropping frame {} of camera {}", victim->seq, victim->camera_id);
      queue_.erase(victim);
      metrics_.inc("frames_dropped");
    }
    queue_.push_back(std::move(frame));
  }
  queue_cv_.notify_one();
}

std::optional<ingest::Frame> Service::take_frame(bool wait) {
  std::unique_lock lock(queue_mu_);
  while (true) {
    // Frames of one camera are handled one at a time and in order.
    auto it = std::find_if(queue_.begin(), queue_.end(),
                           [&](const ingest::Frame& f) { return !processing_.contains(f.camera_id); });
    if (it != queue_.end()) {
      ingest::Frame f = std::move(*it);
      queue_.erase(it);
      processing_.insert(f.camera_id);
      return f;
    }
    if (!wait || !running_) return std::nullopt;
    queue_cv_.wait_for(lock, Millis{200});
  }
}

void Service::finish_frame(const std::string& camera_id) {
  {
    std::lock_guard lock(queue_mu_);
    processing_.erase(camera_id);
  }
  queue_cv_.notify_all();
}

std::size_t Service::queued_frames() const {
  std::lock_guard lock(queue_mu_);
  return queue_.size();
}

void Service::cache_frame(const ingest::Frame& frame) {
  const std::string path = frame_path(frame.camera_id);
  const std::string tmp = path + ".tmp";
  const bool is_jpeg = frame.encoded.size() > 2 && static_cast<unsigned char>(frame.encoded[0]) == 0xFF &&
                       static_cast<unsigned char>(frame.encoded[1]) == 0xD8;
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << (is_jpeg ? frame.encoded : encode_jpeg(frame.image));
    if (!out) {
      spdlog::warn("cannot write frame cache {}", tmp);
      return;
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) spdlog::warn("cannot install frame cache {}: {}", path, ec.message());
}

void Service::process_frame(const ingest::Frame& frame) {
  const auto started = std::chrono::steady_clock::now();
  ingest::CameraConfig cam;
  {
    std::lock_guard lock(state_mu_);
    auto it = state_.cameras.find(frame.camera_id);
    if (it == state_.cameras.end()) return;
    cam = it->second;
  }
  const auto t = letterbox_plan(frame.image.width, frame.image.height, detector_->input_side());
  detector::RawInference raw;
  try {
    const auto det_started = std::chrono::steady_clock::now();
    raw = detector_->detect(frame.image, fmt::format("{}/{:06}", frame.camera_id, frame.seq));
    metrics_.observe("detect", elapsed_ms(det_started));
  } catch (const detector::BackendError& e) {
    metrics_.inc("backend_errors");
    spdlog::error("camera {} frame {}: {}", frame.camera_id, frame.seq, e.what());
    return;
  }

  const auto post_started = std::chrono::steady_clock::now();
  detector::DetectorConfig dcfg = cfg_.detector;
  dcfg.conf_floor = std::min(dcfg.conf_floor, cam.conf_threshold);
  const auto dets = detector::postprocess(raw, t, dcfg, cam.masks);
  metrics_.observe("postprocess", elapsed_ms(post_started));
  metrics_.inc("detections", dets.size());

  store::LatestFrame latest;
  latest.frame_seq = frame.seq;
  latest.at = frame.fetched_at;
  latest.width = frame.image.width;
  latest.height = frame.image.height;
  latest.detections = label(dets, raw);
  latest.conf_threshold = cam.conf_threshold;
  cache_frame(frame);

  {
    std::lock_guard lock(state_mu_);
    if (!state_.cameras.contains(frame.camera_id)) return;
    auto c = commit_locked(RecordKind::kDetection, store::detection_payload(frame.camera_id, latest));
    publish_events_locked(c.events);
  }
  metrics_.inc("frames_processed");
  metrics_.observe("pipeline", elapsed_ms(started));
}

std::size_t Service::poll_due() {
  std::vector<std::string> due;
  {
    std::lock_guard lock(state_mu_);
    due = ingest::scheduler_tick(clock_->now(), state_.cameras, state_.poll, in_flight_.current());
  }
  due = in_flight_.claim(std::move(due));
  for (const auto& id : due) {
    try {
      poll_one(id);
    } catch (...) {
      in_flight_.release(id);
      throw;
    }
    in_flight_.release(id);
  }
  return due.size();
}

std::size_t Service::process_pending() {
  std::size_t done = 0;
  while (auto frame = take_frame(false)) {
    try {
      process_frame(*frame);
    } catch (...) {
      finish_frame(frame->camera_id);
      throw;
    }
    finish_frame(frame->camera_id);
    ++done;
  }
  return done;
}

void Service::step() {
  poll_due();
  process_pending();
}

// ---------------------------------------------------------------------------
// background mode

void Service::start() {
  if (running_.exchange(true)) return;
  const int limit = detector_->max_concurrency();
  const int workers = limit == detector::Detector::kUnlimited ? 2 : limit;
  threads_.emplace_back([this] { scheduler_loop(); });
  for (int i = 0; i < 4; ++i) threads_.emplace_back([this] { fetch_loop(); });
  for (int i = 0; i < workers; ++i) threads_.emplace_back([this] { worker_loop(); });
}

void Service::stop() {
  if (!running_.exchange(false)) return;
  run_cv_.notify_all();
  fetch_cv_.notify_all();
  queue_cv_.notify_all();
  for (auto& t : threads_) t.join();
  threads_.clear();
  dispatcher_->flush();
  try {
    write_snapshot();
  } catch (const std::exception& e) {
    spdlog::warn("final snapshot failed: {}", e.what());
  }
}

void Service::scheduler_loop() {
  std::unique_lock lock(run_mu_);
  while (running_) {
    lock.unlock();
    std::vector<std::string> due;
    {
      std::lock_guard slock(state_mu_);
      due = ingest::scheduler_tick(clock_->now(), state_.cameras, state_.poll, in_flight_.current());
    }
    due = in_flight_.claim(std::move(due));
    if (!due.empty()) {
      {
        std::lock_guard flock(fetch_mu_);
        fetch_jobs_.insert(fetch_jobs_.end(), due.begin(), due.end());
      }
      fetch_cv_.notify_all();
    }
    lock.lock();
    run_cv_.wait_for(lock, cfg_.ingest.tick, [this] { return !running_; });
  }
}

void Service::fetch_loop() {
  while (true) {
    std::string id;
    {
      std::unique_lock lock(fetch_mu_);
      fetch_cv_.wait(lock, [this] { return !running_ || !fetch_jobs_.empty(); });
      if (!running_) return;
      id = std::move(fetch_jobs_.front());
      fetch_jobs_.pop_front();
    }
    try {
      poll_one(id);
    } catch (const std::exception& e) {
      spdlog::error("camera {}: poll failed: {}", id, e.what());
    }
    in_flight_.release(id);
  }
}

void Service::worker_loop() {
  while (running_) {
    auto frame = take_frame(true);
    if (!frame) continue;
    try {
      process_frame(*frame);
    } catch (const std::exception& e) {
      spdlog::error("camera {} frame {}: processing failed: {}", frame->camera_id, frame->seq, e.what());
    }
    finish_frame(frame->camera_id);
  }
}

}  // namespace smokewatch::service
