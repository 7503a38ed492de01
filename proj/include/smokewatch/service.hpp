#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "smokewatch/alerting.hpp"
#include "smokewatch/clock.hpp"
#include "smokewatch/config.hpp"
#include "smokewatch/detector.hpp"
#include "smokewatch/http.hpp"
#include "smokewatch/ingest.hpp"
#include "smokewatch/store.hpp"

namespace smokewatch::service {

class NotFoundError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ConflictError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ValidationError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
class InvalidStateError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LatencyStat {
  std::uint64_t count = 0;
  double sum_ms = 0;
  double max_ms = 0;
};

struct MetricsSnapshot {
  std::map<std::string, std::uint64_t> counters;
  std::map<std::string, LatencyStat> latencies;
};

/// Monotone counters and per-stage latency aggregates. Every known name is
/// present from the start with a zero value.
class Metrics {
 public:
  Metrics();
  void inc(const std::string& name, std::uint64_t n = 1);
  void observe(const std::string& stage, double ms);
  MetricsSnapshot snapshot() const;

 private:
  mutable std::mutex mu_;
  MetricsSnapshot data_;
};

std::string render_metrics_text(const MetricsSnapshot& m);
nlohmann::json metrics_json(const MetricsSnapshot& m);

struct CameraPatch {
  std::optional<std::string> name;
  std::optional<std::string> url;
  std::optional<Seconds> poll_interval;
  std::optional<double> conf_threshold;
  std::optional<std::vector<detector::ExclusionMask>> masks;
  std::optional<bool> enabled;
};

struct Dependencies {
  std::shared_ptr<const Clock> clock;
  http::GetFn get;                              // default: real HTTP
  std::shared_ptr<detector::Detector> detector;  // default: from config
  std::optional<std::vector<std::shared_ptr<alerting::Sink>>> sinks;  // default: from config
};

struct DetectResult {
  std::string image_id;
  std::string model_id;
  double latency_ms = 0;
  int width = 0;
  int height = 0;
  std::vector<store::LabeledDetection> detections;
};

/// Wires ingest, detector, alerting and store together. Every state change
/// is appended to the event log and folded through store::apply, so the live
/// state always equals a replay of the log.
class Service {
 public:
  Service(config::ServiceConfig cfg, Dependencies deps = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Pipeline, driven either by step() or by the background threads.
  /// Fetches every due camera (serially, on the calling thread) and queues
  /// the frames. Returns the number of fetch attempts.
  std::size_t poll_due();
  /// Runs detection and alerting for all queued frames. Returns frames done.
  std::size_t process_pending();
  void step();
  void start();
  void stop();

  // Commands.
  ingest::CameraConfig add_camera(ingest::CameraConfig cam);
  ingest::CameraConfig patch_camera(const std::string& id, const CameraPatch& patch);
  alerting::AlertEvent acknowledge(const std::string& alert_id, const std::string& operator_name);
  /// One-shot detection with global post-processing and no masks. Without an
  /// id the image is named "adhoc/NNNNNN".
  DetectResult detect_once(const Image& img, std::optional<std::string> image_id = std::nullopt);

  // Queries.
  store::ServiceState state() const;
  store::EventLog& log() noexcept { return *log_; }
  MetricsSnapshot metrics() const { return metrics_.snapshot(); }
  const config::ServiceConfig& config() const noexcept { return cfg_; }
  std::string frame_path(const std::string& camera_id) const;
  std::size_t queued_frames() const;

  /// Waits for pending alert deliveries.
  void flush_alerts();
  void write_snapshot();

 private:
  struct Commit {
    std::uint64_t seq = 0;
    std::vector<alerting::AlertEvent> events;
  };

  Commit commit_locked(store::RecordKind kind, nlohmann::json payload);
  void publish_events_locked(const std::vector<alerting::AlertEvent>& events);
  void poll_one(const std::string& camera_id);
  void enqueue(ingest::Frame frame);
  std::optional<ingest::Frame> take_frame(bool wait);
  void finish_frame(const std::string& camera_id);
  void process_frame(const ingest::Frame& frame);
  void cache_frame(const ingest::Frame& frame);
  void scheduler_loop();
  void fetch_loop();
  void worker_loop();

  config::ServiceConfig cfg_;
  std::shared_ptr<const Clock> clock_;
  http::GetFn get_;
  std::shared_ptr<detector::Detector> detector_;
  std::unique_ptr<store::EventLog> log_;
  std::unique_ptr<alerting::AsyncDispatcher> dispatcher_;
  Metrics metrics_;
  std::string snapshot_path_;
  std::string frames_dir_;

  mutable std::mutex state_mu_;
  store::ServiceState state_;

  ingest::InFlight in_flight_;

  mutable std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<ingest::Frame> queue_;
  std::set<std::string> processing_;

  std::mutex fetch_mu_;
  std::condition_variable fetch_cv_;
  std::deque<std::string> fetch_jobs_;

  std::atomic<bool> running_{false};
  std::mutex run_mu_;
  std::condition_variable run_cv_;
  std::vector<std::thread> threads_;
  std::atomic<std::uint64_t> adhoc_counter_{0};
};

}  // namespace smokewatch::service
