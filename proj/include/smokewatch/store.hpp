#pragma once

#include <condition_variable>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "smokewatch/alerting.hpp"
#include "smokewatch/clock.hpp"
#include "smokewatch/geometry.hpp"
#include "smokewatch/ingest.hpp"

namespace smokewatch::store {

enum class RecordKind { kDetection, kAlert, kCameraConfig, kAck, kPollStatus };
std::string_view to_string(RecordKind k) noexcept;
RecordKind record_kind_from_string(std::string_view s);

struct LogRecord {
  std::uint64_t seq = 0;
  Timestamp at{};
  RecordKind kind = RecordKind::kDetection;
  nlohmann::json payload;

  bool operator==(const LogRecord&) const = default;
};

/// Raised for corruption that cannot be explained by a torn final write.
class IntegrityError : public std::runtime_error {
 public:
  IntegrityError(std::uint64_t seq, const std::string& what) : std::runtime_error(what), seq_(seq) {}
  std::uint64_t seq() const noexcept { return seq_; }

 private:
  std::uint64_t seq_;
};

class StorageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class CorruptLine : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// "seq\tISO-8601\tkind\tcrc32\tpayload" where crc32 (8 lowercase hex digits)
/// covers the other four fields joined by tabs. No trailing newline.
std::string encode_line(const LogRecord& rec);
/// Throws CorruptLine on any format or checksum problem.
LogRecord decode_line(std::string_view line);

struct LogScan {
  std::vector<LogRecord> records;
  std::vector<std::uint64_t> offsets;  // byte offset of each record's line
  std::uint64_t valid_bytes = 0;  // length of the intact prefix
  bool torn_tail = false;
};

/// Parses a log file without modifying it. A bad or unterminated final line is
/// reported as a torn tail; any other bad line or a seq gap throws
/// IntegrityError. A missing file scans as empty.
LogScan scan_log(const std::string& path);

/// Append-only, fsync'd record log. One writer, any number of readers.
class EventLog {
 public:
  /// Opens or creates `path`. A torn final record is cut off with a warning.
  explicit EventLog(std::string path, bool sync = true);
  ~EventLog();
  EventLog(const EventLog&) = delete;
  EventLog& operator=(const EventLog&) = delete;

  /// Durably appends and returns the assigned seq (previous + 1).
  std::uint64_t append(Timestamp at, RecordKind kind, nlohmann::json payload);

  std::uint64_t last_seq() const;
  /// Records with seq > after_seq, in order, at most `limit`.
  std::vector<LogRecord> read_since(std::uint64_t after_seq, std::size_t limit = SIZE_MAX) const;
  /// Blocks until a record with seq > after_seq exists, the timeout passes or
  /// interrupt() is called. Returns true if new records exist.
  bool wait_for(std::uint64_t after_seq, Millis timeout) const;
  void interrupt();

  bool recovered_torn_tail() const noexcept { return recovered_torn_tail_; }
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
  bool sync_;
  int fd_ = -1;
  bool recovered_torn_tail_ = false;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  bool interrupted_ = false;
  std::vector<std::uint64_t> offsets_;  // byte offset of record seq i+1
  std::uint64_t size_ = 0;
};

// ---------------------------------------------------------------------------
// materialized state

struct AlertRecord {
  std::string alert_id;
  std::string camera_id;
  std::string state;  // active | acknowledged | cleared
  Timestamp raised_at{};
  std::optional<Timestamp> acknowledged_at;
  std::optional<std::string> acknowledged_by;
  std::optional<Timestamp> cleared_at;
  std::uint64_t frame_seq = 0;  // frame that raised it
  std::uint32_t positives = 0;
  std::uint32_t window_size = 0;
  double max_confidence = 0;

  bool operator==(const AlertRecord&) const = default;
};

struct LabeledDetection {
  Detection detection;  // source-pixel frame
  std::string class_name;

  bool operator==(const LabeledDetection&) const = default;
};

struct LatestFrame {
  std::uint64_t frame_seq = 0;
  Timestamp at{};
  int width = 0;
  int height = 0;
  std::vector<LabeledDetection> detections;  // confidence descending
  bool positive = false;
  double conf_threshold = 0;

  bool operator==(const LatestFrame&) const = default;
};

struct ServiceState {
  alerting::AlarmParams params;
  std::map<std::string, ingest::CameraConfig> cameras;
  std::map<std::string, ingest::PollStatus> poll;
  std::map<std::string, alerting::AlarmState> alarms;
  std::map<std::string, AlertRecord> alerts;
  std::map<std::string, LatestFrame> latest;
  std::uint64_t last_seq = 0;

  bool operator==(const ServiceState&) const = default;
};

// Payload builders for each record kind.
nlohmann::json camera_create_payload(const ingest::CameraConfig& cam);
nlohmann::json camera_update_payload(const ingest::CameraConfig& cam);
nlohmann::json alarm_params_payload(const alerting::AlarmParams& params);
nlohmann::json detection_payload(const std::string& camera_id, const LatestFrame& frame);
nlohmann::json ack_payload(const std::string& alert_id, const std::string& operator_name);

/// Folds one record into the state and returns the alert transitions it
/// caused. Pure: the result depends only on (state, record). A record that
/// does not fit the state throws IntegrityError carrying its seq.
std::vector<alerting::AlertEvent> apply(ServiceState& state, const LogRecord& rec);

ServiceState replay(std::span<const LogRecord> records, ServiceState base = {});

nlohmann::json labeled_detection_json(const LabeledDetection& d);
nlohmann::json alert_record_json(const AlertRecord& a);
AlertRecord alert_record_from_json(const nlohmann::json& j);
nlohmann::json latest_frame_json(const LatestFrame& f);
LatestFrame latest_frame_from_json(const nlohmann::json& j);

nlohmann::json state_to_json(const ServiceState& s);
ServiceState state_from_json(const nlohmann::json& j);

/// Writes {"as_of_seq", "state"} atomically (temp file + rename).
void write_snapshot(const std::string& path, const ServiceState& s);
/// nullopt if the file does not exist.
std::optional<ServiceState> read_snapshot(const std::string& path);

/// Snapshot (if any) plus the log tail after it. A snapshot ahead of the log
/// throws IntegrityError.
ServiceState load_state(const std::string& snapshot_path, const EventLog& log);

}  // namespace smokewatch::store
