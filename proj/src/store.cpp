#include "smokewatch/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <zlib.h>

#include "smokewatch/codec.hpp"

namespace smokewatch::store {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(RecordKind k) noexcept {
  switch (k) {
    case RecordKind::kDetection: return "detection";
    case RecordKind::kAlert: return "alert";
    case RecordKind::kCameraConfig: return "camera_config";
    case RecordKind::kAck: return "ack";
    case RecordKind::kPollStatus: return "poll_status";
  }
  return "detection";
}

RecordKind record_kind_from_string(std::string_view s) {
  if (s == "detection") return RecordKind::kDetection;
  if (s == "alert") return RecordKind::kAlert;
  if (s == "camera_config") return RecordKind::kCameraConfig;
  if (s == "ack") return RecordKind::kAck;
  if (s == "poll_status") return RecordKind::kPollStatus;
  throw std::invalid_argument(fmt::format("unknown record kind '{}'", s));
}

// ---------------------------------------------------------------------------
// line format

namespace {

std::uint32_t crc_of(std::string_view body) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
}

std::string checksummed_body(std::uint64_t seq, std::string_view ts, std::string_view kind, std::string_view payload) {
  return fmt::format("{}\t{}\t{}\t{}", seq, ts, kind, payload);
}

}  // namespace

std::string encode_line(const LogRecord& rec) {
  const std::string ts = format_timestamp(rec.at);
  const std::string payload = rec.payload.dump();
  const std::string_view kind = to_string(rec.kind);
  const auto crc = crc_of(checksummed_body(rec.seq, ts, kind, payload));
  return fmt::format("{}\t{}\t{}\t{:08x}\t{}", rec.seq, ts, kind, crc, payload);
}

LogRecord decode_line(std::string_view line) {
  std::string_view fields[5];
  std::string_view rest = line;
  for (int i = 0; i < 4; ++i) {
    const auto tab = rest.find('\t');
    if (tab == std::string_view::npos) throw CorruptLine("too few fields");
    fields[i] = rest.substr(0, tab);
    rest.remove_prefix(tab + 1);
  }
  fields[4] = rest;

  LogRecord rec;
  auto [p, ec] = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), rec.seq);
  if (ec != std::errc() || p != fields[0].data() + fields[0].size() || rec.seq == 0) throw CorruptLine("bad seq");
  std::uint32_t crc = 0;
  auto [p2, ec2] = std::from_chars(fields[3].data(), fields[3].data() + fields[3].size(), crc, 16);
  if (fields[3].size() != 8 || ec2 != std::errc() || p2 != fields[3].data() + 8) throw CorruptLine("bad checksum field");
  if (crc != crc_of(checksummed_body(rec.seq, fields[1], fields[2], fields[4]))) {
    throw CorruptLine("checksum mismatch");
  }
  try {
    rec.at = parse_timestamp(fields[1]);
    rec.kind = record_kind_from_string(fields[2]);
    rec.payload = json::parse(fields[4]);
  } catch (const std::exception& e) {
    throw CorruptLine(e.what());
  }
  return rec;
}

namespace {

std::optional<std::uint64_t> leading_seq(std::string_view line) {
  std::uint64_t seq = 0;
  auto [p, ec] = std::from_chars(line.data(), line.data() + line.size(), seq);
  if (ec != std::errc() || p == line.data()) return std::nullopt;
  return seq;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

LogScan scan_log(const std::string& path) {
  LogScan scan;
  const std::string data = read_file(path);
  std::size_t pos = 0;
  while (pos < data.size()) {
    const auto nl = data.find('\n', pos);
    const bool terminated = nl != std::string::npos;
    const std::size_t end = terminated ? nl : data.size();
    const bool last = !terminated || nl + 1 == data.size();
    const std::string_view line(data.data() + pos, end - pos);
    const std::uint64_t expected = scan.records.size() + 1;
    try {
      if (!terminated) throw CorruptLine("unterminated record");
      LogRecord rec = decode_line(line);
      if (rec.seq != expected) {
        throw IntegrityError(rec.seq, fmt::format("{}: expected seq {} but found {}", path, expected, rec.seq));
      }
      scan.records.push_back(std::move(rec));
      scan.offsets.push_back(pos);
    } catch (const CorruptLine& e) {
      if (last) {
        scan.torn_tail = true;
        return scan;
      }
      const auto seq = leading_seq(line).value_or(expected);
      throw IntegrityError(seq, fmt::format("{}: corrupt record at seq {}: {}", path, seq, e.what()));
    }
    pos = end + 1;
    scan.valid_bytes = pos;
  }
  return scan;
}

// ---------------------------------------------------------------------------
// EventLog

EventLog::EventLog(std::string path, bool sync) : path_(std::move(path)), sync_(sync) {
  const LogScan scan = scan_log(path_);
  fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw StorageError(fmt::format("cannot open log {}: {}", path_, std::strerror(errno)));
  if (scan.torn_tail) {
    spdlog::warn("event log {}: discarding torn record after seq {}", path_, scan.records.size());
    if (::ftruncate(fd_, static_cast<off_t>(scan.valid_bytes)) != 0) {
      throw StorageError(fmt::format("cannot truncate log {}: {}", path_, std::strerror(errno)));
    }
    recovered_torn_tail_ = true;
  }
  offsets_ = scan.offsets;
  size_ = scan.valid_bytes;
  if (::lseek(fd_, static_cast<off_t>(size_), SEEK_SET) < 0) {
    throw StorageError(fmt::format("cannot seek log {}: {}", path_, std::strerror(errno)));
  }
}

EventLog::~EventLog() {
  if (fd_ >= 0) ::close(fd_);
}

std::uint64_t EventLog::append(Timestamp at, RecordKind kind, json payload) {
  std::unique_lock lock(mu_);
  LogRecord rec{offsets_.size() + 1, at, kind, std::move(payload)};
  const std::string line = encode_line(rec) + '\n';
  std::size_t written = 0;
  while (written < line.size()) {
    const auto n = ::write(fd_, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw StorageError(fmt::format("append to {} failed: {}", path_, std::strerror(errno)));
    }
    written += static_cast<std::size_t>(n);
  }
  if (sync_ && ::fdatasync(fd_) != 0) {
    throw StorageError(fmt::format("fsync of {} failed: {}", path_, std::strerror(errno)));
  }
  offsets_.push_back(size_);
  size_ += line.size();
  lock.unlock();
  cv_.notify_all();
  return rec.seq;
}

std::uint64_t EventLog::last_seq() const {
  std::lock_guard lock(mu_);
  return offsets_.size();
}

std::vector<LogRecord> EventLog::read_since(std::uint64_t after_seq, std::size_t limit) const {
  std::uint64_t begin = 0, end = 0;
  {
    std::lock_guard lock(mu_);
    if (after_seq >= offsets_.size() || limit == 0) return {};
    begin = offsets_[after_seq];
    end = size_;
  }
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw StorageError("cannot read log " + path_);
  in.seekg(static_cast<std::streamoff>(begin));
  std::vector<LogRecord> out;
  std::string line;
  std::uint64_t pos = begin;
  while (pos < end && out.size() < limit && std::getline(in, line)) {
    pos += line.size() + 1;
    try {
      out.push_back(decode_line(line));
    } catch (const CorruptLine& e) {
      throw IntegrityError(after_seq + out.size() + 1, fmt::format("{}: {}", path_, e.what()));
    }
  }
  return out;
}

bool EventLog::wait_for(std::uint64_t after_seq, Millis timeout) const {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout, [&] { return interrupted_ || offsets_.size() > after_seq; });
  return offsets_.size() > after_seq;
}

void EventLog::interrupt() {
  {
    std::lock_guard lock(mu_);
    interrupted_ = true;
  }
  cv_.notify_all();
}

// ---------------------------------------------------------------------------
// payloads

json camera_create_payload(const ingest::CameraConfig& cam) { return json{{"op", "create"}, {"camera", cam}}; }

json camera_update_payload(const ingest::CameraConfig& cam) { return json{{"op", "update"}, {"camera", cam}}; }

json alarm_params_payload(const alerting::AlarmParams& params) {
  return json{{"op", "alarm_params"}, {"params", params}};
}

json labeled_detection_json(const LabeledDetection& d) {
  json j = d.detection;
  j["class_name"] = d.class_name;
  return j;
}

json detection_payload(const std::string& camera_id, const LatestFrame& frame) {
  json dets = json::array();
  for (const auto& d : frame.detections) dets.push_back(labeled_detection_json(d));
  return json{{"camera_id", camera_id},
              {"frame_seq", frame.frame_seq},
              {"at", timestamp_json(frame.at)},
              {"width", frame.width},
              {"height", frame.height},
              {"conf_threshold", frame.conf_threshold},
              {"detections", std::move(dets)}};
}

json ack_payload(const std::string& alert_id, const std::string& operator_name) {
  return json{{"alert_id", alert_id}, {"operator", operator_name}};
}

// ---------------------------------------------------------------------------
// fold

namespace {

void record_event(ServiceState& s, const alerting::AlertEvent& ev) {
  using alerting::EventKind;
  switch (ev.kind) {
    case EventKind::kRaised: {
      AlertRecord a;
      a.alert_id = ev.alert_id;
      a.camera_id = ev.camera_id;
      a.state = "active";
      a.raised_at = ev.at;
      a.frame_seq = ev.frame_seq;
      a.positives = ev.positives;
      a.window_size = ev.window_size;
      a.max_confidence = ev.max_confidence;
      s.alerts[ev.alert_id] = std::move(a);
      break;
    }
    case EventKind::kAcknowledged: {
      auto& a = s.alerts.at(ev.alert_id);
      a.state = "acknowledged";
      a.acknowledged_at = ev.at;
      a.acknowledged_by = ev.operator_name;
      break;
    }
    case EventKind::kCleared: {
      auto& a = s.alerts.at(ev.alert_id);
      a.state = "cleared";
      a.cleared_at = ev.at;
      break;
    }
  }
}

void apply_camera_config(ServiceState& s, const LogRecord& rec) {
  const std::string op = rec.payload.at("op").get<std::string>();
  if (op == "alarm_params") {
    auto params = rec.payload.at("params").get<alerting::AlarmParams>();
    params.validate();
    s.params = params;
    return;
  }
  auto cam = rec.payload.at("camera").get<ingest::CameraConfig>();
  cam.validate();
  const bool exists = s.cameras.contains(cam.id);
  if (op == "create") {
    if (exists) throw std::invalid_argument(fmt::format("camera '{}' already exists", cam.id));
    ingest::PollStatus ps;
    ps.camera_id = cam.id;
    ps.state = cam.enabled ? ingest::PollState::kOk : ingest::PollState::kDisabled;
    ps.next_attempt = rec.at;
    s.poll[cam.id] = ps;
    alerting::AlarmState as;
    as.camera_id = cam.id;
    s.alarms[cam.id] = as;
  } else if (op == "update") {
    if (!exists) throw std::invalid_argument(fmt::format("camera '{}' does not exist", cam.id));
    auto& ps = s.poll.at(cam.id);
    if (!cam.enabled) {
      ps.state = ingest::PollState::kDisabled;
    } else if (ps.state == ingest::PollState::kDisabled) {
      ps.state = ingest::PollState::kOk;
      ps.consecutive_failures = 0;
      ps.next_attempt = rec.at;
    }
  } else {
    throw std::invalid_argument(fmt::format("unknown camera_config op '{}'", op));
  }
  s.cameras[cam.id] = std::move(cam);
}

std::vector<alerting::AlertEvent> apply_detection(ServiceState& s, const LogRecord& rec) {
  const auto& p = rec.payload;
  const std::string cam = p.at("camera_id").get<std::string>();
  if (!s.cameras.contains(cam)) throw std::invalid_argument(fmt::format("detection for unknown camera '{}'", cam));
  LatestFrame f;
  f.frame_seq = p.at("frame_seq").get<std::uint64_t>();
  f.at = timestamp_from_json(p.at("at"));
  f.width = p.at("width").get<int>();
  f.height = p.at("height").get<int>();
  f.conf_threshold = p.at("conf_threshold").get<double>();
  std::vector<Detection> plain;
  for (const auto& d : p.at("detections")) {
    LabeledDetection ld{d.get<Detection>(), d.value("class_name", std::string{})};
    plain.push_back(ld.detection);
    f.detections.push_back(std::move(ld));
  }
  const auto obs = alerting::observe(cam, f.frame_seq, f.at, plain, f.conf_threshold);
  f.positive = obs.positive;
  auto result = alerting::update(s.alarms.at(cam), obs, s.params);
  s.alarms[cam] = std::move(result.state);
  s.latest[cam] = std::move(f);
  for (const auto& ev : result.events) record_event(s, ev);
  return std::move(result.events);
}

std::vector<alerting::AlertEvent> apply_ack(ServiceState& s, const LogRecord& rec) {
  const std::string id = rec.payload.at("alert_id").get<std::string>();
  const std::string op = rec.payload.at("operator").get<std::string>();
  auto it = s.alerts.find(id);
  if (it == s.alerts.end()) throw alerting::NotFoundError(fmt::format("unknown alert '{}'", id));
  auto res = alerting::acknowledge(s.alarms.at(it->second.camera_id), id, op, rec.at);
  s.alarms[it->second.camera_id] = std::move(res.state);
  record_event(s, res.event);
  return {res.event};
}

void apply_poll_status(ServiceState& s, const LogRecord& rec) {
  auto ps = rec.payload.get<ingest::PollStatus>();
  if (!s.cameras.contains(ps.camera_id)) {
    throw std::invalid_argument(fmt::format("poll status for unknown camera '{}'", ps.camera_id));
  }
  s.poll[ps.camera_id] = std::move(ps);
}

}  // namespace

std::vector<alerting::AlertEvent> apply(ServiceState& state, const LogRecord& rec) {
  if (rec.seq != state.last_seq + 1) {
    throw IntegrityError(rec.seq, fmt::format("record seq {} does not follow {}", rec.seq, state.last_seq));
  }
  // Each handler validates before it mutates, so a rejected record leaves the
  // state untouched.
  ServiceState& next = state;
  std::vector<alerting::AlertEvent> events;
  try {
    switch (rec.kind) {
      case RecordKind::kDetection: events = apply_detection(next, rec); break;
      case RecordKind::kAlert: (void)rec.payload.get<alerting::AlertEvent>(); break;
      case RecordKind::kCameraConfig: apply_camera_config(next, rec); break;
      case RecordKind::kAck: events = apply_ack(next, rec); break;
      case RecordKind::kPollStatus: apply_poll_status(next, rec); break;
    }
  } catch (const IntegrityError&) {
    throw;
  } catch (const std::exception& e) {
    throw IntegrityError(rec.seq, fmt::format("record {} ({}) cannot be applied: {}", rec.seq, to_string(rec.kind),
                                              e.what()));
  }
  next.last_seq = rec.seq;
  return events;
}

ServiceState replay(std::span<const LogRecord> records, ServiceState base) {
  for (const auto& rec : records) {
    if (rec.seq <= base.last_seq) continue;
    apply(base, rec);
  }
  return base;
}

// ---------------------------------------------------------------------------
// snapshots

json alert_record_json(const AlertRecord& a) {
  return json{{"alert_id", a.alert_id},
              {"camera_id", a.camera_id},
              {"state", a.state},
              {"raised_at", timestamp_json(a.raised_at)},
              {"acknowledged_at", optional_timestamp_json(a.acknowledged_at)},
              {"acknowledged_by", a.acknowledged_by ? json(*a.acknowledged_by) : json(nullptr)},
              {"cleared_at", optional_timestamp_json(a.cleared_at)},
              {"frame_seq", a.frame_seq},
              {"positives", a.positives},
              {"window_size", a.window_size},
              {"max_confidence", a.max_confidence}};
}

AlertRecord alert_record_from_json(const json& j) {
  AlertRecord a;
  a.alert_id = j.at("alert_id").get<std::string>();
  a.camera_id = j.at("camera_id").get<std::string>();
  a.state = j.at("state").get<std::string>();
  a.raised_at = timestamp_from_json(j.at("raised_at"));
  a.acknowledged_at = optional_timestamp_from_json(j.at("acknowledged_at"));
  const auto& by = j.at("acknowledged_by");
  a.acknowledged_by = by.is_null() ? std::nullopt : std::optional<std::string>(by.get<std::string>());
  a.cleared_at = optional_timestamp_from_json(j.at("cleared_at"));
  a.frame_seq = j.at("frame_seq").get<std::uint64_t>();
  a.positives = j.at("positives").get<std::uint32_t>();
  a.window_size = j.at("window_size").get<std::uint32_t>();
  a.max_confidence = j.at("max_confidence").get<double>();
  return a;
}

json latest_frame_json(const LatestFrame& f) {
  json dets = json::array();
  for (const auto& d : f.detections) dets.push_back(labeled_detection_json(d));
  return json{{"frame_seq", f.frame_seq}, {"at", timestamp_json(f.at)},
              {"width", f.width},         {"height", f.height},
              {"detections", dets},       {"positive", f.positive},
              {"conf_threshold", f.conf_threshold}};
}

LatestFrame latest_frame_from_json(const json& j) {
  LatestFrame f;
  f.frame_seq = j.at("frame_seq").get<std::uint64_t>();
  f.at = timestamp_from_json(j.at("at"));
  f.width = j.at("width").get<int>();
  f.height = j.at("height").get<int>();
  for (const auto& d : j.at("detections")) {
    f.detections.push_back({d.get<Detection>(), d.at("class_name").get<std::string>()});
  }
  f.positive = j.at("positive").get<bool>();
  f.conf_threshold = j.at("conf_threshold").get<double>();
  return f;
}

json state_to_json(const ServiceState& s) {
  json alerts = json::object();
  for (const auto& [id, a] : s.alerts) alerts[id] = alert_record_json(a);
  json latest = json::object();
  for (const auto& [id, f] : s.latest) latest[id] = latest_frame_json(f);
  return json{{"params", s.params}, {"cameras", s.cameras}, {"poll", s.poll},         {"alarms", s.alarms},
              {"alerts", alerts},   {"latest", latest},     {"last_seq", s.last_seq}};
}

ServiceState state_from_json(const json& j) {
  ServiceState s;
  s.params = j.at("params").get<alerting::AlarmParams>();
  s.cameras = j.at("cameras").get<std::map<std::string, ingest::CameraConfig>>();
  s.poll = j.at("poll").get<std::map<std::string, ingest::PollStatus>>();
  s.alarms = j.at("alarms").get<std::map<std::string, alerting::AlarmState>>();
  for (const auto& [id, a] : j.at("alerts").items()) s.alerts[id] = alert_record_from_json(a);
  for (const auto& [id, f] : j.at("latest").items()) s.latest[id] = latest_frame_from_json(f);
  s.last_seq = j.at("last_seq").get<std::uint64_t>();
  return s;
}

void write_snapshot(const std::string& path, const ServiceState& s) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write snapshot " + tmp);
    out << json{{"as_of_seq", s.last_seq}, {"state", state_to_json(s)}}.dump() << '\n';
    out.flush();
    if (!out) throw StorageError("cannot write snapshot " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw StorageError(fmt::format("cannot install snapshot {}: {}", path, ec.message()));
}

std::optional<ServiceState> read_snapshot(const std::string& path) {
  if (!fs::exists(path)) return std::nullopt;
  try {
    const json doc = json::parse(read_file(path));
    ServiceState s = state_from_json(doc.at("state"));
    if (doc.at("as_of_seq").get<std::uint64_t>() != s.last_seq) {
      throw StorageError("snapshot as_of_seq does not match its state");
    }
    return s;
  } catch (const json::exception& e) {
    throw StorageError(fmt::format("snapshot {} is unreadable: {}", path, e.what()));
  }
}

ServiceState load_state(const std::string& snapshot_path, const EventLog& log) {
  ServiceState base = read_snapshot(snapshot_path).value_or(ServiceState{});
  const auto last = log.last_seq();
  if (base.last_seq > last) {
    throw IntegrityError(base.last_seq, fmt::format("snapshot at seq {} is newer than the log (last seq {})",
                                                    base.last_seq, last));
  }
  const auto tail = log.read_since(base.last_seq);
  return replay(tail, std::move(base));
}

}  // namespace smokewatch::store
