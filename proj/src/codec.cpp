#include "smokewatch/codec.hpp"

namespace smokewatch {

using nlohmann::json;

json timestamp_json(Timestamp t) { return format_timestamp(t); }

Timestamp timestamp_from_json(const json& j) { return parse_timestamp(j.get<std::string>()); }

json optional_timestamp_json(const std::optional<Timestamp>& t) { return t ? timestamp_json(*t) : json(nullptr); }

std::optional<Timestamp> optional_timestamp_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  return timestamp_from_json(j);
}

void to_json(json& j, const Detection& d) {
  j = json{{"x1", d.box.x1}, {"y1", d.box.y1},         {"x2", d.box.x2},
           {"y2", d.box.y2}, {"class_id", d.class_id}, {"confidence", d.confidence}};
}

void from_json(const json& j, Detection& d) {
  d.box = {j.at("x1").get<double>(), j.at("y1").get<double>(), j.at("x2").get<double>(), j.at("y2").get<double>()};
  d.class_id = j.at("class_id").get<int>();
  d.confidence = j.at("confidence").get<double>();
}

namespace detector {

void to_json(json& j, const ExclusionMask& m) { j = json{{"x1", m.x1}, {"y1", m.y1}, {"x2", m.x2}, {"y2", m.y2}}; }

void from_json(const json& j, ExclusionMask& m) {
  m = {j.at("x1").get<double>(), j.at("y1").get<double>(), j.at("x2").get<double>(), j.at("y2").get<double>()};
}

}  // namespace detector

namespace ingest {

void to_json(json& j, const CameraConfig& c) {
  j = json{{"id", c.id},
           {"name", c.name},
           {"url", c.url},
           {"poll_interval_s", c.poll_interval.count()},
           {"conf_threshold", c.conf_threshold},
           {"masks", c.masks},
           {"enabled", c.enabled}};
}

void from_json(const json& j, CameraConfig& c) {
  c.id = j.at("id").get<std::string>();
  c.name = j.value("name", c.id);
  c.url = j.at("url").get<std::string>();
  c.poll_interval = Seconds{j.value("poll_interval_s", kDefaultPollInterval.count())};
  c.conf_threshold = j.value("conf_threshold", detector::kDefaultConfFloor);
  c.masks = j.value("masks", std::vector<detector::ExclusionMask>{});
  c.enabled = j.value("enabled", true);
}

void to_json(json& j, const PollStatus& s) {
  j = json{{"camera_id", s.camera_id},
           {"state", to_string(s.state)},
           {"consecutive_failures", s.consecutive_failures},
           {"next_attempt", timestamp_json(s.next_attempt)},
           {"last_seq", s.last_seq},
           {"last_failure", to_string(s.last_failure)},
           {"last_error", s.last_error},
           {"last_success", optional_timestamp_json(s.last_success)}};
}

void from_json(const json& j, PollStatus& s) {
  s.camera_id = j.at("camera_id").get<std::string>();
  s.state = poll_state_from_string(j.at("state").get<std::string>());
  s.consecutive_failures = j.at("consecutive_failures").get<std::uint32_t>();
  s.next_attempt = timestamp_from_json(j.at("next_attempt"));
  s.last_seq = j.at("last_seq").get<std::uint64_t>();
  s.last_failure = failure_kind_from_string(j.at("last_failure").get<std::string>());
  s.last_error = j.at("last_error").get<std::string>();
  s.last_success = optional_timestamp_from_json(j.at("last_success"));
}

}  // namespace ingest

namespace alerting {

void to_json(json& j, const AlarmParams& p) {
  j = json{{"n", p.n}, {"k", p.k}, {"m", p.m}, {"cooldown_s", p.cooldown.count()}};
}

void from_json(const json& j, AlarmParams& p) {
  const AlarmParams d;
  p.n = j.value("n", d.n);
  p.k = j.value("k", d.k);
  p.m = j.value("m", d.m);
  p.cooldown = Seconds{j.value("cooldown_s", d.cooldown.count())};
}

void to_json(json& j, const FrameObservation& o) {
  j = json{{"camera_id", o.camera_id},           {"frame_seq", o.frame_seq},
           {"at", timestamp_json(o.at)},         {"positive", o.positive},
           {"max_confidence", o.max_confidence}, {"detection_count", o.detection_count}};
}

void from_json(const json& j, FrameObservation& o) {
  o.camera_id = j.at("camera_id").get<std::string>();
  o.frame_seq = j.at("frame_seq").get<std::uint64_t>();
  o.at = timestamp_from_json(j.at("at"));
  o.positive = j.at("positive").get<bool>();
  o.max_confidence = j.at("max_confidence").get<double>();
  o.detection_count = j.at("detection_count").get<std::uint32_t>();
}

void to_json(json& j, const WindowEntry& w) {
  j = json{{"frame_seq", w.frame_seq}, {"positive", w.positive}, {"max_confidence", w.max_confidence}};
}

void from_json(const json& j, WindowEntry& w) {
  w.frame_seq = j.at("frame_seq").get<std::uint64_t>();
  w.positive = j.at("positive").get<bool>();
  w.max_confidence = j.at("max_confidence").get<double>();
}

void to_json(json& j, const AlarmState& s) {
  j = json{{"camera_id", s.camera_id},
           {"phase", to_string(s.phase)},
           {"window", s.window},
           {"negative_run", s.negative_run},
           {"last_seq", s.last_seq ? json(*s.last_seq) : json(nullptr)},
           {"active_alert_id", s.active_alert_id ? json(*s.active_alert_id) : json(nullptr)},
           {"cooldown_until", optional_timestamp_json(s.cooldown_until)},
           {"alerts_raised", s.alerts_raised}};
}

void from_json(const json& j, AlarmState& s) {
  s.camera_id = j.at("camera_id").get<std::string>();
  s.phase = alarm_phase_from_string(j.at("phase").get<std::string>());
  s.window = j.at("window").get<std::deque<WindowEntry>>();
  s.negative_run = j.at("negative_run").get<std::uint32_t>();
  const auto& seq = j.at("last_seq");
  s.last_seq = seq.is_null() ? std::nullopt : std::optional<std::uint64_t>(seq.get<std::uint64_t>());
  const auto& id = j.at("active_alert_id");
  s.active_alert_id = id.is_null() ? std::nullopt : std::optional<std::string>(id.get<std::string>());
  s.cooldown_until = optional_timestamp_from_json(j.at("cooldown_until"));
  s.alerts_raised = j.at("alerts_raised").get<std::uint64_t>();
}

void to_json(json& j, const AlertEvent& e) {
  j = json{{"alert_id", e.alert_id},
           {"camera_id", e.camera_id},
           {"kind", to_string(e.kind)},
           {"at", timestamp_json(e.at)},
           {"frame_seq", e.frame_seq},
           {"positives", e.positives},
           {"window_size", e.window_size},
           {"max_confidence", e.max_confidence},
           {"operator", e.operator_name ? json(*e.operator_name) : json(nullptr)}};
}

void from_json(const json& j, AlertEvent& e) {
  e.alert_id = j.at("alert_id").get<std::string>();
  e.camera_id = j.at("camera_id").get<std::string>();
  e.kind = event_kind_from_string(j.at("kind").get<std::string>());
  e.at = timestamp_from_json(j.at("at"));
  e.frame_seq = j.at("frame_seq").get<std::uint64_t>();
  e.positives = j.at("positives").get<std::uint32_t>();
  e.window_size = j.at("window_size").get<std::uint32_t>();
  e.max_confidence = j.at("max_confidence").get<double>();
  const auto& op = j.at("operator");
  e.operator_name = op.is_null() ? std::nullopt : std::optional<std::string>(op.get<std::string>());
}

}  // namespace alerting

}  // namespace smokewatch
