#pragma once

// JSON mappings for the domain types that cross the log, snapshot, webhook
// and API boundaries. Field names here are the stable wire names.

#include <optional>

#include <nlohmann/json.hpp>

#include "smokewatch/alerting.hpp"
#include "smokewatch/clock.hpp"
#include "smokewatch/detector.hpp"
#include "smokewatch/geometry.hpp"
#include "smokewatch/ingest.hpp"

namespace smokewatch {

nlohmann::json timestamp_json(Timestamp t);
Timestamp timestamp_from_json(const nlohmann::json& j);
nlohmann::json optional_timestamp_json(const std::optional<Timestamp>& t);
std::optional<Timestamp> optional_timestamp_from_json(const nlohmann::json& j);

void to_json(nlohmann::json& j, const Detection& d);
void from_json(const nlohmann::json& j, Detection& d);

namespace detector {
void to_json(nlohmann::json& j, const ExclusionMask& m);
void from_json(const nlohmann::json& j, ExclusionMask& m);
}  // namespace detector

namespace ingest {
void to_json(nlohmann::json& j, const CameraConfig& c);
/// Missing optional fields take their defaults; validation is the caller's.
void from_json(const nlohmann::json& j, CameraConfig& c);
void to_json(nlohmann::json& j, const PollStatus& s);
void from_json(const nlohmann::json& j, PollStatus& s);
}  // namespace ingest

namespace alerting {
void to_json(nlohmann::json& j, const AlarmParams& p);
void from_json(const nlohmann::json& j, AlarmParams& p);
void to_json(nlohmann::json& j, const FrameObservation& o);
void from_json(const nlohmann::json& j, FrameObservation& o);
void to_json(nlohmann::json& j, const WindowEntry& w);
void from_json(const nlohmann::json& j, WindowEntry& w);
void to_json(nlohmann::json& j, const AlarmState& s);
void from_json(const nlohmann::json& j, AlarmState& s);
void to_json(nlohmann::json& j, const AlertEvent& e);
void from_json(const nlohmann::json& j, AlertEvent& e);
}  // namespace alerting

}  // namespace smokewatch
