#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "smokewatch/alerting.hpp"
#include "smokewatch/detector.hpp"
#include "smokewatch/ingest.hpp"

namespace smokewatch::config {

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Parses the TOML subset used by service config files: [table] and
/// [[array-of-tables]] headers, bare keys, basic and literal strings,
/// integers, floats, booleans and (nested, possibly multi-line) arrays.
nlohmann::json parse_toml(std::string_view text);

inline constexpr std::size_t kDefaultMaxUpload = 20u * 1024 * 1024;

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::string> token;
  std::size_t max_upload_bytes = kDefaultMaxUpload;
};

struct StoreConfig {
  std::string dir = "smokewatch-data";
  std::size_t snapshot_every = 1000;
  bool fsync = true;
};

struct IngestConfig {
  std::size_t queue_capacity = 64;
  Millis tick{1000};
  Millis fetch_timeout{10'000};
};

struct ServiceConfig {
  ServerConfig server;
  detector::DetectorConfig detector;
  alerting::AlarmParams alarm;
  std::vector<std::string> webhooks;
  std::optional<std::string> alert_log;  // default: <store.dir>/alerts.log
  StoreConfig store;
  IngestConfig ingest;
  std::vector<ingest::CameraConfig> cameras;

  /// Throws ConfigError naming the offending setting.
  void validate() const;
};

ServiceConfig config_from_json(const nlohmann::json& doc);
ServiceConfig parse_config(std::string_view toml_text);
ServiceConfig load_config(const std::string& path);

using EnvFn = std::function<std::optional<std::string>(const char*)>;

/// SMOKEWATCH_HOST, SMOKEWATCH_PORT and SMOKEWATCH_STORE_DIR override the file.
void apply_env_overrides(ServiceConfig& cfg, const EnvFn& env = {});

}  // namespace smokewatch::config
