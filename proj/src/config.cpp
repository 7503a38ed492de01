#include "smokewatch/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "smokewatch/codec.hpp"

namespace smokewatch::config {

using nlohmann::json;

// ---------------------------------------------------------------------------
// TOML subset

namespace {

class TomlParser {
 public:
  explicit TomlParser(std::string_view text) : text_(text) {}

  json parse() {
    json root = json::object();
    json* table = &root;
    while (!eof()) {
      skip_blank();
      if (eof()) break;
      if (peek() == '[') {
        table = header(root);
      } else {
        key_value(*table);
      }
      end_of_line();
    }
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(fmt::format("config line {}: {}", line_, what));
  }

  bool eof() const { return pos_ >= text_.size(); }
  char peek() const { return eof() ? '\0' : text_[pos_]; }

  void advance() {
    if (text_[pos_] == '\n') ++line_;
    ++pos_;
  }

  void skip_spaces() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) advance();
  }

  void skip_comment() {
    if (peek() == '#') {
      while (!eof() && peek() != '\n') advance();
    }
  }

  // Spaces, comments and newlines.
  void skip_blank() {
    while (!eof()) {
      skip_spaces();
      skip_comment();
      if (peek() == '\n' || peek() == '\r') {
        advance();
      } else {
        break;
      }
    }
  }

  void end_of_line() {
    skip_spaces();
    skip_comment();
    if (peek() == '\r') advance();
    if (eof()) return;
    if (peek() != '\n') fail(fmt::format("unexpected '{}'", peek()));
    advance();
  }

  std::string bare_key() {
    std::string key;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) {
      key += peek();
      advance();
    }
    if (key.empty()) fail("expected a key");
    return key;
  }

  json* header(json& root) {
    advance();
    const bool array = peek() == '[';
    if (array) advance();
    skip_spaces();
    const std::string name = bare_key();
    skip_spaces();
    if (peek() != ']') fail("expected ']' (dotted table names are not supported)");
    advance();
    if (array) {
      if (peek() != ']') fail("expected ']]'");
      advance();
      json& arr = root[name];
      if (arr.is_null()) arr = json::array();
      if (!arr.is_array()) fail(fmt::format("'{}' is already a table", name));
      arr.push_back(json::object());
      return &arr.back();
    }
    if (root.contains(name)) fail(fmt::format("table '{}' defined twice", name));
    root[name] = json::object();
    return &root[name];
  }

  void key_value(json& table) {
    const std::string key = bare_key();
    skip_spaces();
    if (peek() != '=') fail(fmt::format("expected '=' after '{}'", key));
    advance();
    skip_spaces();
    if (table.contains(key)) fail(fmt::format("duplicate key '{}'", key));
    table[key] = value();
  }

  json value() {
    const char c = peek();
    if (c == '"') return basic_string();
    if (c == '\'') return literal_string();
    if (c == '[') return array();
    if (text_.substr(pos_, 4) == "true") {
      for (int i = 0; i < 4; ++i) advance();
      return true;
    }
    if (text_.substr(pos_, 5) == "false") {
      for (int i = 0; i < 5; ++i) advance();
      return false;
    }
    return number();
  }

  std::uint32_t hex_digits(int n) {
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) {
      if (eof() || !std::isxdigit(static_cast<unsigned char>(peek()))) fail("bad unicode escape");
      const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(peek())));
      v = v * 16 + static_cast<std::uint32_t>(c <= '9' ? c - '0' : c - 'a' + 10);
      advance();
    }
    if (v > 0x10FFFF || (v >= 0xD800 && v <= 0xDFFF)) fail("unicode escape is not a scalar value");
    return v;
  }

  static void append_utf8(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
      out += static_cast<char>(cp);
    } else if (cp < 0x800) {
      out += static_cast<char>(0xC0 | (cp >> 6));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
      out += static_cast<char>(0xE0 | (cp >> 12));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
      out += static_cast<char>(0xF0 | (cp >> 18));
      out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
      out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
      out += static_cast<char>(0x80 | (cp & 0x3F));
    }
  }

  json basic_string() {
    advance();
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      char c = peek();
      advance();
      if (c == '"') break;
      if (c == '\\') {
        if (eof()) fail("unterminated escape");
        const char e = peek();
        advance();
        switch (e) {
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case 'r': out += '\r'; break;
          case 'b': out += '\b'; break;
          case 'f': out += '\f'; break;
          case 'u': append_utf8(out, hex_digits(4)); break;
          case 'U': append_utf8(out, hex_digits(8)); break;
          default: fail(fmt::format("unsupported escape '\\{}'", e));
        }
      } else {
        out += c;
      }
    }
    return out;
  }

  json literal_string() {
    advance();
    std::string out;
    while (true) {
      if (eof() || peek() == '\n') fail("unterminated string");
      const char c = peek();
      advance();
      if (c == '\'') break;
      out += c;
    }
    return out;
  }

  json array() {
    advance();
    json arr = json::array();
    while (true) {
      skip_blank();
      if (peek() == ']') {
        advance();
        return arr;
      }
      arr.push_back(value());
      skip_blank();
      if (peek() == ',') {
        advance();
      } else if (peek() == ']') {
        advance();
        return arr;
      } else {
        fail("expected ',' or ']' in array");
      }
    }
  }

  json number() {
    std::string tok;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '+' || peek() == '-' ||
                      peek() == '.' || peek() == '_')) {
      if (peek() != '_') tok += peek();
      advance();
    }
    if (tok.empty()) fail("expected a value");
    const char* b = tok.data();
    const char* e = b + tok.size();
    if (*b == '+') ++b;
    if (tok.find_first_of(".eE") == std::string::npos) {
      std::int64_t v = 0;
      auto [p, ec] = std::from_chars(b, e, v);
      if (ec == std::errc() && p == e) return v;
    } else {
      double v = 0;
      auto [p, ec] = std::from_chars(b, e, v);
      if (ec == std::errc() && p == e) return v;
    }
    fail(fmt::format("invalid value '{}'", tok));
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  int line_ = 1;
};

}  // namespace

json parse_toml(std::string_view text) { return TomlParser(text).parse(); }

// ---------------------------------------------------------------------------
// typed config

namespace {

template <typename T>
T get_or(const json& table, const char* section, const char* key, T fallback) {
  auto it = table.find(key);
  if (it == table.end()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(fmt::format("[{}] {}: wrong type", section, key));
  }
}

const json& section(const json& doc, const char* name) {
  static const json empty = json::object();
  auto it = doc.find(name);
  if (it == doc.end()) return empty;
  if (!it->is_object()) throw ConfigError(fmt::format("[{}] must be a table", name));
  return *it;
}

void check_keys(const json& table, const char* section, std::initializer_list<std::string_view> known) {
  for (const auto& [key, _] : table.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || k == key;
    if (!ok) throw ConfigError(fmt::format("[{}]: unknown key '{}'", section, key));
  }
}

ingest::CameraConfig camera_from_toml(const json& t) {
  check_keys(t, "camera", {"id", "name", "url", "poll_interval_s", "conf_threshold", "enabled", "masks"});
  if (!t.contains("id") || !t.contains("url")) throw ConfigError("[[camera]] needs id and url");
  ingest::CameraConfig c;
  c.id = get_or<std::string>(t, "camera", "id", "");
  c.name = get_or<std::string>(t, "camera", "name", c.id);
  c.url = get_or<std::string>(t, "camera", "url", "");
  c.poll_interval = Seconds{get_or<std::int64_t>(t, "camera", "poll_interval_s", ingest::kDefaultPollInterval.count())};
  c.conf_threshold = get_or<double>(t, "camera", "conf_threshold", c.conf_threshold);
  c.enabled = get_or<bool>(t, "camera", "enabled", true);
  for (const auto& m : get_or<json>(t, "camera", "masks", json::array())) {
    if (!m.is_array() || m.size() != 4) throw ConfigError(fmt::format("[[camera]] {}: masks are [x1, y1, x2, y2]", c.id));
    c.masks.push_back({m[0].get<double>(), m[1].get<double>(), m[2].get<double>(), m[3].get<double>()});
  }
  return c;
}

}  // namespace

void ServiceConfig::validate() const {
  if (server.port < 0 || server.port > 65535) throw ConfigError("[server] port must lie in [0, 65535]");
  if (server.max_upload_bytes == 0) throw ConfigError("[server] max_upload_mb must be positive");
  try {
    detector.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(fmt::format("[detector] {}", e.what()));
  }
  try {
    alarm.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(fmt::format("[alerting] {}", e.what()));
  }
  if (store.dir.empty()) throw ConfigError("[store] dir must not be empty");
  if (ingest.queue_capacity == 0) throw ConfigError("[ingest] queue_capacity must be positive");
  if (ingest.tick <= Millis{0}) throw ConfigError("[ingest] tick_ms must be positive");
  std::set<std::string> ids;
  for (const auto& cam : cameras) {
    try {
      cam.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(fmt::format("[[camera]] {}: {}", cam.id, e.what()));
    }
    if (!ids.insert(cam.id).second) throw ConfigError(fmt::format("[[camera]] duplicate id '{}'", cam.id));
  }
}

ServiceConfig config_from_json(const json& doc) {
  check_keys(doc, "top level", {"server", "detector", "alerting", "store", "ingest", "camera"});
  ServiceConfig cfg;

  const json& server = section(doc, "server");
  check_keys(server, "server", {"host", "port", "token", "max_upload_mb"});
  cfg.server.host = get_or<std::string>(server, "server", "host", cfg.server.host);
  cfg.server.port = get_or<int>(server, "server", "port", cfg.server.port);
  if (server.contains("token")) cfg.server.token = get_or<std::string>(server, "server", "token", "");
  cfg.server.max_upload_bytes = static_cast<std::size_t>(
      get_or<double>(server, "server", "max_upload_mb", 20.0) * 1024 * 1024);

  const json& det = section(doc, "detector");
  check_keys(det, "detector", {"backend", "endpoint", "fixture", "input_side", "conf_floor", "nms_iou", "timeout_ms"});
  const auto backend = get_or<std::string>(det, "detector", "backend", "mock");
  if (backend == "mock") {
    cfg.detector.backend = detector::BackendKind::kMock;
  } else if (backend == "external") {
    cfg.detector.backend = detector::BackendKind::kExternal;
  } else {
    throw ConfigError(fmt::format("[detector] backend must be 'mock' or 'external', got '{}'", backend));
  }
  cfg.detector.endpoint = get_or<std::string>(det, "detector", "endpoint", "");
  cfg.detector.fixture_path = get_or<std::string>(det, "detector", "fixture", "");
  cfg.detector.input_side = get_or<int>(det, "detector", "input_side", cfg.detector.input_side);
  cfg.detector.conf_floor = get_or<double>(det, "detector", "conf_floor", cfg.detector.conf_floor);
  cfg.detector.nms_iou = get_or<double>(det, "detector", "nms_iou", cfg.detector.nms_iou);
  cfg.detector.timeout = Millis{get_or<std::int64_t>(det, "detector", "timeout_ms", cfg.detector.timeout.count())};

  const json& al = section(doc, "alerting");
  check_keys(al, "alerting", {"n", "k", "m", "cooldown_s", "webhooks", "alert_log"});
  cfg.alarm.n = get_or<std::uint32_t>(al, "alerting", "n", cfg.alarm.n);
  cfg.alarm.k = get_or<std::uint32_t>(al, "alerting", "k", cfg.alarm.k);
  cfg.alarm.m = get_or<std::uint32_t>(al, "alerting", "m", cfg.alarm.m);
  cfg.alarm.cooldown = Seconds{get_or<std::int64_t>(al, "alerting", "cooldown_s", cfg.alarm.cooldown.count())};
  cfg.webhooks = get_or<std::vector<std::string>>(al, "alerting", "webhooks", {});
  if (al.contains("alert_log")) cfg.alert_log = get_or<std::string>(al, "alerting", "alert_log", "");

  const json& st = section(doc, "store");
  check_keys(st, "store", {"dir", "snapshot_every", "fsync"});
  cfg.store.dir = get_or<std::string>(st, "store", "dir", cfg.store.dir);
  cfg.store.snapshot_every = get_or<std::size_t>(st, "store", "snapshot_every", cfg.store.snapshot_every);
  cfg.store.fsync = get_or<bool>(st, "store", "fsync", cfg.store.fsync);

  const json& in = section(doc, "ingest");
  check_keys(in, "ingest", {"queue_capacity", "tick_ms", "fetch_timeout_ms"});
  cfg.ingest.queue_capacity = get_or<std::size_t>(in, "ingest", "queue_capacity", cfg.ingest.queue_capacity);
  cfg.ingest.tick = Millis{get_or<std::int64_t>(in, "ingest", "tick_ms", cfg.ingest.tick.count())};
  cfg.ingest.fetch_timeout =
      Millis{get_or<std::int64_t>(in, "ingest", "fetch_timeout_ms", cfg.ingest.fetch_timeout.count())};

  if (auto it = doc.find("camera"); it != doc.end()) {
    if (!it->is_array()) throw ConfigError("cameras are declared with [[camera]]");
    for (const auto& t : *it) cfg.cameras.push_back(camera_from_toml(t));
  }
  cfg.validate();
  return cfg;
}

ServiceConfig parse_config(std::string_view toml_text) { return config_from_json(parse_toml(toml_text)); }

ServiceConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
}

void apply_env_overrides(ServiceConfig& cfg, const EnvFn& env) {
  const EnvFn get = env ? env : [](const char* name) -> std::optional<std::string> {
    const char* v = std::getenv(name);
    return v ? std::optional<std::string>(v) : std::nullopt;
  };
  if (auto host = get("SMOKEWATCH_HOST")) cfg.server.host = *host;
  if (auto port = get("SMOKEWATCH_PORT")) {
    int p = 0;
    auto [ptr, ec] = std::from_chars(port->data(), port->data() + port->size(), p);
    if (ec != std::errc() || ptr != port->data() + port->size() || p < 0 || p > 65535) {
      throw ConfigError("SMOKEWATCH_PORT must be an integer in [0, 65535]");
    }
    cfg.server.port = p;
  }
  if (auto dir = get("SMOKEWATCH_STORE_DIR")) cfg.store.dir = *dir;
}

}  // namespace smokewatch::config
