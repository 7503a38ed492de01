#include "smokewatch/api_server.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "smokewatch/codec.hpp"

namespace smokewatch::api {

using nlohmann::json;
namespace fs = std::filesystem;

ApiOptions ApiOptions::from_config(const config::ServerConfig& s) {
  ApiOptions o;
  o.host = s.host;
  o.port = s.port;
  o.token = s.token;
  o.max_upload_bytes = s.max_upload_bytes;
  return o;
}

json error_body(const std::string& code, const std::string& message) {
  return json{{"error", {{"code", code}, {"message", message}}}};
}

namespace {

constexpr const char* kJson = "application/json";

/// Thrown inside handlers; converted into an error response.
struct ApiError : std::runtime_error {
  ApiError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status(status), code(std::move(code)) {}
  int status;
  std::string code;
};

void send_json(httplib::Response& res, const json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), kJson);
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, error_body(code, message), status);
}

std::string default_code(int status) {
  switch (status) {
    case 400: return "bad_request";
    case 401: return "unauthorized";
    case 404: return "not_found";
    case 405: return "method_not_allowed";
    case 409: return "conflict";
    case 413: return "payload_too_large";
    case 415: return "unsupported_media_type";
    case 422: return "validation_error";
    case 502: return "backend_error";
    case 504: return "backend_timeout";
    default: return status >= 500 ? "internal_error" : "bad_request";
  }
}

json parse_body(const httplib::Request& req) {
  try {
    json j = json::parse(req.body);
    if (!j.is_object()) throw ApiError(400, "bad_request", "request body must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ApiError(400, "bad_request", std::string("malformed JSON: ") + e.what());
  }
}

void reject_unknown(const json& body, std::initializer_list<std::string_view> known) {
  for (const auto& [key, _] : body.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || k == key;
    if (!ok) throw ApiError(422, "validation_error", fmt::format("unknown field '{}'", key));
  }
}

template <typename T>
T field(const json& body, const char* key) {
  try {
    return body.at(key).get<T>();
  } catch (const json::exception&) {
    throw ApiError(422, "validation_error", fmt::format("field '{}' has the wrong type", key));
  }
}

json camera_view(const store::ServiceState& s, const ingest::CameraConfig& cam) {
  json j = cam;
  j["status"] = s.poll.at(cam.id);
  const auto& alarm = s.alarms.at(cam.id);
  j["phase"] = alerting::to_string(alarm.phase);
  j["active_alert_id"] = alarm.active_alert_id ? json(*alarm.active_alert_id) : json(nullptr);
  return j;
}

std::vector<detector::ExclusionMask> masks_from(const json& body) {
  const auto& arr = body.at("masks");
  if (!arr.is_array()) throw ApiError(422, "validation_error", "field 'masks' must be an array");
  std::vector<detector::ExclusionMask> masks;
  for (const auto& m : arr) {
    try {
      masks.push_back(m.is_array() ? detector::ExclusionMask{m.at(0).get<double>(), m.at(1).get<double>(),
                                                             m.at(2).get<double>(), m.at(3).get<double>()}
                                   : m.get<detector::ExclusionMask>());
    } catch (const json::exception&) {
      throw ApiError(422, "validation_error", "masks are {x1,y1,x2,y2} objects in normalized coordinates");
    }
  }
  return masks;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool wants_json(const httplib::Request& req) {
  if (req.get_param_value("format") == "json") return true;
  return req.get_header_value("Accept").find("application/json") != std::string::npos;
}

bool streamed_kind(store::RecordKind k) {
  return k == store::RecordKind::kDetection || k == store::RecordKind::kAlert || k == store::RecordKind::kPollStatus;
}

std::string sse_event(const store::LogRecord& rec) {
  const json data{{"seq", rec.seq}, {"at", timestamp_json(rec.at)}, {"kind", store::to_string(rec.kind)},
                  {"payload", rec.payload}};
  return fmt::format("id: {}\nevent: {}\ndata: {}\n\n", rec.seq, store::to_string(rec.kind), data.dump());
}

std::uint64_t parse_cursor(const std::string& text) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    throw ApiError(400, "bad_request", fmt::format("'{}' is not a valid sequence number", text));
  }
  return v;
}

}  // namespace

ApiServer::ApiServer(service::Service& svc, ApiOptions opts)
    : svc_(svc), opts_(std::move(opts)), server_(std::make_unique<httplib::Server>()) {
  // SO_REUSEADDR only: the library default also sets SO_REUSEPORT, which
  // would let a second server share a port that is already in use.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  routes();
}

ApiServer::~ApiServer() { stop(); }

int ApiServer::bind() {
  if (opts_.port == 0) {
    port_ = server_->bind_to_any_port(opts_.host);
  } else {
    port_ = server_->bind_to_port(opts_.host, opts_.port) ? opts_.port : -1;
  }
  if (port_ < 0) throw BindError(fmt::format("cannot listen on {}:{} (address in use?)", opts_.host, opts_.port));
  return port_;
}

void ApiServer::serve() { server_->listen_after_bind(); }

int ApiServer::start() {
  const int p = bind();
  thread_ = std::thread([this] { serve(); });
  server_->wait_until_ready();
  return p;
}

void ApiServer::stop() {
  // Open event streams notice this within one poll interval.
  stopping_ = true;
  server_->stop();
  if (thread_.joinable()) thread_.join();
}

void ApiServer::routes() {
  auto& s = *server_;
  s.set_payload_max_length(opts_.max_upload_bytes);

  // Every error leaves the server as {"error": {...}}.
  s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
    const std::string code = default_code(res.status);
    std::string message = httplib::status_message(res.status);
    if (res.status == 413) message = "upload exceeds the size limit";
    res.set_content(error_body(code, message).dump(), kJson);
    return httplib::Server::HandlerResponse::Handled;
  });

  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const ApiError& e) {
      send_error(res, e.status, e.code, e.what());
    } catch (const service::NotFoundError& e) {
      send_error(res, 404, "not_found", e.what());
    } catch (const service::ConflictError& e) {
      send_error(res, 409, "conflict", e.what());
    } catch (const service::InvalidStateError& e) {
      send_error(res, 409, "invalid_state", e.what());
    } catch (const alerting::InvalidStateError& e) {
      send_error(res, 409, "invalid_state", e.what());
    } catch (const service::ValidationError& e) {
      send_error(res, 422, "validation_error", e.what());
    } catch (const detector::BackendError& e) {
      const bool timeout = e.kind() == detector::BackendErrorKind::kTimeout;
      send_error(res, timeout ? 504 : 502, timeout ? "backend_timeout" : "backend_error", e.what());
    } catch (const std::exception& e) {
      spdlog::error("unhandled error: {}", e.what());
      send_error(res, 500, "internal_error", e.what());
    }
  });

  if (opts_.token) {
    s.set_pre_routing_handler([token = *opts_.token](const httplib::Request& req, httplib::Response& res) {
      if (req.path.rfind("/api/", 0) != 0 && req.path.rfind("/frames/", 0) != 0) {
        return httplib::Server::HandlerResponse::Unhandled;
      }
      const bool ok = req.get_header_value("Authorization") == "Bearer " + token ||
                      req.get_param_value("token") == token;
      if (ok) return httplib::Server::HandlerResponse::Unhandled;
      send_error(res, 401, "unauthorized", "missing or wrong bearer token");
      return httplib::Server::HandlerResponse::Handled;
    });
  }

  s.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, {{"status", "ok"}, {"last_seq", svc_.log().last_seq()}});
  });

  // -- cameras -------------------------------------------------------------

  s.Get("/api/cameras", [this](const httplib::Request&, httplib::Response& res) {
    const auto st = svc_.state();
    json out = json::array();
    for (const auto& [id, cam] : st.cameras) out.push_back(camera_view(st, cam));
    send_json(res, out);
  });

  s.Post("/api/cameras", [this](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_body(req);
    reject_unknown(body, {"id", "name", "url", "poll_interval_s", "conf_threshold", "masks", "enabled"});
    if (!body.contains("id") || !body.contains("url")) {
      throw ApiError(422, "validation_error", "fields 'id' and 'url' are required");
    }
    ingest::CameraConfig cam;
    cam.id = field<std::string>(body, "id");
    cam.url = field<std::string>(body, "url");
    if (body.contains("name")) cam.name = field<std::string>(body, "name");
    if (body.contains("poll_interval_s")) cam.poll_interval = Seconds{field<std::int64_t>(body, "poll_interval_s")};
    if (body.contains("conf_threshold")) cam.conf_threshold = field<double>(body, "conf_threshold");
    if (body.contains("masks")) cam.masks = masks_from(body);
    if (body.contains("enabled")) cam.enabled = field<bool>(body, "enabled");
    svc_.add_camera(cam);
    const auto st = svc_.state();
    send_json(res, camera_view(st, st.cameras.at(cam.id)), 201);
  });

  s.Patch(R"(/api/cameras/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const json body = parse_body(req);
    reject_unknown(body, {"name", "url", "poll_interval_s", "conf_threshold", "masks", "enabled"});
    service::CameraPatch patch;
    if (body.contains("name")) patch.name = field<std::string>(body, "name");
    if (body.contains("url")) patch.url = field<std::string>(body, "url");
    if (body.contains("poll_interval_s")) patch.poll_interval = Seconds{field<std::int64_t>(body, "poll_interval_s")};
    if (body.contains("conf_threshold")) patch.conf_threshold = field<double>(body, "conf_threshold");
    if (body.contains("masks")) patch.masks = masks_from(body);
    if (body.contains("enabled")) patch.enabled = field<bool>(body, "enabled");
    svc_.patch_camera(id, patch);
    const auto st = svc_.state();
    send_json(res, camera_view(st, st.cameras.at(id)));
  });

  s.Get(R"(/api/cameras/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto st = svc_.state();
    auto it = st.cameras.find(id);
    if (it == st.cameras.end()) throw ApiError(404, "not_found", fmt::format("camera '{}' does not exist", id));
    send_json(res, camera_view(st, it->second));
  });

  s.Get(R"(/api/cameras/([A-Za-z0-9_-]+)/latest)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto st = svc_.state();
    if (!st.cameras.contains(id)) throw ApiError(404, "not_found", fmt::format("camera '{}' does not exist", id));
    auto it = st.latest.find(id);
    if (it == st.latest.end()) {
      res.status = 204;
      return;
    }
    json j = store::latest_frame_json(it->second);
    j["camera_id"] = id;
    j["image_url"] = fmt::format("/frames/{}.jpg", id);
    send_json(res, j);
  });

  s.Get(R"(/frames/([A-Za-z0-9_-]+)\.jpg)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string path = svc_.frame_path(req.matches[1]);
    if (!fs::exists(path)) throw ApiError(404, "not_found", "no frame cached for this camera");
    res.set_header("Cache-Control", "no-store");
    res.set_content(read_file(path), "image/jpeg");
  });

  // -- alerts --------------------------------------------------------------

  s.Get("/api/alerts", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string filter = req.has_param("state") ? req.get_param_value("state") : "active";
    if (filter != "active" && filter != "acknowledged" && filter != "cleared" && filter != "all") {
      throw ApiError(400, "bad_request", "state must be one of active, acknowledged, cleared, all");
    }
    const auto st = svc_.state();
    std::vector<const store::AlertRecord*> rows;
    for (const auto& [id, a] : st.alerts) {
      if (filter == "all" || a.state == filter) rows.push_back(&a);
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const auto* a, const auto* b) { return a->raised_at < b->raised_at; });
    json out = json::array();
    for (const auto* a : rows) out.push_back(store::alert_record_json(*a));
    send_json(res, out);
  });

  s.Post(R"(/api/alerts/([A-Za-z0-9_.-]+)/ack)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    std::string op = "operator";
    if (!req.body.empty()) {
      const json body = parse_body(req);
      reject_unknown(body, {"operator"});
      if (body.contains("operator")) op = field<std::string>(body, "operator");
    }
    if (op.empty()) throw ApiError(422, "validation_error", "operator must not be empty");
    send_json(res, json(svc_.acknowledge(id, op)));
  });

  // -- ad-hoc detection ----------------------------------------------------

  s.Post("/api/detect", [this](const httplib::Request& req, httplib::Response& res) {
    std::string bytes;
    std::optional<std::string> image_id;
    if (req.has_param("image_id")) image_id = req.get_param_value("image_id");
    if (req.is_multipart_form_data()) {
      if (!req.has_file("image")) throw ApiError(422, "validation_error", "multipart upload needs an 'image' part");
      bytes = req.get_file_value("image").content;
      if (req.has_file("image_id")) image_id = req.get_file_value("image_id").content;
    } else {
      bytes = req.body;
    }
    if (image_id && image_id->empty()) throw ApiError(422, "validation_error", "image_id must not be empty");
    if (bytes.empty()) throw ApiError(422, "validation_error", "empty upload");
    Image img;
    try {
      img = decode_image(bytes);
    } catch (const DecodeError& e) {
      throw ApiError(422, "validation_error", std::string("undecodable image: ") + e.what());
    }
    const auto r = svc_.detect_once(img, image_id);
    json dets = json::array();
    for (const auto& d : r.detections) dets.push_back(store::labeled_detection_json(d));
    send_json(res, {{"image_id", r.image_id},
                    {"model_id", r.model_id},
                    {"latency_ms", r.latency_ms},
                    {"width", r.width},
                    {"height", r.height},
                    {"detections", dets}});
  });

  // -- events --------------------------------------------------------------

  s.Get("/api/events/stream", [this](const httplib::Request& req, httplib::Response& res) {
    std::uint64_t cursor = 0;
    if (req.has_param("since")) {
      cursor = parse_cursor(req.get_param_value("since"));
    } else if (req.has_header("Last-Event-ID")) {
      cursor = parse_cursor(req.get_header_value("Last-Event-ID"));
    } else {
      cursor = svc_.log().last_seq();
    }
    res.set_header("Cache-Control", "no-cache");
    res.set_header("X-Accel-Buffering", "no");
    auto& log = svc_.log();
    const Millis heartbeat = opts_.stream_heartbeat;
    res.set_chunked_content_provider(
        "text/event-stream",
        [this, &log, cursor, heartbeat, quiet = Millis{0}](std::size_t, httplib::DataSink& sink) mutable {
          if (stopping_ || !sink.is_writable()) return false;
          auto batch = log.read_since(cursor, 256);
          if (batch.empty()) {
            constexpr Millis kPoll{500};
            if (!log.wait_for(cursor, kPoll)) {
              quiet += kPoll;
              if (quiet >= heartbeat) {
                quiet = Millis{0};
                const std::string ping = ": keepalive\n\n";
                if (!sink.write(ping.data(), ping.size())) return false;
              }
            }
            return true;
          }
          quiet = Millis{0};
          std::string chunk;
          for (const auto& rec : batch) {
            cursor = rec.seq;
            if (streamed_kind(rec.kind)) chunk += sse_event(rec);
          }
          if (!chunk.empty() && !sink.write(chunk.data(), chunk.size())) return false;
          return true;
        });
  });

  // -- metrics -------------------------------------------------------------

  s.Get("/api/metrics", [this](const httplib::Request& req, httplib::Response& res) {
    const auto m = svc_.metrics();
    if (wants_json(req)) {
      send_json(res, service::metrics_json(m));
    } else {
      res.set_content(service::render_metrics_text(m), "text/plain; version=0.0.4");
    }
  });
}

}  // namespace smokewatch::api
