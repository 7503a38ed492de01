#pragma once

#include <atomic>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "smokewatch/clock.hpp"
#include "smokewatch/config.hpp"
#include "smokewatch/service.hpp"

namespace httplib {
class Server;
}

namespace smokewatch::api {

class BindError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ApiOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::optional<std::string> token;
  std::size_t max_upload_bytes = config::kDefaultMaxUpload;
  Millis stream_heartbeat{15'000};

  static ApiOptions from_config(const config::ServerConfig& s);
};

/// {"error": {"code": ..., "message": ...}}
nlohmann::json error_body(const std::string& code, const std::string& message);

class ApiServer {
 public:
  ApiServer(service::Service& svc, ApiOptions opts);
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  /// Binds the listening socket and returns the port. Throws BindError.
  int bind();
  /// Serves until stop(); bind() must have succeeded.
  void serve();
  /// bind() and serve() on a background thread.
  int start();
  void stop();
  int port() const noexcept { return port_; }

 private:
  void routes();

  service::Service& svc_;
  ApiOptions opts_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = -1;
  std::atomic<bool> stopping_{false};
};

}  // namespace smokewatch::api
