#pragma once

#include <functional>
#include <stdexcept>
#include <string>

#include "smokewatch/clock.hpp"

namespace smokewatch::http {

inline constexpr const char* kUserAgent = "smokewatch-camera-poller/0.1 (+wildfire smoke early warning)";
inline constexpr int kMaxRedirects = 3;

struct Response {
  int status = 0;
  std::string body;
  std::string content_type;
};

enum class ErrorKind { kConnection, kTimeout, kOther };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct Options {
  Millis timeout{10'000};
  bool follow_redirects = true;
  std::string user_agent = kUserAgent;
};

/// Blocking GET/POST over plain HTTP or HTTPS. Transport failures throw
/// http::Error; any status code is returned as a Response.
Response get(const std::string& url, const Options& opts = {});
Response post(const std::string& url, const std::string& body, const std::string& content_type,
              const Options& opts = {});

using GetFn = std::function<Response(const std::string& url)>;

/// Standard base64 (RFC 4648 alphabet with padding).
std::string base64_encode(std::string_view bytes);
/// Throws std::invalid_argument on malformed input.
std::string base64_decode(std::string_view text);

}  // namespace smokewatch::http
