#include "smokewatch/http.hpp"

#include <httplib.h>
#include <sodium.h>

namespace smokewatch::http {
namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;    // /path?query
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error(ErrorKind::kOther, "invalid URL: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

httplib::Client make_client(const SplitUrl& u, const Options& opts) {
  httplib::Client cli(u.origin);
  if (!cli.is_valid()) throw Error(ErrorKind::kOther, "unsupported URL origin: " + u.origin);
  const auto secs = std::chrono::duration_cast<Seconds>(opts.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(opts.timeout - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  cli.set_write_timeout(secs.count(), usecs.count());
  cli.set_follow_location(opts.follow_redirects);
  return cli;
}

Response convert(httplib::Result res, const std::string& url) {
  if (!res) {
    const auto err = res.error();
    const ErrorKind kind = err == httplib::Error::Connection       ? ErrorKind::kConnection
                           : err == httplib::Error::ConnectionTimeout ? ErrorKind::kTimeout
                           : err == httplib::Error::Read             ? ErrorKind::kTimeout
                                                                      : ErrorKind::kOther;
    throw Error(kind, url + ": " + httplib::to_string(err));
  }
  Response r;
  r.status = res->status;
  r.body = std::move(res->body);
  r.content_type = res->get_header_value("Content-Type");
  return r;
}

}  // namespace

Response get(const std::string& url, const Options& opts) {
  const auto u = split_url(url);
  auto cli = make_client(u, opts);
  const httplib::Headers headers{{"User-Agent", opts.user_agent}};
  return convert(cli.Get(u.path, headers), url);
}

Response post(const std::string& url, const std::string& body, const std::string& content_type,
              const Options& opts) {
  const auto u = split_url(url);
  auto cli = make_client(u, opts);
  const httplib::Headers headers{{"User-Agent", opts.user_agent}};
  return convert(cli.Post(u.path, headers, body, content_type), url);
}

std::string base64_encode(std::string_view bytes) {
  constexpr int kVariant = sodium_base64_VARIANT_ORIGINAL;
  std::string out(sodium_base64_ENCODED_LEN(bytes.size(), kVariant), '\0');
  sodium_bin2base64(out.data(), out.size(), reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(),
                    kVariant);
  out.resize(out.size() - 1);  // trailing NUL
  return out;
}

std::string base64_decode(std::string_view text) {
  std::string out(text.size() / 4 * 3 + 3, '\0');
  std::size_t len = 0;
  const char* end = nullptr;
  if (sodium_base642bin(reinterpret_cast<unsigned char*>(out.data()), out.size(), text.data(), text.size(), nullptr,
                        &len, &end, sodium_base64_VARIANT_ORIGINAL) != 0 ||
      end != text.data() + text.size()) {
    throw std::invalid_argument("malformed base64");
  }
  out.resize(len);
  return out;
}

}  // namespace smokewatch::http
