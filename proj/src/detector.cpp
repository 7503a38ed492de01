#include "smokewatch/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "smokewatch/http.hpp"

namespace smokewatch::detector {

using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

void DetectorConfig::validate() const {
  if (!(conf_floor >= 0 && conf_floor <= 1)) throw std::invalid_argument("detector conf_floor must lie in [0,1]");
  if (!(nms_iou >= 0 && nms_iou <= 1)) throw std::invalid_argument("detector nms_iou must lie in [0,1]");
  if (input_side <= 0) throw std::invalid_argument("detector input_side must be positive");
  if (backend == BackendKind::kExternal && endpoint.empty()) {
    throw std::invalid_argument("external detector requires an endpoint");
  }
}

bool ExclusionMask::valid() const noexcept {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 >= 0 && y1 >= 0 &&
         x2 <= 1 && y2 <= 1 && x1 < x2 && y1 < y2;
}

bool ExclusionMask::contains(double nx, double ny) const noexcept {
  return nx >= x1 && nx <= x2 && ny >= y1 && ny <= y2;
}

// ---------------------------------------------------------------------------
// wire protocol

namespace {

[[noreturn]] void violation(const std::string& field, const std::string& what) {
  throw ProtocolError(field, fmt::format("protocol error: {}: {}", field, what));
}

const json& require(const json& obj, const char* key, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) violation(path + key, "missing");
  return *it;
}

double require_number(const json& obj, const char* key, const std::string& path) {
  const json& v = require(obj, key, path);
  if (!v.is_number()) violation(path + key, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) violation(path + key, "not finite");
  return d;
}

std::int64_t require_integer(const json& obj, const char* key, const std::string& path) {
  const json& v = require(obj, key, path);
  if (!v.is_number_integer()) violation(path + key, "expected an integer");
  return v.get<std::int64_t>();
}

std::string require_string(const json& obj, const char* key, const std::string& path) {
  const json& v = require(obj, key, path);
  if (!v.is_string()) violation(path + key, "expected a string");
  return v.get<std::string>();
}

json parse_object(std::string_view body) {
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::parse_error& e) {
    violation("body", std::string("malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) violation("body", "expected an object");
  return doc;
}

}  // namespace

InferRequest make_request(const Image& img, const std::string& image_id, const DetectorConfig& cfg) {
  const auto t = letterbox_plan(img.width, img.height, cfg.input_side);
  InferRequest req;
  req.image_id = image_id;
  req.width = img.width;
  req.height = img.height;
  req.pixel_encoding = "png";
  req.pixels = encode_png(letterbox_image(img, t));
  req.input_side = cfg.input_side;
  req.conf_floor = cfg.conf_floor;
  return req;
}

std::string encode_request(const InferRequest& req) {
  ojson doc;
  doc["image_id"] = req.image_id;
  doc["width"] = req.width;
  doc["height"] = req.height;
  doc["pixel_encoding"] = req.pixel_encoding;
  doc["pixels"] = http::base64_encode(req.pixels);
  doc["input_side"] = req.input_side;
  doc["conf_floor"] = req.conf_floor;
  return doc.dump();
}

InferRequest decode_request(std::string_view body) {
  const json doc = parse_object(body);
  InferRequest req;
  req.image_id = require_string(doc, "image_id", "");
  req.width = static_cast<int>(require_integer(doc, "width", ""));
  req.height = static_cast<int>(require_integer(doc, "height", ""));
  if (req.width <= 0) violation("width", "must be positive");
  if (req.height <= 0) violation("height", "must be positive");
  req.pixel_encoding = require_string(doc, "pixel_encoding", "");
  if (req.pixel_encoding != "png" && req.pixel_encoding != "jpeg") violation("pixel_encoding", "expected png or jpeg");
  try {
    req.pixels = http::base64_decode(require_string(doc, "pixels", ""));
  } catch (const std::invalid_argument&) {
    violation("pixels", "malformed base64");
  }
  req.input_side = static_cast<int>(require_integer(doc, "input_side", ""));
  if (req.input_side <= 0) violation("input_side", "must be positive");
  req.conf_floor = require_number(doc, "conf_floor", "");
  if (!(req.conf_floor >= 0 && req.conf_floor <= 1)) violation("conf_floor", "out of range");
  return req;
}

std::string encode_response(const RawInference& inf) {
  ojson dets = ojson::array();
  for (std::size_t i = 0; i < inf.detections.size(); ++i) {
    const auto& d = inf.detections[i];
    ojson rec;
    rec["x1"] = d.box.x1;
    rec["y1"] = d.box.y1;
    rec["x2"] = d.box.x2;
    rec["y2"] = d.box.y2;
    rec["class_id"] = d.class_id;
    rec["class_name"] = i < inf.class_names.size() ? inf.class_names[i] : std::string{};
    rec["confidence"] = d.confidence;
    dets.push_back(std::move(rec));
  }
  ojson doc;
  doc["model_id"] = inf.model_id;
  doc["detections"] = std::move(dets);
  doc["latency_ms"] = inf.latency_ms;
  return doc.dump();
}

RawInference decode_response(std::string_view body) {
  const json doc = parse_object(body);
  RawInference inf;
  inf.model_id = require_string(doc, "model_id", "");
  inf.latency_ms = require_number(doc, "latency_ms", "");
  if (inf.latency_ms < 0) violation("latency_ms", "negative");
  const json& dets = require(doc, "detections", "");
  if (!dets.is_array()) violation("detections", "expected an array");
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const std::string path = fmt::format("detections[{}].", i);
    const json& rec = dets[i];
    if (!rec.is_object()) violation(path.substr(0, path.size() - 1), "expected an object");
    Detection d;
    d.box = {require_number(rec, "x1", path), require_number(rec, "y1", path), require_number(rec, "x2", path),
             require_number(rec, "y2", path)};
    if (d.box.x2 < d.box.x1 || d.box.y2 < d.box.y1) violation(path + "x2", "box corners out of order");
    const auto cls = require_integer(rec, "class_id", path);
    if (cls < 0) violation(path + "class_id", "negative");
    d.class_id = static_cast<int>(cls);
    d.confidence = require_number(rec, "confidence", path);
    if (!(d.confidence >= 0 && d.confidence <= 1)) violation(path + "confidence", "confidence out of range");
    inf.class_names.push_back(require_string(rec, "class_name", path));
    inf.detections.push_back(d);
  }
  return inf;
}

// ---------------------------------------------------------------------------
// backends

MockDetector::MockDetector(std::string model_id, std::map<std::string, MockRecord> records, int input_side)
    : model_id_(std::move(model_id)), records_(std::move(records)), input_side_(input_side) {}

std::unique_ptr<MockDetector> MockDetector::from_file(const std::string& path, int input_side) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open mock fixture: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw std::runtime_error(fmt::format("mock fixture {}: {}", path, e.what()));
  }
  std::map<std::string, MockRecord> records;
  try {
    for (const auto& rec : doc.at("records")) {
      MockRecord r;
      const std::string frame = rec.value("frame", "source");
      if (frame != "source" && frame != "letterbox") {
        throw std::runtime_error("mock fixture: frame must be 'source' or 'letterbox'");
      }
      r.letterbox_frame = frame == "letterbox";
      for (const auto& d : rec.at("detections")) {
        Detection det;
        det.box = {d.at("x1").get<double>(), d.at("y1").get<double>(), d.at("x2").get<double>(),
                   d.at("y2").get<double>()};
        det.class_id = d.value("class_id", 0);
        det.confidence = d.at("confidence").get<double>();
        if (!(det.confidence >= 0 && det.confidence <= 1) || !det.box.valid()) {
          throw std::runtime_error("mock fixture: invalid detection for " + rec.at("image_id").get<std::string>());
        }
        r.detections.push_back(det);
        r.class_names.push_back(d.value("class_name", std::string("smoke")));
      }
      records[rec.at("image_id").get<std::string>()] = std::move(r);
    }
  } catch (const json::exception& e) {
    throw std::runtime_error(fmt::format("mock fixture {}: {}", path, e.what()));
  }
  return std::make_unique<MockDetector>(doc.value("model_id", std::string("mock")), std::move(records), input_side);
}

RawInference MockDetector::detect(const Image& img, const std::string& image_id) {
  if (!img.valid()) throw BackendError(BackendErrorKind::kProtocol, "mock: invalid image");
  RawInference out;
  out.model_id = model_id_;
  auto it = records_.find(image_id);
  if (it == records_.end()) return out;
  const auto t = letterbox_plan(img.width, img.height, input_side_);
  for (const auto& d : it->second.detections) {
    Detection mapped = d;
    if (!it->second.letterbox_frame) mapped.box = map_forward(d.box, t);
    out.detections.push_back(mapped);
  }
  out.class_names = it->second.class_names;
  return out;
}

ExternalDetector::ExternalDetector(DetectorConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

RawInference ExternalDetector::detect(const Image& img, const std::string& image_id) {
  const std::string body = encode_request(make_request(img, image_id, cfg_));
  std::string url = cfg_.endpoint;
  while (!url.empty() && url.back() == '/') url.pop_back();
  url += "/infer";
  http::Options opts;
  opts.timeout = cfg_.timeout;
  opts.follow_redirects = false;
  http::Response resp;
  try {
    resp = http::post(url, body, "application/json", opts);
  } catch (const http::Error& e) {
    throw BackendError(e.kind() == http::ErrorKind::kTimeout ? BackendErrorKind::kTimeout
                                                             : BackendErrorKind::kUnreachable,
                       std::string("detector backend: ") + e.what());
  }
  if (resp.status != 200) {
    throw BackendError(BackendErrorKind::kStatus, fmt::format("detector backend returned HTTP {}", resp.status));
  }
  return decode_response(resp.body);
}

std::unique_ptr<Detector> make_detector(const DetectorConfig& cfg) {
  cfg.validate();
  if (cfg.backend == BackendKind::kMock) {
    if (cfg.fixture_path.empty()) {
      return std::make_unique<MockDetector>("mock", std::map<std::string, MockRecord>{}, cfg.input_side);
    }
    return MockDetector::from_file(cfg.fixture_path, cfg.input_side);
  }
  return std::make_unique<ExternalDetector>(cfg);
}

// ---------------------------------------------------------------------------
// post-processing

std::vector<Detection> postprocess(const RawInference& raw, const LetterboxTransform& t, const DetectorConfig& cfg,
                                   std::span<const ExclusionMask> masks) {
  std::vector<Detection> kept;
  kept.reserve(raw.detections.size());
  for (const auto& d : raw.detections) {
    if (d.confidence < cfg.conf_floor) continue;
    Detection m = d;
    m.box = map_back(d.box, t);
    const double nx = m.box.center_x() / t.src_w;
    const double ny = m.box.center_y() / t.src_h;
    const bool masked =
        std::any_of(masks.begin(), masks.end(), [&](const ExclusionMask& mask) { return mask.contains(nx, ny); });
    if (!masked) kept.push_back(m);
  }
  return nms(kept, cfg.nms_iou);
}

}  // namespace smokewatch::detector
