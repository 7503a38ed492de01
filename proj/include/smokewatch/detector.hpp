#pragma once

#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "smokewatch/clock.hpp"
#include "smokewatch/geometry.hpp"
#include "smokewatch/image.hpp"

namespace smokewatch::detector {

enum class BackendKind { kMock, kExternal };

/// Confidence of the best-F1 operating point reported for the reference
/// smoke model; a starting value, configurable per deployment and camera.
inline constexpr double kDefaultConfFloor = 0.298;

struct DetectorConfig {
  BackendKind backend = BackendKind::kMock;
  std::string endpoint;      // external: base URL, POST <endpoint>/infer
  std::string fixture_path;  // mock
  int input_side = kDefaultInputSide;
  double conf_floor = kDefaultConfFloor;
  double nms_iou = kDefaultNmsIou;
  Millis timeout{10'000};

  void validate() const;
};

/// Operator-drawn suppression zone in normalized image coordinates.
struct ExclusionMask {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool valid() const noexcept;
  bool contains(double nx, double ny) const noexcept;
  bool operator==(const ExclusionMask&) const = default;
};

/// Decoded detector output, boxes in the letterbox frame.
struct RawInference {
  std::vector<Detection> detections;
  std::vector<std::string> class_names;  // parallel to detections
  std::string model_id;
  double latency_ms = 0;

  bool operator==(const RawInference&) const = default;
};

enum class BackendErrorKind { kUnreachable, kTimeout, kStatus, kProtocol };

class BackendError : public std::runtime_error {
 public:
  BackendError(BackendErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  BackendErrorKind kind() const noexcept { return kind_; }

 private:
  BackendErrorKind kind_;
};

class ProtocolError : public BackendError {
 public:
  ProtocolError(std::string field, const std::string& what)
      : BackendError(BackendErrorKind::kProtocol, what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// A backend either tolerates concurrent detect() calls or reports the limit
/// the pipeline must respect. kUnlimited means fully concurrent.
class Detector {
 public:
  static constexpr int kUnlimited = 0;

  virtual ~Detector() = default;
  virtual RawInference detect(const Image& img, const std::string& image_id) = 0;
  virtual int max_concurrency() const = 0;
  virtual int input_side() const = 0;
};

struct MockRecord {
  bool letterbox_frame = false;
  std::vector<Detection> detections;
  std::vector<std::string> class_names;
};

/// Scripted backend keyed by image id. Source-frame records are mapped into
/// the letterbox frame of the incoming image, so output always matches the
/// external backend's coordinate contract.
class MockDetector final : public Detector {
 public:
  MockDetector(std::string model_id, std::map<std::string, MockRecord> records, int input_side = kDefaultInputSide);
  static std::unique_ptr<MockDetector> from_file(const std::string& path, int input_side = kDefaultInputSide);

  RawInference detect(const Image& img, const std::string& image_id) override;
  int max_concurrency() const override { return kUnlimited; }
  int input_side() const override { return input_side_; }

 private:
  std::string model_id_;
  std::map<std::string, MockRecord> records_;
  int input_side_;
};

class ExternalDetector final : public Detector {
 public:
  explicit ExternalDetector(DetectorConfig cfg);

  RawInference detect(const Image& img, const std::string& image_id) override;
  int max_concurrency() const override { return 1; }
  int input_side() const override { return cfg_.input_side; }

 private:
  DetectorConfig cfg_;
};

std::unique_ptr<Detector> make_detector(const DetectorConfig& cfg);

// ---------------------------------------------------------------------------
// wire protocol

struct InferRequest {
  std::string image_id;
  int width = 0;   // source image
  int height = 0;
  std::string pixel_encoding = "png";  // "png" | "jpeg"
  std::string pixels;                  // encoded letterboxed image bytes
  int input_side = kDefaultInputSide;
  double conf_floor = kDefaultConfFloor;

  bool operator==(const InferRequest&) const = default;
};

/// Letterboxes `img` to input_side and PNG-encodes it.
InferRequest make_request(const Image& img, const std::string& image_id, const DetectorConfig& cfg);

std::string encode_request(const InferRequest& req);
InferRequest decode_request(std::string_view body);
std::string encode_response(const RawInference& inf);
/// Validates every field; violations throw ProtocolError naming the field.
RawInference decode_response(std::string_view body);

// ---------------------------------------------------------------------------
// post-processing

/// Confidence floor, map back to the source frame, drop detections centered
/// in a mask, per-class NMS. Output is sorted by confidence, descending.
std::vector<Detection> postprocess(const RawInference& raw, const LetterboxTransform& t, const DetectorConfig& cfg,
                                   std::span<const ExclusionMask> masks);

}  // namespace smokewatch::detector
