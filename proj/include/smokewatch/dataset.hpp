#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smokewatch/geometry.hpp"
#include "smokewatch/image.hpp"

namespace smokewatch::dataset {

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Split { kTrain, kVal, kTest };

std::string_view to_string(Split s) noexcept;
std::optional<Split> split_from_string(std::string_view s) noexcept;

struct SampleLabel {
  std::string image_id;
  std::string image_path;  // relative to the manifest directory
  int image_w = 0;
  int image_h = 0;
  std::vector<YoloBox> boxes;

  bool operator==(const SampleLabel&) const = default;
};

struct DatasetManifest {
  std::vector<SampleLabel> samples;
  std::map<std::string, Split> split_of;
  std::vector<std::string> class_names;

  const SampleLabel* find(std::string_view image_id) const;
  std::array<std::size_t, 3> split_counts() const;
  bool operator==(const DatasetManifest&) const = default;
};

inline constexpr double kMaxExposureGain = 0.15;

struct AugmentOptions {
  bool mirror = false;
  std::vector<double> exposure_gains;
};

/// "class cx cy w h" per line, normalized. Blank lines are skipped.
std::vector<YoloBox> parse_label_file(std::string_view text);
std::string format_label_file(const std::vector<YoloBox>& boxes);

/// Horizontal mirror: columns reversed, cx' = 1 - cx.
std::pair<Image, SampleLabel> mirror_sample(const Image& img, const SampleLabel& label);
Image mirror_image(const Image& img);
SampleLabel mirror_label(const SampleLabel& label);

/// v -> clamp(round_half_up(v * (1 + gain)), 0, 255). Gain outside
/// [-0.15, +0.15] is a ValidationError.
Image adjust_exposure(const Image& img, double gain);

void validate_gains(const std::vector<double>& gains);

/// Id suffixes for derived samples: "#mirror" and "#exp+0.15".
std::string mirror_id(std::string_view source_id);
std::string exposure_id(std::string_view source_id, double gain);
/// The id of the sample a derived id was produced from ("a#mirror" -> "a").
std::string_view source_id_of(std::string_view image_id) noexcept;

/// Label-level augmentation. Emits, per source, the original, an optional
/// mirrored copy and one copy per exposure gain. Derived samples inherit the
/// source's split and get an image_path of "<id-with-# replaced>.png".
DatasetManifest augment_dataset(const DatasetManifest& manifest, const AugmentOptions& opts);

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
  std::size_t total() const noexcept { return train + val + test; }
};

/// Deterministic grouped split: samples sharing a source id always land in
/// the same split.
DatasetManifest split_dataset(const DatasetManifest& manifest, SplitCounts counts, std::uint64_t seed);

/// ceil(n_samples / batch_size)
std::size_t iterations_per_epoch(std::size_t n_samples, std::size_t batch_size);

/// Manifest file: a JSON document {"class_names": [...], "samples": [{id,
/// path, width, height, split?}, ...]}. Boxes live in "<stem>.txt" next to
/// each image.
DatasetManifest load_manifest(const std::string& path);
/// Writes the manifest document and one label file per sample, resolving
/// paths against the manifest's directory.
void save_manifest(const std::string& path, const DatasetManifest& manifest);

std::string label_path_for(const std::string& image_path);

}  // namespace smokewatch::dataset
