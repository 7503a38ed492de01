#include "smokewatch/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace smokewatch::dataset {
namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(Split s) noexcept {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

std::optional<Split> split_from_string(std::string_view s) noexcept {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  return std::nullopt;
}

const SampleLabel* DatasetManifest::find(std::string_view image_id) const {
  for (const auto& s : samples) {
    if (s.image_id == image_id) return &s;
  }
  return nullptr;
}

std::array<std::size_t, 3> DatasetManifest::split_counts() const {
  std::array<std::size_t, 3> counts{};
  for (const auto& [id, split] : split_of) ++counts[static_cast<std::size_t>(split)];
  return counts;
}

// ---------------------------------------------------------------------------
// label files

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

double snap_unit(double v) {
  if (v < 0 && v >= -kYoloEpsilon) return 0;
  if (v > 1 && v <= 1 + kYoloEpsilon) return 1;
  return v;
}

}  // namespace

std::vector<YoloBox> parse_label_file(std::string_view text) {
  std::vector<YoloBox> boxes;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string_view line =
        text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    ++line_no;
    pos = (nl == std::string_view::npos) ? text.size() + 1 : nl + 1;

    const auto fields = split_ws(line);
    if (fields.empty()) continue;
    if (fields.size() != 5) {
      throw ParseError(line_no, fmt::format("expected 5 fields, found {}", fields.size()));
    }
    YoloBox b;
    if (!parse_number(fields[0], b.class_id) || b.class_id < 0) {
      throw ParseError(line_no, fmt::format("invalid class id '{}'", fields[0]));
    }
    double* coords[] = {&b.cx, &b.cy, &b.w, &b.h};
    for (int i = 0; i < 4; ++i) {
      if (!parse_number(fields[i + 1], *coords[i]) || !std::isfinite(*coords[i])) {
        throw ParseError(line_no, fmt::format("non-numeric coordinate '{}'", fields[i + 1]));
      }
      *coords[i] = snap_unit(*coords[i]);
    }
    if (!yolo_box_valid(b)) throw ParseError(line_no, "box out of range");
    boxes.push_back(b);
  }
  return boxes;
}

std::string format_label_file(const std::vector<YoloBox>& boxes) {
  std::string out;
  for (const auto& b : boxes) {
    out += fmt::format("{} {} {} {} {}\n", b.class_id, b.cx, b.cy, b.w, b.h);
  }
  return out;
}

// ---------------------------------------------------------------------------
// augmentation

Image mirror_image(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const auto* src = img.at(img.width - 1 - x, y);
      std::copy(src, src + Image::kChannels, out.at(x, y));
    }
  }
  return out;
}

SampleLabel mirror_label(const SampleLabel& label) {
  SampleLabel out = label;
  for (auto& b : out.boxes) b.cx = 1.0 - b.cx;
  return out;
}

std::pair<Image, SampleLabel> mirror_sample(const Image& img, const SampleLabel& label) {
  return {mirror_image(img), mirror_label(label)};
}

void validate_gains(const std::vector<double>& gains) {
  for (double g : gains) {
    if (!(g >= -kMaxExposureGain && g <= kMaxExposureGain)) {
      throw ValidationError(fmt::format("exposure gain {} outside [-0.15, +0.15]", g));
    }
  }
}

Image adjust_exposure(const Image& img, double gain) {
  validate_gains({gain});
  Image out = img;
  const double factor = 1.0 + gain;
  std::array<std::uint8_t, 256> lut{};
  for (int v = 0; v < 256; ++v) {
    // The 1e-9 nudge keeps exact halves (e.g. 10 * 1.15) rounding up despite
    // the binary representation of the factor.
    const double scaled = std::floor(v * factor + 0.5 + 1e-9);
    lut[v] = static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
  }
  for (auto& p : out.pixels) p = lut[p];
  return out;
}

std::string mirror_id(std::string_view source_id) { return fmt::format("{}#mirror", source_id); }

std::string exposure_id(std::string_view source_id, double gain) {
  return fmt::format("{}#exp{:+}", source_id, gain);
}

std::string_view source_id_of(std::string_view image_id) noexcept {
  return image_id.substr(0, image_id.find('#'));
}

namespace {

std::string derived_path(const std::string& source_path, std::string_view suffix) {
  fs::path p(source_path);
  std::string stem = p.stem().string();
  stem += "__";
  stem += suffix;
  p.replace_filename(stem + ".png");
  return p.generic_string();
}

}  // namespace

DatasetManifest augment_dataset(const DatasetManifest& manifest, const AugmentOptions& opts) {
  validate_gains(opts.exposure_gains);
  DatasetManifest out;
  out.class_names = manifest.class_names;
  out.samples.reserve(manifest.samples.size() * (1 + (opts.mirror ? 1 : 0) + opts.exposure_gains.size()));

  std::set<std::string> seen;
  auto emit = [&](SampleLabel s, std::optional<Split> split) {
    if (!seen.insert(s.image_id).second) {
      throw ValidationError("image id collision: " + s.image_id);
    }
    if (split) out.split_of[s.image_id] = *split;
    out.samples.push_back(std::move(s));
  };

  for (const auto& src : manifest.samples) {
    std::optional<Split> split;
    if (auto it = manifest.split_of.find(src.image_id); it != manifest.split_of.end()) split = it->second;
    emit(src, split);
    if (opts.mirror) {
      SampleLabel m = mirror_label(src);
      m.image_id = mirror_id(src.image_id);
      m.image_path = derived_path(src.image_path, "mirror");
      emit(std::move(m), split);
    }
    for (double g : opts.exposure_gains) {
      SampleLabel e = src;
      e.image_id = exposure_id(src.image_id, g);
      e.image_path = derived_path(src.image_path, fmt::format("exp{:+}", g));
      emit(std::move(e), split);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// splitting

namespace {

// Rejection sampling keeps the permutation identical across standard
// libraries, which std::uniform_int_distribution does not guarantee.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = rng();
    if (r >= threshold) return r % n;
  }
}

}  // namespace

DatasetManifest split_dataset(const DatasetManifest& manifest, SplitCounts counts, std::uint64_t seed) {
  if (counts.total() != manifest.samples.size()) {
    throw ValidationError(fmt::format("split counts sum to {} but manifest has {} samples",
                                      counts.total(), manifest.samples.size()));
  }
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& s : manifest.samples) {
    groups[std::string(source_id_of(s.image_id))].push_back(s.image_id);
  }
  std::vector<const std::vector<std::string>*> order;
  order.reserve(groups.size());
  for (const auto& [key, members] : groups) order.push_back(&members);

  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[bounded(rng, i)]);
  }

  std::array<std::size_t, 3> remaining{counts.train, counts.val, counts.test};
  DatasetManifest out = manifest;
  out.split_of.clear();
  for (const auto* members : order) {
    std::size_t target = 3;
    for (std::size_t k = 0; k < 3; ++k) {
      if (remaining[k] >= members->size()) {
        target = k;
        break;
      }
    }
    if (target == 3) {
      throw ValidationError(fmt::format(
          "cannot place a group of {} samples sharing source '{}' into the remaining capacity",
          members->size(), source_id_of(members->front())));
    }
    remaining[target] -= members->size();
    for (const auto& id : *members) out.split_of[id] = static_cast<Split>(target);
  }
  return out;
}

std::size_t iterations_per_epoch(std::size_t n_samples, std::size_t batch_size) {
  if (batch_size == 0) throw ValidationError("batch size must be positive");
  if (n_samples == 0) throw ValidationError("sample count must be positive");
  return (n_samples + batch_size - 1) / batch_size;
}

// ---------------------------------------------------------------------------
// manifest I/O

std::string label_path_for(const std::string& image_path) {
  fs::path p(image_path);
  p.replace_extension(".txt");
  return p.generic_string();
}

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("short write: " + p.string());
}

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
  const fs::path base = fs::path(path).parent_path();
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(fmt::format("{}: {}", path, e.what()));
  }
  DatasetManifest m;
  try {
    m.class_names = doc.value("class_names", std::vector<std::string>{});
    std::set<std::string> ids;
    for (const auto& rec : doc.at("samples")) {
      SampleLabel s;
      s.image_id = rec.at("id").get<std::string>();
      s.image_path = rec.at("path").get<std::string>();
      s.image_w = rec.at("width").get<int>();
      s.image_h = rec.at("height").get<int>();
      if (s.image_w <= 0 || s.image_h <= 0) {
        throw ValidationError("sample " + s.image_id + ": dimensions must be positive");
      }
      if (!ids.insert(s.image_id).second) throw ValidationError("duplicate sample id " + s.image_id);
      if (rec.contains("split") && !rec["split"].is_null()) {
        const auto split = split_from_string(rec["split"].get<std::string>());
        if (!split) throw ValidationError("sample " + s.image_id + ": unknown split");
        m.split_of[s.image_id] = *split;
      }
      const fs::path label = base / label_path_for(s.image_path);
      if (fs::exists(label)) {
        try {
          s.boxes = parse_label_file(read_text(label));
        } catch (const ParseError& e) {
          throw ParseError(e.line(), label.string() + ": " + e.what());
        }
      }
      m.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("{}: malformed manifest: {}", path, e.what()));
  }
  return m;
}

void save_manifest(const std::string& path, const DatasetManifest& manifest) {
  const fs::path base = fs::path(path).parent_path();
  json samples = json::array();
  for (const auto& s : manifest.samples) {
    json rec = {{"id", s.image_id}, {"path", s.image_path}, {"width", s.image_w}, {"height", s.image_h}};
    if (auto it = manifest.split_of.find(s.image_id); it != manifest.split_of.end()) {
      rec["split"] = std::string(to_string(it->second));
    }
    samples.push_back(std::move(rec));
    write_text(base / label_path_for(s.image_path), format_label_file(s.boxes));
  }
  json doc = {{"class_names", manifest.class_names}, {"samples", std::move(samples)}};
  write_text(path, doc.dump(2) + "\n");
}

}  // namespace smokewatch::dataset
