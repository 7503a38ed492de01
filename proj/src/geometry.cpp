#include "smokewatch/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace smokewatch {

bool BoxXYXY::valid() const noexcept {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
         x1 <= x2 && y1 <= y2;
}

bool yolo_box_valid(const YoloBox& b) noexcept {
  if (b.class_id < 0) return false;
  if (!(b.cx >= 0 && b.cx <= 1 && b.cy >= 0 && b.cy <= 1)) return false;
  if (!(b.w > 0 && b.w <= 1 && b.h > 0 && b.h <= 1)) return false;
  return b.cx - b.w / 2 >= -kYoloEpsilon && b.cx + b.w / 2 <= 1 + kYoloEpsilon &&
         b.cy - b.h / 2 >= -kYoloEpsilon && b.cy + b.h / 2 <= 1 + kYoloEpsilon;
}

double iou(const BoxXYXY& a, const BoxXYXY& b) noexcept {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  // Sum the areas in a fixed order so iou(a,b) == iou(b,a) bit for bit.
  const double aa = a.area();
  const double ba = b.area();
  const double uni = std::min(aa, ba) + std::max(aa, ba) - inter;
  if (uni <= 0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

BoxXYXY clamp_box(const BoxXYXY& b, double w, double h) noexcept {
  return {std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w),
          std::clamp(b.y2, 0.0, h)};
}

BoxXYXY yolo_to_xyxy(const YoloBox& b, int img_w, int img_h) noexcept {
  const BoxXYXY raw{(b.cx - b.w / 2) * img_w, (b.cy - b.h / 2) * img_h,
                    (b.cx + b.w / 2) * img_w, (b.cy + b.h / 2) * img_h};
  return clamp_box(raw, img_w, img_h);
}

YoloBox xyxy_to_yolo(const BoxXYXY& b, int class_id, int img_w, int img_h) noexcept {
  const BoxXYXY c = clamp_box(b, img_w, img_h);
  return {class_id, (c.x1 + c.x2) / 2 / img_w, (c.y1 + c.y2) / 2 / img_h, (c.x2 - c.x1) / img_w,
          (c.y2 - c.y1) / img_h};
}

void sort_by_confidence(std::vector<Detection>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    return a.box.y1 < b.box.y1;
  });
}

std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh) {
  if (!(iou_thresh >= 0 && iou_thresh <= 1)) {
    throw std::invalid_argument("nms: iou threshold must lie in [0,1]");
  }
  std::vector<Detection> sorted(dets.begin(), dets.end());
  sort_by_confidence(sorted);

  std::vector<Detection> kept;
  kept.reserve(sorted.size());
  for (const auto& d : sorted) {
    bool keep = true;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) >= iou_thresh) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(d);
  }
  return kept;
}

LetterboxTransform letterbox_plan(int src_w, int src_h, int dst_side) {
  if (src_w <= 0 || src_h <= 0 || dst_side <= 0) {
    throw std::invalid_argument("letterbox_plan: dimensions must be positive");
  }
  LetterboxTransform t;
  t.src_w = src_w;
  t.src_h = src_h;
  t.dst_side = dst_side;
  t.scale = std::min(static_cast<double>(dst_side) / src_w, static_cast<double>(dst_side) / src_h);
  t.pad_x = (dst_side - src_w * t.scale) / 2;
  t.pad_y = (dst_side - src_h * t.scale) / 2;
  return t;
}

BoxXYXY map_back(const BoxXYXY& box, const LetterboxTransform& t) noexcept {
  const BoxXYXY raw{(box.x1 - t.pad_x) / t.scale, (box.y1 - t.pad_y) / t.scale,
                    (box.x2 - t.pad_x) / t.scale, (box.y2 - t.pad_y) / t.scale};
  return clamp_box(raw, t.src_w, t.src_h);
}

BoxXYXY map_forward(const BoxXYXY& box, const LetterboxTransform& t) noexcept {
  return {box.x1 * t.scale + t.pad_x, box.y1 * t.scale + t.pad_y, box.x2 * t.scale + t.pad_x,
          box.y2 * t.scale + t.pad_y};
}

Image letterbox_image(const Image& src, const LetterboxTransform& t) {
  if (!src.valid() || src.width != t.src_w || src.height != t.src_h) {
    throw std::invalid_argument("letterbox_image: transform does not match image");
  }
  Image out(t.dst_side, t.dst_side, kLetterboxPadValue);
  const double x_lo = t.pad_x, x_hi = t.pad_x + t.src_w * t.scale;
  const double y_lo = t.pad_y, y_hi = t.pad_y + t.src_h * t.scale;

  for (int y = 0; y < t.dst_side; ++y) {
    const double cy = y + 0.5;
    if (cy < y_lo || cy >= y_hi) continue;
    const double sy = std::clamp((cy - t.pad_y) / t.scale - 0.5, 0.0, t.src_h - 1.0);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, t.src_h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < t.dst_side; ++x) {
      const double cx = x + 0.5;
      if (cx < x_lo || cx >= x_hi) continue;
      const double sx = std::clamp((cx - t.pad_x) / t.scale - 0.5, 0.0, t.src_w - 1.0);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, t.src_w - 1);
      const double fx = sx - x0;
      const auto* p00 = src.at(x0, y0);
      const auto* p01 = src.at(x1, y0);
      const auto* p10 = src.at(x0, y1);
      const auto* p11 = src.at(x1, y1);
      auto* dst = out.at(x, y);
      for (int c = 0; c < Image::kChannels; ++c) {
        const double top = p00[c] + (p01[c] - p00[c]) * fx;
        const double bottom = p10[c] + (p11[c] - p10[c]) * fx;
        dst[c] = static_cast<std::uint8_t>(std::lround(std::clamp(top + (bottom - top) * fy, 0.0, 255.0)));
      }
    }
  }
  return out;
}

}  // namespace smokewatch
