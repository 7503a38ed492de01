#pragma once

#include <span>
#include <vector>

#include "smokewatch/image.hpp"

namespace smokewatch {

/// Axis-aligned box in pixel corner form. Half-open real rectangle, so the
/// area is (x2 - x1) * (y2 - y1) with no +1 pixel convention.
struct BoxXYXY {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return width() * height(); }
  double center_x() const noexcept { return 0.5 * (x1 + x2); }
  double center_y() const noexcept { return 0.5 * (y1 + y2); }
  bool valid() const noexcept;

  bool operator==(const BoxXYXY&) const = default;
};

/// Normalized center form used by label files: fractions of the image size.
struct YoloBox {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;

  bool operator==(const YoloBox&) const = default;
};

inline constexpr double kYoloEpsilon = 1e-6;

/// True when the box satisfies the normalized-form invariants (edges may
/// overhang by at most kYoloEpsilon).
bool yolo_box_valid(const YoloBox& b) noexcept;

struct Detection {
  BoxXYXY box;
  int class_id = 0;
  double confidence = 0;

  bool operator==(const Detection&) const = default;
};

/// Aspect-preserving resize into a dst_side square with centered padding.
struct LetterboxTransform {
  double scale = 1;
  double pad_x = 0, pad_y = 0;
  int src_w = 0, src_h = 0;
  int dst_side = 0;

  bool operator==(const LetterboxTransform&) const = default;
};

inline constexpr int kDefaultInputSide = 640;
inline constexpr double kDefaultNmsIou = 0.45;
inline constexpr std::uint8_t kLetterboxPadValue = 114;

double iou(const BoxXYXY& a, const BoxXYXY& b) noexcept;

BoxXYXY yolo_to_xyxy(const YoloBox& b, int img_w, int img_h) noexcept;
YoloBox xyxy_to_yolo(const BoxXYXY& b, int class_id, int img_w, int img_h) noexcept;

/// Clamps every coordinate into [0,w] x [0,h].
BoxXYXY clamp_box(const BoxXYXY& b, double w, double h) noexcept;

/// Greedy per-class suppression. Input is ordered by (confidence desc, x1
/// asc, y1 asc); a detection survives iff its IoU with every kept detection
/// of the same class is strictly below iou_thresh.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh);

/// Sorts in place by the NMS order (confidence desc, x1 asc, y1 asc).
void sort_by_confidence(std::vector<Detection>& dets);

LetterboxTransform letterbox_plan(int src_w, int src_h, int dst_side = kDefaultInputSide);

/// Letterbox frame -> source frame, clamped to the source image.
BoxXYXY map_back(const BoxXYXY& box, const LetterboxTransform& t) noexcept;
/// Source frame -> letterbox frame.
BoxXYXY map_forward(const BoxXYXY& box, const LetterboxTransform& t) noexcept;

/// Bilinear resample into the letterbox square; padding uses kLetterboxPadValue.
Image letterbox_image(const Image& src, const LetterboxTransform& t);

}  // namespace smokewatch
