#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "smokewatch/dataset.hpp"
#include "smokewatch/geometry.hpp"

namespace smokewatch::eval {

struct TruthBox {
  BoxXYXY box;
  int class_id = 0;
};

using GroundTruthSet = std::map<std::string, std::vector<TruthBox>>;
using PredictionSet = std::map<std::string, std::vector<Detection>>;

inline constexpr double kDefaultIouThreshold = 0.5;

struct MatchOutcome {
  std::string image_id;
  std::size_t detection_index = 0;  // index into preds[image_id]
  int class_id = 0;
  double confidence = 0;
  bool is_tp = false;
  std::optional<std::size_t> matched_truth;  // index into truths[image_id]
};

struct PRPoint {
  double recall = 0;
  double precision = 0;
  double threshold = 0;
};

struct PRCurve {
  std::vector<PRPoint> points;  // sweep order: descending confidence
  std::size_t total_gt = 0;
};

struct F1Point {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

struct F1Curve {
  std::vector<F1Point> points;  // ascending threshold
  double best_threshold = 0;
  double best_f1 = 0;
};

struct ClassResult {
  int class_id = 0;
  double ap = 0;
  std::size_t gts = 0;
  std::size_t tps = 0;
  std::size_t fps = 0;
  PRCurve curve;
};

struct EvalCounts {
  std::size_t images = 0;
  std::size_t gts = 0;
  std::size_t preds = 0;
  std::size_t tps = 0;
  std::size_t fps = 0;
};

struct EvalReport {
  double iou_threshold = kDefaultIouThreshold;
  std::map<int, ClassResult> per_class;
  double map = 0;
  F1Curve f1_curve;
  EvalCounts counts;
};

/// Greedy matching per image and class. Predictions are visited by
/// (confidence desc, x1 asc); each takes the unmatched truth with the
/// highest IoU, counting as TP when that IoU reaches iou_thresh. The result
/// is ordered by (confidence desc, image_id asc, detection_index asc).
std::vector<MatchOutcome> match_detections(const PredictionSet& preds, const GroundTruthSet& truths,
                                           double iou_thresh);

/// One point per prefix of the confidence-descending sweep. Ties in
/// confidence keep the input order.
PRCurve pr_curve(const std::vector<MatchOutcome>& outcomes, std::size_t total_gt);

/// All-point interpolated AP over the monotone precision envelope.
double average_precision(const PRCurve& curve);

/// Harmonic mean, 0 when both inputs are 0.
double f1(double precision, double recall) noexcept;

/// Micro-averaged sweep over {0} and every distinct confidence.
F1Curve f1_curve(const PredictionSet& preds, const GroundTruthSet& truths, double iou_thresh);

EvalReport evaluate(const PredictionSet& preds, const GroundTruthSet& truths,
                    double iou_thresh = kDefaultIouThreshold);

std::size_t count_truths(const GroundTruthSet& truths);
std::size_t count_predictions(const PredictionSet& preds);

// ---------------------------------------------------------------------------
// files and reports

/// Pixel-frame ground truth from a labeled manifest, optionally restricted to
/// one split.
GroundTruthSet truths_from_manifest(const dataset::DatasetManifest& manifest,
                                    std::optional<dataset::Split> only = std::nullopt);

/// CSV with header "image_id,class_id,confidence,x1,y1,x2,y2".
PredictionSet load_predictions(const std::string& path);
void save_predictions(const std::string& path, const PredictionSet& preds);

/// Human-readable summary block (mAP@.5, best F1 and its confidence).
std::string format_summary(const EvalReport& report, const std::vector<std::string>& class_names = {});
std::string summary_json(const EvalReport& report, const std::vector<std::string>& class_names = {});
std::string pr_csv(const EvalReport& report);
std::string f1_csv(const EvalReport& report);
std::string pr_svg(const EvalReport& report, const std::vector<std::string>& class_names = {});
std::string f1_svg(const EvalReport& report);

/// Writes summary.json, summary.txt, pr_curve.csv, f1_curve.csv,
/// pr_curve.svg and f1_curve.svg into dir.
void write_report(const std::string& dir, const EvalReport& report,
                  const std::vector<std::string>& class_names = {});

}  // namespace smokewatch::eval
