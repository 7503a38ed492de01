#include "smokewatch/eval.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace smokewatch::eval {
namespace fs = std::filesystem;

namespace {

bool outcome_before(const MatchOutcome& a, const MatchOutcome& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  return a.detection_index < b.detection_index;
}

void match_image(const std::string& image_id, const std::vector<Detection>& dets,
                 const std::vector<TruthBox>& gts, double iou_thresh, std::vector<MatchOutcome>& out) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].confidence != dets[b].confidence) return dets[a].confidence > dets[b].confidence;
    return dets[a].box.x1 < dets[b].box.x1;
  });

  std::vector<bool> taken(gts.size(), false);
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    double best = -1;
    std::optional<std::size_t> best_gt;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != d.class_id) continue;
      const double v = iou(d.box, gts[g].box);
      if (v > best) {
        best = v;
        best_gt = g;
      }
    }
    MatchOutcome m{image_id, idx, d.class_id, d.confidence, false, std::nullopt};
    if (best_gt && best >= iou_thresh) {
      taken[*best_gt] = true;
      m.is_tp = true;
      m.matched_truth = best_gt;
    }
    out.push_back(std::move(m));
  }
}

const std::vector<TruthBox>& truths_for(const GroundTruthSet& truths, const std::string& id) {
  static const std::vector<TruthBox> kEmpty;
  auto it = truths.find(id);
  return it == truths.end() ? kEmpty : it->second;
}

}  // namespace

std::size_t count_truths(const GroundTruthSet& truths) {
  std::size_t n = 0;
  for (const auto& [id, v] : truths) n += v.size();
  return n;
}

std::size_t count_predictions(const PredictionSet& preds) {
  std::size_t n = 0;
  for (const auto& [id, v] : preds) n += v.size();
  return n;
}

std::vector<MatchOutcome> match_detections(const PredictionSet& preds, const GroundTruthSet& truths,
                                           double iou_thresh) {
  if (!(iou_thresh > 0 && iou_thresh <= 1)) {
    throw std::invalid_argument("match_detections: iou threshold must lie in (0,1]");
  }
  std::vector<MatchOutcome> out;
  out.reserve(count_predictions(preds));
  for (const auto& [image_id, dets] : preds) {
    match_image(image_id, dets, truths_for(truths, image_id), iou_thresh, out);
  }
  std::sort(out.begin(), out.end(), outcome_before);
  return out;
}

PRCurve pr_curve(const std::vector<MatchOutcome>& outcomes, std::size_t total_gt) {
  std::vector<const MatchOutcome*> sweep;
  sweep.reserve(outcomes.size());
  for (const auto& o : outcomes) sweep.push_back(&o);
  std::stable_sort(sweep.begin(), sweep.end(),
                   [](const MatchOutcome* a, const MatchOutcome* b) { return a->confidence > b->confidence; });

  PRCurve curve;
  curve.total_gt = total_gt;
  curve.points.reserve(sweep.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < sweep.size(); ++k) {
    if (sweep[k]->is_tp) ++tp;
    const double precision = static_cast<double>(tp) / static_cast<double>(k + 1);
    const double recall = total_gt == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(total_gt);
    curve.points.push_back({recall, precision, sweep[k]->confidence});
  }
  return curve;
}

double average_precision(const PRCurve& curve) {
  const auto& pts = curve.points;
  if (pts.empty()) return 0.0;
  std::vector<double> envelope(pts.size());
  double running = 0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    running = std::max(running, pts[i].precision);
    envelope[i] = running;
  }
  double ap = 0;
  double prev_recall = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ap += (pts[i].recall - prev_recall) * envelope[i];
    prev_recall = pts[i].recall;
  }
  return std::clamp(ap, 0.0, 1.0);
}

double f1(double precision, double recall) noexcept {
  const double denom = precision + recall;
  if (denom <= 0) return 0.0;
  return 2 * (precision * recall) / denom;
}

namespace {

// Greedy matching visits predictions in descending confidence, so filtering
// at threshold t keeps exactly a confidence-closed prefix of the full match
// and the per-threshold TP count can be read off one matching pass.
F1Curve f1_curve_from_outcomes(const std::vector<MatchOutcome>& outcomes, std::size_t total_gt) {
  std::vector<double> confs;
  confs.reserve(outcomes.size() + 1);
  for (const auto& o : outcomes) confs.push_back(o.confidence);
  confs.push_back(0.0);
  std::sort(confs.begin(), confs.end());
  confs.erase(std::unique(confs.begin(), confs.end()), confs.end());

  // outcomes are in descending confidence order; walk thresholds from the top.
  F1Curve curve;
  curve.points.resize(confs.size());
  std::size_t kept = 0, tp = 0, cursor = 0;
  for (std::size_t i = confs.size(); i-- > 0;) {
    const double t = confs[i];
    while (cursor < outcomes.size() && outcomes[cursor].confidence >= t) {
      if (outcomes[cursor].is_tp) ++tp;
      ++kept;
      ++cursor;
    }
    F1Point p;
    p.threshold = t;
    p.precision = kept == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(kept);
    p.recall = total_gt == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(total_gt);
    p.f1 = f1(p.precision, p.recall);
    curve.points[i] = p;
  }
  curve.best_threshold = curve.points.front().threshold;
  curve.best_f1 = curve.points.front().f1;
  for (const auto& p : curve.points) {
    if (p.f1 > curve.best_f1) {
      curve.best_f1 = p.f1;
      curve.best_threshold = p.threshold;
    }
  }
  return curve;
}

}  // namespace

F1Curve f1_curve(const PredictionSet& preds, const GroundTruthSet& truths, double iou_thresh) {
  return f1_curve_from_outcomes(match_detections(preds, truths, iou_thresh), count_truths(truths));
}

EvalReport evaluate(const PredictionSet& preds, const GroundTruthSet& truths, double iou_thresh) {
  EvalReport report;
  report.iou_threshold = iou_thresh;
  const auto outcomes = match_detections(preds, truths, iou_thresh);

  std::map<int, std::vector<MatchOutcome>> by_class;
  for (const auto& [id, gts] : truths) {
    for (const auto& g : gts) {
      auto& cr = report.per_class[g.class_id];
      cr.class_id = g.class_id;
      ++cr.gts;
    }
  }
  for (const auto& o : outcomes) {
    by_class[o.class_id].push_back(o);
    auto& cr = report.per_class[o.class_id];
    cr.class_id = o.class_id;
    (o.is_tp ? cr.tps : cr.fps)++;
  }

  double ap_sum = 0;
  std::size_t ap_classes = 0;
  for (auto& [cls, cr] : report.per_class) {
    cr.curve = pr_curve(by_class[cls], cr.gts);
    cr.ap = average_precision(cr.curve);
    if (cr.gts > 0) {
      ap_sum += cr.ap;
      ++ap_classes;
    }
    report.counts.tps += cr.tps;
    report.counts.fps += cr.fps;
  }
  report.map = ap_classes == 0 ? 0.0 : ap_sum / static_cast<double>(ap_classes);

  std::set<std::string> images;
  for (const auto& [id, v] : truths) images.insert(id);
  for (const auto& [id, v] : preds) images.insert(id);
  report.counts.images = images.size();
  report.counts.gts = count_truths(truths);
  report.counts.preds = count_predictions(preds);
  report.f1_curve = f1_curve_from_outcomes(outcomes, report.counts.gts);
  return report;
}

// ---------------------------------------------------------------------------
// files

GroundTruthSet truths_from_manifest(const dataset::DatasetManifest& manifest,
                                    std::optional<dataset::Split> only) {
  GroundTruthSet truths;
  for (const auto& s : manifest.samples) {
    if (only) {
      auto it = manifest.split_of.find(s.image_id);
      if (it == manifest.split_of.end() || it->second != *only) continue;
    }
    auto& list = truths[s.image_id];
    for (const auto& b : s.boxes) list.push_back({yolo_to_xyxy(b, s.image_w, s.image_h), b.class_id});
  }
  return truths;
}

namespace {

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_field(std::string_view s, std::size_t line, const char* name) {
  T v{};
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw dataset::ParseError(line, fmt::format("invalid {} '{}'", name, s));
  }
  return v;
}

}  // namespace

PredictionSet load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open predictions file: " + path);
  PredictionSet preds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    if (line_no == 1 && line.starts_with("image_id")) continue;
    const auto f = split_csv(line);
    if (f.size() != 7) throw dataset::ParseError(line_no, fmt::format("expected 7 fields, found {}", f.size()));
    Detection d;
    d.class_id = parse_field<int>(f[1], line_no, "class_id");
    d.confidence = parse_field<double>(f[2], line_no, "confidence");
    d.box = {parse_field<double>(f[3], line_no, "x1"), parse_field<double>(f[4], line_no, "y1"),
             parse_field<double>(f[5], line_no, "x2"), parse_field<double>(f[6], line_no, "y2")};
    if (!(d.confidence >= 0 && d.confidence <= 1)) throw dataset::ParseError(line_no, "confidence out of range");
    if (!d.box.valid()) throw dataset::ParseError(line_no, "invalid box");
    if (d.class_id < 0) throw dataset::ParseError(line_no, "negative class id");
    preds[std::string(f[0])].push_back(d);
  }
  return preds;
}

void save_predictions(const std::string& path, const PredictionSet& preds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write predictions file: " + path);
  out << "image_id,class_id,confidence,x1,y1,x2,y2\n";
  for (const auto& [id, dets] : preds) {
    for (const auto& d : dets) {
      out << fmt::format("{},{},{},{},{},{},{}\n", id, d.class_id, d.confidence, d.box.x1, d.box.y1, d.box.x2,
                         d.box.y2);
    }
  }
}

namespace {

std::string class_label(int cls, const std::vector<std::string>& names) {
  if (cls >= 0 && static_cast<std::size_t>(cls) < names.size()) return names[static_cast<std::size_t>(cls)];
  return fmt::format("class {}", cls);
}

}  // namespace

std::string format_summary(const EvalReport& report, const std::vector<std::string>& class_names) {
  std::string out;
  out += fmt::format("mAP@{:g}: {:.3f}\n", report.iou_threshold, report.map);
  for (const auto& [cls, cr] : report.per_class) {
    out += fmt::format("  AP {:<12} {:.3f}  (gt {}, tp {}, fp {})\n", class_label(cls, class_names), cr.ap, cr.gts,
                       cr.tps, cr.fps);
  }
  out += fmt::format("best F1: {:.2f} at confidence {:.3f}\n", report.f1_curve.best_f1,
                     report.f1_curve.best_threshold);
  const auto& c = report.counts;
  out += fmt::format("images {}, ground truths {}, predictions {}, TP {}, FP {}\n", c.images, c.gts, c.preds, c.tps,
                     c.fps);
  return out;
}

std::string summary_json(const EvalReport& report, const std::vector<std::string>& class_names) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& [cls, cr] : report.per_class) {
    classes.push_back({{"class_id", cls},
                       {"name", class_label(cls, class_names)},
                       {"ap", cr.ap},
                       {"gts", cr.gts},
                       {"tps", cr.tps},
                       {"fps", cr.fps}});
  }
  nlohmann::json doc = {
      {"iou_threshold", report.iou_threshold},
      {"map", report.map},
      {"best_f1", report.f1_curve.best_f1},
      {"best_threshold", report.f1_curve.best_threshold},
      {"classes", std::move(classes)},
      {"counts",
       {{"images", report.counts.images},
        {"gts", report.counts.gts},
        {"preds", report.counts.preds},
        {"tps", report.counts.tps},
        {"fps", report.counts.fps}}},
  };
  return doc.dump(2) + "\n";
}

std::string pr_csv(const EvalReport& report) {
  std::string out = "class_id,recall,precision,threshold\n";
  for (const auto& [cls, cr] : report.per_class) {
    for (const auto& p : cr.curve.points) {
      out += fmt::format("{},{},{},{}\n", cls, p.recall, p.precision, p.threshold);
    }
  }
  return out;
}

std::string f1_csv(const EvalReport& report) {
  std::string out = "threshold,precision,recall,f1\n";
  for (const auto& p : report.f1_curve.points) {
    out += fmt::format("{},{},{},{}\n", p.threshold, p.precision, p.recall, p.f1);
  }
  return out;
}

namespace {

constexpr int kW = 480, kH = 360, kMargin = 48;
constexpr const char* kPalette[] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

double sx(double v) { return kMargin + v * (kW - 2 * kMargin); }
double sy(double v) { return kH - kMargin - v * (kH - 2 * kMargin); }

std::string svg_frame(const std::string& title, const std::string& xlabel, const std::string& ylabel) {
  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"{2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{3}</text>\n",
      kW, kH, kW / 2, title);
  s += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n", kMargin,
                   kMargin, kW - 2 * kMargin, kH - 2 * kMargin);
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    s += fmt::format(
        "<text x=\"{:.1f}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{:.2f}</text>\n",
        sx(v), kH - kMargin + 14, v);
    s += fmt::format(
        "<text x=\"{}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.2f}</text>\n",
        kMargin - 4, sy(v) + 3, v);
  }
  s += fmt::format(
      "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
      kW / 2, kH - 12, xlabel);
  s += fmt::format(
      "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" "
      "transform=\"rotate(-90 14 {})\">{}</text>\n",
      kH / 2, kH / 2, ylabel);
  return s;
}

}  // namespace

std::string pr_svg(const EvalReport& report, const std::vector<std::string>& class_names) {
  std::string s = svg_frame(fmt::format("Precision-Recall (mAP@{:g} = {:.3f})", report.iou_threshold, report.map),
                            "Recall", "Precision");
  std::size_t color = 0;
  for (const auto& [cls, cr] : report.per_class) {
    std::string pts = fmt::format("{:.2f},{:.2f}", sx(0), sy(cr.curve.points.empty() ? 0 : 1));
    for (const auto& p : cr.curve.points) pts += fmt::format(" {:.2f},{:.2f}", sx(p.recall), sy(p.precision));
    const char* c = kPalette[color++ % std::size(kPalette)];
    s += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n", c, pts);
    s += fmt::format(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{} {:.3f}</text>\n",
        kW - kMargin - 110, kMargin + 16 * color, c, class_label(cls, class_names), cr.ap);
  }
  return s + "</svg>\n";
}

std::string f1_svg(const EvalReport& report) {
  const auto& fc = report.f1_curve;
  std::string s = svg_frame(fmt::format("F1-Confidence (best {:.2f} at {:.3f})", fc.best_f1, fc.best_threshold),
                            "Confidence", "F1");
  std::string pts;
  for (const auto& p : fc.points) {
    if (!pts.empty()) pts += ' ';
    pts += fmt::format("{:.2f},{:.2f}", sx(p.threshold), sy(p.f1));
  }
  s += fmt::format("<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>\n", pts);
  s += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"#d62728\"/>\n", sx(fc.best_threshold),
                   sy(fc.best_f1));
  return s + "</svg>\n";
}

void write_report(const std::string& dir, const EvalReport& report, const std::vector<std::string>& class_names) {
  fs::create_directories(dir);
  auto write = [&](const char* name, const std::string& body) {
    std::ofstream out(fs::path(dir) / name, std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}/{}", dir, name));
    out << body;
  };
  write("summary.json", summary_json(report, class_names));
  write("summary.txt", format_summary(report, class_names));
  write("pr_curve.csv", pr_csv(report));
  write("f1_curve.csv", f1_csv(report));
  write("pr_curve.svg", pr_svg(report, class_names));
  write("f1_curve.svg", f1_svg(report));
}

}  // namespace smokewatch::eval
