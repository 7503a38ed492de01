#include <pybind11/chrono.h>
#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>

#include "smokewatch/alerting.hpp"
#include "smokewatch/dataset.hpp"
#include "smokewatch/eval.hpp"
#include "smokewatch/geometry.hpp"
#include "smokewatch/image.hpp"

namespace py = pybind11;
using namespace smokewatch;

namespace {

using ImageArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Image image_from_array(const ImageArray& arr) {
  if (arr.ndim() != 3 || arr.shape(2) != 3) throw std::invalid_argument("expected an HxWx3 uint8 array");
  Image img(static_cast<int>(arr.shape(1)), static_cast<int>(arr.shape(0)));
  std::memcpy(img.pixels.data(), arr.data(), img.pixels.size());
  return img;
}

ImageArray image_to_array(const Image& img) {
  ImageArray out({img.height, img.width, 3});
  std::memcpy(out.mutable_data(), img.pixels.data(), img.pixels.size());
  return out;
}

std::string box_repr(const BoxXYXY& b) { return fmt::format("BoxXYXY({}, {}, {}, {})", b.x1, b.y1, b.x2, b.y2); }

}  // namespace

PYBIND11_MODULE(_smokewatch, m) {
  m.doc() = "Detection geometry, dataset tooling, evaluation metrics and alarm debouncing";

  py::register_exception<dataset::ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<dataset::ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<alerting::OrderingError>(m, "OrderingError", PyExc_ValueError);
  py::register_exception<alerting::InvalidStateError>(m, "InvalidStateError", PyExc_RuntimeError);
  py::register_exception<alerting::NotFoundError>(m, "NotFoundError", PyExc_KeyError);
  py::register_exception<DecodeError>(m, "DecodeError", PyExc_ValueError);

  // geometry

  py::class_<BoxXYXY>(m, "BoxXYXY")
      .def(py::init<>())
      .def(py::init([](double x1, double y1, double x2, double y2) { return BoxXYXY{x1, y1, x2, y2}; }),
           py::arg("x1"), py::arg("y1"), py::arg("x2"), py::arg("y2"))
      .def_readwrite("x1", &BoxXYXY::x1)
      .def_readwrite("y1", &BoxXYXY::y1)
      .def_readwrite("x2", &BoxXYXY::x2)
      .def_readwrite("y2", &BoxXYXY::y2)
      .def_property_readonly("area", &BoxXYXY::area)
      .def("valid", &BoxXYXY::valid)
      .def(py::self == py::self)
      .def("__repr__", &box_repr);

  py::class_<YoloBox>(m, "YoloBox")
      .def(py::init<>())
      .def(py::init([](int c, double cx, double cy, double w, double h) { return YoloBox{c, cx, cy, w, h}; }),
           py::arg("class_id"), py::arg("cx"), py::arg("cy"), py::arg("w"), py::arg("h"))
      .def_readwrite("class_id", &YoloBox::class_id)
      .def_readwrite("cx", &YoloBox::cx)
      .def_readwrite("cy", &YoloBox::cy)
      .def_readwrite("w", &YoloBox::w)
      .def_readwrite("h", &YoloBox::h)
      .def(py::self == py::self)
      .def("__repr__", [](const YoloBox& b) {
        return fmt::format("YoloBox({}, {}, {}, {}, {})", b.class_id, b.cx, b.cy, b.w, b.h);
      });

  py::class_<Detection>(m, "Detection")
      .def(py::init<>())
      .def(py::init([](const BoxXYXY& box, int class_id, double confidence) {
             return Detection{box, class_id, confidence};
           }),
           py::arg("box"), py::arg("class_id"), py::arg("confidence"))
      .def_readwrite("box", &Detection::box)
      .def_readwrite("class_id", &Detection::class_id)
      .def_readwrite("confidence", &Detection::confidence)
      .def(py::self == py::self)
      .def("__repr__", [](const Detection& d) {
        return fmt::format("Detection({}, class_id={}, confidence={})", box_repr(d.box), d.class_id, d.confidence);
      });

  py::class_<LetterboxTransform>(m, "LetterboxTransform")
      .def_readonly("scale", &LetterboxTransform::scale)
      .def_readonly("pad_x", &LetterboxTransform::pad_x)
      .def_readonly("pad_y", &LetterboxTransform::pad_y)
      .def_readonly("src_w", &LetterboxTransform::src_w)
      .def_readonly("src_h", &LetterboxTransform::src_h)
      .def_readonly("dst_side", &LetterboxTransform::dst_side);

  m.def("iou", &iou, py::arg("a"), py::arg("b"));
  m.def("nms", [](const std::vector<Detection>& dets, double t) { return nms(dets, t); }, py::arg("detections"),
        py::arg("iou_thresh") = kDefaultNmsIou);
  m.def("yolo_to_xyxy", &yolo_to_xyxy, py::arg("box"), py::arg("img_w"), py::arg("img_h"));
  m.def("xyxy_to_yolo", &xyxy_to_yolo, py::arg("box"), py::arg("class_id"), py::arg("img_w"), py::arg("img_h"));
  m.def("letterbox_plan", &letterbox_plan, py::arg("src_w"), py::arg("src_h"),
        py::arg("dst_side") = kDefaultInputSide);
  m.def("map_back", &map_back, py::arg("box"), py::arg("transform"));
  m.def("map_forward", &map_forward, py::arg("box"), py::arg("transform"));

  // dataset

  py::enum_<dataset::Split>(m, "Split")
      .value("TRAIN", dataset::Split::kTrain)
      .value("VAL", dataset::Split::kVal)
      .value("TEST", dataset::Split::kTest);

  py::class_<dataset::SampleLabel>(m, "SampleLabel")
      .def(py::init<>())
      .def(py::init([](std::string id, std::string path, int w, int h, std::vector<YoloBox> boxes) {
             return dataset::SampleLabel{std::move(id), std::move(path), w, h, std::move(boxes)};
           }),
           py::arg("image_id"), py::arg("image_path"), py::arg("image_w"), py::arg("image_h"),
           py::arg("boxes") = std::vector<YoloBox>{})
      .def_readwrite("image_id", &dataset::SampleLabel::image_id)
      .def_readwrite("image_path", &dataset::SampleLabel::image_path)
      .def_readwrite("image_w", &dataset::SampleLabel::image_w)
      .def_readwrite("image_h", &dataset::SampleLabel::image_h)
      .def_readwrite("boxes", &dataset::SampleLabel::boxes)
      .def(py::self == py::self);

  py::class_<dataset::DatasetManifest>(m, "DatasetManifest")
      .def(py::init<>())
      .def_readwrite("samples", &dataset::DatasetManifest::samples)
      .def_readwrite("split_of", &dataset::DatasetManifest::split_of)
      .def_readwrite("class_names", &dataset::DatasetManifest::class_names)
      .def("split_counts", &dataset::DatasetManifest::split_counts)
      .def(py::self == py::self);

  m.def("parse_label_file", &dataset::parse_label_file, py::arg("text"));
  m.def("format_label_file", &dataset::format_label_file, py::arg("boxes"));
  m.def("mirror_label", &dataset::mirror_label, py::arg("label"));
  m.def("mirror_image", [](const ImageArray& a) { return image_to_array(dataset::mirror_image(image_from_array(a))); },
        py::arg("image"));
  m.def("adjust_exposure",
        [](const ImageArray& a, double gain) {
          return image_to_array(dataset::adjust_exposure(image_from_array(a), gain));
        },
        py::arg("image"), py::arg("gain"));
  m.def("augment_dataset",
        [](const dataset::DatasetManifest& manifest, bool mirror, std::vector<double> gains) {
          return dataset::augment_dataset(manifest, {mirror, std::move(gains)});
        },
        py::arg("manifest"), py::arg("mirror") = false, py::arg("exposure_gains") = std::vector<double>{});
  m.def("split_dataset",
        [](const dataset::DatasetManifest& manifest, std::tuple<std::size_t, std::size_t, std::size_t> counts,
           std::uint64_t seed) {
          const auto [train, val, test] = counts;
          return dataset::split_dataset(manifest, {train, val, test}, seed);
        },
        py::arg("manifest"), py::arg("counts"), py::arg("seed"));
  m.def("iterations_per_epoch", &dataset::iterations_per_epoch, py::arg("n_samples"), py::arg("batch_size"));
  m.def("load_manifest", &dataset::load_manifest, py::arg("path"));
  m.def("save_manifest", &dataset::save_manifest, py::arg("path"), py::arg("manifest"));

  // eval

  py::class_<eval::TruthBox>(m, "TruthBox")
      .def(py::init<>())
      .def(py::init([](const BoxXYXY& box, int class_id) { return eval::TruthBox{box, class_id}; }), py::arg("box"),
           py::arg("class_id"))
      .def_readwrite("box", &eval::TruthBox::box)
      .def_readwrite("class_id", &eval::TruthBox::class_id);

  py::class_<eval::ClassResult>(m, "ClassResult")
      .def_readonly("class_id", &eval::ClassResult::class_id)
      .def_readonly("ap", &eval::ClassResult::ap)
      .def_readonly("gts", &eval::ClassResult::gts)
      .def_readonly("tps", &eval::ClassResult::tps)
      .def_readonly("fps", &eval::ClassResult::fps);

  py::class_<eval::F1Point>(m, "F1Point")
      .def_readonly("threshold", &eval::F1Point::threshold)
      .def_readonly("precision", &eval::F1Point::precision)
      .def_readonly("recall", &eval::F1Point::recall)
      .def_readonly("f1", &eval::F1Point::f1);

  py::class_<eval::F1Curve>(m, "F1Curve")
      .def_readonly("points", &eval::F1Curve::points)
      .def_readonly("best_threshold", &eval::F1Curve::best_threshold)
      .def_readonly("best_f1", &eval::F1Curve::best_f1);

  py::class_<eval::EvalCounts>(m, "EvalCounts")
      .def_readonly("images", &eval::EvalCounts::images)
      .def_readonly("gts", &eval::EvalCounts::gts)
      .def_readonly("preds", &eval::EvalCounts::preds)
      .def_readonly("tps", &eval::EvalCounts::tps)
      .def_readonly("fps", &eval::EvalCounts::fps);

  py::class_<eval::EvalReport>(m, "EvalReport")
      .def_readonly("iou_threshold", &eval::EvalReport::iou_threshold)
      .def_readonly("per_class", &eval::EvalReport::per_class)
      .def_readonly("map", &eval::EvalReport::map)
      .def_readonly("f1_curve", &eval::EvalReport::f1_curve)
      .def_readonly("counts", &eval::EvalReport::counts)
      .def("summary", [](const eval::EvalReport& r, const std::vector<std::string>& names) {
        return eval::format_summary(r, names);
      }, py::arg("class_names") = std::vector<std::string>{})
      .def("summary_json", [](const eval::EvalReport& r, const std::vector<std::string>& names) {
        return eval::summary_json(r, names);
      }, py::arg("class_names") = std::vector<std::string>{});

  m.def("evaluate", &eval::evaluate, py::arg("predictions"), py::arg("truths"),
        py::arg("iou_thresh") = eval::kDefaultIouThreshold, py::call_guard<py::gil_scoped_release>());
  m.def("f1_curve", &eval::f1_curve, py::arg("predictions"), py::arg("truths"),
        py::arg("iou_thresh") = eval::kDefaultIouThreshold);
  m.def("f1", &eval::f1, py::arg("precision"), py::arg("recall"));
  m.def("truths_from_manifest", &eval::truths_from_manifest, py::arg("manifest"), py::arg("only") = py::none());
  m.def("load_predictions", &eval::load_predictions, py::arg("path"));
  m.def("save_predictions", &eval::save_predictions, py::arg("path"), py::arg("predictions"));
  m.def("write_report", &eval::write_report, py::arg("dir"), py::arg("report"),
        py::arg("class_names") = std::vector<std::string>{});

  // alerting

  py::class_<alerting::AlarmParams>(m, "AlarmParams")
      .def(py::init([](std::uint32_t n, std::uint32_t k, std::uint32_t mm, Seconds cooldown) {
             alerting::AlarmParams p{n, k, mm, cooldown};
             p.validate();
             return p;
           }),
           py::arg("n") = 5, py::arg("k") = 3, py::arg("m") = 10, py::arg("cooldown") = Seconds{300})
      .def_readonly("n", &alerting::AlarmParams::n)
      .def_readonly("k", &alerting::AlarmParams::k)
      .def_readonly("m", &alerting::AlarmParams::m)
      .def_readonly("cooldown", &alerting::AlarmParams::cooldown);

  py::enum_<alerting::AlarmPhase>(m, "AlarmPhase")
      .value("IDLE", alerting::AlarmPhase::kIdle)
      .value("ACTIVE", alerting::AlarmPhase::kActive)
      .value("ACKNOWLEDGED", alerting::AlarmPhase::kAcknowledged)
      .value("COOLDOWN", alerting::AlarmPhase::kCooldown);

  py::enum_<alerting::EventKind>(m, "EventKind")
      .value("RAISED", alerting::EventKind::kRaised)
      .value("ACKNOWLEDGED", alerting::EventKind::kAcknowledged)
      .value("CLEARED", alerting::EventKind::kCleared);

  py::class_<alerting::FrameObservation>(m, "FrameObservation")
      .def(py::init([](std::string camera_id, std::uint64_t seq, Timestamp at, bool positive, double max_conf) {
             return alerting::FrameObservation{std::move(camera_id), seq, at, positive, max_conf, positive ? 1u : 0u};
           }),
           py::arg("camera_id"), py::arg("frame_seq"), py::arg("at"), py::arg("positive"),
           py::arg("max_confidence") = 0.0)
      .def_readonly("camera_id", &alerting::FrameObservation::camera_id)
      .def_readonly("frame_seq", &alerting::FrameObservation::frame_seq)
      .def_readonly("at", &alerting::FrameObservation::at)
      .def_readonly("positive", &alerting::FrameObservation::positive)
      .def_readonly("max_confidence", &alerting::FrameObservation::max_confidence)
      .def_readonly("detection_count", &alerting::FrameObservation::detection_count);

  py::class_<alerting::AlarmState>(m, "AlarmState")
      .def(py::init([](std::string camera_id) {
             alerting::AlarmState s;
             s.camera_id = std::move(camera_id);
             return s;
           }),
           py::arg("camera_id"))
      .def_readonly("camera_id", &alerting::AlarmState::camera_id)
      .def_readonly("phase", &alerting::AlarmState::phase)
      .def_readonly("negative_run", &alerting::AlarmState::negative_run)
      .def_readonly("last_seq", &alerting::AlarmState::last_seq)
      .def_readonly("active_alert_id", &alerting::AlarmState::active_alert_id)
      .def_readonly("cooldown_until", &alerting::AlarmState::cooldown_until)
      .def_readonly("alerts_raised", &alerting::AlarmState::alerts_raised)
      .def_property_readonly("window", [](const alerting::AlarmState& s) {
        std::vector<bool> w;
        for (const auto& e : s.window) w.push_back(e.positive);
        return w;
      })
      .def(py::self == py::self);

  py::class_<alerting::AlertEvent>(m, "AlertEvent")
      .def_readonly("alert_id", &alerting::AlertEvent::alert_id)
      .def_readonly("camera_id", &alerting::AlertEvent::camera_id)
      .def_readonly("kind", &alerting::AlertEvent::kind)
      .def_readonly("at", &alerting::AlertEvent::at)
      .def_readonly("frame_seq", &alerting::AlertEvent::frame_seq)
      .def_readonly("positives", &alerting::AlertEvent::positives)
      .def_readonly("window_size", &alerting::AlertEvent::window_size)
      .def_readonly("max_confidence", &alerting::AlertEvent::max_confidence)
      .def_readonly("operator_name", &alerting::AlertEvent::operator_name);

  m.def("observe",
        [](std::string camera_id, std::uint64_t seq, Timestamp at, const std::vector<Detection>& dets,
           double threshold) { return alerting::observe(std::move(camera_id), seq, at, dets, threshold); },
        py::arg("camera_id"), py::arg("frame_seq"), py::arg("at"), py::arg("detections"), py::arg("threshold"));
  m.def("update",
        [](const alerting::AlarmState& state, const alerting::FrameObservation& obs,
           const alerting::AlarmParams& params) {
          auto r = alerting::update(state, obs, params);
          return py::make_tuple(std::move(r.state), std::move(r.events));
        },
        py::arg("state"), py::arg("observation"), py::arg("params"));
  m.def("acknowledge",
        [](const alerting::AlarmState& state, const std::string& alert_id, const std::string& who, Timestamp at) {
          auto r = alerting::acknowledge(state, alert_id, who, at);
          return py::make_tuple(std::move(r.state), std::move(r.event));
        },
        py::arg("state"), py::arg("alert_id"), py::arg("operator_name"), py::arg("at"));
}
