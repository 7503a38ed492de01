// smokewatch: run the monitoring service and the dataset/evaluation tooling.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

#include <pthread.h>
#include <unistd.h>

#include <algorithm>
#include <csignal>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/color.h>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "smokewatch/api_server.hpp"
#include "smokewatch/config.hpp"
#include "smokewatch/dataset.hpp"
#include "smokewatch/detector.hpp"
#include "smokewatch/eval.hpp"
#include "smokewatch/geometry.hpp"
#include "smokewatch/image.hpp"
#include "smokewatch/service.hpp"
#include "smokewatch/store.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace smokewatch::cli {
namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

bool color_enabled(std::FILE* stream) {
  const char* no_color = std::getenv("NO_COLOR");
  if (no_color != nullptr && *no_color != '\0') return false;
  return ::isatty(::fileno(stream)) != 0;
}

template <typename... Args>
std::string styled(std::FILE* stream, fmt::text_style style, fmt::format_string<Args...> f, Args&&... args) {
  std::string text = fmt::format(f, std::forward<Args>(args)...);
  return color_enabled(stream) ? fmt::format(style, "{}", text) : text;
}

int report_error(int code, const std::string& message) {
  fmt::print(stderr, "{} {}\n", styled(stderr, fg(fmt::terminal_color::red) | fmt::emphasis::bold, "error:"),
             message);
  return code;
}

// ---------------------------------------------------------------------------
// serve

struct ServeArgs {
  std::string config;
};

int run_serve(const ServeArgs& args, const CLI::App& cmd) {
  if (!fs::is_regular_file(args.config)) {
    report_error(kExitUsage, fmt::format("config file not found: {}", args.config));
    fmt::print(stderr, "{}", cmd.help());
    return kExitUsage;
  }
  config::ServiceConfig cfg = config::load_config(args.config);
  config::apply_env_overrides(cfg);

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  service::Service svc(cfg);
  api::ApiServer server(svc, api::ApiOptions::from_config(cfg.server));
  const int port = server.start();
  spdlog::info("listening on http://{}:{} ({} cameras)", cfg.server.host, port, svc.state().cameras.size());
  svc.start();

  int sig = 0;
  sigwait(&signals, &sig);
  spdlog::info("received signal {}, shutting down", sig);
  server.stop();
  svc.stop();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// augment

struct AugmentArgs {
  std::string in;
  std::string out;
  bool mirror = false;
  std::vector<double> exposure;
};

int run_augment(const AugmentArgs& args) {
  dataset::validate_gains(args.exposure);
  const dataset::DatasetManifest manifest = dataset::load_manifest(args.in);
  if (fs::exists(args.out) && !(fs::is_directory(args.out) && fs::is_empty(args.out))) {
    throw UsageError(fmt::format("output directory {} already exists and is not empty", args.out));
  }
  const dataset::DatasetManifest augmented =
      dataset::augment_dataset(manifest, {.mirror = args.mirror, .exposure_gains = args.exposure});

  const fs::path in_dir = fs::path(args.in).parent_path();
  const fs::path out_dir(args.out);
  std::string loaded_id;
  Image source;
  for (const auto& sample : augmented.samples) {
    const std::string src_id(dataset::source_id_of(sample.image_id));
    const dataset::SampleLabel* src = manifest.find(src_id);
    const fs::path src_path = in_dir / src->image_path;
    const fs::path dst_path = out_dir / sample.image_path;
    fs::create_directories(dst_path.parent_path());
    if (sample.image_id == src_id) {
      if (!fs::is_regular_file(src_path)) throw DecodeError("cannot open image file: " + src_path.string());
      fs::copy_file(src_path, dst_path, fs::copy_options::overwrite_existing);
      continue;
    }
    if (loaded_id != src_id) {
      source = read_image_file(src_path.string());
      loaded_id = src_id;
    }
    if (sample.image_id == dataset::mirror_id(src_id)) {
      write_image_file(dst_path.string(), dataset::mirror_image(source));
      continue;
    }
    for (double g : args.exposure) {
      if (sample.image_id == dataset::exposure_id(src_id, g)) {
        write_image_file(dst_path.string(), dataset::adjust_exposure(source, g));
        break;
      }
    }
  }
  const fs::path out_manifest = out_dir / fs::path(args.in).filename();
  dataset::save_manifest(out_manifest.string(), augmented);
  fmt::print("{} source samples -> {} samples written to {}\n", manifest.samples.size(), augmented.samples.size(),
             out_manifest.generic_string());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// split

struct SplitArgs {
  std::string in;
  std::vector<std::size_t> counts;
  std::uint64_t seed = 0;
  std::string out;
};

int run_split(const SplitArgs& args) {
  const dataset::DatasetManifest manifest = dataset::load_manifest(args.in);
  const dataset::SplitCounts counts{args.counts.at(0), args.counts.at(1), args.counts.at(2)};
  dataset::DatasetManifest result = dataset::split_dataset(manifest, counts, args.seed);

  const std::string out = args.out.empty() ? args.in : args.out;
  const fs::path in_dir = fs::absolute(args.in).parent_path();
  const fs::path out_dir = fs::absolute(out).parent_path();
  if (in_dir.lexically_normal() != out_dir.lexically_normal()) {
    for (auto& s : result.samples) {
      s.image_path = (in_dir / s.image_path).lexically_normal().lexically_relative(out_dir).generic_string();
    }
  }
  dataset::save_manifest(out, result);
  const auto sizes = result.split_counts();
  fmt::print("train {}  val {}  test {}  (seed {}) -> {}\n", sizes[0], sizes[1], sizes[2], args.seed, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string pred;
  std::string truth;
  double iou = eval::kDefaultIouThreshold;
  std::string out;
  std::string split;
  bool json = false;
};

int run_eval(const EvalArgs& args) {
  if (!(args.iou > 0 && args.iou <= 1)) throw UsageError("--iou must lie in (0, 1]");
  std::optional<dataset::Split> only;
  if (!args.split.empty()) only = dataset::split_from_string(args.split);
  const auto manifest = dataset::load_manifest(args.truth);
  const auto preds = eval::load_predictions(args.pred);
  const auto truths = eval::truths_from_manifest(manifest, only);
  eval::PredictionSet scoped;
  for (const auto& [id, dets] : preds) {
    if (truths.contains(id)) scoped.emplace(id, dets);
  }
  const auto report = eval::evaluate(only ? scoped : preds, truths, args.iou);
  eval::write_report(args.out, report, manifest.class_names);
  if (args.json) {
    fmt::print("{}", eval::summary_json(report, manifest.class_names));
  } else {
    fmt::print("{}", eval::format_summary(report, manifest.class_names));
    fmt::print("report written to {}\n", args.out);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// detect

struct DetectArgs {
  std::string image;
  std::string backend = "mock";
  std::string fixture;
  std::string endpoint;
  std::string image_id;
  double conf = detector::kDefaultConfFloor;
  double nms_iou = kDefaultNmsIou;
  int input_side = kDefaultInputSide;
  int timeout_ms = 10'000;
  std::string annotate;
  bool json = false;
};

constexpr std::uint8_t kPalette[][3] = {
    {230, 25, 75}, {60, 180, 75}, {255, 225, 25}, {0, 130, 200}, {245, 130, 48}, {145, 30, 180},
};

void draw_box(Image& img, const BoxXYXY& box, const std::uint8_t* rgb, int thickness = 2) {
  const int x1 = std::clamp(static_cast<int>(box.x1), 0, img.width - 1);
  const int y1 = std::clamp(static_cast<int>(box.y1), 0, img.height - 1);
  const int x2 = std::clamp(static_cast<int>(box.x2), 0, img.width - 1);
  const int y2 = std::clamp(static_cast<int>(box.y2), 0, img.height - 1);
  auto put = [&](int x, int y) { std::copy(rgb, rgb + 3, img.at(x, y)); };
  for (int t = 0; t < thickness; ++t) {
    for (int x = x1; x <= x2; ++x) {
      put(x, std::min(y1 + t, y2));
      put(x, std::max(y2 - t, y1));
    }
    for (int y = y1; y <= y2; ++y) {
      put(std::min(x1 + t, x2), y);
      put(std::max(x2 - t, x1), y);
    }
  }
}

std::vector<store::LabeledDetection> with_names(const std::vector<Detection>& dets,
                                                const detector::RawInference& raw) {
  std::map<int, std::string> names;
  for (std::size_t i = 0; i < raw.detections.size() && i < raw.class_names.size(); ++i) {
    names.emplace(raw.detections[i].class_id, raw.class_names[i]);
  }
  std::vector<store::LabeledDetection> out;
  for (const auto& d : dets) {
    auto it = names.find(d.class_id);
    out.push_back({d, it != names.end() ? it->second : std::to_string(d.class_id)});
  }
  return out;
}

int run_detect(const DetectArgs& args) {
  detector::DetectorConfig cfg;
  if (args.backend == "mock") {
    if (args.fixture.empty()) throw UsageError("--backend mock requires --fixture");
    cfg.backend = detector::BackendKind::kMock;
    cfg.fixture_path = args.fixture;
  } else {
    if (args.endpoint.empty()) throw UsageError("--backend external requires --endpoint");
    cfg.backend = detector::BackendKind::kExternal;
    cfg.endpoint = args.endpoint;
  }
  cfg.conf_floor = args.conf;
  cfg.nms_iou = args.nms_iou;
  cfg.input_side = args.input_side;
  cfg.timeout = Millis(args.timeout_ms);

  Image img = read_image_file(args.image);
  const auto backend = detector::make_detector(cfg);
  const std::string id = args.image_id.empty() ? fs::path(args.image).stem().string() : args.image_id;
  const auto raw = backend->detect(img, id);
  const auto t = letterbox_plan(img.width, img.height, backend->input_side());
  const auto dets = with_names(detector::postprocess(raw, t, cfg, {}), raw);

  if (!args.annotate.empty()) {
    for (const auto& d : dets) {
      const auto* rgb = kPalette[static_cast<std::size_t>(d.detection.class_id) % std::size(kPalette)];
      draw_box(img, d.detection.box, rgb);
    }
    write_image_file(args.annotate, img);
  }

  if (args.json) {
    json rows = json::array();
    for (const auto& d : dets) rows.push_back(store::labeled_detection_json(d));
    const json doc = {{"image_id", id},
                      {"model_id", raw.model_id},
                      {"width", img.width},
                      {"height", img.height},
                      {"detections", rows}};
    fmt::print("{}\n", doc.dump(2));
    return kExitOk;
  }
  fmt::print("{}  {}x{}  model {}  {} detection(s)\n", id, img.width, img.height, raw.model_id, dets.size());
  if (dets.empty()) return kExitOk;
  fmt::print("{}\n", styled(stdout, fmt::emphasis::bold, "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8}", "class", "conf",
                            "x1", "y1", "x2", "y2"));
  for (const auto& d : dets) {
    const auto& b = d.detection.box;
    fmt::print("{:<12} {:>6.3f} {:>8.1f} {:>8.1f} {:>8.1f} {:>8.1f}\n", d.class_name, d.detection.confidence, b.x1,
               b.y1, b.x2, b.y2);
  }
  if (!args.annotate.empty()) fmt::print("annotated image written to {}\n", args.annotate);
  return kExitOk;
}

// ---------------------------------------------------------------------------

void setup_logging() {
  const auto mode = color_enabled(stderr) ? spdlog::color_mode::automatic : spdlog::color_mode::never;
  auto logger = spdlog::stderr_color_mt("smokewatch", mode);
  spdlog::set_default_logger(logger);
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const UsageError& e) {
    return report_error(kExitUsage, e.what());
  } catch (const config::ConfigError& e) {
    return report_error(kExitUsage, e.what());
  } catch (const dataset::ParseError& e) {
    return report_error(kExitUsage, e.what());
  } catch (const DecodeError& e) {
    return report_error(kExitUsage, e.what());
  } catch (const std::invalid_argument& e) {
    return report_error(kExitUsage, e.what());
  } catch (const api::BindError& e) {
    return report_error(kExitRuntime, e.what());
  } catch (const detector::BackendError& e) {
    return report_error(kExitRuntime, fmt::format("backend error: {}", e.what()));
  } catch (const std::exception& e) {
    return report_error(kExitRuntime, e.what());
  }
}

int main_impl(int argc, char** argv) {
  CLI::App app{"Camera smoke monitoring: service, dataset preparation and evaluation", "smokewatch"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run polling, detection, alerting and the HTTP API");
  serve_cmd->add_option("--config", serve.config, "Service config file (TOML)")->required();

  AugmentArgs augment;
  auto* augment_cmd = app.add_subcommand("augment", "Write mirrored and exposure-shifted copies of a dataset");
  augment_cmd->add_option("--in", augment.in, "Input manifest")->required()->check(CLI::ExistingFile);
  augment_cmd->add_option("--out", augment.out, "Output directory (must not exist or be empty)")->required();
  augment_cmd->add_flag("--mirror", augment.mirror, "Add a horizontally mirrored copy per sample");
  augment_cmd->add_option("--exposure", augment.exposure, "Exposure gains, e.g. -0.15,0.15")->delimiter(',');

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "Assign train/val/test splits");
  split_cmd->add_option("--in", split.in, "Input manifest")->required()->check(CLI::ExistingFile);
  split_cmd->add_option("--counts", split.counts, "train,val,test sizes")
      ->required()
      ->delimiter(',')
      ->expected(3);
  split_cmd->add_option("--seed", split.seed, "Shuffle seed")->required();
  split_cmd->add_option("--out", split.out, "Output manifest (default: rewrite --in)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score a prediction file against a labeled manifest");
  eval_cmd->add_option("--pred", ev.pred, "Predictions CSV")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--truth", ev.truth, "Ground-truth manifest")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--iou", ev.iou, "IoU match threshold")->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Report directory")->required();
  eval_cmd->add_option("--split", ev.split, "Restrict to one split")->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_flag("--json", ev.json, "Print the summary as JSON");

  DetectArgs det;
  auto* detect_cmd = app.add_subcommand("detect", "Run one detection on an image file");
  detect_cmd->add_option("--image", det.image, "Image file (PNG or JPEG)")->required();
  detect_cmd->add_option("--backend", det.backend, "mock or external")
      ->capture_default_str()
      ->check(CLI::IsMember({"mock", "external"}));
  detect_cmd->add_option("--fixture", det.fixture, "Mock backend fixture")->check(CLI::ExistingFile);
  detect_cmd->add_option("--endpoint", det.endpoint, "External backend base URL");
  detect_cmd->add_option("--image-id", det.image_id, "Image id sent to the backend (default: file stem)");
  detect_cmd->add_option("--conf", det.conf, "Confidence floor")->capture_default_str();
  detect_cmd->add_option("--nms-iou", det.nms_iou, "NMS IoU threshold")->capture_default_str();
  detect_cmd->add_option("--input-side", det.input_side, "Detector input side")->capture_default_str();
  detect_cmd->add_option("--timeout-ms", det.timeout_ms, "Backend timeout")->capture_default_str();
  detect_cmd->add_option("--annotate", det.annotate, "Write the image with boxes drawn to this path");
  detect_cmd->add_flag("--json", det.json, "Print detections as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  setup_logging();
  if (*serve_cmd) return guarded([&] { return run_serve(serve, *serve_cmd); });
  if (*augment_cmd) return guarded([&] { return run_augment(augment); });
  if (*split_cmd) return guarded([&] { return run_split(split); });
  if (*eval_cmd) return guarded([&] { return run_eval(ev); });
  return guarded([&] { return run_detect(det); });
}

}  // namespace
}  // namespace smokewatch::cli

int main(int argc, char** argv) { return smokewatch::cli::main_impl(argc, argv); }
