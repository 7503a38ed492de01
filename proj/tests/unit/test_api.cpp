#include <gtest/gtest.h>

#include <future>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "smokewatch/api_server.hpp"
#include "smokewatch/codec.hpp"
#include "smokewatch/service.hpp"
#include "support/service_harness.hpp"
#include "support/sse_client.hpp"

using namespace smokewatch;
using namespace smokewatch::harness;
using namespace std::chrono_literals;
using nlohmann::json;

namespace {

struct ApiRig {
  TempDir dir{"api"};
  std::shared_ptr<SimulatedClock> clock = std::make_shared<SimulatedClock>();
  std::shared_ptr<RecordingSink> sink = std::make_shared<RecordingSink>();
  FrameCounter frames;
  std::unique_ptr<service::Service> svc;
  std::unique_ptr<api::ApiServer> server;
  int port = 0;

  explicit ApiRig(std::vector<ingest::CameraConfig> cams = {}, std::map<std::string, detector::MockRecord> script = {},
                  std::optional<std::string> token = std::nullopt) {
    auto cfg = base_config(dir.str());
    cfg.cameras = std::move(cams);
    service::Dependencies deps;
    deps.clock = clock;
    deps.get = frames.fn();
    deps.detector = std::make_shared<detector::MockDetector>("scripted", std::move(script));
    deps.sinks = std::vector<std::shared_ptr<alerting::Sink>>{sink};
    svc = std::make_unique<service::Service>(cfg, deps);
    api::ApiOptions opts;
    opts.port = 0;
    opts.token = token;
    opts.stream_heartbeat = 1s;
    server = std::make_unique<api::ApiServer>(*svc, opts);
    port = server->start();
  }
  ~ApiRig() { server->stop(); }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(10s);
    return c;
  }

  void ticks(int n) {
    for (int i = 0; i < n; ++i) {
      svc->step();
      clock->advance(30s);
    }
  }
};

json body_of(const httplib::Result& r) { return json::parse(r->body); }

void expect_error(const httplib::Result& r, int status, const std::string& code) {
  ASSERT_TRUE(r) << httplib::to_string(r.error());
  EXPECT_EQ(r->status, status);
  const auto j = body_of(r);
  EXPECT_EQ(j["error"]["code"], code) << r->body;
  EXPECT_TRUE(j["error"]["message"].is_string());
}

}  // namespace

TEST(Api, Health) {
  ApiRig rig;
  auto r = rig.client().Get("/api/health");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(body_of(r)["status"], "ok");
}

TEST(Api, EmptyRegistryListsNothing) {
  ApiRig rig;
  auto r = rig.client().Get("/api/cameras");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(body_of(r), json::array());
}

TEST(Api, CamerasOrderedByIdWithStatusAndPhase) {
  ApiRig rig({camera("zulu", "http://cams.invalid/z.jpg"), camera("alpha", "http://cams.invalid/a.jpg")},
             scripted_records("alpha", {1, 2, 3}));
  auto r = rig.client().Get("/api/cameras");
  auto j = body_of(r);
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[0]["id"], "alpha");
  EXPECT_EQ(j[1]["id"], "zulu");
  EXPECT_EQ(j[0]["phase"], "idle");
  EXPECT_EQ(j[0]["status"]["state"], "ok");
  EXPECT_TRUE(j[0].contains("conf_threshold"));
  EXPECT_TRUE(j[0].contains("masks"));
  rig.ticks(3);
  j = body_of(rig.client().Get("/api/cameras"));
  EXPECT_EQ(j[0]["phase"], "active");
  EXPECT_EQ(j[0]["active_alert_id"], "alpha-1");
  EXPECT_EQ(j[1]["phase"], "idle");
  EXPECT_EQ(body_of(rig.client().Get("/api/cameras/alpha"))["phase"], "active");
  expect_error(rig.client().Get("/api/cameras/nope"), 404, "not_found");
}

TEST(Api, CreateCamera) {
  ApiRig rig;
  auto cli = rig.client();
  const json cam{{"id", "ridge"},
                 {"url", "http://cams.invalid/ridge.jpg"},
                 {"conf_threshold", 0.4},
                 {"poll_interval_s", 15},
                 {"masks", json::array({{{"x1", 0.0}, {"y1", 0.0}, {"x2", 1.0}, {"y2", 0.1}}})}};
  auto r = cli.Post("/api/cameras", cam.dump(), "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 201);
  auto j = body_of(r);
  EXPECT_EQ(j["id"], "ridge");
  EXPECT_EQ(j["name"], "ridge");
  EXPECT_EQ(j["poll_interval_s"], 15);
  EXPECT_EQ(j["masks"][0]["y2"], 0.1);
  expect_error(cli.Post("/api/cameras", cam.dump(), "application/json"), 409, "conflict");
  auto bad = cam;
  bad["id"] = "other";
  bad["conf_threshold"] = 1.5;
  expect_error(cli.Post("/api/cameras", bad.dump(), "application/json"), 422, "validation_error");
  expect_error(cli.Post("/api/cameras", R"({"id":"x"})", "application/json"), 422, "validation_error");
  expect_error(cli.Post("/api/cameras", R"({"id":"x","url":"http://a/b","color":"red"})", "application/json"), 422,
               "validation_error");
  expect_error(cli.Post("/api/cameras", "{not json", "application/json"), 400, "bad_request");
  // Only the successful create reached the log.
  int configs = 0;
  for (const auto& rec : rig.svc->log().read_since(0)) configs += rec.kind == store::RecordKind::kCameraConfig;
  EXPECT_EQ(configs, 1);
}

TEST(Api, PatchCamera) {
  ApiRig rig({camera("cam1", "http://cams.invalid/1.jpg")}, scripted_records("cam1", {1, 2}, 0.45));
  auto cli = rig.client();
  expect_error(cli.Patch("/api/cameras/ghost", R"({"conf_threshold":0.5})", "application/json"), 404, "not_found");
  expect_error(cli.Patch("/api/cameras/cam1", R"({"conf_threshold":7})", "application/json"), 422,
               "validation_error");
  expect_error(cli.Patch("/api/cameras/cam1", R"({"id":"cam2"})", "application/json"), 422, "validation_error");
  expect_error(cli.Patch("/api/cameras/cam1", R"({"masks":[[0.5,0.5,0.5,0.6]]})", "application/json"), 422,
               "validation_error");

  rig.ticks(1);
  EXPECT_TRUE(rig.svc->state().latest.at("cam1").positive);
  // The scripted frames carry 0.45 and 0.6 boxes.
  auto r = cli.Patch("/api/cameras/cam1", R"({"conf_threshold":0.7})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(body_of(r)["conf_threshold"], 0.7);
  EXPECT_EQ(body_of(cli.Get("/api/cameras"))[0]["conf_threshold"], 0.7);
  rig.ticks(1);
  const auto latest = body_of(cli.Get("/api/cameras/cam1/latest"));
  EXPECT_EQ(latest["conf_threshold"], 0.7);
  EXPECT_EQ(latest["positive"], false);
  const auto last = rig.svc->log().read_since(0);
  const auto it = std::find_if(last.begin(), last.end(), [](const store::LogRecord& rec) {
    return rec.kind == store::RecordKind::kCameraConfig && rec.payload["op"] == "update";
  });
  ASSERT_NE(it, last.end());
  EXPECT_EQ(it->payload["camera"]["conf_threshold"], 0.7);
}

TEST(Api, LatestFrame) {
  ApiRig rig({camera("cam1", "http://cams.invalid/1.jpg")}, scripted_records("cam1", {1}));
  auto cli = rig.client();
  auto r = cli.Get("/api/cameras/cam1/latest");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 204);
  EXPECT_TRUE(r->body.empty());
  expect_error(cli.Get("/api/cameras/ghost/latest"), 404, "not_found");
  expect_error(cli.Get("/frames/cam1.jpg"), 404, "not_found");

  rig.ticks(1);
  r = cli.Get("/api/cameras/cam1/latest");
  ASSERT_EQ(r->status, 200);
  const auto j = body_of(r);
  EXPECT_EQ(j["camera_id"], "cam1");
  EXPECT_EQ(j["frame_seq"], 1);
  EXPECT_EQ(j["width"], kFrameW);
  EXPECT_EQ(j["height"], kFrameH);
  EXPECT_EQ(j["image_url"], "/frames/cam1.jpg");
  ASSERT_EQ(j["detections"].size(), 2u);
  EXPECT_EQ(j["detections"][0]["confidence"], 0.9);
  EXPECT_EQ(j["detections"][1]["confidence"], 0.6);
  EXPECT_EQ(j["detections"][0]["class_name"], "smoke");
  EXPECT_EQ(j["detections"][0]["x1"], 200.0);
  EXPECT_EQ(j["detections"][0]["y1"], 120.0);

  auto img = cli.Get("/frames/cam1.jpg");
  ASSERT_EQ(img->status, 200);
  EXPECT_EQ(img->get_header_value("Content-Type"), "image/jpeg");
  EXPECT_EQ(decode_image(img->body).width, kFrameW);
}

TEST(Api, AlertsListAndAck) {
  ApiRig rig({camera("cam1", "http://cams.invalid/1.jpg")}, scripted_records("cam1", {1, 2, 3}));
  auto cli = rig.client();
  EXPECT_EQ(body_of(cli.Get("/api/alerts")), json::array());
  rig.ticks(3);
  auto active = body_of(cli.Get("/api/alerts"));
  ASSERT_EQ(active.size(), 1u);
  EXPECT_EQ(active[0]["alert_id"], "cam1-1");
  EXPECT_EQ(active[0]["state"], "active");
  EXPECT_EQ(active[0]["frame_seq"], 3);

  auto r = cli.Post("/api/alerts/cam1-1/ack", R"({"operator":"ana"})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(body_of(r)["kind"], "acknowledged");
  EXPECT_EQ(body_of(r)["operator"], "ana");
  EXPECT_EQ(body_of(cli.Get("/api/alerts")), json::array());
  auto acked = body_of(cli.Get("/api/alerts?state=acknowledged"));
  ASSERT_EQ(acked.size(), 1u);
  EXPECT_EQ(acked[0]["acknowledged_by"], "ana");
  EXPECT_EQ(body_of(cli.Get("/api/alerts?state=all")).size(), 1u);
  expect_error(cli.Get("/api/alerts?state=bogus"), 400, "bad_request");

  expect_error(cli.Post("/api/alerts/cam1-1/ack", R"({"operator":"ana"})", "application/json"), 409,
               "invalid_state");
  expect_error(cli.Post("/api/alerts/cam1-9/ack", "", "application/json"), 404, "not_found");

  int acks = 0;
  for (const auto& rec : rig.svc->log().read_since(0)) acks += rec.kind == store::RecordKind::kAck;
  EXPECT_EQ(acks, 1);
}

TEST(Api, AckDefaultsOperator) {
  ApiRig rig({camera("cam1", "http://cams.invalid/1.jpg")}, scripted_records("cam1", {1, 2, 3}));
  rig.ticks(3);
  auto r = rig.client().Post("/api/alerts/cam1-1/ack", "", "application/json");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(body_of(r)["operator"], "operator");
}

TEST(Api, DetectWithFixture) {
  ApiRig rig({}, scripted_records("upload", {1}));
  auto cli = rig.client();
  const std::string jpeg = numbered_frame(1);
  auto r = cli.Post("/api/detect?image_id=upload/000001", jpeg, "image/jpeg");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200) << r->body;
  auto j = body_of(r);
  EXPECT_EQ(j["model_id"], "scripted");
  EXPECT_EQ(j["image_id"], "upload/000001");
  EXPECT_EQ(j["width"], kFrameW);
  ASSERT_EQ(j["detections"].size(), 2u);
  EXPECT_EQ(j["detections"][0]["confidence"], 0.9);

  httplib::MultipartFormDataItems items{{"image", jpeg, "frame.jpg", "image/jpeg"},
                                        {"image_id", "upload/000001", "", ""}};
  r = cli.Post("/api/detect", items);
  ASSERT_EQ(r->status, 200) << r->body;
  EXPECT_EQ(body_of(r)["detections"].size(), 2u);

  r = cli.Post("/api/detect", jpeg, "image/jpeg");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(body_of(r)["detections"], json::array());
}

TEST(Api, DetectRejectsBadUploads) {
  ApiRig rig;
  auto cli = rig.client();
  expect_error(cli.Post("/api/detect", "<html>nope</html>", "image/jpeg"), 422, "validation_error");
  expect_error(cli.Post("/api/detect", "", "image/jpeg"), 422, "validation_error");
  const std::string huge(20u * 1024 * 1024 + 1, 'x');
  expect_error(cli.Post("/api/detect", huge, "image/jpeg"), 413, "payload_too_large");
}

TEST(Api, MetricsRendering) {
  ApiRig rig;
  auto cli = rig.client();
  auto r = cli.Get("/api/metrics");
  ASSERT_EQ(r->status, 200);
  EXPECT_NE(r->get_header_value("Content-Type").find("text/plain"), std::string::npos);
  EXPECT_NE(r->body.find("smokewatch_frames_polled_total 0"), std::string::npos);
  r = cli.Get("/api/metrics", {{"Accept", "application/x-unknown"}});
  EXPECT_NE(r->get_header_value("Content-Type").find("text/plain"), std::string::npos);
  r = cli.Get("/api/metrics", {{"Accept", "application/json"}});
  EXPECT_EQ(body_of(r)["counters"]["alerts_raised"], 0);
  EXPECT_EQ(body_of(cli.Get("/api/metrics?format=json"))["counters"]["detections"], 0);
}

TEST(Api, MetricsAreMonotone) {
  ApiRig rig({camera("cam1", "http://cams.invalid/1.jpg")}, scripted_records("cam1", {2, 3, 4}));
  auto cli = rig.client();
  std::map<std::string, std::uint64_t> prev;
  for (int i = 0; i < 6; ++i) {
    rig.ticks(1);
    const auto j = body_of(cli.Get("/api/metrics?format=json"));
    for (const auto& [name, v] : j["counters"].items()) {
      EXPECT_GE(v.get<std::uint64_t>(), prev[name]) << name;
      prev[name] = v.get<std::uint64_t>();
    }
  }
  EXPECT_EQ(prev["frames_polled"], 6u);
  EXPECT_EQ(prev["alerts_raised"], 1u);
}

TEST(Api, BearerToken) {
  ApiRig rig({}, {}, "s3cret");
  auto cli = rig.client();
  expect_error(cli.Get("/api/cameras"), 401, "unauthorized");
  expect_error(cli.Get("/api/cameras", {{"Authorization", "Bearer wrong"}}), 401, "unauthorized");
  EXPECT_EQ(cli.Get("/api/cameras", {{"Authorization", "Bearer s3cret"}})->status, 200);
  EXPECT_EQ(cli.Get("/api/cameras?token=s3cret")->status, 200);
  expect_error(cli.Get("/frames/x.jpg"), 401, "unauthorized");
}

TEST(Api, UnknownRouteIsJsonError) {
  ApiRig rig;
  expect_error(rig.client().Get("/api/nothing-here"), 404, "not_found");
}

// Event stream.

TEST(Api, StreamDeliversRaisedAlertOnce) {
  ApiRig rig({camera("cam1", "http://cams.invalid/1.jpg")}, scripted_records("cam1", {1, 2, 3}));
  const auto start = rig.svc->log().last_seq();
  std::uint64_t target = 0;
  std::promise<std::uint64_t> target_p;
  auto target_f = target_p.get_future().share();
  auto reader = std::async(std::launch::async, [&] {
    return sse::read(rig.port, "/api/events/stream?since=" + std::to_string(start), {},
                     [&](const std::vector<sse::Event>& evs) {
                       if (evs.empty() || target_f.wait_for(0s) != std::future_status::ready) return false;
                       return evs.back().id >= target_f.get();
                     });
  });
  rig.ticks(3);
  target = rig.svc->log().last_seq();
  target_p.set_value(target);
  const auto events = reader.get();
  ASSERT_FALSE(events.empty());
  EXPECT_EQ(events.back().id, target);
  int raised = 0;
  std::uint64_t prev = start;
  for (const auto& e : events) {
    EXPECT_GT(e.id, prev);
    prev = e.id;
    EXPECT_EQ(e.data["seq"], e.id);
    EXPECT_EQ(e.data["kind"], e.event);
    EXPECT_TRUE(e.event == "detection" || e.event == "alert" || e.event == "poll_status") << e.event;
    if (e.event == "alert" && e.data["payload"]["kind"] == "raised") ++raised;
  }
  EXPECT_EQ(raised, 1);
}

TEST(Api, StreamResumesAfterCursor) {
  ApiRig rig({camera("cam1", "http://cams.invalid/1.jpg")}, scripted_records("cam1", {1, 2, 3}));
  rig.ticks(4);
  const auto all = rig.svc->log().read_since(0);
  const std::uint64_t k = 4, last = all.back().seq;
  auto done = [&](const std::vector<sse::Event>& evs) { return !evs.empty() && evs.back().id >= last; };
  auto events = sse::read(rig.port, "/api/events/stream?since=" + std::to_string(k), {}, done);
  std::vector<std::uint64_t> expected;
  for (const auto& rec : all) {
    if (rec.seq > k && rec.kind != store::RecordKind::kCameraConfig && rec.kind != store::RecordKind::kAck) {
      expected.push_back(rec.seq);
    }
  }
  std::vector<std::uint64_t> got;
  for (const auto& e : events) got.push_back(e.id);
  EXPECT_EQ(got, expected);
  // Last-Event-ID works the same way.
  events = sse::read(rig.port, "/api/events/stream", {{"Last-Event-ID", std::to_string(k)}}, done);
  got.clear();
  for (const auto& e : events) got.push_back(e.id);
  EXPECT_EQ(got, expected);
}

TEST(Api, TwoSubscribersSeeEveryEvent) {
  ApiRig rig({camera("cam1", "http://cams.invalid/1.jpg")}, scripted_records("cam1", {1, 2, 3}));
  const auto start = rig.svc->log().last_seq();
  std::promise<std::uint64_t> target_p;
  auto target_f = target_p.get_future().share();
  auto done = [&](const std::vector<sse::Event>& evs) {
    if (evs.empty() || target_f.wait_for(0s) != std::future_status::ready) return false;
    return evs.back().id >= target_f.get();
  };
  const std::string path = "/api/events/stream?since=" + std::to_string(start);
  auto a = std::async(std::launch::async, [&] { return sse::read(rig.port, path, {}, done); });
  auto b = std::async(std::launch::async, [&] { return sse::read(rig.port, path, {}, done); });
  rig.ticks(4);
  target_p.set_value(rig.svc->log().last_seq());
  const auto ea = a.get(), eb = b.get();
  ASSERT_FALSE(ea.empty());
  ASSERT_EQ(ea.size(), eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) {
    EXPECT_EQ(ea[i].id, eb[i].id);
    EXPECT_EQ(ea[i].data, eb[i].data);
  }
}

TEST(Api, StreamRejectsBadCursor) {
  ApiRig rig;
  expect_error(rig.client().Get("/api/events/stream?since=abc"), 400, "bad_request");
}

TEST(Api, PortInUseIsBindError) {
  ApiRig rig;
  api::ApiOptions opts;
  opts.port = rig.port;
  api::ApiServer second(*rig.svc, opts);
  EXPECT_THROW(second.bind(), api::BindError);
}
