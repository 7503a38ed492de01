#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "smokewatch/codec.hpp"
#include "smokewatch/store.hpp"

using namespace smokewatch;
using namespace smokewatch::store;
using namespace std::chrono_literals;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("smokewatch-store-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

std::string read_file(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

// Appends to the log and folds into `live`, the way the service commits.
struct Writer {
  EventLog& log;
  ServiceState live;
  Timestamp at{Millis{1'700'000'000'000}};

  void commit(RecordKind kind, nlohmann::json payload) {
    at += 1s;
    const auto seq = log.append(at, kind, payload);
    const auto events = apply(live, LogRecord{seq, at, kind, std::move(payload)});
    for (const auto& ev : events) {
      at += 1ms;
      const auto s2 = log.append(at, RecordKind::kAlert, nlohmann::json(ev));
      apply(live, LogRecord{s2, at, RecordKind::kAlert, nlohmann::json(ev)});
    }
  }

  void camera(const std::string& id, double threshold = 0.3) {
    ingest::CameraConfig c;
    c.id = id;
    c.name = "Camera " + id;
    c.url = "http://cams.invalid/" + id + ".jpg";
    c.conf_threshold = threshold;
    c.masks = {{0.0, 0.0, 0.1, 0.1}};
    commit(RecordKind::kCameraConfig, camera_create_payload(c));
  }

  void frame(const std::string& cam, std::uint64_t seq, bool positive) {
    ingest::PollStatus ps = live.poll.at(cam);
    ps.last_seq = seq;
    ps.last_success = at;
    ps.next_attempt = at + 30s;
    commit(RecordKind::kPollStatus, nlohmann::json(ps));
    LatestFrame f;
    f.frame_seq = seq;
    f.at = at;
    f.width = 1280;
    f.height = 720;
    f.conf_threshold = live.cameras.at(cam).conf_threshold;
    if (positive) {
      f.detections.push_back({Detection{{100.25, 200.5, 300.125, 400}, 0, 0.8125}, "smoke"});
      f.detections.push_back({Detection{{500, 50, 560, 90}, 1, 0.3125}, "haze"});
    }
    commit(RecordKind::kDetection, detection_payload(cam, f));
  }

  void failure(const std::string& cam) {
    ingest::PollStatus ps = live.poll.at(cam);
    ps.state = ingest::PollState::kBackingOff;
    ps.consecutive_failures += 1;
    ps.last_failure = ingest::FailureKind::kHttpStatus;
    ps.last_error = "HTTP 404";
    ps.next_attempt = at + 60s;
    commit(RecordKind::kPollStatus, nlohmann::json(ps));
  }
};

// A log touching every record kind: cameras, polls, a raised, acknowledged and
// cleared alert, a second alert still active, and a threshold change.
ServiceState write_scenario(EventLog& log) {
  Writer w{log};
  w.commit(RecordKind::kCameraConfig, alarm_params_payload(alerting::AlarmParams{5, 3, 10, 120s}));
  w.camera("cam1");
  w.camera("cam2", 0.5);
  std::uint64_t s1 = 0, s2 = 0;
  for (int i = 0; i < 3; ++i) w.frame("cam1", ++s1, true);
  w.failure("cam2");
  w.frame("cam2", ++s2, false);
  const std::string first = w.live.alarms.at("cam1").active_alert_id.value();
  w.commit(RecordKind::kAck, ack_payload(first, "ana"));
  for (int i = 0; i < 10; ++i) w.frame("cam1", ++s1, false);
  auto cam2 = w.live.cameras.at("cam2");
  cam2.conf_threshold = 0.25;
  w.commit(RecordKind::kCameraConfig, camera_update_payload(cam2));
  for (int i = 0; i < 4; ++i) w.frame("cam2", ++s2, true);
  w.frame("cam1", ++s1, false);
  return w.live;
}

}  // namespace

TEST(LogLine, EncodeDecodeRoundTrip) {
  LogRecord rec{42, Timestamp{Millis{1'700'000'000'123}}, RecordKind::kAck, {{"alert_id", "cam1-1"}, {"operator", "o\tp"}}};
  const std::string line = encode_line(rec);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 4);
  EXPECT_EQ(line.rfind("42\t2023-11-14T22:13:20.123Z\tack\t", 0), 0u) << line;
  EXPECT_EQ(decode_line(line), rec);
}

TEST(LogLine, ChecksumDetectsTampering) {
  LogRecord rec{1, Timestamp{}, RecordKind::kAck, {{"alert_id", "cam1-1"}, {"operator", "ana"}}};
  std::string line = encode_line(rec);
  line[line.size() - 3] = 'X';
  EXPECT_THROW(decode_line(line), CorruptLine);
  EXPECT_THROW(decode_line("1\t2023-11-14T22:13:20.000Z\tack"), CorruptLine);
  EXPECT_THROW(decode_line(""), CorruptLine);
}

TEST(RecordKind, StringRoundTrip) {
  for (auto k : {RecordKind::kDetection, RecordKind::kAlert, RecordKind::kCameraConfig, RecordKind::kAck,
                 RecordKind::kPollStatus}) {
    EXPECT_EQ(record_kind_from_string(to_string(k)), k);
  }
  EXPECT_THROW(record_kind_from_string("frame"), std::invalid_argument);
}

TEST(EventLog, FirstAppendIsSeqOne) {
  TempDir d;
  EventLog log(d.file("events.log"));
  EXPECT_EQ(log.last_seq(), 0u);
  EXPECT_EQ(log.append(Timestamp{}, RecordKind::kAck, {{"a", 1}}), 1u);
}

TEST(EventLog, AppendsAreMonotone) {
  TempDir d;
  EventLog log(d.file("events.log"));
  EXPECT_EQ(log.append(Timestamp{}, RecordKind::kAck, {{"a", 1}}), 1u);
  EXPECT_EQ(log.append(Timestamp{}, RecordKind::kAck, {{"a", 2}}), 2u);
  EXPECT_EQ(log.last_seq(), 2u);
}

TEST(EventLog, ReopenContinuesNumbering) {
  TempDir d;
  {
    EventLog log(d.file("events.log"));
    log.append(Timestamp{}, RecordKind::kAck, {{"a", 1}});
    log.append(Timestamp{}, RecordKind::kAck, {{"a", 2}});
  }
  EventLog log(d.file("events.log"), false);
  EXPECT_EQ(log.last_seq(), 2u);
  EXPECT_EQ(log.append(Timestamp{}, RecordKind::kAck, {{"a", 3}}), 3u);
  const auto all = log.read_since(0);
  ASSERT_EQ(all.size(), 3u);
  EXPECT_EQ(all[2].payload["a"], 3);
}

TEST(EventLog, ReadSinceWithLimit) {
  TempDir d;
  EventLog log(d.file("events.log"), false);
  for (int i = 1; i <= 10; ++i) log.append(Timestamp{}, RecordKind::kAck, {{"i", i}});
  auto recs = log.read_since(4, 3);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].seq, 5u);
  EXPECT_EQ(recs[2].seq, 7u);
  EXPECT_TRUE(log.read_since(10).empty());
  EXPECT_TRUE(log.read_since(99).empty());
}

TEST(EventLog, WaitForWakesOnAppend) {
  TempDir d;
  EventLog log(d.file("events.log"), false);
  EXPECT_FALSE(log.wait_for(0, 20ms));
  std::thread t([&] {
    std::this_thread::sleep_for(30ms);
    log.append(Timestamp{}, RecordKind::kAck, {{"a", 1}});
  });
  EXPECT_TRUE(log.wait_for(0, 5s));
  t.join();
  EXPECT_TRUE(log.wait_for(0, 0ms));
}

TEST(Replay, EmptyLogIsEmptyState) {
  TempDir d;
  EventLog log(d.file("events.log"));
  EXPECT_EQ(replay(log.read_since(0)), ServiceState{});
  EXPECT_EQ(load_state(d.file("snapshot.json"), log), ServiceState{});
}

TEST(Replay, EqualsLiveState) {
  TempDir d;
  EventLog log(d.file("events.log"));
  const ServiceState live = write_scenario(log);
  // Sanity: the scenario exercised the interesting paths.
  ASSERT_EQ(live.alerts.size(), 2u);
  EXPECT_EQ(live.alerts.at("cam1-1").state, "cleared");
  EXPECT_EQ(live.alerts.at("cam1-1").acknowledged_by, "ana");
  EXPECT_EQ(live.alerts.at("cam2-1").state, "active");
  EXPECT_EQ(live.cameras.at("cam2").conf_threshold, 0.25);
  EXPECT_EQ(live.params.cooldown, 120s);

  EXPECT_EQ(replay(log.read_since(0)), live);
  EventLog reopened(d.file("events.log"));
  EXPECT_EQ(replay(reopened.read_since(0)), live);
  EXPECT_EQ(replay(scan_log(d.file("events.log")).records), live);
}

TEST(Replay, IsDeterministic) {
  TempDir d;
  EventLog log(d.file("events.log"));
  write_scenario(log);
  const auto recs = log.read_since(0);
  EXPECT_EQ(state_to_json(replay(recs)).dump(), state_to_json(replay(recs)).dump());
}

TEST(Replay, RejectsSeqGap) {
  TempDir d;
  EventLog log(d.file("events.log"));
  write_scenario(log);
  auto recs = log.read_since(0);
  recs.erase(recs.begin() + 4);
  try {
    replay(recs);
    FAIL();
  } catch (const IntegrityError& e) {
    EXPECT_EQ(e.seq(), 6u);
  }
}

TEST(Replay, EveryPrefixYieldsAValidState) {
  TempDir d;
  EventLog log(d.file("events.log"));
  write_scenario(log);
  const auto recs = log.read_since(0);
  for (std::size_t p = 0; p <= recs.size(); ++p) {
    const std::span<const LogRecord> prefix(recs.data(), p);
    ServiceState s;
    ASSERT_NO_THROW(s = replay(prefix)) << "prefix " << p;
    EXPECT_EQ(s.last_seq, p);
    for (const auto& [cam, alarm] : s.alarms) {
      const bool alarmed = alarm.phase == alerting::AlarmPhase::kActive ||
                           alarm.phase == alerting::AlarmPhase::kAcknowledged;
      EXPECT_EQ(alarmed, alarm.active_alert_id.has_value());
    }
  }
}

TEST(Replay, TornLastLineIsTruncated) {
  TempDir full_dir, short_dir;
  std::string full_bytes;
  std::uint64_t n = 0;
  {
    EventLog log(full_dir.file("events.log"));
    write_scenario(log);
    n = log.last_seq();
  }
  // The same log without its final record.
  const auto full_scan = scan_log(full_dir.file("events.log"));
  full_bytes = read_file(full_dir.file("events.log"));
  const std::string without_last = full_bytes.substr(0, full_scan.offsets.back());
  write_file(short_dir.file("events.log"), without_last);
  const ServiceState expected = replay(scan_log(short_dir.file("events.log")).records);

  for (std::size_t cut : {std::size_t{1}, std::size_t{7}, std::size_t{40}}) {
    write_file(full_dir.file("events.log"), full_bytes.substr(0, full_bytes.size() - cut));
    EventLog log(full_dir.file("events.log"));
    EXPECT_TRUE(log.recovered_torn_tail()) << cut;
    EXPECT_EQ(log.last_seq(), n - 1);
    EXPECT_EQ(replay(log.read_since(0)), expected);
    EXPECT_EQ(read_file(full_dir.file("events.log")), without_last);
    EXPECT_EQ(log.append(Timestamp{}, RecordKind::kAck, {{"alert_id", "x"}, {"operator", "y"}}), n);
  }
}

TEST(Replay, GarbageTailWithoutNewlineIsTruncated) {
  TempDir d;
  std::uint64_t n = 0;
  {
    EventLog log(d.file("events.log"));
    write_scenario(log);
    n = log.last_seq();
  }
  const auto intact = read_file(d.file("events.log"));
  write_file(d.file("events.log"), intact + "99\t2023-");
  EventLog log(d.file("events.log"));
  EXPECT_TRUE(log.recovered_torn_tail());
  EXPECT_EQ(log.last_seq(), n);
  EXPECT_EQ(read_file(d.file("events.log")), intact);
}

TEST(Replay, MidLogCorruptionNamesTheRecord) {
  TempDir d;
  {
    EventLog log(d.file("events.log"));
    write_scenario(log);
  }
  const auto scan = scan_log(d.file("events.log"));
  std::string bytes = read_file(d.file("events.log"));
  // Damage the payload of record 3.
  const auto line_end = bytes.find('\n', scan.offsets[2]);
  bytes[line_end - 2] = bytes[line_end - 2] == 'a' ? 'b' : 'a';
  write_file(d.file("events.log"), bytes);
  try {
    EventLog log(d.file("events.log"));
    FAIL() << "expected an integrity error";
  } catch (const IntegrityError& e) {
    EXPECT_EQ(e.seq(), 3u);
  }
  EXPECT_THROW(scan_log(d.file("events.log")), IntegrityError);
}

TEST(Replay, MissingMiddleRecordIsIntegrityError) {
  TempDir d;
  {
    EventLog log(d.file("events.log"));
    write_scenario(log);
  }
  const auto scan = scan_log(d.file("events.log"));
  std::string bytes = read_file(d.file("events.log"));
  bytes.erase(scan.offsets[4], scan.offsets[5] - scan.offsets[4]);
  write_file(d.file("events.log"), bytes);
  try {
    scan_log(d.file("events.log"));
    FAIL();
  } catch (const IntegrityError& e) {
    EXPECT_EQ(e.seq(), 6u);
  }
}

TEST(Snapshot, CompositionEqualsFullReplay) {
  TempDir d;
  EventLog log(d.file("events.log"));
  const ServiceState live = write_scenario(log);
  const auto recs = log.read_since(0);
  for (std::size_t k = 0; k <= recs.size(); ++k) {
    const ServiceState at_k = replay(std::span<const LogRecord>(recs.data(), k));
    write_snapshot(d.file("snapshot.json"), at_k);
    const auto loaded = read_snapshot(d.file("snapshot.json"));
    ASSERT_TRUE(loaded);
    EXPECT_EQ(*loaded, at_k) << k;
    EXPECT_EQ(replay(log.read_since(k), *loaded), live) << k;
    EXPECT_EQ(load_state(d.file("snapshot.json"), log), live) << k;
  }
}

TEST(Snapshot, StaleSnapshotWithFullTailStillEqual) {
  TempDir d;
  EventLog log(d.file("events.log"));
  const ServiceState live = write_scenario(log);
  const auto recs = log.read_since(0);
  const ServiceState early = replay(std::span<const LogRecord>(recs.data(), 5));
  write_snapshot(d.file("snapshot.json"), early);
  // Records at or below the snapshot seq are skipped.
  EXPECT_EQ(replay(recs, early), live);
  EXPECT_EQ(load_state(d.file("snapshot.json"), log), live);
}

TEST(Snapshot, NewerThanLogIsMismatch) {
  TempDir a, b;
  EventLog full(a.file("events.log"));
  const ServiceState live = write_scenario(full);
  write_snapshot(b.file("snapshot.json"), live);
  EventLog shorter(b.file("events.log"));
  shorter.append(Timestamp{}, RecordKind::kCameraConfig, alarm_params_payload({}));
  EXPECT_THROW(load_state(b.file("snapshot.json"), shorter), IntegrityError);
}

TEST(Snapshot, MissingFileIsNullopt) {
  TempDir d;
  EXPECT_FALSE(read_snapshot(d.file("snapshot.json")));
}

TEST(Snapshot, DocumentCarriesAsOfSeq) {
  TempDir d;
  EventLog log(d.file("events.log"));
  const ServiceState live = write_scenario(log);
  write_snapshot(d.file("snapshot.json"), live);
  const auto doc = nlohmann::json::parse(read_file(d.file("snapshot.json")));
  EXPECT_EQ(doc.at("as_of_seq").get<std::uint64_t>(), live.last_seq);
  EXPECT_TRUE(doc.at("state").contains("cameras"));
  EXPECT_FALSE(fs::exists(d.file("snapshot.json.tmp")));
}

TEST(Apply, RejectedRecordLeavesStateUntouched) {
  TempDir d;
  EventLog log(d.file("events.log"));
  ServiceState live = write_scenario(log);
  const ServiceState before = live;
  const LogRecord bad{live.last_seq + 1, Timestamp{}, RecordKind::kAck, ack_payload("cam9-1", "ana")};
  EXPECT_THROW(apply(live, bad), IntegrityError);
  EXPECT_EQ(live, before);
  const LogRecord dup{live.last_seq + 1, Timestamp{}, RecordKind::kAck, ack_payload("cam1-1", "ana")};
  EXPECT_THROW(apply(live, dup), IntegrityError);
  EXPECT_EQ(live, before);
}
