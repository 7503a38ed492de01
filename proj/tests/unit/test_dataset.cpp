#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "smokewatch/dataset.hpp"

namespace smokewatch::dataset {
namespace {

namespace fs = std::filesystem;

Image random_image(std::mt19937_64& rng, int w, int h) {
  Image img(w, h);
  std::uniform_int_distribution<int> px(0, 255);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(px(rng));
  return img;
}

DatasetManifest make_manifest(std::size_t n) {
  DatasetManifest m;
  m.class_names = {"smoke"};
  for (std::size_t i = 0; i < n; ++i) {
    m.samples.push_back({"s" + std::to_string(i), "images/s" + std::to_string(i) + ".jpg", 640, 480,
                         {{0, 0.3, 0.4, 0.2, 0.1}}});
  }
  return m;
}

TEST(LabelFile, ParsesSingleBox) {
  const auto boxes = parse_label_file("0 0.5 0.5 0.2 0.1");
  ASSERT_EQ(boxes.size(), 1u);
  EXPECT_EQ(boxes[0], (YoloBox{0, 0.5, 0.5, 0.2, 0.1}));
}

TEST(LabelFile, EmptyAndBlankLines) {
  EXPECT_TRUE(parse_label_file("").empty());
  EXPECT_EQ(parse_label_file("\n  \n0 0.5 0.5 0.2 0.1\n\n").size(), 1u);
}

TEST(LabelFile, ArityErrorNamesLine) {
  try {
    parse_label_file("0 0.5 0.5");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
  try {
    parse_label_file("0 0.5 0.5 0.1 0.1\n\n1 0.5 abc 0.1 0.1\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(LabelFile, OutOfRangeRejectedButEpsilonSnapped) {
  EXPECT_THROW(parse_label_file("0 0.5 0.5 1.5 0.1"), ParseError);
  EXPECT_THROW(parse_label_file("0 0.05 0.5 0.2 0.1"), ParseError);
  EXPECT_THROW(parse_label_file("-1 0.5 0.5 0.2 0.1"), ParseError);
  const auto b = parse_label_file("0 0.5 0.5 1.0000005 0.1");
  EXPECT_DOUBLE_EQ(b.at(0).w, 1.0);
}

TEST(LabelFile, PrintParseRoundTrip) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<YoloBox> boxes;
  for (int i = 0; i < 200; ++i) {
    const double cx = u(rng), cy = u(rng);
    boxes.push_back({i % 3, cx, cy, 0.9 * 2 * std::min(cx, 1 - cx) * 0.5, 0.9 * 2 * std::min(cy, 1 - cy) * 0.5});
  }
  const auto back = parse_label_file(format_label_file(boxes));
  ASSERT_EQ(back.size(), boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    EXPECT_EQ(back[i].class_id, boxes[i].class_id);
    EXPECT_NEAR(back[i].cx, boxes[i].cx, 1e-6);
    EXPECT_NEAR(back[i].h, boxes[i].h, 1e-6);
  }
}

TEST(Mirror, BoxAndPixels) {
  Image img(3, 1);
  const std::uint8_t row[] = {10, 10, 10, 20, 20, 20, 30, 30, 30};
  std::copy(std::begin(row), std::end(row), img.pixels.begin());
  SampleLabel label{"a", "a.png", 3, 1, {{0, 0.3, 0.5, 0.2, 0.5}}};
  auto [mi, ml] = mirror_sample(img, label);
  EXPECT_EQ(mi.at(0, 0)[0], 30);
  EXPECT_EQ(mi.at(1, 0)[1], 20);
  EXPECT_EQ(mi.at(2, 0)[2], 10);
  EXPECT_NEAR(ml.boxes[0].cx, 0.7, 1e-15);
  EXPECT_EQ(ml.boxes[0].w, 0.2);
}

TEST(Mirror, Involution) {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 20; ++i) {
    const Image img = random_image(rng, 1 + i * 3, 2 + i);
    SampleLabel label{"x", "x.png", img.width, img.height, {{0, 0.123456789, 0.5, 0.2, 0.3}}};
    auto [m1, l1] = mirror_sample(img, label);
    auto [m2, l2] = mirror_sample(m1, l1);
    EXPECT_EQ(m2, img);
    EXPECT_NEAR(l2.boxes[0].cx, label.boxes[0].cx, 1e-12);
  }
}

TEST(Exposure, ArithmeticAndClamp) {
  Image img(3, 1);
  img.pixels = {100, 240, 0, 10, 255, 1, 50, 60, 70};
  const Image up = adjust_exposure(img, 0.15);
  EXPECT_EQ(up.pixels[0], 115);
  EXPECT_EQ(up.pixels[1], 255);
  EXPECT_EQ(up.pixels[3], 12);  // 11.5 rounds half up
  EXPECT_EQ(adjust_exposure(img, 0.0), img);
  const Image down = adjust_exposure(img, -0.15);
  EXPECT_EQ(down.pixels[0], 85);
  EXPECT_EQ(down.pixels[4], 217);  // 216.75
}

TEST(Exposure, RejectsWideGain) {
  Image img(1, 1);
  EXPECT_THROW(adjust_exposure(img, 0.2), ValidationError);
  EXPECT_THROW(adjust_exposure(img, -0.1500001), ValidationError);
}

TEST(Exposure, MonotoneAndBounded) {
  std::mt19937_64 rng(4);
  const Image img = random_image(rng, 32, 32);
  for (double g : {-0.15, -0.05, 0.0, 0.07, 0.15}) {
    const Image out = adjust_exposure(img, g);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      if (g >= 0) EXPECT_GE(out.pixels[i], img.pixels[i]);
      if (g <= 0) EXPECT_LE(out.pixels[i], img.pixels[i]);
    }
  }
}

TEST(Augment, Multiplicity) {
  EXPECT_EQ(augment_dataset(make_manifest(1520), {true, {}}).samples.size(), 3040u);
  EXPECT_EQ(augment_dataset(make_manifest(10), {true, {-0.15, 0.15}}).samples.size(), 40u);
  EXPECT_TRUE(augment_dataset(make_manifest(0), {true, {0.1}}).samples.empty());
}

TEST(Augment, DerivedIdsAndSplitInheritance) {
  DatasetManifest m = make_manifest(2);
  m.split_of["s0"] = Split::kVal;
  const auto out = augment_dataset(m, {true, {-0.15, 0.15}});
  ASSERT_NE(out.find("s0#mirror"), nullptr);
  ASSERT_NE(out.find("s0#exp+0.15"), nullptr);
  ASSERT_NE(out.find("s1#exp-0.15"), nullptr);
  EXPECT_EQ(out.split_of.at("s0#mirror"), Split::kVal);
  EXPECT_EQ(out.split_of.at("s0#exp-0.15"), Split::kVal);
  EXPECT_EQ(out.split_of.count("s1#mirror"), 0u);
  EXPECT_NEAR(out.find("s0#mirror")->boxes[0].cx, 0.7, 1e-12);
  EXPECT_EQ(out.find("s0#exp+0.15")->boxes, m.samples[0].boxes);
  EXPECT_EQ(out.find("s0#mirror")->image_path, "images/s0__mirror.png");
}

TEST(Augment, IdCollisionAndBadGain) {
  DatasetManifest m = make_manifest(1);
  m.samples.push_back(m.samples[0]);
  m.samples[1].image_id = "s0#mirror";
  EXPECT_THROW(augment_dataset(m, {true, {}}), ValidationError);
  EXPECT_THROW(augment_dataset(make_manifest(1), {false, {0.2}}), ValidationError);
  EXPECT_THROW(augment_dataset(make_manifest(1), {false, {0.1, 0.1}}), ValidationError);
}

TEST(Split, ReferenceSizesAndDeterminism) {
  const auto m = make_manifest(2712);
  const auto a = split_dataset(m, {2405, 228, 79}, 42);
  const auto counts = a.split_counts();
  EXPECT_EQ(counts[0], 2405u);
  EXPECT_EQ(counts[1], 228u);
  EXPECT_EQ(counts[2], 79u);
  EXPECT_EQ(a.split_of, split_dataset(m, {2405, 228, 79}, 42).split_of);
  EXPECT_NE(a.split_of, split_dataset(m, {2405, 228, 79}, 43).split_of);
}

TEST(Split, CountMismatch) {
  try {
    split_dataset(make_manifest(2), {1, 0, 0}, 1);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("sum to 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("2 samples"), std::string::npos);
  }
}

TEST(Split, GroupsStayTogether) {
  const auto aug = augment_dataset(make_manifest(50), {true, {0.1}});
  const auto s = split_dataset(aug, {90, 30, 30}, 7);
  EXPECT_EQ(s.split_of.size(), 150u);
  for (const auto& sample : aug.samples) {
    EXPECT_EQ(s.split_of.at(sample.image_id), s.split_of.at(std::string(source_id_of(sample.image_id))));
  }
}

TEST(Split, IndependentOfInputOrder) {
  auto m = make_manifest(100);
  const auto a = split_dataset(m, {80, 10, 10}, 5);
  std::reverse(m.samples.begin(), m.samples.end());
  EXPECT_EQ(a.split_of, split_dataset(m, {80, 10, 10}, 5).split_of);
}

TEST(TrainingPlan, IterationsPerEpoch) {
  EXPECT_EQ(iterations_per_epoch(1000, 32), 32u);
  EXPECT_EQ(iterations_per_epoch(1024, 32), 32u);
  EXPECT_EQ(iterations_per_epoch(1, 1), 1u);
  EXPECT_THROW(iterations_per_epoch(10, 0), ValidationError);
}

TEST(Manifest, SaveLoadRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "smokewatch_manifest_test";
  fs::remove_all(dir);
  auto m = split_dataset(make_manifest(6), {4, 1, 1}, 3);
  m.samples[2].boxes.clear();
  save_manifest((dir / "manifest.json").string(), m);
  EXPECT_TRUE(fs::exists(dir / "images" / "s0.txt"));
  EXPECT_EQ(load_manifest((dir / "manifest.json").string()), m);
  fs::remove_all(dir);
}

TEST(Manifest, MalformedLabelReportsFileAndLine) {
  const fs::path dir = fs::temp_directory_path() / "smokewatch_manifest_bad";
  fs::remove_all(dir);
  save_manifest((dir / "m.json").string(), make_manifest(1));
  std::ofstream(dir / "images" / "s0.txt") << "0 0.5 0.5 0.1 0.1\n0 0.5\n";
  try {
    load_manifest((dir / "m.json").string());
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("s0.txt"), std::string::npos);
  }
  fs::remove_all(dir);
}

}  // namespace
}  // namespace smokewatch::dataset
