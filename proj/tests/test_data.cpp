#include <gtest/gtest.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "lcg/data.hpp"

namespace lcg {
namespace {

namespace fs = std::filesystem;

const fs::path kDesk = fs::path(LCG_DATA_DIR) / "mnist-desk";

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

std::vector<std::uint8_t> tiny_images() {
  IdxImages im;
  im.count = 2;
  im.rows = 2;
  im.cols = 3;
  im.pixels = {0, 1, 2, 3, 4, 5, 250, 251, 252, 253, 254, 255};
  return write_idx_images(im);
}

// ---------------------------------------------------------------------------
// IDX

TEST(Idx, HeaderIsBigEndian) {
  std::vector<std::uint8_t> bytes = {0x00, 0x00, 0x08, 0x03, 0x00, 0x00, 0xEA, 0x60,
                                     0x00, 0x00, 0x00, 0x1C, 0x00, 0x00, 0x00, 0x1C};
  bytes.resize(16 + std::size_t{60000} * 28 * 28, 0);
  const IdxImages im = parse_idx_images(bytes);
  EXPECT_EQ(im.count, 60000u);
  EXPECT_EQ(im.rows, 28u);
  EXPECT_EQ(im.cols, 28u);
}

TEST(Idx, WrongMagicNamesTheOffset) {
  const std::vector<std::uint8_t> labels = {0x00, 0x00, 0x08, 0x02, 0x00, 0x00, 0x00, 0x01, 0x07};
  const std::string msg = message_of([&] { parse_idx_labels(labels); });
  EXPECT_NE(msg.find("bad magic 0x00000802"), std::string::npos) << msg;
  EXPECT_NE(msg.find("byte offset 0"), std::string::npos) << msg;
  EXPECT_FALSE(message_of([] { parse_idx_images(write_idx_labels(std::vector<std::uint8_t>{1})); }).empty());
}

TEST(Idx, TruncationNamesTheOffset) {
  auto bytes = tiny_images();
  bytes.pop_back();
  EXPECT_NE(message_of([&] { parse_idx_images(bytes); }).find("byte offset 27"), std::string::npos);
  const std::vector<std::uint8_t> header_only = {0x00, 0x00, 0x08, 0x03, 0x00, 0x00};
  EXPECT_NE(message_of([&] { parse_idx_images(header_only); }).find("byte offset 4"), std::string::npos);
  auto labels = write_idx_labels(std::vector<std::uint8_t>{1, 2, 3});
  labels.pop_back();
  EXPECT_NE(message_of([&] { parse_idx_labels(labels); }).find("truncated"), std::string::npos);
  auto trailing = tiny_images();
  trailing.push_back(0);
  EXPECT_FALSE(message_of([&] { parse_idx_images(trailing); }).empty());
}

TEST(Idx, CountMismatchIsAFormatError) {
  const fs::path dir = fs::temp_directory_path() / "lcg_idx_mismatch";
  fs::create_directories(dir);
  const auto images = tiny_images();
  const auto labels = write_idx_labels(std::vector<std::uint8_t>{1, 2, 3});
  std::ofstream(dir / "im", std::ios::binary).write(reinterpret_cast<const char*>(images.data()), images.size());
  std::ofstream(dir / "lb", std::ios::binary).write(reinterpret_cast<const char*>(labels.data()), labels.size());
  EXPECT_THROW(load_idx(dir / "im", dir / "lb"), FormatError);
  EXPECT_THROW(load_idx(dir / "missing", dir / "lb"), FormatError);
  fs::remove_all(dir);
}

TEST(Idx, RoundTripIsByteExact) {
  const auto bytes = tiny_images();
  EXPECT_EQ(write_idx_images(parse_idx_images(bytes)), bytes);
  const auto images = read_file_bytes(kDesk / "t10k-images-idx3-ubyte");
  const auto labels = read_file_bytes(kDesk / "t10k-labels-idx1-ubyte");
  EXPECT_EQ(write_idx_images(parse_idx_images(images)), images);
  EXPECT_EQ(write_idx_labels(parse_idx_labels(labels)), labels);
}

// Values frozen from an independent struct-based parser of the shipped files.
TEST(Idx, DeskSubsetFrozenValues) {
  const RawImageDataset train = load_idx(kDesk / "train-images-idx3-ubyte", kDesk / "train-labels-idx1-ubyte");
  EXPECT_EQ(train.images.count, 5000u);
  EXPECT_EQ(train.images.rows, 28u);
  EXPECT_EQ(train.images.cols, 28u);
  EXPECT_EQ(std::vector<int>(train.labels.begin(), train.labels.begin() + 5), (std::vector<int>{0, 5, 5, 4, 9}));
  const auto first = train.images.image(0);
  EXPECT_EQ(std::accumulate(first.begin(), first.end(), 0), 44024);
  EXPECT_EQ(*std::max_element(first.begin(), first.end()), 255);
  EXPECT_EQ(first[350], 49);

  const RawImageDataset test = load_idx(kDesk / "t10k-images-idx3-ubyte", kDesk / "t10k-labels-idx1-ubyte");
  EXPECT_EQ(test.images.count, 1000u);
  EXPECT_EQ(std::vector<int>(test.labels.begin(), test.labels.begin() + 5), (std::vector<int>{3, 3, 9, 5, 2}));

  const Dataset d = to_dataset(train, 10, 100);
  EXPECT_EQ(d.size(), 100u);
  EXPECT_EQ(d.input_dim, 784);
  EXPECT_DOUBLE_EQ(d.examples[0].input(350), 49.0 / 255.0);
}

// ---------------------------------------------------------------------------
// soft clamping

TEST(SoftClamp, Examples) {
  const std::vector<std::uint8_t> px = {0, 255, 128};
  const Eigen::VectorXd q = soft_clamp(px);
  EXPECT_EQ(q(0), 0.0);
  EXPECT_EQ(q(1), 1.0);
  EXPECT_NEAR(q(2), 0.501961, 1e-6);
}

TEST(SoftClamp, BoundedAndMonotone) {
  std::vector<std::uint8_t> px(256);
  std::iota(px.begin(), px.end(), 0);
  const Eigen::VectorXd q = soft_clamp(px);
  EXPECT_GE(q.minCoeff(), 0.0);
  EXPECT_LE(q.maxCoeff(), 1.0);
  for (int i = 1; i < 256; ++i) EXPECT_GT(q(i), q(i - 1));
}

TEST(ToDataset, RejectsLabelsOutsideTheClassRange) {
  RawImageDataset raw;
  raw.images = parse_idx_images(tiny_images());
  raw.labels = {1, 4};
  EXPECT_THROW(to_dataset(raw, 3), FormatError);
  EXPECT_EQ(to_dataset(raw, 5).size(), 2u);
}

// ---------------------------------------------------------------------------
// splits

Dataset numbered(int n) {
  Dataset d{{}, 1, 2};
  for (int i = 0; i < n; ++i) d.examples.push_back({Eigen::VectorXd::Constant(1, i), i % 2});
  return d;
}

std::multiset<double> ids(const Dataset& d) {
  std::multiset<double> s;
  for (const auto& e : d.examples) s.insert(e.input(0));
  return s;
}

TEST(Split, SizesAndDisjointCover) {
  const auto [train, val] = split(numbered(10), 0.2, 3);
  EXPECT_EQ(train.size(), 8u);
  EXPECT_EQ(val.size(), 2u);
  auto all = ids(train);
  for (double v : ids(val)) {
    EXPECT_EQ(all.count(v), 0u);
    all.insert(v);
  }
  EXPECT_EQ(all, ids(numbered(10)));
}

TEST(Split, FractionZeroAndDeterminism) {
  EXPECT_TRUE(split(numbered(10), 0.0, 1).second.empty());
  const auto a = split(numbered(50), 0.3, 8);
  const auto b = split(numbered(50), 0.3, 8);
  const auto c = split(numbered(50), 0.3, 9);
  EXPECT_EQ(a.second.size(), 15u);
  for (std::size_t i = 0; i < a.second.size(); ++i) EXPECT_EQ(a.second.examples[i].input, b.second.examples[i].input);
  EXPECT_NE(ids(a.second), ids(c.second));
  EXPECT_THROW(split(numbered(5), 1.0, 1), DomainError);
}

// ---------------------------------------------------------------------------
// synthetic data

TEST(SynthBlobs, WellSeparatedBlobsAreCentroidSeparable) {
  const Dataset d = synth_blobs(4, 50, 2, 10.0, 1);
  ASSERT_EQ(d.size(), 200u);
  std::vector<Eigen::VectorXd> centroid(4, Eigen::VectorXd::Zero(2));
  for (const auto& e : d.examples) centroid[e.label] += e.input / 50.0;
  int wrong = 0;
  for (const auto& e : d.examples) {
    int best = 0;
    for (int k = 1; k < 4; ++k)
      if ((e.input - centroid[k]).norm() < (e.input - centroid[best]).norm()) best = k;
    wrong += best != e.label;
  }
  EXPECT_EQ(wrong, 0);
}

TEST(SynthBlobs, BoundedDeterministicAndEmpty) {
  const Dataset a = synth_blobs(3, 30, 5, 1.0, 2);
  const Dataset b = synth_blobs(3, 30, 5, 1.0, 2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.examples[i].input, b.examples[i].input);
    EXPECT_EQ(a.examples[i].label, b.examples[i].label);
    EXPECT_GE(a.examples[i].input.minCoeff(), 0.0);
    EXPECT_LE(a.examples[i].input.maxCoeff(), 1.0);
  }
  EXPECT_TRUE(synth_blobs(3, 0, 2, 1.0, 1).empty());
  EXPECT_THROW(synth_blobs(0, 5, 2, 1.0, 1), DomainError);
}

TEST(SynthSequences, LabelsAreThresholdedSums) {
  const Dataset d = synth_sequences(7, 300, 4);
  EXPECT_EQ(d.input_dim, 7);
  EXPECT_EQ(d.classes, 2);
  int ones = 0;
  for (const auto& e : d.examples) {
    EXPECT_GE(e.input.minCoeff(), 0.0);
    EXPECT_LE(e.input.maxCoeff(), 1.0);
    EXPECT_EQ(e.label, e.input.sum() > 3.5 ? 1 : 0);
    ones += e.label;
  }
  EXPECT_GT(ones, 100);
  EXPECT_LT(ones, 200);
  EXPECT_TRUE(synth_sequences(7, 0, 4).empty());
  EXPECT_EQ(synth_sequences(7, 5, 4).examples[3].input, d.examples[3].input);
}

}  // namespace
}  // namespace lcg
