#pragma once

// Datasets: MNIST-family IDX files, soft-clamped inputs, deterministic
// splits and small synthetic fixtures.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lcg/error.hpp"
#include "lcg/rng.hpp"

namespace lcg {

struct Example {
  Eigen::VectorXd input;  ///< expected features of the input layer
  int label = 0;
};

struct Dataset {
  std::vector<Example> examples;
  int input_dim = 0;
  int classes = 0;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
};

// ---------------------------------------------------------------------------
// IDX

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxImages {
  std::uint32_t count = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;  ///< count * rows * cols, row-major per image

  std::span<const std::uint8_t> image(std::size_t k) const {
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    return std::span<const std::uint8_t>(pixels).subspan(k * n, n);
  }
};

struct RawImageDataset {
  IdxImages images;
  std::vector<std::uint8_t> labels;
};

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset, const std::string& what) {
  if (offset + 4 > bytes.size())
    throw FormatError(what + ": truncated header at byte offset " + std::to_string(offset));
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline std::string hex32(std::uint32_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s = "0x";
  for (int shift = 28; shift >= 0; shift -= 4) s += digits[(v >> shift) & 0xF];
  return s;
}

}  // namespace detail

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline IdxImages parse_idx_images(std::span<const std::uint8_t> bytes, const std::string& what = "idx images") {
  const std::uint32_t magic = detail::read_be32(bytes, 0, what);
  if (magic != kIdxImageMagic)
    throw FormatError(what + ": bad magic " + detail::hex32(magic) + " at byte offset 0, expected " +
                      detail::hex32(kIdxImageMagic));
  IdxImages out;
  out.count = detail::read_be32(bytes, 4, what);
  out.rows = detail::read_be32(bytes, 8, what);
  out.cols = detail::read_be32(bytes, 12, what);
  const std::size_t need = std::size_t{out.count} * out.rows * out.cols;
  if (bytes.size() - 16 < need)
    throw FormatError(what + ": truncated pixel data at byte offset " + std::to_string(bytes.size()) + ", expected " +
                      std::to_string(16 + need) + " bytes");
  if (bytes.size() - 16 > need)
    throw FormatError(what + ": trailing bytes after offset " + std::to_string(16 + need));
  out.pixels.assign(bytes.begin() + 16, bytes.end());
  return out;
}

inline std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes,
                                                  const std::string& what = "idx labels") {
  const std::uint32_t magic = detail::read_be32(bytes, 0, what);
  if (magic != kIdxLabelMagic)
    throw FormatError(what + ": bad magic " + detail::hex32(magic) + " at byte offset 0, expected " +
                      detail::hex32(kIdxLabelMagic));
  const std::uint32_t count = detail::read_be32(bytes, 4, what);
  if (bytes.size() - 8 < count)
    throw FormatError(what + ": truncated label data at byte offset " + std::to_string(bytes.size()) + ", expected " +
                      std::to_string(8 + std::size_t{count}) + " bytes");
  if (bytes.size() - 8 > count) throw FormatError(what + ": trailing bytes after offset " + std::to_string(8 + count));
  return {bytes.begin() + 8, bytes.end()};
}

inline std::vector<std::uint8_t> write_idx_images(const IdxImages& images) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + images.pixels.size());
  detail::write_be32(out, kIdxImageMagic);
  detail::write_be32(out, images.count);
  detail::write_be32(out, images.rows);
  detail::write_be32(out, images.cols);
  out.insert(out.end(), images.pixels.begin(), images.pixels.end());
  return out;
}

inline std::vector<std::uint8_t> write_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + labels.size());
  detail::write_be32(out, kIdxLabelMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

/// Parses a big-endian IDX image file and its matching label file.
inline RawImageDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  RawImageDataset raw;
  raw.images = parse_idx_images(read_file_bytes(images_path), images_path.string());
  raw.labels = parse_idx_labels(read_file_bytes(labels_path), labels_path.string());
  if (raw.labels.size() != raw.images.count)
    throw FormatError(labels_path.string() + ": label count " + std::to_string(raw.labels.size()) +
                      " does not match image count " + std::to_string(raw.images.count) + " (byte offset 4)");
  return raw;
}

/// Pixel intensity as the expected feature of a {0,1} binary input node.
inline Eigen::VectorXd soft_clamp(std::span<const std::uint8_t> pixels) {
  Eigen::VectorXd q(static_cast<Eigen::Index>(pixels.size()));
  for (std::size_t i = 0; i < pixels.size(); ++i) q(static_cast<Eigen::Index>(i)) = pixels[i] / 255.0;
  return q;
}

/// Soft-clamped dataset from the first `limit` images (all when limit < 0).
inline Dataset to_dataset(const RawImageDataset& raw, int classes = 10, long limit = -1) {
  Dataset out;
  out.input_dim = static_cast<int>(raw.images.rows * raw.images.cols);
  out.classes = classes;
  const std::size_t n = limit < 0 ? raw.labels.size() : std::min<std::size_t>(raw.labels.size(), static_cast<std::size_t>(limit));
  out.examples.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    if (raw.labels[k] >= classes) throw FormatError("label " + std::to_string(raw.labels[k]) + " >= class count");
    out.examples.push_back({soft_clamp(raw.images.image(k)), raw.labels[k]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// splits and synthetic data

/// Seeded permutation; the validation part takes floor(n * val_fraction) examples.
inline std::pair<Dataset, Dataset> split(const Dataset& data, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw DomainError("validation fraction must lie in [0, 1)");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::stream(seed, 0, 0, StreamTag::Split);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(data.size()) * val_fraction));
  Dataset train{{}, data.input_dim, data.classes};
  Dataset val{{}, data.input_dim, data.classes};
  for (std::size_t k = 0; k < order.size(); ++k)
    (k < n_val ? val : train).examples.push_back(data.examples[order[k]]);
  return {std::move(train), std::move(val)};
}

/// Gaussian blobs in [0,1]^dim. Centres are uniform in [0.15, 0.85]^dim; the
/// noise standard deviation is (closest centre distance) / (2 * separation).
inline Dataset synth_blobs(int classes, int per_class, int dim, double separation, std::uint64_t seed) {
  if (classes < 1 || per_class < 0 || dim < 1 || !(separation > 0.0)) throw DomainError("invalid blob parameters");
  Rng rng = Rng::stream(seed, 0, 0, StreamTag::Data);
  std::uniform_real_distribution<double> centre_dist(0.15, 0.85);
  std::vector<Eigen::VectorXd> centres(static_cast<std::size_t>(classes), Eigen::VectorXd(dim));
  for (auto& c : centres)
    for (int i = 0; i < dim; ++i) c(i) = centre_dist(rng);
  double closest = 1.0;
  for (std::size_t a = 0; a < centres.size(); ++a)
    for (std::size_t b = a + 1; b < centres.size(); ++b) closest = std::min(closest, (centres[a] - centres[b]).norm());
  std::normal_distribution<double> noise(0.0, closest / (2.0 * separation));

  Dataset out{{}, dim, classes};
  for (int n = 0; n < per_class; ++n) {
    for (int k = 0; k < classes; ++k) {
      Eigen::VectorXd x(dim);
      for (int i = 0; i < dim; ++i) x(i) = std::clamp(centres[static_cast<std::size_t>(k)](i) + noise(rng), 0.0, 1.0);
      out.examples.push_back({std::move(x), k});
    }
  }
  return out;
}

/// Sequences of `length` uniform [0,1] scalars labelled 1 iff their sum exceeds length / 2.
inline Dataset synth_sequences(int length, int n, std::uint64_t seed) {
  if (length < 1 || n < 0) throw DomainError("invalid sequence parameters");
  Rng rng = Rng::stream(seed, 1, 0, StreamTag::Data);
  Dataset out{{}, length, 2};
  for (int k = 0; k < n; ++k) {
    Eigen::VectorXd x(length);
    for (int t = 0; t < length; ++t) x(t) = rng.uniform();
    out.examples.push_back({x, x.sum() > 0.5 * length ? 1 : 0});
  }
  return out;
}

}  // namespace lcg
