#include "deqrb/dataset.hpp"

#include <algorithm>
#include <array>
#include <iterator>
#include <limits>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

namespace deqrb {

ExampleSet Dataset::subset(const std::vector<std::size_t>& indices) const {
  ExampleSet out;
  out.inputs.reserve(indices.size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    require(i < inputs.size(), "Dataset::subset: index out of range");
    out.inputs.push_back(inputs[i]);
    out.labels.push_back(labels[i]);
  }
  return out;
}

void Dataset::validate() const {
  require(inputs.size() == labels.size(), "Dataset: inputs and labels differ in length");
  const std::size_t l = input_dim();
  for (const Vec64& x : inputs) {
    require(x.size() == l, "Dataset: ragged inputs");
    for (double v : x) require(v >= 0.0 && v <= 1.0, "Dataset: input outside [0, 1]");
  }
  for (std::size_t y : labels) require(y < num_classes, "Dataset: label out of range");
  std::vector<int> seen(inputs.size(), 0);
  for (const auto* part : {&splits.train, &splits.dev, &splits.test}) {
    for (std::size_t i : *part) {
      require(i < seen.size(), "Dataset: split index out of range");
      require(seen[i]++ == 0, "Dataset: splits overlap");
    }
  }
  for (int s : seen) require(s == 1, "Dataset: splits do not cover every example");
}

std::string to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::Blobs: return "blobs";
    case SyntheticKind::Moons: return "moons";
    case SyntheticKind::Rings: return "rings";
  }
  return "?";
}

SyntheticKind synthetic_kind_from_string(const std::string& s) {
  if (s == "blobs") return SyntheticKind::Blobs;
  if (s == "moons") return SyntheticKind::Moons;
  if (s == "rings") return SyntheticKind::Rings;
  throw FormatError("unknown synthetic dataset kind '" + s + "'");
}

Splits make_splits(std::size_t n, std::uint64_t seed, const SplitFractions& fractions) {
  require(fractions.test >= 0.0 && fractions.test < 1.0, "make_splits: test fraction must lie in [0, 1)");
  require(fractions.dev >= 0.0 && fractions.dev < 1.0, "make_splits: dev fraction must lie in [0, 1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(seed).fork(0x5b117);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);

  const auto n_test = static_cast<std::size_t>(std::llround(fractions.test * static_cast<double>(n)));
  const auto n_dev = static_cast<std::size_t>(std::llround(fractions.dev * static_cast<double>(n - n_test)));
  Splits s;
  s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.dev.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
               order.begin() + static_cast<std::ptrdiff_t>(n_test + n_dev));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test + n_dev), order.end());
  for (auto* part : {&s.train, &s.dev, &s.test}) std::sort(part->begin(), part->end());
  return s;
}

namespace {

// Rows of a random orthogonal matrix via Gram-Schmidt on Gaussian rows.
std::vector<Vec64> random_rotation(std::size_t l, Rng& rng) {
  std::vector<Vec64> rows;
  while (rows.size() < l) {
    Vec64 v = random_normal(l, rng);
    for (const Vec64& r : rows) v -= dot(v, r) * r;
    const double norm = l2_norm(v);
    if (norm < 1e-8) continue;
    rows.push_back((1.0 / norm) * v);
  }
  return rows;
}

}  // namespace

Dataset gen_synthetic(SyntheticKind kind, std::size_t n, double noise, std::size_t l, std::uint64_t seed,
                      const SplitFractions& fractions) {
  require(n >= 10, "gen_synthetic: n must be >= 10");
  require(l >= 2, "gen_synthetic: l must be >= 2");
  require(std::isfinite(noise) && noise >= 0.0, "gen_synthetic: noise must be >= 0");
  Rng rng = Rng(seed).fork(0xda7a);
  constexpr double pi = std::numbers::pi;

  Dataset ds;
  ds.num_classes = 2;
  std::vector<std::array<double, 2>> pts;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = i < n / 2 ? 0 : 1;
    double px = 0.0, py = 0.0;
    switch (kind) {
      case SyntheticKind::Blobs:
        px = y == 0 ? -1.0 : 1.0;
        py = y == 0 ? -1.0 : 1.0;
        break;
      case SyntheticKind::Moons: {
        const double t = pi * rng.uniform();
        px = y == 0 ? std::cos(t) : 1.0 - std::cos(t);
        py = y == 0 ? std::sin(t) : 0.5 - std::sin(t);
        break;
      }
      case SyntheticKind::Rings: {
        const double t = 2.0 * pi * rng.uniform();
        const double r = y == 0 ? 1.0 : 0.5;
        px = r * std::cos(t);
        py = r * std::sin(t);
        break;
      }
    }
    if (noise > 0.0) {
      px += noise * rng.normal();
      py += noise * rng.normal();
    }
    pts.push_back({px, py});
    ds.labels.push_back(y);
  }

  const std::vector<Vec64> rot = random_rotation(l, rng);
  for (const auto& pt : pts) {
    Vec64 x(l);
    for (std::size_t j = 0; j < l; ++j) x[j] = rot[j][0] * pt[0] + rot[j][1] * pt[1];
    ds.inputs.push_back(std::move(x));
  }

  // One common scale for all coordinates so distances keep their ratios.
  Vec64 lo(l, std::numeric_limits<double>::infinity());
  Vec64 hi(l, -std::numeric_limits<double>::infinity());
  for (const Vec64& x : ds.inputs) {
    for (std::size_t j = 0; j < l; ++j) {
      lo[j] = std::min(lo[j], x[j]);
      hi[j] = std::max(hi[j], x[j]);
    }
  }
  double range = 0.0;
  for (std::size_t j = 0; j < l; ++j) range = std::max(range, hi[j] - lo[j]);
  const double scale = range > 0.0 ? 1.0 / range : 0.0;
  for (Vec64& x : ds.inputs) {
    for (std::size_t j = 0; j < l; ++j) {
      const double mid = 0.5 * (lo[j] + hi[j]);
      x[j] = std::clamp(0.5 + scale * (x[j] - mid), 0.0, 1.0);
    }
  }

  ds.splits = make_splits(n, seed, fractions);
  return ds;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t at, const std::string& path) {
  if (buf.size() < at + 4) throw FormatError("truncated IDX header in '" + path + "'");
  return (std::uint32_t{buf[at]} << 24) | (std::uint32_t{buf[at + 1]} << 16) | (std::uint32_t{buf[at + 2]} << 8) |
         std::uint32_t{buf[at + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t limit,
                 std::uint64_t seed, const SplitFractions& fractions) {
  require(limit >= 1, "load_idx: limit = 0 yields an empty dataset");
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (read_be32(img, 0, images_path) != kImageMagic) throw FormatError("bad IDX image magic in '" + images_path + "'");
  if (read_be32(lab, 0, labels_path) != kLabelMagic) throw FormatError("bad IDX label magic in '" + labels_path + "'");
  const std::size_t count = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t label_count = read_be32(lab, 4, labels_path);
  if (count != label_count) {
    throw FormatError("IDX count mismatch: " + std::to_string(count) + " images vs " + std::to_string(label_count) +
                      " labels");
  }
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + count * pixels) throw FormatError("truncated IDX image data in '" + images_path + "'");
  if (lab.size() < 8 + count) throw FormatError("truncated IDX label data in '" + labels_path + "'");
  if (count == 0 || pixels == 0) throw FormatError("IDX files hold no examples");

  const std::size_t keep = std::min(limit, count);
  Dataset ds;
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < keep; ++i) {
    Vec64 x(pixels);
    for (std::size_t j = 0; j < pixels; ++j) x[j] = static_cast<double>(img[16 + i * pixels + j]) / 255.0;
    ds.inputs.push_back(std::move(x));
    ds.labels.push_back(lab[8 + i]);
    max_label = std::max<std::size_t>(max_label, lab[8 + i]);
  }
  ds.num_classes = std::max<std::size_t>(2, max_label + 1);
  ds.splits = make_splits(keep, seed, fractions);
  return ds;
}

void write_idx(const std::string& images_path, const std::string& labels_path,
               const std::vector<std::vector<std::uint8_t>>& images, std::size_t rows, std::size_t cols,
               const std::vector<std::uint8_t>& labels) {
  require(images.size() == labels.size(), "write_idx: images and labels differ in count");
  for (const auto& im : images) require(im.size() == rows * cols, "write_idx: image size does not match rows*cols");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw FormatError("write_idx: cannot open output files");
  write_be32(img, kImageMagic);
  write_be32(img, static_cast<std::uint32_t>(images.size()));
  write_be32(img, static_cast<std::uint32_t>(rows));
  write_be32(img, static_cast<std::uint32_t>(cols));
  for (const auto& im : images) img.write(reinterpret_cast<const char*>(im.data()), static_cast<std::streamsize>(im.size()));
  write_be32(lab, kLabelMagic);
  write_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

}  // namespace deqrb
