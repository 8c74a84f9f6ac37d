#pragma once

// Small dense numeric kernel. Row-major storage, 64-bit floats throughout.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

#include "deqrb/errors.hpp"

namespace deqrb {

class Vec64 {
 public:
  Vec64() = default;
  explicit Vec64(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  Vec64(std::initializer_list<double> init) : data_(init) {}
  explicit Vec64(std::vector<double> data) : data_(std::move(data)) {}

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  bool all_finite() const;

  Vec64& operator+=(const Vec64& o);
  Vec64& operator-=(const Vec64& o);
  Vec64& operator*=(double s);

  friend bool operator==(const Vec64&, const Vec64&) = default;

 private:
  std::vector<double> data_;
};

Vec64 operator+(Vec64 a, const Vec64& b);
Vec64 operator-(Vec64 a, const Vec64& b);
Vec64 operator*(double s, Vec64 v);
Vec64 operator*(Vec64 v, double s);

class Mat64 {
 public:
  Mat64() = default;
  Mat64(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat64(std::size_t rows, std::size_t cols, std::vector<double> row_major);
  Mat64(std::initializer_list<std::initializer_list<double>> rows);

  static Mat64 identity(std::size_t n, double scale = 1.0);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool all_finite() const;

  Mat64& operator+=(const Mat64& o);
  Mat64& operator*=(double s);

  friend bool operator==(const Mat64&, const Mat64&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Mat64 operator*(double s, Mat64 m);
Mat64 transpose(const Mat64& a);

double dot(const Vec64& a, const Vec64& b);
double l2_norm(const Vec64& v);
double linf_norm(const Vec64& v);
/// Elementwise sign with sign(0) = 0.
Vec64 sign(const Vec64& v);
Vec64 clip_box(const Vec64& v, double lo, double hi);
Vec64 hadamard(const Vec64& a, const Vec64& b);

Vec64 matvec(const Mat64& a, const Vec64& v);
/// aᵀ·v without materializing the transpose.
Vec64 matvec_t(const Mat64& a, const Vec64& v);
Mat64 matmul(const Mat64& a, const Mat64& b);
Mat64 outer(const Vec64& col, const Vec64& row);

/// B + scale·col·rowᵀ.
Mat64 rank1_update(const Mat64& b, const Vec64& col, const Vec64& row, double scale);
/// In-place variant used on hot paths.
void rank1_update_inplace(Mat64& b, const Vec64& col, const Vec64& row, double scale);

/// Seeded 64-bit generator. Draws are produced from raw engine bits so the
/// stream is identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal (Box-Muller, no cached second draw).
  double normal();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  /// +1 or -1 with equal probability.
  double rademacher() { return (next_u64() >> 63) ? 1.0 : -1.0; }

  /// Independent child stream keyed on (construction seed, key). Does not
  /// advance this generator.
  Rng fork(std::uint64_t key) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

Vec64 random_uniform(std::size_t n, double lo, double hi, Rng& rng);
Vec64 random_normal(std::size_t n, Rng& rng);
Mat64 random_uniform(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng);

using LinearMap = std::function<Vec64(const Vec64&)>;

/// Magnitude of the Rayleigh quotient after `iters` power steps from a random
/// unit start. For nonsymmetric maps this is an estimate of the spectral
/// radius, not an exact value.
double power_iteration(const LinearMap& apply, std::size_t dim, std::size_t iters, Rng& rng);

}  // namespace deqrb
