#include "deqrb/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace deqrb {

namespace {

void require_same_size(const Vec64& a, const Vec64& b, const char* op) {
  if (a.size() != b.size()) {
    throw ContractViolation(std::string(op) + ": dimension mismatch (" + std::to_string(a.size()) +
                            " vs " + std::to_string(b.size()) + ")");
  }
}

}  // namespace

bool Vec64::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Vec64& Vec64::operator+=(const Vec64& o) {
  require_same_size(*this, o, "Vec64::operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Vec64& Vec64::operator-=(const Vec64& o) {
  require_same_size(*this, o, "Vec64::operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  return *this;
}

Vec64& Vec64::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Vec64 operator+(Vec64 a, const Vec64& b) { return a += b; }
Vec64 operator-(Vec64 a, const Vec64& b) { return a -= b; }
Vec64 operator*(double s, Vec64 v) { return v *= s; }
Vec64 operator*(Vec64 v, double s) { return v *= s; }

Mat64::Mat64(std::size_t rows, std::size_t cols, std::vector<double> row_major)
    : rows_(rows), cols_(cols), data_(std::move(row_major)) {
  require(data_.size() == rows_ * cols_, "Mat64: data length does not match rows*cols");
}

Mat64::Mat64(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    require(r.size() == cols_, "Mat64: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Mat64 Mat64::identity(std::size_t n, double scale) {
  Mat64 m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = scale;
  return m;
}

bool Mat64::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Mat64& Mat64::operator+=(const Mat64& o) {
  require(rows_ == o.rows_ && cols_ == o.cols_, "Mat64::operator+=: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Mat64& Mat64::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Mat64 operator*(double s, Mat64 m) { return m *= s; }

Mat64 transpose(const Mat64& a) {
  Mat64 t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

double dot(const Vec64& a, const Vec64& b) {
  require_same_size(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(const Vec64& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double linf_norm(const Vec64& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

Vec64 sign(const Vec64& v) {
  Vec64 out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? 1.0 : (v[i] < 0.0 ? -1.0 : 0.0);
  return out;
}

Vec64 clip_box(const Vec64& v, double lo, double hi) {
  Vec64 out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::clamp(v[i], lo, hi);
  return out;
}

Vec64 hadamard(const Vec64& a, const Vec64& b) {
  require_same_size(a, b, "hadamard");
  Vec64 out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

Vec64 matvec(const Mat64& a, const Vec64& v) {
  if (a.cols() != v.size()) {
    throw ContractViolation("matvec: matrix has " + std::to_string(a.cols()) +
                            " columns but vector has length " + std::to_string(v.size()));
  }
  Vec64 out(a.rows());
  const auto data = a.span();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* row = data.data() + r * a.cols();
    double s = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) s += row[c] * v[c];
    out[r] = s;
  }
  return out;
}

Vec64 matvec_t(const Mat64& a, const Vec64& v) {
  if (a.rows() != v.size()) {
    throw ContractViolation("matvec_t: matrix has " + std::to_string(a.rows()) +
                            " rows but vector has length " + std::to_string(v.size()));
  }
  Vec64 out(a.cols());
  const auto data = a.span();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* row = data.data() + r * a.cols();
    const double vr = v[r];
    if (vr == 0.0) continue;
    for (std::size_t c = 0; c < a.cols(); ++c) out[c] += row[c] * vr;
  }
  return out;
}

Mat64 matmul(const Mat64& a, const Mat64& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  Mat64 out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

Mat64 outer(const Vec64& col, const Vec64& row) {
  Mat64 out(col.size(), row.size());
  for (std::size_t i = 0; i < col.size(); ++i)
    for (std::size_t j = 0; j < row.size(); ++j) out(i, j) = col[i] * row[j];
  return out;
}

void rank1_update_inplace(Mat64& b, const Vec64& col, const Vec64& row, double scale) {
  require(std::isfinite(scale), "rank1_update: non-finite scale");
  require(b.rows() == col.size() && b.cols() == row.size(), "rank1_update: dimension mismatch");
  if (scale == 0.0) return;
  for (std::size_t i = 0; i < b.rows(); ++i) {
    const double ci = scale * col[i];
    for (std::size_t j = 0; j < b.cols(); ++j) b(i, j) += ci * row[j];
  }
}

Mat64 rank1_update(const Mat64& b, const Vec64& col, const Vec64& row, double scale) {
  Mat64 out = b;
  rank1_update_inplace(out, col, row, scale);
  return out;
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double Rng::uniform() {
  // 53 high bits -> [0, 1)
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::index(std::size_t n) {
  require(n > 0, "Rng::index: empty range");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
  std::uint64_t r = engine_();
  while (r >= limit) r = engine_();
  return static_cast<std::size_t>(r % bound);
}

Rng Rng::fork(std::uint64_t key) const { return Rng(mix64(seed_ ^ mix64(key))); }

Vec64 random_uniform(std::size_t n, double lo, double hi, Rng& rng) {
  Vec64 v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

Vec64 random_normal(std::size_t n, Rng& rng) {
  Vec64 v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

Mat64 random_uniform(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng) {
  Mat64 m(rows, cols);
  for (double& x : m.span()) x = rng.uniform(lo, hi);
  return m;
}

double power_iteration(const LinearMap& apply, std::size_t dim, std::size_t iters, Rng& rng) {
  require(iters >= 1, "power_iteration: iters must be >= 1");
  require(dim >= 1, "power_iteration: dim must be >= 1");
  Vec64 v = random_normal(dim, rng);
  double n = l2_norm(v);
  while (n == 0.0) {
    v = random_normal(dim, rng);
    n = l2_norm(v);
  }
  v *= 1.0 / n;

  double estimate = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    Vec64 w = apply(v);
    if (w.size() != dim) {
      throw ContractViolation("power_iteration: map returned length " + std::to_string(w.size()) +
                              ", expected " + std::to_string(dim));
    }
    estimate = std::abs(dot(v, w));
    const double wn = l2_norm(w);
    if (wn == 0.0) return 0.0;
    v = std::move(w);
    v *= 1.0 / wn;
  }
  return estimate;
}

}  // namespace deqrb
