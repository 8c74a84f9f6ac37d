#include "deqrb/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace deqrb {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::ReLU: return "relu";
    case Activation::Identity: return "identity";
  }
  return "tanh";
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::ReLU;
  if (s == "identity") return Activation::Identity;
  throw FormatError("unknown activation '" + s + "'");
}

void LayerParams::validate() const {
  const std::size_t d = W.rows();
  require(d >= 1 && W.cols() == d, "LayerParams: W must be square d x d");
  require(U.rows() == d && U.cols() >= 1, "LayerParams: U must have d rows");
  require(b.size() == d, "LayerParams: b must have length d");
  require(V.cols() == d && V.rows() >= 1, "LayerParams: V must have d columns");
  require(r.size() == V.rows(), "LayerParams: r must have length c");
  require(W.all_finite() && U.all_finite() && b.all_finite() && V.all_finite() && r.all_finite(),
          "LayerParams: non-finite entry");
}

ParamGrad ParamGrad::zeros(const ModelDims& dims) {
  ParamGrad g;
  g.W = Mat64(dims.d, dims.d);
  g.U = Mat64(dims.d, dims.l);
  g.b = Vec64(dims.d);
  g.V = Mat64(dims.c, dims.d);
  g.r = Vec64(dims.c);
  return g;
}

ParamGrad& ParamGrad::operator+=(const ParamGrad& o) {
  W += o.W;
  U += o.U;
  b += o.b;
  V += o.V;
  r += o.r;
  return *this;
}

ParamGrad& ParamGrad::operator*=(double s) {
  W *= s;
  U *= s;
  b *= s;
  V *= s;
  r *= s;
  return *this;
}

double ParamGrad::squared_norm() const {
  double s = 0.0;
  for (double v : flatten(*this)) s += v * v;
  return s;
}

void for_each_tensor(LayerParams& p, const ParamGrad& g,
                     const std::function<void(std::span<double>, std::span<const double>)>& fn) {
  fn(p.W.span(), g.W.span());
  fn(p.U.span(), g.U.span());
  fn(p.b.span(), g.b.span());
  fn(p.V.span(), g.V.span());
  fn(p.r.span(), g.r.span());
}

std::vector<double> flatten(const ParamGrad& g) {
  std::vector<double> out;
  for (auto s : {g.W.span(), g.U.span(), g.b.span(), g.V.span(), g.r.span()}) out.insert(out.end(), s.begin(), s.end());
  return out;
}

std::vector<double> flatten(const LayerParams& p) {
  std::vector<double> out;
  for (auto s : {p.W.span(), p.U.span(), p.b.span(), p.V.span(), p.r.span()}) out.insert(out.end(), s.begin(), s.end());
  return out;
}

void unflatten_into(LayerParams& p, std::span<const double> flat) {
  require(flat.size() == parameter_count(p.dims()), "unflatten_into: length mismatch");
  std::size_t off = 0;
  for (auto s : {p.W.span(), p.U.span(), p.b.span(), p.V.span(), p.r.span()}) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), s.size(), s.begin());
    off += s.size();
  }
}

std::size_t parameter_count(const ModelDims& dims) {
  return dims.d * dims.d + dims.d * dims.l + dims.d + dims.c * dims.d + dims.c;
}

double activate(Activation act, double a) {
  switch (act) {
    case Activation::Tanh: return std::tanh(a);
    case Activation::ReLU: return a > 0.0 ? a : 0.0;
    case Activation::Identity: return a;
  }
  return a;
}

double activate_prime(Activation act, double a) {
  switch (act) {
    case Activation::Tanh: {
      const double t = std::tanh(a);
      return 1.0 - t * t;
    }
    case Activation::ReLU: return a > 0.0 ? 1.0 : 0.0;
    case Activation::Identity: return 1.0;
  }
  return 1.0;
}

double activate_second(Activation act, double a) {
  if (act != Activation::Tanh) return 0.0;
  const double t = std::tanh(a);
  return -2.0 * t * (1.0 - t * t);
}

namespace {

void check_state_input(const LayerParams& p, const Vec64& z, const Vec64& x) {
  if (z.size() != p.W.cols()) {
    throw ContractViolation("layer: state has length " + std::to_string(z.size()) + ", expected " +
                            std::to_string(p.W.cols()));
  }
  if (x.size() != p.U.cols()) {
    throw ContractViolation("layer: input has length " + std::to_string(x.size()) + ", expected " +
                            std::to_string(p.U.cols()));
  }
}

}  // namespace

Vec64 preactivation(const LayerParams& p, const Vec64& z, const Vec64& x) {
  check_state_input(p, z, x);
  Vec64 a = matvec(p.W, z);
  a += matvec(p.U, x);
  a += p.b;
  return a;
}

Vec64 layer_apply(const LayerParams& p, const Vec64& z, const Vec64& x) {
  Vec64 a = preactivation(p, z, x);
  for (double& v : a) v = activate(p.activation, v);
  return a;
}

Vec64 vjp_z(const LayerParams& p, const Vec64& z, const Vec64& x, const Vec64& u) {
  return Linearization(p, z, x).vjp_z(u);
}

Vec64 vjp_x(const LayerParams& p, const Vec64& z, const Vec64& x, const Vec64& u) {
  return Linearization(p, z, x).vjp_x(u);
}

ParamGrad vjp_theta(const LayerParams& p, const Vec64& z, const Vec64& x, const Vec64& u) {
  return Linearization(p, z, x).vjp_theta(u);
}

Linearization::Linearization(const LayerParams& p, const Vec64& z, const Vec64& x) : p_(&p), z_(z), x_(x) {
  gate_ = preactivation(p, z, x);
  for (double& v : gate_) v = activate_prime(p.activation, v);
}

Vec64 Linearization::gated(const Vec64& u) const {
  require(u.size() == gate_.size(), "vjp: cotangent length must equal state dimension");
  return hadamard(gate_, u);
}

Vec64 Linearization::vjp_z(const Vec64& u) const { return matvec_t(p_->W, gated(u)); }
Vec64 Linearization::vjp_x(const Vec64& u) const { return matvec_t(p_->U, gated(u)); }

ParamGrad Linearization::vjp_theta(const Vec64& u) const {
  const Vec64 s = gated(u);
  ParamGrad g = ParamGrad::zeros_like(*p_);
  g.W = outer(s, z_);
  g.U = outer(s, x_);
  g.b = s;
  return g;
}

Vec64 logits(const LayerParams& p, const Vec64& z) {
  require(z.size() == p.V.cols(), "logits: state length must equal d");
  return matvec(p.V, z) + p.r;
}

ReadoutLoss readout_loss(const LayerParams& p, const Vec64& z, std::size_t y) {
  const std::size_t c = p.V.rows();
  if (y >= c) throw ContractViolation("readout_loss: label " + std::to_string(y) + " out of range");
  const Vec64 s = logits(p, z);
  const double m = *std::max_element(s.begin(), s.end());
  double denom = 0.0;
  for (double v : s) denom += std::exp(v - m);
  const double log_denom = std::log(denom);

  Vec64 delta(c);  // softmax - onehot
  for (std::size_t k = 0; k < c; ++k) delta[k] = std::exp(s[k] - m - log_denom);
  delta[y] -= 1.0;

  ReadoutLoss out;
  out.loss = -(s[y] - m - log_denom);
  out.dLdz = matvec_t(p.V, delta);
  out.head_grads = ParamGrad::zeros_like(p);
  out.head_grads.V = outer(delta, z);
  out.head_grads.r = delta;
  return out;
}

std::size_t predict(const LayerParams& p, const Vec64& z) {
  const Vec64 s = logits(p, z);
  std::size_t best = 0;
  for (std::size_t k = 1; k < s.size(); ++k)
    if (s[k] > s[best]) best = k;
  return best;
}

LayerParams init_params(const ModelDims& dims, Activation act, Rng& rng, const InitOptions& opts) {
  require(dims.d >= 1 && dims.l >= 1 && dims.c >= 1, "init_params: all dimensions must be >= 1");
  const double aw = 1.0 / std::sqrt(static_cast<double>(dims.d));
  const double au = 1.0 / std::sqrt(static_cast<double>(dims.l));
  LayerParams p;
  p.activation = act;
  require(std::isfinite(opts.w_scale) && opts.w_scale > 0.0, "init_params: w_scale must be > 0");
  p.W = random_uniform(dims.d, dims.d, -aw, aw, rng);
  p.W *= opts.w_scale;
  p.U = random_uniform(dims.d, dims.l, -au, au, rng);
  p.b = random_uniform(dims.d, -0.1, 0.1, rng);
  p.V = random_uniform(dims.c, dims.d, -aw, aw, rng);
  p.r = Vec64(dims.c);

  // Contractive start: bound the estimate at the origin, with a small margin
  // because the Rayleigh estimate can undershoot on nonsymmetric maps.
  const Vec64 z0(dims.d);
  const Vec64 x0(dims.l);
  const double target = opts.max_spectral_radius;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Rng probe = rng.fork(0x5eed + attempt);
    const double rho = power_iteration([&](const Vec64& v) { return vjp_z(p, z0, x0, v); }, dims.d,
                                       opts.power_iters, probe);
    if (rho < target) break;
    p.W *= 0.95 * target / rho;
  }
  return p;
}

}  // namespace deqrb
