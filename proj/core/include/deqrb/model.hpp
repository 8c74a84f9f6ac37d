#pragma once

// Weight-tied, input-injected layer f(z; x) = act(W z + U x + b) with a
// linear softmax readout head.
//
// Jacobian convention: every derivative product below is a vector-Jacobian
// product. vjp_z(u) returns Jᵀu where J = ∂f/∂z in the usual row-per-output
// layout. Derivations that write "(∂f/∂z) u" with a transposed Jacobian
// layout mean exactly this product.

#include <cstddef>
#include <functional>
#include <optional>
#include <string>

#include "deqrb/numkit.hpp"

namespace deqrb {

enum class Activation { Tanh, ReLU, Identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct ModelDims {
  std::size_t d = 1;  // state
  std::size_t l = 1;  // input
  std::size_t c = 2;  // classes
};

struct LayerParams {
  Mat64 W;  // d x d
  Mat64 U;  // d x l
  Vec64 b;  // d
  Mat64 V;  // c x d
  Vec64 r;  // c
  Activation activation = Activation::Tanh;

  ModelDims dims() const { return {W.rows(), U.cols(), V.rows()}; }
  /// Throws ContractViolation when shapes disagree or entries are non-finite.
  void validate() const;
};

/// Gradient with the same tensor shapes as LayerParams.
struct ParamGrad {
  Mat64 W, U, V;
  Vec64 b, r;

  static ParamGrad zeros(const ModelDims& dims);
  static ParamGrad zeros_like(const LayerParams& p) { return zeros(p.dims()); }

  ParamGrad& operator+=(const ParamGrad& o);
  ParamGrad& operator*=(double s);
  double squared_norm() const;
};

/// Visits (param tensor, grad tensor) storage pairs in a fixed order:
/// W, U, b, V, r.
void for_each_tensor(LayerParams& p, const ParamGrad& g,
                     const std::function<void(std::span<double>, std::span<const double>)>& fn);
/// Flattened view in the same order; used by optimizers and gradient checks.
std::vector<double> flatten(const ParamGrad& g);
std::vector<double> flatten(const LayerParams& p);
void unflatten_into(LayerParams& p, std::span<const double> flat);
std::size_t parameter_count(const ModelDims& dims);

/// W z + U x + b.
Vec64 preactivation(const LayerParams& p, const Vec64& z, const Vec64& x);
/// act(W z + U x + b).
Vec64 layer_apply(const LayerParams& p, const Vec64& z, const Vec64& x);

double activate(Activation act, double a);
/// First derivative; ReLU'(0) is taken as 0.
double activate_prime(Activation act, double a);
/// Second derivative; zero for ReLU and Identity.
double activate_second(Activation act, double a);

Vec64 vjp_z(const LayerParams& p, const Vec64& z, const Vec64& x, const Vec64& u);
Vec64 vjp_x(const LayerParams& p, const Vec64& z, const Vec64& x, const Vec64& u);
/// Gradient of uᵀ f(z; x) with respect to W, U, b. Readout fields are zero.
ParamGrad vjp_theta(const LayerParams& p, const Vec64& z, const Vec64& x, const Vec64& u);

/// The layer linearized at (z, x): caches act'(W z + U x + b) so repeated
/// products (backward solves, power iteration) skip the preactivation.
class Linearization {
 public:
  Linearization(const LayerParams& p, const Vec64& z, const Vec64& x);

  Vec64 vjp_z(const Vec64& u) const;
  Vec64 vjp_x(const Vec64& u) const;
  ParamGrad vjp_theta(const Vec64& u) const;
  const Vec64& gate() const { return gate_; }

 private:
  Vec64 gated(const Vec64& u) const;
  const LayerParams* p_;
  Vec64 z_, x_, gate_;
};

Vec64 logits(const LayerParams& p, const Vec64& z);

struct ReadoutLoss {
  double loss = 0.0;
  Vec64 dLdz;
  ParamGrad head_grads;  // V and r filled, layer fields zero
};

/// Softmax cross-entropy of the readout logits against class y.
ReadoutLoss readout_loss(const LayerParams& p, const Vec64& z, std::size_t y);

/// argmax of the logits, ties to the lowest index.
std::size_t predict(const LayerParams& p, const Vec64& z);

struct InitOptions {
  /// Target bound on the spectral-radius estimate of ∂f/∂z at z = 0, x = 0.
  double max_spectral_radius = 0.9;
  std::size_t power_iters = 200;
  /// Multiplies the sampled W before the radius cap is applied.
  double w_scale = 1.0;
};

/// Uniform fan-in initialization; W is rescaled after sampling so the
/// layer starts contractive.
LayerParams init_params(const ModelDims& dims, Activation act, Rng& rng, const InitOptions& opts = {});

}  // namespace deqrb
