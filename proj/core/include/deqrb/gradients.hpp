#pragma once

// Input and parameter gradients of a loss evaluated at the equilibrium:
//
//   exact          implicit differentiation through z* = f(z*; x), with the
//                  adjoint u* = Jᵀu* + ∂L/∂z solved by a fixed-point solver
//   phantom        reverse accumulation through k damped unroll steps
//   unrolled       the phantom chain started from an intermediate z_n
//   adjoint        adjoint iterates u_n updated alongside the Broyden forward
//                  pass, reusing its inverse-Jacobian estimate B_n
//
// All products are vector-Jacobian products (see model.hpp).

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deqrb/model.hpp"
#include "deqrb/solver.hpp"

namespace deqrb {

struct LossEval {
  double loss = 0.0;
  Vec64 dLdz;
  /// Readout gradients, when the loss owns parameters.
  std::optional<ParamGrad> head;
};

using LossFn = std::function<LossEval(const Vec64& z)>;

/// Softmax cross-entropy of the readout head against label y.
LossFn readout_objective(const LayerParams& p, std::size_t y);

struct BackwardConfig {
  std::size_t back_max_iters = 7;
  SolverMethod back_method = SolverMethod::Picard;

  void validate() const;
};

class BackwardDivergenceError : public std::runtime_error {
 public:
  BackwardDivergenceError(const std::string& what, Vec64 partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const Vec64& partial() const { return partial_; }

 private:
  Vec64 partial_;
};

/// Solves u = Jᵀu + dLdz at the linearization point, starting from u = 0.
Vec64 solve_adjoint(const Linearization& lin, const Vec64& dLdz, const BackwardConfig& bcfg);

Vec64 exact_input_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, const LossFn& loss,
                       const BackwardConfig& bcfg);
Vec64 exact_input_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, std::size_t y,
                       const BackwardConfig& bcfg);

ParamGrad exact_param_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, const LossFn& loss,
                           const BackwardConfig& bcfg);
ParamGrad exact_param_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, std::size_t y,
                           const BackwardConfig& bcfg);

struct PhantomResult {
  Vec64 input_grad;
  ParamGrad param_grad;
  double loss = 0.0;
  Vec64 z_end;
};

/// k damped steps ẑ_t = (1-λ)ẑ_{t-1} + λ f(ẑ_{t-1}; x) from z_start (held
/// constant), then backpropagation of L(ẑ_k) through the chain.
PhantomResult phantom_grads(const LayerParams& p, const Vec64& x, const Vec64& z_start, const LossFn& loss,
                            std::size_t k, double lambda, bool want_params = true);
PhantomResult phantom_grads(const LayerParams& p, const Vec64& x, const Vec64& z_start, std::size_t y,
                            std::size_t k, double lambda, bool want_params = true);

Vec64 unrolled_intermediate_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, std::size_t n,
                                 const LossFn& loss, std::size_t k, double lambda);
Vec64 unrolled_intermediate_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, std::size_t n,
                                 std::size_t y, std::size_t k, double lambda);

struct AdjointTrace {
  std::vector<Vec64> adjoints;   // u_0 .. u_N
  std::vector<Vec64> residuals;  // v_0 .. v_{N-1}
  double beta = 0.5;
};

struct SimultaneousResult {
  ForwardTrace fwd;
  AdjointTrace adj;
};

/// Broyden forward pass with the adjoint update
///   v_n = Jᵀ(z_n) u_n + ∂L(z_n)/∂z - u_n,   u_{n+1} = u_n - β B_n v_n
/// interleaved, u_0 = 0.
SimultaneousResult simultaneous_adjoint(const LayerParams& p, const Vec64& x, const LossFn& loss,
                                        const SolverConfig& cfg, double beta);
SimultaneousResult simultaneous_adjoint(const LayerParams& p, const Vec64& x, std::size_t y,
                                        const SolverConfig& cfg, double beta);

/// (∂f(z_n; x)/∂x)ᵀ u_n.
Vec64 adjoint_intermediate_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd,
                                const AdjointTrace& adj, std::size_t n);

/// Elementwise arithmetic mean.
Vec64 ensemble_grad(std::span<const Vec64> per_state_grads);

/// ||u_{n+1} - u*|| / ||u_n - u*||, skipping denominators below 1e-14.
std::vector<double> adjoint_convergence_ratio(const AdjointTrace& adj, const Vec64& u_star);

// ---------------------------------------------------------------------------
// Gradient sources for attacks.

enum class SourceKind {
  ExactFinal,
  PhantomFinal,
  UnrolledIntermediate,
  AdjointIntermediate,
  AdjointEnsemble,
  UnrolledEnsemble,
};

struct GradientSource {
  SourceKind kind = SourceKind::ExactFinal;
  std::size_t n = 0;     // intermediate index
  std::size_t k = 1;     // unroll steps
  double lambda = 1.0;   // unroll damping
  double beta = 0.5;     // adjoint step

  static GradientSource exact_final() { return {}; }
  static GradientSource phantom_final(std::size_t k, double lambda) {
    return {SourceKind::PhantomFinal, 0, k, lambda, 0.5};
  }
  static GradientSource unrolled_intermediate(std::size_t n, std::size_t k, double lambda) {
    return {SourceKind::UnrolledIntermediate, n, k, lambda, 0.5};
  }
  static GradientSource adjoint_intermediate(std::size_t n, double beta = 0.5) {
    return {SourceKind::AdjointIntermediate, n, 1, 1.0, beta};
  }
  static GradientSource adjoint_ensemble(double beta = 0.5) { return {SourceKind::AdjointEnsemble, 0, 1, 1.0, beta}; }
  static GradientSource unrolled_ensemble(std::size_t k, double lambda) {
    return {SourceKind::UnrolledEnsemble, 0, k, lambda, 0.5};
  }

  bool needs_adjoint() const {
    return kind == SourceKind::AdjointIntermediate || kind == SourceKind::AdjointEnsemble;
  }
  void validate() const;
  /// Stable label, e.g. "unrolled_intermediate(n=1,k=2,lambda=0.5)".
  std::string label() const;

  friend bool operator==(const GradientSource&, const GradientSource&) = default;
};

std::string to_string(SourceKind k);
SourceKind source_kind_from_string(const std::string& s);

struct SourceGradient {
  Vec64 grad;
  ForwardTrace fwd;
};

/// Runs the forward pass required by `src` at x and returns its input
/// gradient of the readout loss for label y.
SourceGradient source_gradient(const LayerParams& p, const Vec64& x, std::size_t y, const GradientSource& src,
                               const SolverConfig& scfg, const BackwardConfig& bcfg);

}  // namespace deqrb
