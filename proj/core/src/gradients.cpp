#include "deqrb/gradients.hpp"

#include <cmath>
#include <sstream>

namespace deqrb {

LossFn readout_objective(const LayerParams& p, std::size_t y) {
  require(y < p.V.rows(), "readout_objective: label out of range");
  return [&p, y](const Vec64& z) {
    ReadoutLoss r = readout_loss(p, z, y);
    return LossEval{r.loss, std::move(r.dLdz), std::move(r.head_grads)};
  };
}

void BackwardConfig::validate() const { require(back_max_iters >= 1, "BackwardConfig: back_max_iters must be >= 1"); }

Vec64 solve_adjoint(const Linearization& lin, const Vec64& dLdz, const BackwardConfig& bcfg) {
  bcfg.validate();
  const std::size_t d = dLdz.size();
  if (bcfg.back_method == SolverMethod::Picard) {
    Vec64 u(d);
    for (std::size_t t = 0; t < bcfg.back_max_iters; ++t) {
      Vec64 next = lin.vjp_z(u) + dLdz;
      if (!next.all_finite()) {
        throw BackwardDivergenceError("adjoint solve: non-finite iterate at step " + std::to_string(t + 1),
                                      std::move(u));
      }
      u = std::move(next);
    }
    return u;
  }
  auto residual = [&](const Vec64& u) { return lin.vjp_z(u) + dLdz - u; };
  BroydenIterator it(residual, Vec64(d), 1.0, Mat64::identity(d, -1.0));
  for (std::size_t t = 0; t < bcfg.back_max_iters; ++t) {
    try {
      it.step();
    } catch (const DivergenceError&) {
      throw BackwardDivergenceError("adjoint solve: non-finite iterate at step " + std::to_string(t + 1),
                                    it.state());
    }
  }
  return it.state();
}

namespace {

const Vec64& final_state_of(const ForwardTrace& fwd) {
  require(!fwd.states.empty(), "gradient: forward trace is empty");
  return fwd.final_state();
}

}  // namespace

Vec64 exact_input_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, const LossFn& loss,
                       const BackwardConfig& bcfg) {
  const Vec64& z = final_state_of(fwd);
  const LossEval le = loss(z);
  const Linearization lin(p, z, x);
  return lin.vjp_x(solve_adjoint(lin, le.dLdz, bcfg));
}

Vec64 exact_input_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, std::size_t y,
                       const BackwardConfig& bcfg) {
  return exact_input_grad(p, x, fwd, readout_objective(p, y), bcfg);
}

ParamGrad exact_param_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, const LossFn& loss,
                           const BackwardConfig& bcfg) {
  const Vec64& z = final_state_of(fwd);
  const LossEval le = loss(z);
  const Linearization lin(p, z, x);
  ParamGrad g = lin.vjp_theta(solve_adjoint(lin, le.dLdz, bcfg));
  if (le.head) g += *le.head;
  return g;
}

ParamGrad exact_param_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, std::size_t y,
                           const BackwardConfig& bcfg) {
  return exact_param_grad(p, x, fwd, readout_objective(p, y), bcfg);
}

PhantomResult phantom_grads(const LayerParams& p, const Vec64& x, const Vec64& z_start, const LossFn& loss,
                            std::size_t k, double lambda, bool want_params) {
  require(k >= 1, "phantom_grads: k must be >= 1");
  require(lambda > 0.0 && lambda <= 1.0, "phantom_grads: lambda must lie in (0, 1]");

  std::vector<Vec64> chain;
  chain.reserve(k + 1);
  chain.push_back(z_start);
  for (std::size_t t = 1; t <= k; ++t) {
    const Vec64& prev = chain.back();
    Vec64 next = (1.0 - lambda) * prev + lambda * layer_apply(p, prev, x);
    if (!next.all_finite()) {
      throw DivergenceError("phantom_grads: non-finite unroll state at step " + std::to_string(t), {});
    }
    chain.push_back(std::move(next));
  }

  const LossEval le = loss(chain.back());
  PhantomResult out;
  out.loss = le.loss;
  out.z_end = chain.back();
  out.input_grad = Vec64(x.size());
  if (want_params) {
    out.param_grad = le.head ? *le.head : ParamGrad::zeros_like(p);
  }

  // Reverse sweep. ∂ẑ_t/∂ẑ_{t-1} = (1-λ)I + λJ(ẑ_{t-1}), ∂ẑ_t/∂x = λ ∂f/∂x.
  Vec64 g = le.dLdz;
  for (std::size_t t = k; t >= 1; --t) {
    const Linearization lin(p, chain[t - 1], x);
    const Vec64 lg = lambda * g;
    out.input_grad += lin.vjp_x(lg);
    if (want_params) out.param_grad += lin.vjp_theta(lg);
    Vec64 next = lin.vjp_z(lg);
    if (lambda != 1.0) next += (1.0 - lambda) * g;
    g = std::move(next);
  }
  if (!out.input_grad.all_finite()) throw DivergenceError("phantom_grads: non-finite gradient", {});
  return out;
}

PhantomResult phantom_grads(const LayerParams& p, const Vec64& x, const Vec64& z_start, std::size_t y,
                            std::size_t k, double lambda, bool want_params) {
  return phantom_grads(p, x, z_start, readout_objective(p, y), k, lambda, want_params);
}

Vec64 unrolled_intermediate_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, std::size_t n,
                                 const LossFn& loss, std::size_t k, double lambda) {
  if (n >= fwd.states.size()) {
    throw ContractViolation("unrolled_intermediate_grad: state index " + std::to_string(n) +
                            " out of range for trace with " + std::to_string(fwd.states.size()) + " states");
  }
  return phantom_grads(p, x, fwd.states[n], loss, k, lambda, false).input_grad;
}

Vec64 unrolled_intermediate_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd, std::size_t n,
                                 std::size_t y, std::size_t k, double lambda) {
  return unrolled_intermediate_grad(p, x, fwd, n, readout_objective(p, y), k, lambda);
}

SimultaneousResult simultaneous_adjoint(const LayerParams& p, const Vec64& x, const LossFn& loss,
                                        const SolverConfig& cfg, double beta) {
  require(cfg.method == SolverMethod::Broyden, "simultaneous_adjoint: requires the Broyden forward solver");
  require(std::isfinite(beta) && beta >= 0.0, "simultaneous_adjoint: beta must be finite and non-negative");

  SimultaneousResult out;
  out.adj.beta = beta;
  out.adj.adjoints.reserve(cfg.max_iters + 1);
  out.adj.adjoints.emplace_back(p.W.rows());

  auto adjoint_step = [&](std::size_t, const Vec64& z_n, const Mat64& B_n) {
    const Vec64& u = out.adj.adjoints.back();
    const Linearization lin(p, z_n, x);
    Vec64 v = lin.vjp_z(u) + loss(z_n).dLdz - u;
    Vec64 u_next = u - beta * matvec(B_n, v);
    out.adj.residuals.push_back(std::move(v));
    out.adj.adjoints.push_back(std::move(u_next));
  };
  out.fwd = solve_broyden(p, x, cfg, adjoint_step);
  return out;
}

SimultaneousResult simultaneous_adjoint(const LayerParams& p, const Vec64& x, std::size_t y,
                                        const SolverConfig& cfg, double beta) {
  return simultaneous_adjoint(p, x, readout_objective(p, y), cfg, beta);
}

Vec64 adjoint_intermediate_grad(const LayerParams& p, const Vec64& x, const ForwardTrace& fwd,
                                const AdjointTrace& adj, std::size_t n) {
  if (n >= fwd.states.size() || n >= adj.adjoints.size()) {
    throw ContractViolation("adjoint_intermediate_grad: index " + std::to_string(n) + " out of range");
  }
  return vjp_x(p, fwd.states[n], x, adj.adjoints[n]);
}

Vec64 ensemble_grad(std::span<const Vec64> per_state_grads) {
  require(!per_state_grads.empty(), "ensemble_grad: empty list");
  Vec64 acc(per_state_grads.front().size());
  for (const Vec64& g : per_state_grads) {
    require(g.size() == acc.size(), "ensemble_grad: length mismatch");
    acc += g;
  }
  acc *= 1.0 / static_cast<double>(per_state_grads.size());
  return acc;
}

std::vector<double> adjoint_convergence_ratio(const AdjointTrace& adj, const Vec64& u_star) {
  std::vector<double> ratios;
  for (std::size_t n = 0; n + 1 < adj.adjoints.size(); ++n) {
    const double den = l2_norm(adj.adjoints[n] - u_star);
    if (den < 1e-14) continue;
    ratios.push_back(l2_norm(adj.adjoints[n + 1] - u_star) / den);
  }
  return ratios;
}

std::string to_string(SourceKind k) {
  switch (k) {
    case SourceKind::ExactFinal: return "exact_final";
    case SourceKind::PhantomFinal: return "phantom_final";
    case SourceKind::UnrolledIntermediate: return "unrolled_intermediate";
    case SourceKind::AdjointIntermediate: return "adjoint_intermediate";
    case SourceKind::AdjointEnsemble: return "adjoint_ensemble";
    case SourceKind::UnrolledEnsemble: return "unrolled_ensemble";
  }
  return "exact_final";
}

SourceKind source_kind_from_string(const std::string& s) {
  for (SourceKind k : {SourceKind::ExactFinal, SourceKind::PhantomFinal, SourceKind::UnrolledIntermediate,
                       SourceKind::AdjointIntermediate, SourceKind::AdjointEnsemble, SourceKind::UnrolledEnsemble}) {
    if (to_string(k) == s) return k;
  }
  throw FormatError("unknown gradient source '" + s + "'");
}

void GradientSource::validate() const {
  require(k >= 1, "GradientSource: k must be >= 1");
  require(lambda > 0.0 && lambda <= 1.0, "GradientSource: lambda must lie in (0, 1]");
  require(std::isfinite(beta) && beta >= 0.0, "GradientSource: beta must be non-negative");
}

std::string GradientSource::label() const {
  std::ostringstream os;
  os << to_string(kind);
  switch (kind) {
    case SourceKind::ExactFinal: break;
    case SourceKind::PhantomFinal:
    case SourceKind::UnrolledEnsemble: os << "(k=" << k << ",lambda=" << lambda << ")"; break;
    case SourceKind::UnrolledIntermediate: os << "(n=" << n << ",k=" << k << ",lambda=" << lambda << ")"; break;
    case SourceKind::AdjointIntermediate: os << "(n=" << n << ",beta=" << beta << ")"; break;
    case SourceKind::AdjointEnsemble: os << "(beta=" << beta << ")"; break;
  }
  return os.str();
}

SourceGradient source_gradient(const LayerParams& p, const Vec64& x, std::size_t y, const GradientSource& src,
                               const SolverConfig& scfg, const BackwardConfig& bcfg) {
  src.validate();
  const LossFn loss = readout_objective(p, y);
  SourceGradient out;

  if (src.needs_adjoint()) {
    SimultaneousResult sim = simultaneous_adjoint(p, x, loss, scfg, src.beta);
    const std::size_t N = sim.fwd.steps();
    if (src.kind == SourceKind::AdjointIntermediate) {
      require(src.n <= N, "source_gradient: adjoint index beyond trace");
      out.grad = adjoint_intermediate_grad(p, x, sim.fwd, sim.adj, src.n);
    } else {
      // u_0 = 0 contributes nothing; average over n = 1..N.
      std::vector<Vec64> grads;
      for (std::size_t n = 1; n <= N; ++n) grads.push_back(adjoint_intermediate_grad(p, x, sim.fwd, sim.adj, n));
      out.grad = ensemble_grad(grads);
    }
    out.fwd = std::move(sim.fwd);
    return out;
  }

  out.fwd = solve(p, x, scfg);
  const std::size_t N = out.fwd.steps();
  switch (src.kind) {
    case SourceKind::ExactFinal: out.grad = exact_input_grad(p, x, out.fwd, loss, bcfg); break;
    case SourceKind::PhantomFinal:
      out.grad = phantom_grads(p, x, out.fwd.final_state(), loss, src.k, src.lambda, false).input_grad;
      break;
    case SourceKind::UnrolledIntermediate:
      require(src.n <= N, "source_gradient: unroll index beyond trace");
      out.grad = unrolled_intermediate_grad(p, x, out.fwd, src.n, loss, src.k, src.lambda);
      break;
    case SourceKind::UnrolledEnsemble: {
      std::vector<Vec64> grads;
      for (std::size_t n = 1; n <= N; ++n)
        grads.push_back(unrolled_intermediate_grad(p, x, out.fwd, n, loss, src.k, src.lambda));
      out.grad = ensemble_grad(grads);
      break;
    }
    default: break;
  }
  return out;
}

}  // namespace deqrb
