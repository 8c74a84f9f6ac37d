#include "deqrb/solver.hpp"

#include <cmath>
#include <limits>
#include <ostream>

#include "deqrb/csv.hpp"

namespace deqrb {

std::string to_string(SolverMethod m) { return m == SolverMethod::Picard ? "picard" : "broyden"; }

SolverMethod solver_method_from_string(const std::string& s) {
  if (s == "picard") return SolverMethod::Picard;
  if (s == "broyden") return SolverMethod::Broyden;
  throw FormatError("unknown solver method '" + s + "'");
}

void SolverConfig::validate() const {
  require(max_iters >= 1, "SolverConfig: max_iters must be >= 1");
  require(damping > 0.0 && damping <= 1.0, "SolverConfig: damping must lie in (0, 1]");
  require(std::isfinite(broyden_alpha) && broyden_alpha > 0.0, "SolverConfig: broyden_alpha must be > 0");
}

double relative_error_from(const Vec64& fz, const Vec64& z) {
  const double num = l2_norm(fz - z);
  const double den = l2_norm(fz);
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

double relative_error(const LayerParams& p, const Vec64& z, const Vec64& x) {
  return relative_error_from(layer_apply(p, z, x), z);
}

BroydenIterator::BroydenIterator(ResidualFn residual, Vec64 start, double alpha, Mat64 initial_inverse)
    : residual_fn_(std::move(residual)), z_(std::move(start)), B_(std::move(initial_inverse)), alpha_(alpha) {
  require(B_.rows() == z_.size() && B_.cols() == z_.size(), "BroydenIterator: inverse must be d x d");
  g_ = residual_fn_(z_);
  require(g_.size() == z_.size(), "BroydenIterator: residual length must equal state length");
}

bool BroydenIterator::step() {
  Vec64 dz = matvec(B_, g_);
  dz *= -alpha_;
  Vec64 z_next = z_ + dz;
  Vec64 g_next = residual_fn_(z_next);
  if (!z_next.all_finite() || !g_next.all_finite()) {
    throw DivergenceError("broyden: non-finite iterate", {});
  }
  const Vec64 dg = g_next - g_;
  const Vec64 B_dg = matvec(B_, dg);
  const double denom = dot(dz, B_dg);
  const double scale = l2_norm(dz) * l2_norm(B_dg) + 1e-300;
  bool updated = false;
  if (std::abs(denom) >= kDenominatorGuard * scale) {
    // B += (Δz - B Δg) / (Δzᵀ B Δg) · Δzᵀ B
    Vec64 col = dz - B_dg;
    col *= 1.0 / denom;
    const Vec64 row = matvec_t(B_, dz);
    rank1_update_inplace(B_, col, row, 1.0);
    if (!B_.all_finite()) throw DivergenceError("broyden: non-finite inverse Jacobian", {});
    updated = true;
  }
  z_ = std::move(z_next);
  g_ = std::move(g_next);
  return updated;
}

namespace {

void record(ForwardTrace& t, const Vec64& z, const Vec64& fz) {
  t.states.push_back(z);
  t.residual_norms.push_back(l2_norm(fz - z));
  t.rel_errors.push_back(relative_error_from(fz, z));
}

}  // namespace

ForwardTrace solve_picard(const LayerParams& p, const Vec64& x, const SolverConfig& cfg) {
  cfg.validate();
  require(cfg.method == SolverMethod::Picard, "solve_picard: config method is not picard");
  const double lam = cfg.damping;
  ForwardTrace t;
  t.states.reserve(cfg.max_iters + 1);
  Vec64 z(p.W.rows());
  Vec64 fz = layer_apply(p, z, x);
  record(t, z, fz);
  for (std::size_t n = 0; n < cfg.max_iters; ++n) {
    Vec64 next = (1.0 - lam) * z + lam * fz;
    if (lam == 1.0) next = fz;
    Vec64 f_next = layer_apply(p, next, x);
    if (!next.all_finite() || !f_next.all_finite()) {
      throw DivergenceError("picard: non-finite iterate at step " + std::to_string(n + 1), std::move(t));
    }
    z = std::move(next);
    fz = std::move(f_next);
    record(t, z, fz);
  }
  return t;
}

ForwardTrace solve_broyden(const LayerParams& p, const Vec64& x, const SolverConfig& cfg,
                           const BroydenStepHook& before_step) {
  cfg.validate();
  require(cfg.method == SolverMethod::Broyden, "solve_broyden: config method is not broyden");
  const std::size_t d = p.W.rows();
  Mat64 B0 = cfg.initial_inverse ? *cfg.initial_inverse : Mat64::identity(d, -1.0);

  ForwardTrace t;
  t.states.reserve(cfg.max_iters + 1);
  // f is needed for the diagnostics anyway, so the residual closure stashes it.
  Vec64 last_f;
  auto residual = [&](const Vec64& z) {
    last_f = layer_apply(p, z, x);
    return last_f - z;
  };
  BroydenIterator it(residual, Vec64(d), cfg.broyden_alpha, std::move(B0));
  record(t, it.state(), last_f);
  if (cfg.record_trace) t.B_snapshots.push_back(it.inverse());

  for (std::size_t n = 0; n < cfg.max_iters; ++n) {
    if (before_step) before_step(n, it.state(), it.inverse());
    bool updated = false;
    try {
      updated = it.step();
    } catch (const DivergenceError& e) {
      t.B_final = it.inverse();
      throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(n + 1), std::move(t));
    }
    t.update_skipped.push_back(!updated);
    record(t, it.state(), last_f);
    if (cfg.record_trace) t.B_snapshots.push_back(it.inverse());
  }
  t.B_final = it.inverse();
  return t;
}

ForwardTrace solve(const LayerParams& p, const Vec64& x, const SolverConfig& cfg) {
  return cfg.method == SolverMethod::Picard ? solve_picard(p, x, cfg) : solve_broyden(p, x, cfg);
}

Vec64 extended_state(const LayerParams& p, const ForwardTrace& trace, const Vec64& x) {
  require(!trace.states.empty(), "extended_state: empty trace");
  return layer_apply(p, trace.final_state(), x);
}

void write_trace_csv(std::ostream& out, const ForwardTrace& trace) {
  csv::Writer w(out);
  w.header({"step", "residual_norm", "rel_error"});
  for (std::size_t n = 0; n < trace.states.size(); ++n) {
    w.field(n).field(trace.residual_norms[n]).field(trace.rel_errors[n]).end_row();
  }
}

}  // namespace deqrb
