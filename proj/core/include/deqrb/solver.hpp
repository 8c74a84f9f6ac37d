#pragma once

// Forward fixed-point solvers for z = f(z; x): damped Picard iteration and
// Broyden's method on the residual g(z) = f(z; x) - z. Both run a fixed
// iteration budget from z_0 = 0 and record the full iterate history.

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "deqrb/model.hpp"
#include "deqrb/numkit.hpp"

namespace deqrb {

enum class SolverMethod { Picard, Broyden };

std::string to_string(SolverMethod m);
SolverMethod solver_method_from_string(const std::string& s);

struct SolverConfig {
  SolverMethod method = SolverMethod::Broyden;
  std::size_t max_iters = 8;
  double damping = 1.0;        // Picard only, in (0, 1]
  double broyden_alpha = 1.0;  // Broyden step size
  bool record_trace = false;   // keep every B_n
  /// Overrides B_0 = -I. Used for constructions with a known inverse Jacobian.
  std::optional<Mat64> initial_inverse;

  void validate() const;
};

struct ForwardTrace {
  std::vector<Vec64> states;          // z_0 .. z_N
  std::vector<double> residual_norms;  // ||f(z_n) - z_n||
  std::vector<double> rel_errors;      // ||f(z_n) - z_n|| / ||f(z_n)||
  Mat64 B_final;                       // Broyden only
  std::vector<Mat64> B_snapshots;      // B_0 .. B_N when record_trace
  std::vector<bool> update_skipped;    // per Broyden step, degenerate denominator

  std::size_t steps() const { return states.empty() ? 0 : states.size() - 1; }
  const Vec64& final_state() const { return states.back(); }
};

/// Non-finite iterate. Carries everything computed before the failure.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, ForwardTrace partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const ForwardTrace& partial() const { return partial_; }

 private:
  ForwardTrace partial_;
};

using ResidualFn = std::function<Vec64(const Vec64&)>;

/// Broyden's method on an arbitrary residual. Exposed step-by-step so callers
/// can read B_n before it is replaced by B_{n+1}.
class BroydenIterator {
 public:
  /// Relative guard on |Δzᵀ B Δg| below which the rank-1 update is skipped.
  static constexpr double kDenominatorGuard = 1e-12;

  BroydenIterator(ResidualFn residual, Vec64 start, double alpha, Mat64 initial_inverse);

  const Vec64& state() const { return z_; }
  const Vec64& residual() const { return g_; }
  const Mat64& inverse() const { return B_; }

  /// z <- z - alpha B g, then the rank-1 inverse update. Returns false when
  /// the update was skipped. Throws DivergenceError on non-finite values
  /// (with an empty partial trace; callers attach their own).
  bool step();

 private:
  ResidualFn residual_fn_;
  Vec64 z_;
  Vec64 g_;
  Mat64 B_;
  double alpha_;
};

/// ||f - z|| / ||f||; +inf when f = 0 and z != 0, 0 when both vanish.
double relative_error_from(const Vec64& fz, const Vec64& z);
double relative_error(const LayerParams& p, const Vec64& z, const Vec64& x);

ForwardTrace solve_picard(const LayerParams& p, const Vec64& x, const SolverConfig& cfg);
/// Called before each Broyden step n with (n, z_n, B_n).
using BroydenStepHook = std::function<void(std::size_t, const Vec64&, const Mat64&)>;

ForwardTrace solve_broyden(const LayerParams& p, const Vec64& x, const SolverConfig& cfg,
                           const BroydenStepHook& before_step = {});
/// Dispatches on cfg.method.
ForwardTrace solve(const LayerParams& p, const Vec64& x, const SolverConfig& cfg);

/// f(z_N; x), the state one layer application past the solver output.
Vec64 extended_state(const LayerParams& p, const ForwardTrace& trace, const Vec64& x);

/// CSV with header step,residual_norm,rel_error.
void write_trace_csv(std::ostream& out, const ForwardTrace& trace);

}  // namespace deqrb
