#include "deqrb/defenses.hpp"

namespace deqrb {

std::string to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::Final: return "final";
    case DefenseKind::Early: return "early";
    case DefenseKind::Ensemble: return "ensemble";
  }
  return "final";
}

DefenseKind defense_kind_from_string(const std::string& s) {
  if (s == "final") return DefenseKind::Final;
  if (s == "early") return DefenseKind::Early;
  if (s == "ensemble") return DefenseKind::Ensemble;
  throw FormatError("unknown defense '" + s + "'");
}

std::string DefenseStrategy::label() const {
  if (kind == DefenseKind::Early) return calibrated ? "early(n=" + std::to_string(n_star) + ")" : "early(uncalibrated)";
  return to_string(kind);
}

void StreamingEnsemble::push(const Vec64& z) {
  if (count_ == 0) {
    sum_ = z;
  } else {
    require(z.size() == sum_.size(), "StreamingEnsemble: state length changed");
    sum_ += z;
  }
  ++count_;
}

Vec64 StreamingEnsemble::finish() const {
  require(count_ > 0, "StreamingEnsemble: finish() before any push()");
  return sum_ * (1.0 / static_cast<double>(count_));
}

Vec64 defended_state(const ForwardTrace& trace, const DefenseStrategy& strategy) {
  require(!trace.states.empty(), "defended_state: empty trace");
  const std::size_t N = trace.steps();
  switch (strategy.kind) {
    case DefenseKind::Final: return trace.final_state();
    case DefenseKind::Early:
      require(strategy.calibrated, "defended_state: early-exit defense used before calibration");
      require(strategy.n_star >= 1 && strategy.n_star <= N, "defended_state: early-exit index out of range");
      return trace.states[strategy.n_star];
    case DefenseKind::Ensemble: {
      // z_0 = 0 is excluded; a zero-step trace falls back to z_0.
      if (N == 0) return trace.states[0];
      StreamingEnsemble acc;
      for (std::size_t n = 1; n <= N; ++n) acc.push(trace.states[n]);
      return acc.finish();
    }
  }
  return trace.final_state();
}

}  // namespace deqrb
