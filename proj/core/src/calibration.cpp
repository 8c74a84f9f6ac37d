#include "deqrb/calibration.hpp"

namespace deqrb {

std::size_t best_intermediate_index(const PerStateTable& table) {
  const std::size_t N = table.steps();
  require(N >= 1, "calibrate_early_exit: trace has no intermediate states");
  std::size_t best = 1;
  for (std::size_t n = 2; n <= N; ++n)
    if (table.accuracy[n] > table.accuracy[best]) best = n;
  return best;
}

DefenseStrategy calibrate_early_exit(const LayerParams& p, const ExampleSet& dev, const AttackConfig& ready_made,
                                     const SolverConfig& scfg, const BackwardConfig& bcfg) {
  require(!dev.empty(), "calibrate_early_exit: empty development set");
  return DefenseStrategy::early(best_intermediate_index(per_state_robustness(p, dev, ready_made, scfg, bcfg)));
}

}  // namespace deqrb
