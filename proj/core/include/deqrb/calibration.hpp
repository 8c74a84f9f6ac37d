#pragma once

#include "deqrb/attacks.hpp"
#include "deqrb/defenses.hpp"

namespace deqrb {

/// Picks the early-exit index n* in 1..N with the highest robust accuracy on
/// the development set under the ready-made attack (ties to the smallest n).
DefenseStrategy calibrate_early_exit(const LayerParams& p, const ExampleSet& dev, const AttackConfig& ready_made,
                                     const SolverConfig& scfg, const BackwardConfig& bcfg);

/// Same selection over a precomputed per-state table.
std::size_t best_intermediate_index(const PerStateTable& table);

}  // namespace deqrb
