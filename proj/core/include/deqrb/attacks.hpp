#pragma once

// l-infinity PGD with a pluggable gradient source, and a gradient-free
// random-search probe used to detect obfuscated gradients.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deqrb/dataset.hpp"
#include "deqrb/defenses.hpp"
#include "deqrb/gradients.hpp"

namespace deqrb {

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  double step = 2.0 / 255.0;
  std::size_t steps = 10;
  bool random_start = false;
  double lo = 0.0;
  double hi = 1.0;
  GradientSource source;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PgdResult {
  Vec64 x_adv;
  std::size_t diverged_steps = 0;
};

/// Called after every PGD step with (step index, current adversarial input).
using PgdObserver = std::function<void(std::size_t, const Vec64&)>;

PgdResult pgd_attack(const LayerParams& p, const Vec64& x, std::size_t y, const AttackConfig& cfg,
                     const SolverConfig& scfg, const BackwardConfig& bcfg, Rng& rng,
                     const PgdObserver& observer = {});

struct ExampleOutcome {
  std::size_t example_id = 0;
  bool clean_correct = false;
  bool robust_correct = false;
  std::size_t diverged_steps = 0;
  double linf = 0.0;  // ||x_adv - x||_inf
};

struct AttackReport {
  std::string defense;
  std::string source;
  double epsilon = 0.0;
  std::size_t steps = 0;
  std::vector<ExampleOutcome> outcomes;
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  std::size_t diverged_steps = 0;
};

/// One adversary per example, using a per-example generator forked from
/// cfg.seed so results do not depend on evaluation order.
std::vector<PgdResult> craft_adversaries(const LayerParams& p, const ExampleSet& set, const AttackConfig& cfg,
                                         const SolverConfig& scfg, const BackwardConfig& bcfg);

/// Classifies x under the defense; a diverging forward pass counts as wrong.
bool classify_correct(const LayerParams& p, const Vec64& x, std::size_t y, const DefenseStrategy& defense,
                      const SolverConfig& scfg);

AttackReport evaluate_adversaries(const LayerParams& p, const ExampleSet& set, const std::vector<PgdResult>& advs,
                                  const AttackConfig& cfg, const DefenseStrategy& defense, const SolverConfig& scfg);

AttackReport evaluate_robustness(const LayerParams& p, const ExampleSet& set, const AttackConfig& cfg,
                                 const DefenseStrategy& defense, const SolverConfig& scfg,
                                 const BackwardConfig& bcfg);

/// Robust accuracy of every forward state z_0..z_N plus the extended state
/// f(z_N) (last entry), under adversaries crafted once with cfg.source.
struct PerStateTable {
  std::vector<double> accuracy;  // size N + 2
  std::size_t steps() const { return accuracy.size() - 2; }
};

PerStateTable per_state_robustness(const LayerParams& p, const ExampleSet& set, const AttackConfig& cfg,
                                   const SolverConfig& scfg, const BackwardConfig& bcfg);
PerStateTable per_state_accuracy(const LayerParams& p, const ExampleSet& set, const std::vector<Vec64>& inputs,
                                 const SolverConfig& scfg);

struct ProbeConfig {
  double epsilon = 8.0 / 255.0;
  std::size_t queries = 100;
  double patch_frac = 0.25;
  double lo = 0.0;
  double hi = 1.0;
};

struct ProbeResult {
  Vec64 x_adv;
  std::vector<double> accepted_losses;  // starts with the clean loss
  std::size_t queries_used = 0;
};

/// Random search over vertices of the l-infinity ball: start from a random
/// sign pattern, then flip the signs of random contiguous coordinate blocks,
/// keeping a proposal only when the final-state loss increases. Stops early
/// once the example is misclassified.
ProbeResult random_search_probe(const LayerParams& p, const Vec64& x, std::size_t y, const ProbeConfig& cfg,
                                const SolverConfig& scfg, Rng& rng);

/// Fraction of examples still classified correctly (final state) after the probe.
double probe_accuracy(const LayerParams& p, const ExampleSet& set, const ProbeConfig& cfg, const SolverConfig& scfg,
                      std::uint64_t seed);

}  // namespace deqrb
