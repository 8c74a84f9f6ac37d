#pragma once

// Experiment runner and the file-producing entry points behind the CLI.
// Every file lands in cfg.out_dir; all randomness derives from cfg.seed.

#include <iosfwd>
#include <string>
#include <vector>

#include "deqrb/calibration.hpp"
#include "deqrb/checkpoint.hpp"
#include "deqrb/config.hpp"

namespace deqrb {

Dataset load_experiment_data(const ExperimentConfig& cfg);
/// Test split, truncated to data.eval_limit when set.
ExampleSet evaluation_set(const Dataset& data, const ExperimentConfig& cfg);
LayerParams initial_params(const ExperimentConfig& cfg, const Dataset& data);

/// cfg.attack with the given source and the experiment seed.
AttackConfig attack_for(const ExperimentConfig& cfg, const GradientSource& src);
/// Evaluation attack driven by the training gradient.
AttackConfig ready_made_attack(const ExperimentConfig& cfg);

/// Replaces uncalibrated Early entries with `early`.
std::vector<DefenseStrategy> resolve_defenses(const std::vector<DefenseStrategy>& defenses,
                                              const DefenseStrategy& early);

void write_examples_csv(std::ostream& out, const std::vector<AttackReport>& reports);
void write_cross_table_csv(std::ostream& out, const std::vector<AttackReport>& reports);
/// {defense: {source: {clean_acc, robust_acc, diverged_steps}}, "max_min": {...}}
void write_summary_json(std::ostream& out, const std::vector<AttackReport>& reports);

struct MaxMin {
  std::string defense;
  std::string weakest_source;
  double robust_accuracy = 0.0;
};

/// The defense whose worst case over sources is best (ties to the first).
MaxMin max_min_robustness(const std::vector<AttackReport>& reports);

struct ExperimentResult {
  LayerParams params;
  DefenseStrategy early;
  TrainLog log;
  std::vector<DefenseStrategy> defenses;
  std::vector<AttackReport> cells;  // source-major, defenses inner
  /// Adversarial inputs per source, aligned with the test examples.
  std::vector<std::vector<Vec64>> adversaries;
  PerStateTable clean_states;
  PerStateTable robust_states;
  MaxMin summary;
};

/// Trains (or loads) a model, calibrates early exit, runs the source x
/// defense grid and the ablations, and writes every report. Files written
/// before a failure stay on disk.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

/// `train` command: train_log.csv and checkpoint.json (with calibrated defense).
TrainResult run_train(const ExperimentConfig& cfg, std::ostream* log = nullptr);
/// `attack` command: every configured source against the checkpoint's defense.
std::vector<AttackReport> run_attack(const ExperimentConfig& cfg, std::ostream* log = nullptr);
/// `eval` command: calibrates early exit and evaluates every defense under
/// the ready-made attack.
std::vector<AttackReport> run_eval(const ExperimentConfig& cfg, std::ostream* log = nullptr);
/// `diagnose` command: per-example solver traces and spectral estimates.
void run_diagnose(const ExperimentConfig& cfg, std::ostream* log = nullptr);

}  // namespace deqrb
