#pragma once

// Experiment configuration as a single JSON document. Parsing fills unset
// fields with defaults and rejects unknown keys; serialization writes every
// field so a saved config is fully explicit.

#include <cstdint>
#include <string>
#include <vector>

#include "deqrb/attacks.hpp"
#include "deqrb/dataset.hpp"
#include "deqrb/training.hpp"

namespace deqrb {

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "idx"
  SyntheticKind kind = SyntheticKind::Moons;
  std::size_t n = 600;
  double noise = 0.1;
  std::size_t l = 16;
  std::string images;
  std::string labels;
  std::size_t limit = 1000;
  SplitFractions fractions;
  /// Caps the test examples attacked (0 = all).
  std::size_t eval_limit = 0;
};

struct ModelConfig {
  std::size_t d = 16;
  Activation activation = Activation::Tanh;
  double max_spectral_radius = 0.9;
  double w_scale = 1.0;
  /// When set, the model is loaded instead of trained.
  std::string checkpoint;
};

struct AblationConfig {
  std::vector<std::size_t> n;
  std::vector<std::size_t> k;
  std::vector<double> lambda;
  std::vector<double> beta;
  std::size_t base_n = 1;
  std::size_t base_k = 2;
  double base_lambda = 0.5;
  double base_beta = 0.5;
};

struct ProbeSettings {
  bool enabled = false;
  std::size_t queries = 100;
  double patch_frac = 0.25;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  DataConfig data;
  ModelConfig model;
  SolverConfig solver;
  BackwardConfig backward;
  TrainConfig train;
  /// Evaluation attack; its source and seed are set per grid cell.
  AttackConfig attack;
  std::vector<GradientSource> sources;
  /// An Early entry with n_star = 0 is calibrated on the dev split.
  std::vector<DefenseStrategy> defenses;
  AblationConfig ablation;
  ProbeSettings probe;

  void validate() const;
};

ExperimentConfig default_experiment_config();

ExperimentConfig parse_config(const std::string& text);
/// Reads a config file; relative data and checkpoint paths are resolved
/// against the file's directory.
ExperimentConfig load_config(const std::string& path);
void resolve_paths(ExperimentConfig& cfg, const std::string& base_dir);
std::string serialize_config(const ExperimentConfig& cfg);

/// Applies `key=value` overrides to the JSON text. Keys are dotted paths
/// ("train.epochs"); values are parsed as JSON, falling back to a string.
std::string apply_overrides(const std::string& text, const std::vector<std::string>& overrides);

GradientSource parse_source(const std::string& json_text);
std::string serialize_source(const GradientSource& src);

}  // namespace deqrb
