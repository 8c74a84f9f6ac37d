#pragma once

// Standard and PGD adversarial training with exact or unrolled-phantom
// parameter gradients, optional Jacobian regularization, and per-epoch
// development-set diagnostics.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "deqrb/attacks.hpp"
#include "deqrb/dataset.hpp"
#include "deqrb/gradients.hpp"

namespace deqrb {

enum class TrainMode { Standard, PgdAt };
enum class GradMode { Exact, UnrollingPhantom };
enum class SelectBy { DevRobust, DevClean };

std::string to_string(TrainMode m);
std::string to_string(GradMode m);
std::string to_string(SelectBy s);
TrainMode train_mode_from_string(const std::string& s);
GradMode grad_mode_from_string(const std::string& s);
SelectBy select_by_from_string(const std::string& s);

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  TrainMode mode = TrainMode::Standard;
  GradMode grad_mode = GradMode::UnrollingPhantom;
  std::size_t unroll_k = 5;
  double unroll_lambda = 0.5;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  AdamConfig adam;
  double jac_reg_weight = 0.0;
  std::size_t jac_reg_stop_epoch = 0;
  std::size_t jac_reg_probes = 1;
  /// Adversary generation; the source is replaced by the training gradient.
  AttackConfig attack;
  SelectBy select_by = SelectBy::DevRobust;
  std::size_t power_iters = 30;
  /// Caps the dev examples used for per-epoch diagnostics (0 = all).
  std::size_t dev_eval_limit = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// The training-time gradient, used by PGD-AT and by ready-made attacks.
GradientSource ready_made_source(const TrainConfig& cfg);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_clean_acc = 0.0;
  double dev_robust_acc = 0.0;
  double spectral_radius = 0.0;
  double rel_error = 0.0;
  std::size_t diverged = 0;

  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;  // 0 = the initial parameters
};

void write_train_log_csv(std::ostream& out, const TrainLog& log);

struct TrainResult {
  LayerParams best;
  LayerParams last;
  TrainLog log;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, TrainLog log) : std::runtime_error(what), log_(std::move(log)) {}
  const TrainLog& log() const { return log_; }

 private:
  TrainLog log_;
};

class AdamOptimizer {
 public:
  AdamOptimizer(const ModelDims& dims, const AdamConfig& cfg);
  void step(LayerParams& p, const ParamGrad& g);
  std::size_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

TrainResult train(const LayerParams& p0, const Dataset& data, const TrainConfig& cfg, const SolverConfig& scfg,
                  const BackwardConfig& bcfg);

struct JacobianReg {
  double value = 0.0;
  ParamGrad grad;
};

/// Hutchinson estimate of ||∂f/∂z||_F² / d with Rademacher probes, and its
/// parameter gradient with the state z held fixed.
JacobianReg jacobian_reg(const LayerParams& p, const Vec64& z, const Vec64& x, std::size_t probes, Rng& rng);

/// Mean power-iteration estimate of the spectral radius of v ↦ Jᵀv at each
/// example's solver output.
double spectral_trace(const LayerParams& p, const ExampleSet& dev, const SolverConfig& scfg, std::size_t iters,
                      std::uint64_t seed = 0);

}  // namespace deqrb
