#include "deqrb/training.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numeric>
#include <ostream>

#include "deqrb/csv.hpp"

namespace deqrb {

std::string to_string(TrainMode m) { return m == TrainMode::Standard ? "standard" : "pgd_at"; }
std::string to_string(GradMode m) { return m == GradMode::Exact ? "exact" : "unrolling"; }
std::string to_string(SelectBy s) { return s == SelectBy::DevRobust ? "dev_robust" : "dev_clean"; }

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "standard") return TrainMode::Standard;
  if (s == "pgd_at") return TrainMode::PgdAt;
  throw FormatError("unknown training mode '" + s + "'");
}

GradMode grad_mode_from_string(const std::string& s) {
  if (s == "exact") return GradMode::Exact;
  if (s == "unrolling") return GradMode::UnrollingPhantom;
  throw FormatError("unknown gradient mode '" + s + "'");
}

SelectBy select_by_from_string(const std::string& s) {
  if (s == "dev_robust") return SelectBy::DevRobust;
  if (s == "dev_clean") return SelectBy::DevClean;
  throw FormatError("unknown checkpoint selection '" + s + "'");
}

void TrainConfig::validate() const {
  require(unroll_k >= 1, "TrainConfig: unroll_k must be >= 1");
  require(unroll_lambda > 0.0 && unroll_lambda <= 1.0, "TrainConfig: unroll_lambda must lie in (0, 1]");
  require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  require(jac_reg_weight >= 0.0, "TrainConfig: jac_reg_weight must be >= 0");
  require(jac_reg_probes >= 1, "TrainConfig: jac_reg_probes must be >= 1");
  require(adam.lr > 0.0, "TrainConfig: learning rate must be > 0");
}

GradientSource ready_made_source(const TrainConfig& cfg) {
  if (cfg.grad_mode == GradMode::Exact) return GradientSource::exact_final();
  return GradientSource::phantom_final(cfg.unroll_k, cfg.unroll_lambda);
}

void write_train_log_csv(std::ostream& out, const TrainLog& log) {
  csv::Writer w(out);
  w.header({"epoch", "loss", "clean_acc", "robust_acc", "spectral_radius", "rel_error"});
  for (const EpochLog& e : log.epochs) {
    w.field(e.epoch).field(e.train_loss).field(e.dev_clean_acc).field(e.dev_robust_acc).field(e.spectral_radius)
        .field(e.rel_error)
        .end_row();
  }
}

AdamOptimizer::AdamOptimizer(const ModelDims& dims, const AdamConfig& cfg)
    : cfg_(cfg), m_(parameter_count(dims), 0.0), v_(parameter_count(dims), 0.0) {}

void AdamOptimizer::step(LayerParams& p, const ParamGrad& g) {
  std::vector<double> theta = flatten(p);
  const std::vector<double> grad = flatten(g);
  require(theta.size() == m_.size() && grad.size() == m_.size(), "AdamOptimizer: parameter shape changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    theta[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
  }
  unflatten_into(p, theta);
}

JacobianReg jacobian_reg(const LayerParams& p, const Vec64& z, const Vec64& x, std::size_t probes, Rng& rng) {
  require(probes >= 1, "jacobian_reg: probes must be >= 1");
  const std::size_t d = p.W.rows();
  const Vec64 a = preactivation(p, z, x);
  Vec64 gate(d), curv(d);
  for (std::size_t i = 0; i < d; ++i) {
    gate[i] = activate_prime(p.activation, a[i]);
    curv[i] = activate_second(p.activation, a[i]);
  }

  JacobianReg out;
  out.grad = ParamGrad::zeros_like(p);
  const double scale = 1.0 / (static_cast<double>(probes) * static_cast<double>(d));
  for (std::size_t k = 0; k < probes; ++k) {
    Vec64 xi(d);
    for (double& v : xi) v = rng.rademacher();
    const Vec64 s = hadamard(gate, xi);
    const Vec64 q = matvec_t(p.W, s);  // Jᵀξ
    out.value += scale * dot(q, q);
    // Through act'(a): h = (W q) ⊙ act''(a) ⊙ ξ.
    const Vec64 h = hadamard(hadamard(matvec(p.W, q), curv), xi);
    rank1_update_inplace(out.grad.W, s, q, 2.0 * scale);
    rank1_update_inplace(out.grad.W, h, z, 2.0 * scale);
    rank1_update_inplace(out.grad.U, h, x, 2.0 * scale);
    out.grad.b += (2.0 * scale) * h;
  }
  return out;
}

double spectral_trace(const LayerParams& p, const ExampleSet& dev, const SolverConfig& scfg, std::size_t iters,
                      std::uint64_t seed) {
  require(!dev.empty(), "spectral_trace: empty development set");
  const Rng base(seed);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < dev.size(); ++i) {
    ForwardTrace t;
    try {
      t = solve(p, dev.inputs[i], scfg);
    } catch (const DivergenceError&) {
      continue;
    }
    const Linearization lin(p, t.final_state(), dev.inputs[i]);
    Rng rng = base.fork(i);
    total += power_iteration([&](const Vec64& v) { return lin.vjp_z(v); }, p.W.rows(), iters, rng);
    ++counted;
  }
  return counted == 0 ? std::numeric_limits<double>::infinity() : total / static_cast<double>(counted);
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kAttackStream = 0x4154;
constexpr std::uint64_t kJacobianStream = 0x4a52;

struct ExampleGrad {
  ParamGrad grad;
  double loss = 0.0;
  Vec64 z_final;
};

ExampleGrad example_grad(const LayerParams& p, const Vec64& x, std::size_t y, const TrainConfig& cfg,
                         const SolverConfig& scfg, const BackwardConfig& bcfg) {
  const ForwardTrace fwd = solve(p, x, scfg);
  ExampleGrad out;
  out.z_final = fwd.final_state();
  if (cfg.grad_mode == GradMode::Exact) {
    const LossFn loss = readout_objective(p, y);
    out.grad = exact_param_grad(p, x, fwd, loss, bcfg);
    out.loss = loss(out.z_final).loss;
  } else {
    PhantomResult r = phantom_grads(p, x, out.z_final, y, cfg.unroll_k, cfg.unroll_lambda, true);
    out.grad = std::move(r.param_grad);
    out.loss = r.loss;
  }
  return out;
}

ExampleSet limit_set(const ExampleSet& set, std::size_t limit) {
  if (limit == 0 || set.size() <= limit) return set;
  ExampleSet out;
  out.inputs.assign(set.inputs.begin(), set.inputs.begin() + static_cast<std::ptrdiff_t>(limit));
  out.labels.assign(set.labels.begin(), set.labels.begin() + static_cast<std::ptrdiff_t>(limit));
  return out;
}

EpochLog evaluate_epoch(const LayerParams& p, const ExampleSet& dev, const TrainConfig& cfg, const SolverConfig& scfg,
                        const BackwardConfig& bcfg) {
  EpochLog e;
  if (dev.empty()) return e;
  AttackConfig eval_attack = cfg.attack;
  eval_attack.source = ready_made_source(cfg);
  eval_attack.random_start = false;
  const AttackReport rep = evaluate_robustness(p, dev, eval_attack, DefenseStrategy::final_state(), scfg, bcfg);
  e.dev_clean_acc = rep.clean_accuracy;
  e.dev_robust_acc = rep.robust_accuracy;
  e.spectral_radius = spectral_trace(p, dev, scfg, cfg.power_iters, cfg.seed);
  double rel = 0.0;
  std::size_t counted = 0;
  for (const Vec64& x : dev.inputs) {
    try {
      rel += solve(p, x, scfg).rel_errors.back();
      ++counted;
    } catch (const DivergenceError&) {
    }
  }
  e.rel_error = counted == 0 ? std::numeric_limits<double>::infinity() : rel / static_cast<double>(counted);
  return e;
}

bool better(const EpochLog& a, const EpochLog& b, SelectBy by) {
  if (by == SelectBy::DevClean) {
    if (a.dev_clean_acc != b.dev_clean_acc) return a.dev_clean_acc > b.dev_clean_acc;
    return a.dev_robust_acc > b.dev_robust_acc;
  }
  if (a.dev_robust_acc != b.dev_robust_acc) return a.dev_robust_acc > b.dev_robust_acc;
  return a.dev_clean_acc > b.dev_clean_acc;
}

}  // namespace

TrainResult train(const LayerParams& p0, const Dataset& data, const TrainConfig& cfg, const SolverConfig& scfg,
                  const BackwardConfig& bcfg) {
  cfg.validate();
  p0.validate();
  TrainResult result{p0, p0, {}};
  if (cfg.epochs == 0) return result;

  const ExampleSet train_set = data.train();
  const ExampleSet dev_set = limit_set(data.dev(), cfg.dev_eval_limit);
  require(!train_set.empty(), "train: empty training split");

  AttackConfig at_cfg = cfg.attack;
  at_cfg.source = ready_made_source(cfg);

  LayerParams p = p0;
  AdamOptimizer opt(p.dims(), cfg.adam);
  const Rng root(cfg.seed);
  Rng shuffle_rng = root.fork(kShuffleStream);
  const Rng attack_root = root.fork(kAttackStream);
  Rng jac_rng = root.fork(kJacobianStream);

  std::vector<std::size_t> order(train_set.size());
  EpochLog best_log;
  bool have_best = false;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.index(i)]);

    const bool use_jac = cfg.jac_reg_weight > 0.0 && epoch <= cfg.jac_reg_stop_epoch;
    double loss_sum = 0.0;
    std::size_t used = 0;
    std::size_t diverged = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      ParamGrad acc = ParamGrad::zeros_like(p);
      std::size_t batch_used = 0;
      for (std::size_t j = start; j < stop; ++j) {
        const std::size_t idx = order[j];
        const std::size_t y = train_set.labels[idx];
        Vec64 x = train_set.inputs[idx];
        if (cfg.mode == TrainMode::PgdAt) {
          Rng arng = attack_root.fork((static_cast<std::uint64_t>(epoch) << 32) ^ j);
          x = pgd_attack(p, x, y, at_cfg, scfg, bcfg, arng).x_adv;
        }
        try {
          ExampleGrad eg = example_grad(p, x, y, cfg, scfg, bcfg);
          if (use_jac) {
            JacobianReg jr = jacobian_reg(p, eg.z_final, x, cfg.jac_reg_probes, jac_rng);
            jr.grad *= cfg.jac_reg_weight;
            eg.grad += jr.grad;
          }
          if (!std::isfinite(eg.loss) || !eg.grad.W.all_finite()) {
            ++diverged;
            continue;
          }
          acc += eg.grad;
          loss_sum += eg.loss;
          ++batch_used;
        } catch (const DivergenceError&) {
          ++diverged;
        } catch (const BackwardDivergenceError&) {
          ++diverged;
        }
      }
      if (batch_used == 0) continue;
      acc *= 1.0 / static_cast<double>(batch_used);
      opt.step(p, acc);
      used += batch_used;
    }

    EpochLog e = evaluate_epoch(p, dev_set, cfg, scfg, bcfg);
    e.epoch = epoch;
    e.train_loss = used == 0 ? std::numeric_limits<double>::quiet_NaN() : loss_sum / static_cast<double>(used);
    e.diverged = diverged;
    result.log.epochs.push_back(e);

    if (used == 0) {
      throw TrainingAborted("train: every example diverged in epoch " + std::to_string(epoch), result.log);
    }
    if (!have_best || better(e, best_log, cfg.select_by)) {
      best_log = e;
      have_best = true;
      result.best = p;
      result.log.best_epoch = epoch;
    }
  }
  result.last = p;
  return result;
}

}  // namespace deqrb
