#include "deqrb/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace deqrb {

void AttackConfig::validate() const {
  require(std::isfinite(epsilon) && epsilon >= 0.0, "AttackConfig: epsilon must be >= 0");
  require(std::isfinite(step) && step > 0.0, "AttackConfig: step must be > 0");
  require(steps >= 1, "AttackConfig: steps must be >= 1");
  require(lo < hi, "AttackConfig: box requires lo < hi");
  source.validate();
}

namespace {

void require_in_box(const Vec64& x, double lo, double hi) {
  for (double v : x) require(v >= lo && v <= hi, "attack: clean input lies outside the box");
}

// Projection onto B_inf(x0, eps) ∩ [lo, hi]^l.
void project(Vec64& x, const Vec64& x0, double eps, double lo, double hi) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = std::clamp(x[i], x0[i] - eps, x0[i] + eps);
    x[i] = std::clamp(x[i], lo, hi);
  }
}

}  // namespace

PgdResult pgd_attack(const LayerParams& p, const Vec64& x, std::size_t y, const AttackConfig& cfg,
                     const SolverConfig& scfg, const BackwardConfig& bcfg, Rng& rng, const PgdObserver& observer) {
  cfg.validate();
  require_in_box(x, cfg.lo, cfg.hi);
  PgdResult out{x, 0};
  Vec64& adv = out.x_adv;
  if (cfg.random_start) {
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += rng.uniform(-cfg.epsilon, cfg.epsilon);
    project(adv, x, cfg.epsilon, cfg.lo, cfg.hi);
  }
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    Vec64 g;
    try {
      g = source_gradient(p, adv, y, cfg.source, scfg, bcfg).grad;
    } catch (const DivergenceError&) {
      ++out.diverged_steps;
    } catch (const BackwardDivergenceError&) {
      ++out.diverged_steps;
    }
    if (!g.empty()) {
      const Vec64 dir = sign(g);
      for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += cfg.step * dir[i];
      project(adv, x, cfg.epsilon, cfg.lo, cfg.hi);
    }
    if (observer) observer(s, adv);
  }
  return out;
}

std::vector<PgdResult> craft_adversaries(const LayerParams& p, const ExampleSet& set, const AttackConfig& cfg,
                                         const SolverConfig& scfg, const BackwardConfig& bcfg) {
  const Rng base(cfg.seed);
  std::vector<PgdResult> out;
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    Rng rng = base.fork(i);
    out.push_back(pgd_attack(p, set.inputs[i], set.labels[i], cfg, scfg, bcfg, rng));
  }
  return out;
}

bool classify_correct(const LayerParams& p, const Vec64& x, std::size_t y, const DefenseStrategy& defense,
                      const SolverConfig& scfg) {
  try {
    const ForwardTrace t = solve(p, x, scfg);
    return predict(p, defended_state(t, defense)) == y;
  } catch (const DivergenceError&) {
    return false;
  }
}

AttackReport evaluate_adversaries(const LayerParams& p, const ExampleSet& set, const std::vector<PgdResult>& advs,
                                  const AttackConfig& cfg, const DefenseStrategy& defense, const SolverConfig& scfg) {
  require(!set.empty(), "evaluate_robustness: empty dataset");
  require(advs.size() == set.size(), "evaluate_adversaries: one adversary per example required");
  AttackReport rep;
  rep.defense = defense.label();
  rep.source = cfg.source.label();
  rep.epsilon = cfg.epsilon;
  rep.steps = cfg.steps;
  std::size_t clean = 0;
  std::size_t robust = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    ExampleOutcome o;
    o.example_id = i;
    o.clean_correct = classify_correct(p, set.inputs[i], set.labels[i], defense, scfg);
    o.robust_correct = classify_correct(p, advs[i].x_adv, set.labels[i], defense, scfg);
    o.diverged_steps = advs[i].diverged_steps;
    o.linf = linf_norm(advs[i].x_adv - set.inputs[i]);
    clean += o.clean_correct;
    robust += o.robust_correct;
    rep.diverged_steps += o.diverged_steps;
    rep.outcomes.push_back(o);
  }
  rep.clean_accuracy = static_cast<double>(clean) / static_cast<double>(set.size());
  rep.robust_accuracy = static_cast<double>(robust) / static_cast<double>(set.size());
  return rep;
}

AttackReport evaluate_robustness(const LayerParams& p, const ExampleSet& set, const AttackConfig& cfg,
                                 const DefenseStrategy& defense, const SolverConfig& scfg,
                                 const BackwardConfig& bcfg) {
  require(!set.empty(), "evaluate_robustness: empty dataset");
  return evaluate_adversaries(p, set, craft_adversaries(p, set, cfg, scfg, bcfg), cfg, defense, scfg);
}

PerStateTable per_state_accuracy(const LayerParams& p, const ExampleSet& set, const std::vector<Vec64>& inputs,
                                 const SolverConfig& scfg) {
  require(!set.empty(), "per_state_accuracy: empty dataset");
  require(inputs.size() == set.size(), "per_state_accuracy: one input per example required");
  const std::size_t N = scfg.max_iters;
  std::vector<std::size_t> correct(N + 2, 0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    ForwardTrace t;
    try {
      t = solve(p, inputs[i], scfg);
    } catch (const DivergenceError&) {
      continue;
    }
    for (std::size_t n = 0; n <= N; ++n) correct[n] += predict(p, t.states[n]) == set.labels[i];
    correct[N + 1] += predict(p, extended_state(p, t, inputs[i])) == set.labels[i];
  }
  PerStateTable table;
  for (std::size_t c : correct) table.accuracy.push_back(static_cast<double>(c) / static_cast<double>(set.size()));
  return table;
}

PerStateTable per_state_robustness(const LayerParams& p, const ExampleSet& set, const AttackConfig& cfg,
                                   const SolverConfig& scfg, const BackwardConfig& bcfg) {
  std::vector<Vec64> advs;
  for (PgdResult& r : craft_adversaries(p, set, cfg, scfg, bcfg)) advs.push_back(std::move(r.x_adv));
  return per_state_accuracy(p, set, advs, scfg);
}

namespace {

struct ProbeEval {
  double loss;
  bool correct;
};

std::optional<ProbeEval> probe_eval(const LayerParams& p, const Vec64& x, std::size_t y, const SolverConfig& scfg) {
  try {
    const ForwardTrace t = solve(p, x, scfg);
    const Vec64& z = t.final_state();
    return ProbeEval{readout_loss(p, z, y).loss, predict(p, z) == y};
  } catch (const DivergenceError&) {
    return std::nullopt;
  }
}

Vec64 apply_signs(const Vec64& x, const Vec64& signs, const ProbeConfig& cfg) {
  Vec64 out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i] + cfg.epsilon * signs[i], cfg.lo, cfg.hi);
  return out;
}

}  // namespace

ProbeResult random_search_probe(const LayerParams& p, const Vec64& x, std::size_t y, const ProbeConfig& cfg,
                                const SolverConfig& scfg, Rng& rng) {
  require(cfg.queries >= 1, "random_search_probe: queries must be >= 1");
  require(cfg.patch_frac > 0.0 && cfg.patch_frac <= 1.0, "random_search_probe: patch_frac must lie in (0, 1]");
  require(cfg.epsilon >= 0.0 && cfg.lo < cfg.hi, "random_search_probe: invalid radius or box");
  require_in_box(x, cfg.lo, cfg.hi);

  ProbeResult out;
  out.x_adv = x;
  if (cfg.epsilon == 0.0) return out;

  const std::optional<ProbeEval> clean = probe_eval(p, x, y, scfg);
  if (!clean) return out;
  double best = clean->loss;
  out.accepted_losses.push_back(best);
  if (!clean->correct) return out;

  const std::size_t l = x.size();
  const std::size_t block = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.patch_frac * l)));
  Vec64 signs(l);
  for (double& s : signs) s = rng.rademacher();

  for (std::size_t q = 0; q < cfg.queries; ++q) {
    Vec64 proposal = signs;
    if (q > 0) {
      const std::size_t start = rng.index(l - block + 1);
      for (std::size_t i = start; i < start + block; ++i) proposal[i] = -proposal[i];
    }
    const Vec64 candidate = apply_signs(x, proposal, cfg);
    ++out.queries_used;
    const std::optional<ProbeEval> e = probe_eval(p, candidate, y, scfg);
    if (!e || !(e->loss > best)) continue;
    best = e->loss;
    signs = std::move(proposal);
    out.x_adv = candidate;
    out.accepted_losses.push_back(best);
    if (!e->correct) break;
  }
  return out;
}

double probe_accuracy(const LayerParams& p, const ExampleSet& set, const ProbeConfig& cfg, const SolverConfig& scfg,
                      std::uint64_t seed) {
  require(!set.empty(), "probe_accuracy: empty dataset");
  const Rng base(seed);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    Rng rng = base.fork(i);
    const ProbeResult r = random_search_probe(p, set.inputs[i], set.labels[i], cfg, scfg, rng);
    correct += classify_correct(p, r.x_adv, set.labels[i], DefenseStrategy::final_state(), scfg);
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

}  // namespace deqrb
