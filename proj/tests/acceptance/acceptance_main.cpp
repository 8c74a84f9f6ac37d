// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "deqrb/config.hpp"
#include "deqrb/csv.hpp"
#include "deqrb/experiment.hpp"
#include "oracles.hpp"

using namespace deqrb;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int digits = 4) {
  std::ostringstream ss;
  ss.precision(digits);
  ss << v;
  return ss.str();
}

LayerParams affine_model(const Mat64& A, const Mat64& U, const Vec64& b) {
  LayerParams p;
  p.W = A;
  p.U = U;
  p.b = b;
  p.V = Mat64(2, A.rows(), 0.1);
  p.r = Vec64(2);
  p.activation = Activation::Identity;
  return p;
}

Mat64 scaled(Mat64 m, double norm) {
  m *= norm / oracle::spectral_norm(m);
  return m;
}

Mat64 symmetric_with_norm(std::size_t d, double norm, Rng& rng) {
  const Mat64 m = random_uniform(d, d, -1, 1, rng);
  Mat64 s = m;
  s += transpose(m);
  return scaled(s, norm);
}

SolverConfig solver_cfg(SolverMethod m, std::size_t iters) {
  SolverConfig c;
  c.method = m;
  c.max_iters = iters;
  return c;
}

LossFn linear_loss(const Vec64& c) {
  return [c](const Vec64& z) { return LossEval{dot(c, z), c, std::nullopt}; };
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Verdict gradient_oracles() {
  Rng rng(101);
  double worst_exact = 0.0, worst_phantom = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t d = 1 + rng.index(8), l = 1 + rng.index(8), c = 2 + rng.index(3);
    const LayerParams p = oracle::contractive_model(d, l, c, Activation::Tanh, rng, 0.6);
    const Vec64 x = random_uniform(l, 0, 1, rng);
    const std::size_t y = rng.index(c);
    const ForwardTrace fwd = solve(p, x, solver_cfg(SolverMethod::Picard, 200));
    BackwardConfig bcfg;
    bcfg.back_max_iters = 200;

    auto converged_loss = [&](const LayerParams& q, const Vec64& xx) {
      return readout_loss(q, oracle::converged_state(q, xx, 400), y).loss;
    };
    const Vec64 gx = exact_input_grad(p, x, fwd, y, bcfg);
    const Vec64 fdx = oracle::fd_grad([&](const Vec64& xx) { return converged_loss(p, xx); }, x);
    const ParamGrad gt = exact_param_grad(p, x, fwd, y, bcfg);
    const Vec64 fdt = oracle::fd_grad(
        [&](const Vec64& th) {
          LayerParams q = p;
          unflatten_into(q, th.values());
          return converged_loss(q, x);
        },
        Vec64(flatten(p)));
    worst_exact = std::max({worst_exact, oracle::rel_err(gx, fdx), oracle::rel_err(flatten(gt), fdt.values())});

    const Vec64 z0 = random_normal(d, rng);
    const std::size_t k = 1 + rng.index(6);
    const double lambda = rng.uniform(0.2, 1.0);
    auto objective = [&](const LayerParams& q, const Vec64& xx) {
      Vec64 z = z0;
      for (std::size_t t = 0; t < k; ++t) z = (1.0 - lambda) * z + lambda * layer_apply(q, z, xx);
      return readout_loss(q, z, y).loss;
    };
    const PhantomResult ph = phantom_grads(p, x, z0, y, k, lambda);
    const Vec64 pfx = oracle::fd_grad([&](const Vec64& xx) { return objective(p, xx); }, x);
    const Vec64 pft = oracle::fd_grad(
        [&](const Vec64& th) {
          LayerParams q = p;
          unflatten_into(q, th.values());
          return objective(q, x);
        },
        Vec64(flatten(p)));
    worst_phantom = std::max(
        {worst_phantom, oracle::rel_err(ph.input_grad, pfx), oracle::rel_err(flatten(ph.param_grad), pft.values())});
  }
  return {worst_exact < 1e-4 && worst_phantom < 1e-5,
          "50 models, max rel err exact " + num(worst_exact) + " (< 1e-4), phantom " + num(worst_phantom) +
              " (< 1e-5)"};
}

Verdict solver_oracles() {
  Rng rng(202);
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t d = 1 + rng.index(10), l = 1 + rng.index(4);
    const Mat64 A = scaled(random_uniform(d, d, -1, 1, rng), rng.uniform(0.1, 0.6));
    const LayerParams p = affine_model(A, random_uniform(d, l, -1, 1, rng), random_normal(d, rng));
    const Vec64 x = random_uniform(l, 0, 1, rng);
    const Vec64 zstar = oracle::affine_fixed_point(A, matvec(p.U, x) + p.b);
    for (SolverMethod m : {SolverMethod::Broyden, SolverMethod::Picard}) {
      const ForwardTrace t = solve(p, x, solver_cfg(m, 50));
      worst = std::max(worst, linf_norm(t.final_state() - zstar));
    }
  }
  // f(z) = z/2 + 1 from z_0 = 0 with B_0 = -1: z_1 = 1, B_1 = -2, z_2 = 2.
  LayerParams s = affine_model(Mat64{{0.5}}, Mat64{{0.0}}, Vec64{1.0});
  SolverConfig two = solver_cfg(SolverMethod::Broyden, 2);
  two.record_trace = true;
  const ForwardTrace t = solve_broyden(s, Vec64{0.0}, two);
  const bool scalar_ok = t.states[1][0] == 1.0 && t.B_snapshots[1](0, 0) == -2.0 && t.states[2][0] == 2.0;
  return {worst <= 1e-5 && scalar_ok, "100 affine systems, max |z_50 - z*| " + num(worst) +
                                          " (<= 1e-5); scalar two-step example " + (scalar_ok ? "exact" : "WRONG")};
}

Verdict neumann_limit() {
  Rng rng(303);
  bool monotone = true;
  double last = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t d = 2 + rng.index(7);
    const Mat64 A = symmetric_with_norm(d, rng.uniform(0.2, 0.7), rng);
    const LayerParams p = affine_model(A, Mat64::identity(d), random_normal(d, rng));
    const Vec64 x = random_uniform(d, 0, 1, rng);
    const Vec64 zstar = oracle::affine_fixed_point(A, x + p.b);
    const LossFn L = linear_loss(random_normal(d, rng));
    const Vec64 exact = oracle::affine_fixed_point(transpose(A), L(zstar).dLdz);
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t k : {1, 2, 4, 8, 16, 32}) {
      const double err = l2_norm(phantom_grads(p, x, zstar, L, k, 1.0).input_grad - exact);
      if (!(err < prev || err <= 1e-12)) monotone = false;
      prev = err;
    }
    last = std::max(last, prev);
  }
  return {monotone, std::string("20 linear models, error over k = 1..32 ") + (monotone ? "decreasing" : "NOT decreasing") +
                        ", max error at k = 32: " + num(last)};
}

Verdict appendix_b() {
  Rng rng(404);
  double worst_margin = -1.0;
  std::size_t checked = 0;
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t d = 2 + rng.index(6);
    const Mat64 A = symmetric_with_norm(d, rng.uniform(0.2, 0.8), rng);
    const LayerParams p = affine_model(A, random_uniform(d, 2, -1, 1, rng), random_normal(d, rng));
    const Vec64 x = random_uniform(2, 0, 1, rng);
    const Vec64 c = random_normal(d, rng);
    const Vec64 ustar = oracle::affine_fixed_point(transpose(A), c);
    Mat64 jg = A;
    jg += Mat64::identity(d, -1.0);
    SolverConfig cfg = solver_cfg(SolverMethod::Broyden, 12);
    cfg.initial_inverse = oracle::from_eigen(Eigen::MatrixXd(oracle::to_eigen(jg).inverse()));
    cfg.broyden_alpha = 0.5;
    for (double beta : {0.25, 0.5, 0.75}) {
      const SimultaneousResult sim = simultaneous_adjoint(p, x, linear_loss(c), cfg, beta);
      // The construction has ||I - B J_g^T|| = 0, i.e. epsilon = 1.
      for (double r : adjoint_convergence_ratio(sim.adj, ustar)) {
        worst_margin = std::max(worst_margin, r - (1.0 - beta));
        ++checked;
      }
    }
  }
  return {checked > 0 && worst_margin <= 1e-6,
          std::to_string(checked) + " ratios, max(ratio - (1 - beta)) = " + num(worst_margin) + " (<= 1e-6)"};
}

Verdict streaming_ensemble() {
  Rng rng(505);
  double worst = 0.0;
  bool constant_memory = true;
  for (int seq = 0; seq < 3; ++seq) {
    const std::size_t d = 16;
    StreamingEnsemble s;
    std::vector<Vec64> stored;
    for (int i = 0; i < 10000; ++i) {
      stored.push_back(random_normal(d, rng));
      s.push(stored.back());
      constant_memory = constant_memory && s.retained_values() == d;
    }
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    for (const Vec64& z : stored) mean += oracle::to_eigen(z);
    mean /= static_cast<double>(stored.size());
    worst = std::max(worst, linf_norm(s.finish() - oracle::from_eigen(mean)));
  }
  constexpr bool layout = sizeof(StreamingEnsemble) == sizeof(Vec64) + sizeof(std::size_t);
  return {worst <= 1e-12 && constant_memory && layout,
          "3 x 10^4 pushes, max deviation " + num(worst) + " (<= 1e-12); retains one state vector + counter: " +
              (constant_memory && layout ? "yes" : "NO")};
}

ExperimentConfig contract_config(const fs::path& out) {
  ExperimentConfig cfg = default_experiment_config();
  cfg.seed = 7;
  cfg.out_dir = out.string();
  cfg.data.kind = SyntheticKind::Moons;
  cfg.data.n = 240;
  cfg.data.l = 8;
  cfg.data.eval_limit = 40;
  cfg.model.d = 8;
  cfg.train.mode = TrainMode::PgdAt;
  cfg.train.epochs = 3;
  cfg.train.attack.epsilon = 0.1;
  cfg.train.attack.step = 0.05;
  cfg.train.attack.steps = 2;
  cfg.train.dev_eval_limit = 30;
  cfg.attack.epsilon = 0.1;
  cfg.attack.step = 0.03;
  cfg.attack.steps = 5;
  cfg.attack.random_start = true;
  cfg.ablation.n = {1, 4};
  cfg.ablation.k = {1};
  cfg.ablation.lambda = {1.0};
  cfg.ablation.beta = {0.25};
  return cfg;
}

Verdict pgd_contract(const fs::path& out) {
  const ExperimentConfig a = contract_config(out / "contract_a");
  ExperimentConfig b = a;
  b.out_dir = (out / "contract_b").string();
  const ExperimentResult ra = run_experiment(a);
  run_experiment(b);

  const ExampleSet test = evaluation_set(load_experiment_data(a), a);
  double worst = 0.0;
  bool in_box = true;
  std::size_t checked = 0;
  for (const auto& advs : ra.adversaries) {
    for (std::size_t i = 0; i < advs.size(); ++i) {
      worst = std::max(worst, linf_norm(advs[i] - test.inputs[i]));
      for (double v : advs[i]) in_box = in_box && v >= a.attack.lo && v <= a.attack.hi;
      ++checked;
    }
  }
  bool identical = true;
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(a.out_dir)) {
    const std::string name = entry.path().filename().string();
    if (name == "config.json") continue;  // records its own out_dir
    identical = identical && read_file(entry.path()) == read_file(fs::path(b.out_dir) / name);
    ++files;
  }
  const bool ball = worst <= a.attack.epsilon + 1e-12;
  return {ball && in_box && identical,
          std::to_string(ra.cells.size()) + " cells, " + std::to_string(checked) + " adversaries, max ||delta|| " +
              num(worst, 17) + ", box " + (in_box ? "ok" : "VIOLATED") + "; " + std::to_string(files) +
              " report files " + (identical ? "byte-identical" : "DIFFER")};
}

// ---------------------------------------------------------------------------
// Experiments on trained toy models. Their configurations live in configs/.

ExperimentConfig load_repo_config(const std::string& name, const fs::path& out) {
  ExperimentConfig cfg = load_config(std::string(DEQRB_SOURCE_DIR) + "/configs/" + name);
  cfg.out_dir = out.string();
  return cfg;
}

struct OrderingResult {
  Verdict accumulation;
  Verdict intermediate_attack;
};

OrderingResult robustness_ordering(const fs::path& out) {
  ExperimentConfig cfg = load_repo_config("digits_pgd_at.json", out / "digits_pgd_at");
  const std::size_t N = cfg.solver.max_iters;
  cfg.sources = {GradientSource::exact_final()};
  for (std::size_t n = 1; n < N; ++n) {
    cfg.sources.push_back(GradientSource::unrolled_intermediate(n, 2, 0.5));
    cfg.sources.push_back(GradientSource::adjoint_intermediate(n, 0.5));
  }
  cfg.defenses = {DefenseStrategy::uncalibrated_early()};
  const ExperimentResult res = run_experiment(cfg);

  OrderingResult r;
  const auto& acc = res.robust_states.accuracy;
  std::size_t best_n = 1;
  for (std::size_t n = 2; n < N; ++n)
    if (acc[n] > acc[best_n]) best_n = n;
  r.accumulation = {acc[best_n] >= acc[N], "ready-made attack: best intermediate z_" + std::to_string(best_n) + " " +
                                              num(acc[best_n]) + " vs final z_" + std::to_string(N) + " " +
                                              num(acc[N]) + " (need >=)"};

  const AttackReport& final_attack = res.cells[0];
  const AttackReport* strongest = &res.cells[1];
  for (std::size_t i = 1; i < res.cells.size(); ++i)
    if (res.cells[i].robust_accuracy < strongest->robust_accuracy) strongest = &res.cells[i];
  const double n = static_cast<double>(final_attack.outcomes.size());
  const double p1 = final_attack.robust_accuracy, p2 = strongest->robust_accuracy;
  const double pooled = 0.5 * (p1 + p2);
  const double se = std::sqrt(std::max(pooled * (1.0 - pooled) * 2.0 / n, 1e-300));
  const double z = (p1 - p2) / se;
  r.intermediate_attack = {n >= 500 && z > 1.645,
                           final_attack.defense + " on " + std::to_string(final_attack.outcomes.size()) +
                               " examples: final-state attack " + num(p1) + " vs " + strongest->source + " " +
                               num(p2) + ", one-sided z = " + num(z, 3) + " (need > 1.645)"};
  return r;
}

// Median over test points of the l-infinity distance to the nearest
// training point of another class.
double linf_class_margin(const Dataset& data, const ExampleSet& test) {
  const ExampleSet train = data.train();
  std::vector<double> dists;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < train.size(); ++j)
      if (train.labels[j] != test.labels[i]) best = std::min(best, linf_norm(train.inputs[j] - test.inputs[i]));
    dists.push_back(best);
  }
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2), dists.end());
  return dists[dists.size() / 2];
}

Verdict standard_training_defeat(const fs::path& out) {
  ExperimentConfig cfg = load_repo_config("moons_standard.json", out / "moons_standard");
  const Dataset data = load_experiment_data(cfg);
  const double margin = linf_class_margin(data, evaluation_set(data, cfg));
  // Keep the configured step-to-radius ratio.
  cfg.attack.step *= margin / cfg.attack.epsilon;
  cfg.attack.epsilon = margin;
  const ExperimentResult res = run_experiment(cfg);
  double worst = 0.0;
  std::string worst_source;
  double clean = 0.0;
  for (const AttackReport& r : res.cells) {
    clean = r.clean_accuracy;
    if (r.robust_accuracy >= worst) {
      worst = r.robust_accuracy;
      worst_source = r.source;
    }
  }
  return {worst < 0.05, "epsilon = median class margin " + num(margin) + ", clean " + num(clean) + ", highest robust " +
                            num(worst) + " (" + worst_source + ", " + std::to_string(res.cells.size()) +
                            " sources; need < 0.05)"};
}

struct ProbeGap {
  double probe = 0.0;
  double pgd = 0.0;
  double rel_error = 0.0;
};

ProbeGap probe_gap(const std::string& config, const fs::path& out) {
  ExperimentConfig cfg = load_repo_config(config, out);
  cfg.sources = {ready_made_source(cfg.train)};
  cfg.defenses = {DefenseStrategy::final_state()};
  cfg.probe.enabled = false;  // computed below with the same settings
  const ExperimentResult res = run_experiment(cfg);
  const Dataset data = load_experiment_data(cfg);
  const ExampleSet test = evaluation_set(data, cfg);
  ProbeConfig pc;
  pc.epsilon = cfg.attack.epsilon;
  pc.queries = cfg.probe.queries;
  pc.patch_frac = cfg.probe.patch_frac;
  pc.lo = cfg.attack.lo;
  pc.hi = cfg.attack.hi;
  ProbeGap g;
  g.probe = probe_accuracy(res.params, test, pc, cfg.solver, cfg.seed);
  g.pgd = res.cells[0].robust_accuracy;
  double total = 0.0;
  std::size_t counted = 0;
  for (const Vec64& x : test.inputs) {
    try {
      total += solve(res.params, x, cfg.solver).rel_errors.back();
      ++counted;
    } catch (const DivergenceError&) {
    }
  }
  g.rel_error = counted ? total / static_cast<double>(counted) : std::numeric_limits<double>::infinity();
  return g;
}

Verdict obfuscation_probe(const fs::path& out) {
  const ProbeGap loose = probe_gap("probe_unconverged.json", out / "probe_unconverged");
  const ProbeGap tight = probe_gap("probe_converged.json", out / "probe_converged");
  const bool pass = loose.probe < loose.pgd && tight.probe > tight.pgd;
  return {pass, "non-converged (rel err " + num(loose.rel_error) + "): probe " + num(loose.probe) + " vs PGD " +
                    num(loose.pgd) + " (need <); converged (rel err " + num(tight.rel_error) + "): probe " +
                    num(tight.probe) + " vs PGD " + num(tight.pgd) + " (need >)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deqrb acceptance checks"};
  std::string out = "acceptance_out";
  std::vector<int> only;
  app.add_option("--out", out, "Directory for experiment outputs");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(out);

  int failures = 0;
  auto run = [&](int id, const std::string& name, const std::function<Verdict()>& check) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) return;
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!v.pass) ++failures;
    std::cout << (v.pass ? "[PASS] " : "[FAIL] ") << id << " " << name << ": " << v.detail << " [" << num(secs, 3)
              << " s]" << std::endl;
  };

  run(1, "gradient oracles", gradient_oracles);
  run(2, "solver oracles", solver_oracles);
  run(3, "neumann limit", neumann_limit);
  run(4, "adjoint convergence", appendix_b);
  run(5, "streaming ensemble", streaming_ensemble);
  run(6, "pgd contract", [&] { return pgd_contract(out); });

  OrderingResult ordering;
  bool ordering_ran = false;
  auto ordering_once = [&] {
    if (!ordering_ran) {
      ordering_ran = true;
      try {
        ordering = robustness_ordering(out);
      } catch (const std::exception& e) {
        ordering.accumulation = ordering.intermediate_attack = {false, std::string("threw: ") + e.what()};
      }
    }
  };
  run(7, "robustness accumulation", [&] {
    ordering_once();
    return ordering.accumulation;
  });
  run(8, "intermediate attack beats final attack on early exit", [&] {
    ordering_once();
    return ordering.intermediate_attack;
  });
  run(9, "standard training is defeated", [&] { return standard_training_defeat(out); });
  run(10, "obfuscation probe", [&] { return obfuscation_probe(out); });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
