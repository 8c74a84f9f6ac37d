#include "deqrb/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <ostream>

#include "deqrb/csv.hpp"
#include "json.hpp"

namespace deqrb {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kInitStream = 0x1a1d;
constexpr std::uint64_t kProbeStream = 0x9f0b;
constexpr std::uint64_t kDiagStream = 0xd1a9;

std::ofstream open_out(const ExperimentConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.out_dir);
  const fs::path path = fs::path(cfg.out_dir) / name;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  return out;
}

void note(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << '\n' << std::flush;
}

LayerParams model_for(const ExperimentConfig& cfg, const Dataset& data, Checkpoint* loaded) {
  if (cfg.model.checkpoint.empty()) return initial_params(cfg, data);
  Checkpoint ck = load_checkpoint(cfg.model.checkpoint);
  const ModelDims dims = ck.params.dims();
  require(dims.l == data.input_dim(), "checkpoint input dimension does not match the data");
  require(dims.c >= data.num_classes, "checkpoint has fewer classes than the data");
  if (loaded) *loaded = ck;
  return ck.params;
}

DefenseStrategy calibrated_or(const ExperimentConfig& cfg, const LayerParams& p, const Dataset& data,
                              const Checkpoint* loaded) {
  if (loaded && loaded->defense.kind == DefenseKind::Early && loaded->defense.calibrated) return loaded->defense;
  ExampleSet dev = data.dev();
  if (dev.empty()) dev = data.train();
  return calibrate_early_exit(p, dev, ready_made_attack(cfg), cfg.solver, cfg.backward);
}

void write_state_csv(std::ostream& out, const PerStateTable& clean, const PerStateTable& robust) {
  csv::Writer w(out);
  w.header({"state", "clean_acc", "robust_acc"});
  const std::size_t N = clean.steps();
  for (std::size_t n = 0; n <= N + 1; ++n) {
    w.field(n <= N ? std::to_string(n) : std::string("extended"))
        .field(clean.accuracy[n])
        .field(robust.accuracy[n])
        .end_row();
  }
}

std::vector<double> mean_rel_errors(const LayerParams& p, const std::vector<Vec64>& inputs, const SolverConfig& scfg) {
  std::vector<double> sum(scfg.max_iters + 1, 0.0);
  std::size_t counted = 0;
  for (const Vec64& x : inputs) {
    try {
      const ForwardTrace t = solve(p, x, scfg);
      for (std::size_t n = 0; n < sum.size(); ++n) sum[n] += t.rel_errors[n];
      ++counted;
    } catch (const DivergenceError&) {
    }
  }
  for (double& s : sum) s = counted == 0 ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(counted);
  return sum;
}

struct AblationRow {
  std::string parameter;
  double value;
  GradientSource source;
};

}  // namespace

Dataset load_experiment_data(const ExperimentConfig& cfg) {
  Dataset ds = cfg.data.source == "idx"
                   ? load_idx(cfg.data.images, cfg.data.labels, cfg.data.limit, cfg.seed, cfg.data.fractions)
                   : gen_synthetic(cfg.data.kind, cfg.data.n, cfg.data.noise, cfg.data.l, cfg.seed, cfg.data.fractions);
  ds.validate();
  return ds;
}

ExampleSet evaluation_set(const Dataset& data, const ExperimentConfig& cfg) {
  ExampleSet test = data.test();
  if (cfg.data.eval_limit > 0 && test.size() > cfg.data.eval_limit) {
    test.inputs.resize(cfg.data.eval_limit);
    test.labels.resize(cfg.data.eval_limit);
  }
  require(!test.empty(), "experiment: empty test split");
  return test;
}

LayerParams initial_params(const ExperimentConfig& cfg, const Dataset& data) {
  Rng rng = Rng(cfg.seed).fork(kInitStream);
  InitOptions opts;
  opts.max_spectral_radius = cfg.model.max_spectral_radius;
  opts.w_scale = cfg.model.w_scale;
  return init_params({cfg.model.d, data.input_dim(), data.num_classes}, cfg.model.activation, rng, opts);
}

AttackConfig attack_for(const ExperimentConfig& cfg, const GradientSource& src) {
  AttackConfig a = cfg.attack;
  a.source = src;
  a.seed = cfg.seed;
  return a;
}

AttackConfig ready_made_attack(const ExperimentConfig& cfg) { return attack_for(cfg, ready_made_source(cfg.train)); }

std::vector<DefenseStrategy> resolve_defenses(const std::vector<DefenseStrategy>& defenses,
                                              const DefenseStrategy& early) {
  std::vector<DefenseStrategy> out;
  for (const DefenseStrategy& d : defenses) out.push_back(d.kind == DefenseKind::Early && !d.calibrated ? early : d);
  return out;
}

void write_examples_csv(std::ostream& out, const std::vector<AttackReport>& reports) {
  csv::Writer w(out);
  w.header({"example_id", "clean_correct", "robust_correct", "defense", "source", "epsilon", "steps",
            "diverged_steps"});
  for (const AttackReport& r : reports) {
    for (const ExampleOutcome& o : r.outcomes) {
      w.field(o.example_id)
          .field(o.clean_correct ? 1 : 0)
          .field(o.robust_correct ? 1 : 0)
          .field(r.defense)
          .field(r.source)
          .field(r.epsilon)
          .field(r.steps)
          .field(o.diverged_steps)
          .end_row();
    }
  }
}

void write_cross_table_csv(std::ostream& out, const std::vector<AttackReport>& reports) {
  csv::Writer w(out);
  w.header({"defense", "source", "epsilon", "steps", "clean_acc", "robust_acc", "diverged_steps"});
  for (const AttackReport& r : reports) {
    w.field(r.defense)
        .field(r.source)
        .field(r.epsilon)
        .field(r.steps)
        .field(r.clean_accuracy)
        .field(r.robust_accuracy)
        .field(r.diverged_steps)
        .end_row();
  }
}

MaxMin max_min_robustness(const std::vector<AttackReport>& reports) {
  require(!reports.empty(), "max_min_robustness: no reports");
  std::vector<MaxMin> per_defense;
  for (const AttackReport& r : reports) {
    auto it = std::find_if(per_defense.begin(), per_defense.end(), [&](const MaxMin& m) { return m.defense == r.defense; });
    if (it == per_defense.end()) {
      per_defense.push_back({r.defense, r.source, r.robust_accuracy});
    } else if (r.robust_accuracy < it->robust_accuracy) {
      it->weakest_source = r.source;
      it->robust_accuracy = r.robust_accuracy;
    }
  }
  MaxMin best = per_defense.front();
  for (const MaxMin& m : per_defense)
    if (m.robust_accuracy > best.robust_accuracy) best = m;
  return best;
}

void write_summary_json(std::ostream& out, const std::vector<AttackReport>& reports) {
  json j = json::object();
  for (const AttackReport& r : reports) {
    j[r.defense][r.source] = {{"clean_acc", r.clean_accuracy},
                              {"robust_acc", r.robust_accuracy},
                              {"epsilon", r.epsilon},
                              {"steps", r.steps},
                              {"diverged_steps", r.diverged_steps}};
  }
  if (!reports.empty()) {
    const MaxMin m = max_min_robustness(reports);
    j["max_min"] = {{"defense", m.defense}, {"weakest_source", m.weakest_source}, {"robust_acc", m.robust_accuracy}};
  }
  out << j.dump(2) << '\n';
}

TrainResult run_train(const ExperimentConfig& cfg, std::ostream* log) {
  const Dataset data = load_experiment_data(cfg);
  const LayerParams p0 = model_for(cfg, data, nullptr);
  TrainResult res;
  try {
    res = train(p0, data, cfg.train, cfg.solver, cfg.backward);
  } catch (const TrainingAborted& e) {
    auto out = open_out(cfg, "train_log.csv");
    write_train_log_csv(out, e.log());
    throw;
  }
  {
    auto out = open_out(cfg, "train_log.csv");
    write_train_log_csv(out, res.log);
  }
  for (const EpochLog& e : res.log.epochs) {
    note(log, "epoch " + std::to_string(e.epoch) + " loss " + csv::format_double(e.train_loss) + " dev clean " +
                  csv::format_double(e.dev_clean_acc) + " dev robust " + csv::format_double(e.dev_robust_acc));
  }
  Checkpoint ck{res.best, calibrated_or(cfg, res.best, data, nullptr)};
  save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.json").string(), ck);
  note(log, "best epoch " + std::to_string(res.log.best_epoch) + ", early exit " + ck.defense.label());
  return res;
}

std::vector<AttackReport> run_attack(const ExperimentConfig& cfg, std::ostream* log) {
  require(!cfg.model.checkpoint.empty(), "attack: model.checkpoint must be set");
  const Dataset data = load_experiment_data(cfg);
  Checkpoint ck;
  const LayerParams p = model_for(cfg, data, &ck);
  DefenseStrategy defense = ck.defense;
  if (defense.kind == DefenseKind::Early && !defense.calibrated) defense = calibrated_or(cfg, p, data, nullptr);
  const ExampleSet test = evaluation_set(data, cfg);
  std::vector<AttackReport> reports;
  for (const GradientSource& src : cfg.sources) {
    reports.push_back(evaluate_robustness(p, test, attack_for(cfg, src), defense, cfg.solver, cfg.backward));
    note(log, reports.back().defense + " x " + reports.back().source + ": robust " +
                  csv::format_double(reports.back().robust_accuracy));
  }
  auto ex = open_out(cfg, "examples.csv");
  write_examples_csv(ex, reports);
  auto sum = open_out(cfg, "summary.json");
  write_summary_json(sum, reports);
  return reports;
}

std::vector<AttackReport> run_eval(const ExperimentConfig& cfg, std::ostream* log) {
  require(!cfg.model.checkpoint.empty(), "eval: model.checkpoint must be set");
  const Dataset data = load_experiment_data(cfg);
  const LayerParams p = model_for(cfg, data, nullptr);
  const DefenseStrategy early = calibrated_or(cfg, p, data, nullptr);
  note(log, "calibrated " + early.label());
  const ExampleSet test = evaluation_set(data, cfg);
  const AttackConfig ready = ready_made_attack(cfg);
  const std::vector<PgdResult> advs = craft_adversaries(p, test, ready, cfg.solver, cfg.backward);
  std::vector<AttackReport> reports;
  for (const DefenseStrategy& d : resolve_defenses(cfg.defenses, early)) {
    reports.push_back(evaluate_adversaries(p, test, advs, ready, d, cfg.solver));
    note(log, reports.back().defense + ": clean " + csv::format_double(reports.back().clean_accuracy) + " robust " +
                  csv::format_double(reports.back().robust_accuracy));
  }
  auto table = open_out(cfg, "eval.csv");
  write_cross_table_csv(table, reports);
  save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.json").string(), Checkpoint{p, early});
  return reports;
}

void run_diagnose(const ExperimentConfig& cfg, std::ostream* log) {
  const Dataset data = load_experiment_data(cfg);
  const LayerParams p = model_for(cfg, data, nullptr);
  const ExampleSet test = evaluation_set(data, cfg);
  SolverConfig scfg = cfg.solver;

  auto out = open_out(cfg, "diagnose.csv");
  csv::Writer w(out);
  w.header({"example_id", "label", "prediction", "residual_norm", "rel_error", "spectral_radius", "diverged"});
  const Rng base = Rng(cfg.seed).fork(kDiagStream);
  for (std::size_t i = 0; i < test.size(); ++i) {
    try {
      const ForwardTrace t = solve(p, test.inputs[i], scfg);
      if (i == 0) {
        auto tr = open_out(cfg, "trace.csv");
        write_trace_csv(tr, t);
      }
      const Linearization lin(p, t.final_state(), test.inputs[i]);
      Rng rng = base.fork(i);
      const double rho =
          power_iteration([&](const Vec64& v) { return lin.vjp_z(v); }, p.W.rows(), cfg.train.power_iters, rng);
      w.field(i)
          .field(test.labels[i])
          .field(predict(p, t.final_state()))
          .field(t.residual_norms.back())
          .field(t.rel_errors.back())
          .field(rho)
          .field(0)
          .end_row();
    } catch (const DivergenceError&) {
      w.field(i).field(test.labels[i]).field("").field("").field("").field("").field(1).end_row();
    }
  }
  note(log, "mean spectral radius " + csv::format_double(spectral_trace(p, test, scfg, cfg.train.power_iters, cfg.seed)));
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
  cfg.validate();
  {
    auto out = open_out(cfg, "config.json");
    out << serialize_config(cfg);
  }
  const Dataset data = load_experiment_data(cfg);
  ExperimentResult res;

  Checkpoint loaded;
  const bool from_checkpoint = !cfg.model.checkpoint.empty();
  const LayerParams p0 = model_for(cfg, data, from_checkpoint ? &loaded : nullptr);
  if (from_checkpoint) {
    res.params = p0;
  } else {
    TrainResult tr;
    try {
      tr = train(p0, data, cfg.train, cfg.solver, cfg.backward);
    } catch (const TrainingAborted& e) {
      auto out = open_out(cfg, "train_log.csv");
      write_train_log_csv(out, e.log());
      throw;
    }
    auto out = open_out(cfg, "train_log.csv");
    write_train_log_csv(out, tr.log);
    res.params = tr.best;
    res.log = tr.log;
    note(log, "trained " + std::to_string(tr.log.epochs.size()) + " epochs, best epoch " +
                  std::to_string(tr.log.best_epoch));
  }
  const LayerParams& p = res.params;

  res.early = calibrated_or(cfg, p, data, from_checkpoint ? &loaded : nullptr);
  save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.json").string(), Checkpoint{p, res.early});
  note(log, "early exit " + res.early.label());
  res.defenses = resolve_defenses(cfg.defenses, res.early);

  const ExampleSet test = evaluation_set(data, cfg);

  // Grid: adversaries depend only on the source, so each source is crafted
  // once and judged under every defense.
  for (const GradientSource& src : cfg.sources) {
    const AttackConfig acfg = attack_for(cfg, src);
    const std::vector<PgdResult> advs = craft_adversaries(p, test, acfg, cfg.solver, cfg.backward);
    std::vector<Vec64> xs;
    for (const PgdResult& r : advs) xs.push_back(r.x_adv);
    res.adversaries.push_back(std::move(xs));
    for (const DefenseStrategy& d : res.defenses) {
      res.cells.push_back(evaluate_adversaries(p, test, advs, acfg, d, cfg.solver));
      note(log, res.cells.back().defense + " x " + res.cells.back().source + ": robust " +
                    csv::format_double(res.cells.back().robust_accuracy));
    }
  }
  {
    auto out = open_out(cfg, "cross_table.csv");
    write_cross_table_csv(out, res.cells);
  }
  {
    auto out = open_out(cfg, "examples.csv");
    write_examples_csv(out, res.cells);
  }
  {
    auto out = open_out(cfg, "summary.json");
    write_summary_json(out, res.cells);
  }

  // Per-state robustness under the ready-made attack, and the rel-error curve.
  const AttackConfig ready = ready_made_attack(cfg);
  std::vector<Vec64> ready_advs;
  for (PgdResult& r : craft_adversaries(p, test, ready, cfg.solver, cfg.backward)) ready_advs.push_back(r.x_adv);
  res.clean_states = per_state_accuracy(p, test, test.inputs, cfg.solver);
  res.robust_states = per_state_accuracy(p, test, ready_advs, cfg.solver);
  {
    auto out = open_out(cfg, "per_state.csv");
    write_state_csv(out, res.clean_states, res.robust_states);
  }
  {
    const std::vector<double> clean = mean_rel_errors(p, test.inputs, cfg.solver);
    const std::vector<double> adv = mean_rel_errors(p, ready_advs, cfg.solver);
    auto out = open_out(cfg, "rel_error.csv");
    csv::Writer w(out);
    w.header({"step", "rel_error", "adv_rel_error"});
    for (std::size_t n = 0; n < clean.size(); ++n) w.field(n).field(clean[n]).field(adv[n]).end_row();
  }

  // Ablations over the intermediate index, unroll length, damping and adjoint step.
  const AblationConfig& ab = cfg.ablation;
  const std::vector<std::pair<std::string, std::vector<AblationRow>>> families = [&] {
    std::vector<AblationRow> n_rows, k_rows, lambda_rows, beta_rows;
    for (std::size_t n : ab.n) {
      n_rows.push_back({"n", static_cast<double>(n), GradientSource::unrolled_intermediate(n, ab.base_k, ab.base_lambda)});
      n_rows.push_back({"n", static_cast<double>(n), GradientSource::adjoint_intermediate(n, ab.base_beta)});
    }
    for (std::size_t k : ab.k)
      k_rows.push_back({"k", static_cast<double>(k), GradientSource::unrolled_intermediate(ab.base_n, k, ab.base_lambda)});
    for (double l : ab.lambda)
      lambda_rows.push_back({"lambda", l, GradientSource::unrolled_intermediate(ab.base_n, ab.base_k, l)});
    for (double b : ab.beta) beta_rows.push_back({"beta", b, GradientSource::adjoint_intermediate(ab.base_n, b)});
    return std::vector<std::pair<std::string, std::vector<AblationRow>>>{
        {"n", n_rows}, {"k", k_rows}, {"lambda", lambda_rows}, {"beta", beta_rows}};
  }();
  const bool broyden = cfg.solver.method == SolverMethod::Broyden;
  for (const auto& [name, rows] : families) {
    if (rows.empty()) continue;
    auto out = open_out(cfg, "ablation_" + name + ".csv");
    csv::Writer w(out);
    w.header({"parameter", "value", "source", "defense", "clean_acc", "robust_acc"});
    for (const AblationRow& row : rows) {
      if (row.source.needs_adjoint() && !broyden) continue;
      const AttackConfig acfg = attack_for(cfg, row.source);
      const std::vector<PgdResult> advs = craft_adversaries(p, test, acfg, cfg.solver, cfg.backward);
      for (const DefenseStrategy& d : res.defenses) {
        const AttackReport r = evaluate_adversaries(p, test, advs, acfg, d, cfg.solver);
        w.field(row.parameter).field(row.value).field(r.source).field(r.defense).field(r.clean_accuracy)
            .field(r.robust_accuracy)
            .end_row();
      }
    }
  }

  if (cfg.probe.enabled) {
    ProbeConfig pc;
    pc.epsilon = cfg.attack.epsilon;
    pc.queries = cfg.probe.queries;
    pc.patch_frac = cfg.probe.patch_frac;
    pc.lo = cfg.attack.lo;
    pc.hi = cfg.attack.hi;
    const double probe = probe_accuracy(p, test, pc, cfg.solver, Rng(cfg.seed).fork(kProbeStream).seed());
    const AttackReport ready_rep = evaluate_adversaries(
        p, test, craft_adversaries(p, test, ready, cfg.solver, cfg.backward), ready, DefenseStrategy::final_state(),
        cfg.solver);
    auto out = open_out(cfg, "probe.csv");
    csv::Writer w(out);
    w.header({"probe_acc", "ready_made_acc"});
    w.field(probe).field(ready_rep.robust_accuracy).end_row();
    note(log, "probe accuracy " + csv::format_double(probe) + ", ready-made PGD " +
                  csv::format_double(ready_rep.robust_accuracy));
  }

  res.summary = max_min_robustness(res.cells);
  note(log, "max-min robustness: " + res.summary.defense + " at " + csv::format_double(res.summary.robust_accuracy) +
                " (weakest: " + res.summary.weakest_source + ")");
  return res;
}

}  // namespace deqrb
