#include "deqrb/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace deqrb {

using json = nlohmann::ordered_json;

namespace {

json source_json(const GradientSource& s) {
  return {{"kind", to_string(s.kind)}, {"n", s.n}, {"k", s.k}, {"lambda", s.lambda}, {"beta", s.beta}};
}

json defense_json(const DefenseStrategy& d) { return {{"kind", to_string(d.kind)}, {"n_star", d.n_star}}; }

json attack_json(const AttackConfig& a, bool with_box) {
  json j = {{"epsilon", a.epsilon}, {"step", a.step}, {"steps", a.steps}, {"random_start", a.random_start}};
  if (with_box) {
    j["lo"] = a.lo;
    j["hi"] = a.hi;
  }
  return j;
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["data"] = {{"source", c.data.source},
               {"kind", to_string(c.data.kind)},
               {"n", c.data.n},
               {"noise", c.data.noise},
               {"l", c.data.l},
               {"images", c.data.images},
               {"labels", c.data.labels},
               {"limit", c.data.limit},
               {"test_fraction", c.data.fractions.test},
               {"dev_fraction", c.data.fractions.dev},
               {"eval_limit", c.data.eval_limit}};
  j["model"] = {{"d", c.model.d},
                {"activation", to_string(c.model.activation)},
                {"max_spectral_radius", c.model.max_spectral_radius},
                {"w_scale", c.model.w_scale},
                {"checkpoint", c.model.checkpoint}};
  j["solver"] = {{"method", to_string(c.solver.method)},
                 {"max_iters", c.solver.max_iters},
                 {"damping", c.solver.damping},
                 {"broyden_alpha", c.solver.broyden_alpha}};
  j["backward"] = {{"back_max_iters", c.backward.back_max_iters}, {"back_method", to_string(c.backward.back_method)}};
  const TrainConfig& t = c.train;
  j["train"] = {{"mode", to_string(t.mode)},
                {"grad_mode", to_string(t.grad_mode)},
                {"unroll_k", t.unroll_k},
                {"unroll_lambda", t.unroll_lambda},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"adam", {{"lr", t.adam.lr}, {"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}}},
                {"jac_reg_weight", t.jac_reg_weight},
                {"jac_reg_stop_epoch", t.jac_reg_stop_epoch},
                {"jac_reg_probes", t.jac_reg_probes},
                {"attack", attack_json(t.attack, false)},
                {"select_by", to_string(t.select_by)},
                {"power_iters", t.power_iters},
                {"dev_eval_limit", t.dev_eval_limit}};
  j["attack"] = attack_json(c.attack, true);
  j["sources"] = json::array();
  for (const GradientSource& s : c.sources) j["sources"].push_back(source_json(s));
  j["defenses"] = json::array();
  for (const DefenseStrategy& d : c.defenses) j["defenses"].push_back(defense_json(d));
  j["ablation"] = {{"n", c.ablation.n},
                   {"k", c.ablation.k},
                   {"lambda", c.ablation.lambda},
                   {"beta", c.ablation.beta},
                   {"base_n", c.ablation.base_n},
                   {"base_k", c.ablation.base_k},
                   {"base_lambda", c.ablation.base_lambda},
                   {"base_beta", c.ablation.base_beta}};
  j["probe"] = {{"enabled", c.probe.enabled}, {"queries", c.probe.queries}, {"patch_frac", c.probe.patch_frac}};
  return j;
}

// Overlays `patch` on `base`; objects merge key by key, everything else
// replaces. Keys absent from `base` are rejected.
void merge_into(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw FormatError("config: '" + path + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw FormatError("config: unknown key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_into(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

GradientSource source_from(const json& patch) {
  json j = source_json(GradientSource{});
  merge_into(j, patch, "sources[]");
  GradientSource s;
  s.kind = source_kind_from_string(j.at("kind").get<std::string>());
  s.n = j.at("n").get<std::size_t>();
  s.k = j.at("k").get<std::size_t>();
  s.lambda = j.at("lambda").get<double>();
  s.beta = j.at("beta").get<double>();
  return s;
}

DefenseStrategy defense_from(const json& patch) {
  json j = defense_json(DefenseStrategy{});
  merge_into(j, patch, "defenses[]");
  const DefenseKind kind = defense_kind_from_string(j.at("kind").get<std::string>());
  const auto n_star = j.at("n_star").get<std::size_t>();
  switch (kind) {
    case DefenseKind::Final: return DefenseStrategy::final_state();
    case DefenseKind::Ensemble: return DefenseStrategy::ensemble();
    case DefenseKind::Early: return n_star == 0 ? DefenseStrategy::uncalibrated_early() : DefenseStrategy::early(n_star);
  }
  return DefenseStrategy::final_state();
}

void read_attack(const json& j, AttackConfig& a, bool with_box) {
  a.epsilon = j.at("epsilon").get<double>();
  a.step = j.at("step").get<double>();
  a.steps = j.at("steps").get<std::size_t>();
  a.random_start = j.at("random_start").get<bool>();
  if (with_box) {
    a.lo = j.at("lo").get<double>();
    a.hi = j.at("hi").get<double>();
  }
}

ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.out_dir = j.at("out_dir").get<std::string>();

  const json& d = j.at("data");
  c.data.source = d.at("source").get<std::string>();
  c.data.kind = synthetic_kind_from_string(d.at("kind").get<std::string>());
  c.data.n = d.at("n").get<std::size_t>();
  c.data.noise = d.at("noise").get<double>();
  c.data.l = d.at("l").get<std::size_t>();
  c.data.images = d.at("images").get<std::string>();
  c.data.labels = d.at("labels").get<std::string>();
  c.data.limit = d.at("limit").get<std::size_t>();
  c.data.fractions.test = d.at("test_fraction").get<double>();
  c.data.fractions.dev = d.at("dev_fraction").get<double>();
  c.data.eval_limit = d.at("eval_limit").get<std::size_t>();

  const json& m = j.at("model");
  c.model.d = m.at("d").get<std::size_t>();
  c.model.activation = activation_from_string(m.at("activation").get<std::string>());
  c.model.max_spectral_radius = m.at("max_spectral_radius").get<double>();
  c.model.w_scale = m.at("w_scale").get<double>();
  c.model.checkpoint = m.at("checkpoint").get<std::string>();

  const json& s = j.at("solver");
  c.solver.method = solver_method_from_string(s.at("method").get<std::string>());
  c.solver.max_iters = s.at("max_iters").get<std::size_t>();
  c.solver.damping = s.at("damping").get<double>();
  c.solver.broyden_alpha = s.at("broyden_alpha").get<double>();

  const json& b = j.at("backward");
  c.backward.back_max_iters = b.at("back_max_iters").get<std::size_t>();
  c.backward.back_method = solver_method_from_string(b.at("back_method").get<std::string>());

  const json& t = j.at("train");
  c.train.mode = train_mode_from_string(t.at("mode").get<std::string>());
  c.train.grad_mode = grad_mode_from_string(t.at("grad_mode").get<std::string>());
  c.train.unroll_k = t.at("unroll_k").get<std::size_t>();
  c.train.unroll_lambda = t.at("unroll_lambda").get<double>();
  c.train.epochs = t.at("epochs").get<std::size_t>();
  c.train.batch_size = t.at("batch_size").get<std::size_t>();
  c.train.adam.lr = t.at("adam").at("lr").get<double>();
  c.train.adam.beta1 = t.at("adam").at("beta1").get<double>();
  c.train.adam.beta2 = t.at("adam").at("beta2").get<double>();
  c.train.adam.eps = t.at("adam").at("eps").get<double>();
  c.train.jac_reg_weight = t.at("jac_reg_weight").get<double>();
  c.train.jac_reg_stop_epoch = t.at("jac_reg_stop_epoch").get<std::size_t>();
  c.train.jac_reg_probes = t.at("jac_reg_probes").get<std::size_t>();
  read_attack(t.at("attack"), c.train.attack, false);
  c.train.select_by = select_by_from_string(t.at("select_by").get<std::string>());
  c.train.power_iters = t.at("power_iters").get<std::size_t>();
  c.train.dev_eval_limit = t.at("dev_eval_limit").get<std::size_t>();
  c.train.seed = c.seed;
  c.train.attack.seed = c.seed;

  read_attack(j.at("attack"), c.attack, true);
  c.train.attack.lo = c.attack.lo;
  c.train.attack.hi = c.attack.hi;
  c.attack.seed = c.seed;

  for (const json& e : j.at("sources")) c.sources.push_back(source_from(e));
  for (const json& e : j.at("defenses")) c.defenses.push_back(defense_from(e));

  const json& a = j.at("ablation");
  c.ablation.n = a.at("n").get<std::vector<std::size_t>>();
  c.ablation.k = a.at("k").get<std::vector<std::size_t>>();
  c.ablation.lambda = a.at("lambda").get<std::vector<double>>();
  c.ablation.beta = a.at("beta").get<std::vector<double>>();
  c.ablation.base_n = a.at("base_n").get<std::size_t>();
  c.ablation.base_k = a.at("base_k").get<std::size_t>();
  c.ablation.base_lambda = a.at("base_lambda").get<double>();
  c.ablation.base_beta = a.at("base_beta").get<double>();

  const json& p = j.at("probe");
  c.probe.enabled = p.at("enabled").get<bool>();
  c.probe.queries = p.at("queries").get<std::size_t>();
  c.probe.patch_frac = p.at("patch_frac").get<double>();
  return c;
}

json parse_json(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.sources = {GradientSource::exact_final(),
               GradientSource::phantom_final(5, 0.5),
               GradientSource::unrolled_intermediate(1, 2, 0.5),
               GradientSource::adjoint_intermediate(1, 0.5),
               GradientSource::unrolled_ensemble(2, 0.5),
               GradientSource::adjoint_ensemble(0.5)};
  c.defenses = {DefenseStrategy::final_state(), DefenseStrategy::uncalibrated_early(), DefenseStrategy::ensemble()};
  c.ablation.n = {1, 2, 3, 4, 5, 6, 7, 8};
  c.ablation.k = {1, 2, 4, 8};
  c.ablation.lambda = {0.25, 0.5, 0.75, 1.0};
  c.ablation.beta = {0.25, 0.5, 0.75, 1.0};
  c.train.seed = c.seed;
  c.attack.seed = c.seed;
  return c;
}

void ExperimentConfig::validate() const {
  require(data.source == "synthetic" || data.source == "idx", "config: data.source must be 'synthetic' or 'idx'");
  if (data.source == "synthetic") {
    require(data.n >= 10, "config: data.n must be >= 10");
    require(data.l >= 2, "config: data.l must be >= 2");
  } else {
    require(!data.images.empty() && !data.labels.empty(), "config: idx data needs images and labels paths");
    require(data.limit >= 1, "config: data.limit must be >= 1");
  }
  require(model.d >= 1, "config: model.d must be >= 1");
  require(model.max_spectral_radius > 0.0, "config: model.max_spectral_radius must be > 0");
  require(model.w_scale > 0.0, "config: model.w_scale must be > 0");
  solver.validate();
  backward.validate();
  train.validate();
  require(!sources.empty(), "config: at least one gradient source required");
  require(!defenses.empty(), "config: at least one defense required");
  for (const GradientSource& s : sources) {
    AttackConfig a = attack;
    a.source = s;
    a.validate();
    require(s.n <= solver.max_iters, "config: source index beyond solver.max_iters");
    if (s.needs_adjoint()) require(solver.method == SolverMethod::Broyden, "config: adjoint sources need Broyden");
  }
  for (const DefenseStrategy& d : defenses) {
    require(d.n_star <= solver.max_iters, "config: early-exit index beyond solver.max_iters");
  }
  for (std::size_t n : ablation.n) require(n >= 1 && n <= solver.max_iters, "config: ablation n out of range");
  require(ablation.base_n >= 1 && ablation.base_n <= solver.max_iters, "config: ablation.base_n out of range");
  require(probe.queries >= 1, "config: probe.queries must be >= 1");
}

ExperimentConfig parse_config(const std::string& text) {
  json merged = to_json(default_experiment_config());
  try {
    merge_into(merged, parse_json(text, "config"), "");
    ExperimentConfig cfg = from_json(merged);
    cfg.validate();
    return cfg;
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  } catch (const ContractViolation& e) {
    throw FormatError(e.what());
  }
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg = parse_config(ss.str());
  resolve_paths(cfg, std::filesystem::path(path).parent_path().string());
  return cfg;
}

void resolve_paths(ExperimentConfig& cfg, const std::string& base_dir) {
  for (std::string* p : {&cfg.data.images, &cfg.data.labels, &cfg.model.checkpoint}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative())
      *p = (std::filesystem::path(base_dir) / *p).lexically_normal().string();
  }
}

std::string serialize_config(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::string apply_overrides(const std::string& text, const std::vector<std::string>& overrides) {
  json j = parse_json(text, "config");
  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw FormatError("override '" + ov + "' is not key=value");
    const std::string key = ov.substr(0, eq);
    const std::string raw = ov.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw FormatError("override key '" + key + "' has an empty segment");
      json* next = nullptr;
      if (node->is_array()) {
        std::size_t idx = 0;
        try {
          idx = std::stoul(part);
        } catch (const std::exception&) {
          throw FormatError("override key '" + key + "': '" + part + "' is not an array index");
        }
        if (idx >= node->size()) throw FormatError("override key '" + key + "': index out of range");
        next = &(*node)[idx];
      } else {
        if (node->is_null()) *node = json::object();
        if (!node->is_object()) throw FormatError("override key '" + key + "' descends into a scalar");
        next = &(*node)[part];
      }
      if (dot == std::string::npos) {
        *next = value;
        break;
      }
      node = next;
      start = dot + 1;
    }
  }
  return j.dump(2) + "\n";
}

GradientSource parse_source(const std::string& json_text) {
  try {
    return source_from(parse_json(json_text, "source"));
  } catch (const json::exception& e) {
    throw FormatError(std::string("source: ") + e.what());
  }
}

std::string serialize_source(const GradientSource& src) { return source_json(src).dump(); }

}  // namespace deqrb
