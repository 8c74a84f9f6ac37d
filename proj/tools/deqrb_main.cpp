// deqrb <command> --config <path> [--seed N] [--out DIR] [--override key=value ...]

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "deqrb/experiment.hpp"
#include "json.hpp"

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw deqrb::FormatError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robustness toolkit for small deep equilibrium models"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
  std::vector<std::string> overrides;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { seed = s; seed_set = true; }, "experiment seed");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--override", overrides, "key=value config override (dotted keys)");
  };

  auto* train = app.add_subcommand("train", "train a model and write train_log.csv and checkpoint.json");
  auto* attack = app.add_subcommand("attack", "attack a checkpoint with every configured gradient source");
  auto* eval = app.add_subcommand("eval", "calibrate early exit and evaluate every defense");
  auto* diagnose = app.add_subcommand("diagnose", "export solver traces and spectral estimates");
  auto* experiment = app.add_subcommand("experiment", "run the full source x defense experiment");
  for (auto* cmd : {train, attack, eval, diagnose, experiment}) add_common(cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<std::string> all = overrides;
    if (seed_set) all.push_back("seed=" + std::to_string(seed));
    if (!out_dir.empty()) all.push_back("out_dir=" + nlohmann::json(out_dir).dump());
    deqrb::ExperimentConfig cfg = deqrb::parse_config(deqrb::apply_overrides(read_text(config_path), all));
    deqrb::resolve_paths(cfg, std::filesystem::path(config_path).parent_path().string());

    if (*train) {
      deqrb::run_train(cfg, &std::cout);
    } else if (*attack) {
      deqrb::run_attack(cfg, &std::cout);
    } else if (*eval) {
      deqrb::run_eval(cfg, &std::cout);
    } else if (*diagnose) {
      deqrb::run_diagnose(cfg, &std::cout);
    } else if (*experiment) {
      deqrb::run_experiment(cfg, &std::cout);
    }
  } catch (const deqrb::FormatError& e) {
    std::cerr << "deqrb: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "deqrb: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
