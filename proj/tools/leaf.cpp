// SPDX-License-Identifier: Apache-2.0
//
// leaf <command> --config <path> [--seed N] [--out DIR]

#include <cstdio>
#include <exception>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "leaf/harness.hpp"

namespace {

using leaf::ExperimentConfig;

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void for_each_seed(const ExperimentConfig& cfg, const std::function<void(std::uint64_t)>& f) {
  for (std::uint64_t seed : cfg.seeds) f(seed);
}

void print_summary(const nlohmann::json& s) {
  const auto& pilot = s.at("pilot");
  const auto& main = s.at("main_effect");
  std::printf("pilot: mean delta %.4f, sign test p=%.4f\n", pilot.at("mean_delta").get<double>(),
              pilot.at("sign_test").at("p_value").get<double>());
  std::printf("leaf vs kd (eval_confounded): mean diff %.4f, sign test p=%.4f; clean drop %.2f pp\n",
              main.at("mean_confounded_diff").get<double>(), main.at("sign_test").at("p_value").get<double>(),
              main.at("mean_clean_drop_pp").get<double>());
  std::printf("gradient recall beats random on every seed: %s\n",
              s.at("detection").at("gradient_beats_random_every_seed").get<bool>() ? "yes" : "no");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Confounding-token detection and counterfactual distillation on a synthetic task"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string axis = "tau";
  std::string values;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Run only this seed instead of the config's seed list");
    sub->add_option("--out", out_dir, "Output directory (overrides out_dir in the config)");
  };

  const std::map<std::string, std::string> commands{
      {"generate", "Generate the synthetic corpus"},
      {"train-teacher", "Train the teacher on teacher_train"},
      {"train-student", "Train the student on student_train"},
      {"detect", "Gradient-difference detection report and heatmap"},
      {"build-cf", "Build the counterfactual set"},
      {"distill", "Distill the KD and LeaF students"},
      {"pilot", "Prune detected spans from eval inputs and re-evaluate the student"},
      {"evaluate", "Write metrics.json for each seed"},
      {"run", "All stages for every seed, then the cross-seed summary"},
      {"sweep", "Sweep one axis (tau, lambda, strategy, splitting) over all seeds"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    subs[name] = app.add_subcommand(name, help);
    add_common(subs[name]);
  }
  subs["sweep"]->add_option("--axis", axis, "tau, lambda, strategy or splitting")
      ->check(CLI::IsMember({"tau", "lambda", "strategy", "splitting"}));
  subs["sweep"]->add_option("--values", values, "Comma-separated values (default: the config's grid)");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = leaf::load_experiment_config(config_path);
    if (seed) cfg.seeds = {*seed};
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "generate") for_each_seed(cfg, [&](auto s) { leaf::stage_generate(cfg, s); });
    else if (cmd == "train-teacher") for_each_seed(cfg, [&](auto s) { leaf::stage_train_teacher(cfg, s); });
    else if (cmd == "train-student") for_each_seed(cfg, [&](auto s) { leaf::stage_train_student(cfg, s); });
    else if (cmd == "detect") for_each_seed(cfg, [&](auto s) { leaf::stage_detect(cfg, s); });
    else if (cmd == "build-cf") for_each_seed(cfg, [&](auto s) { leaf::stage_build_cf(cfg, s); });
    else if (cmd == "distill") for_each_seed(cfg, [&](auto s) { leaf::stage_distill(cfg, s); });
    else if (cmd == "pilot") for_each_seed(cfg, [&](auto s) { leaf::stage_pilot(cfg, s); });
    else if (cmd == "evaluate") {
      std::vector<nlohmann::json> per_seed;
      for_each_seed(cfg, [&](auto s) { per_seed.push_back(leaf::stage_evaluate(cfg, s)); });
      const auto summary = leaf::summarize(cfg, per_seed);
      leaf::write_json(summary, cfg.out_dir / "summary.json");
      print_summary(summary);
    } else if (cmd == "run") {
      print_summary(leaf::run_all(cfg));
    } else if (cmd == "sweep") {
      const leaf::SweepAxis a = leaf::sweep_axis_from_string(axis);
      const auto rows = leaf::run_sweep(cfg, a, split_commas(values));
      const auto path = leaf::sweep_path(cfg, a);
      leaf::write_sweep_csv(a, rows, path);
      std::printf("%zu cells -> %s\n", rows.size(), path.string().c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "leaf: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
