// SPDX-License-Identifier: Apache-2.0
#include <malloc.h>

#include <CLI11.hpp>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "cleandift/pipeline.hpp"

namespace {

using namespace cleandift;

struct Common {
  std::string config;
  std::string preset = "default";
  std::optional<long long> seed;
  std::string out = "runs";
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "INI file with overrides")->check(CLI::ExistingFile);
  app->add_option("--preset", c.preset, "tiny, default or paper_scale")
      ->check(CLI::IsMember({"tiny", "default", "paper_scale"}));
  app->add_option("--seed", c.seed, "base seed");
  app->add_option("--out", c.out, "directory receiving run directories");
  app->allow_extras();
}

// `--section.key value` or `--section.key=value` pairs left over by CLI11.
std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& extras) {
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + a + "'");
    std::string key = a.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("missing value for --" + key);
      value = extras[++i];
    }
    if (!find_key(key)) throw ConfigError("unknown config key '" + key + "'");
    out[key] = value;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);

  CLI::App app{"Timestep-free diffusion feature consolidation on synthetic scenes"};
  app.require_subcommand(1);
  Common common;
  std::string task;
  std::string plot_src;
  bool skip_ablation = false;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "generate the synthetic dataset splits"},
      {"train-teacher", "train the diffusion teacher"},
      {"distill", "consolidate the teacher into a clean-input student"},
      {"eval-pck", "keypoint correspondence sweep over timesteps"},
      {"eval-probe", "dense probe sweep (--task depth|seg|knn)"},
      {"analyze-noise", "explained-variance decomposition of teacher features"},
      {"ablate", "objective and head-architecture ablation grids"},
      {"plot", "render figures for the CSVs of a run directory"},
      {"run-all", "every stage in order"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* s = app.add_subcommand(name, help);
    add_common(s, common);
    subs[name] = s;
  }
  subs["eval-probe"]->add_option("--task", task, "depth, seg or knn")->required()
      ->check(CLI::IsMember({"depth", "seg", "knn"}));
  subs["plot"]->add_option("run_dir", plot_src, "run directory to plot")->required();
  subs["run-all"]->add_flag("--skip-ablation", skip_ablation, "stop before the ablation grids");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  std::string command;
  CLI::App* sub = nullptr;
  for (const auto& [name, s] : subs)
    if (s->parsed()) {
      command = name;
      sub = s;
    }

  PipelineEnv env;
  try {
    auto overrides = parse_overrides(sub->remaining());
    if (common.seed) overrides["seed"] = std::to_string(*common.seed);
    env.cfg = Config::resolve(common.preset, common.config, overrides);
    env.out = common.out;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    std::vector<fs::path> runs;
    if (command == "gen-data") runs.push_back(cmd_gen_data(env));
    else if (command == "train-teacher") runs.push_back(cmd_train_teacher(env));
    else if (command == "distill") runs.push_back(cmd_distill(env));
    else if (command == "eval-pck") runs.push_back(cmd_eval_pck(env));
    else if (command == "eval-probe") runs.push_back(cmd_eval_probe(env, parse_probe_kind(task)));
    else if (command == "analyze-noise") runs.push_back(cmd_analyze_noise(env));
    else if (command == "ablate") runs.push_back(cmd_ablate(env));
    else if (command == "plot") runs.push_back(cmd_plot(env, plot_src));
    else if (command == "run-all") runs = cmd_run_all(env, !skip_ablation);
    for (const auto& r : runs) std::cout << r.string() << "\n";
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
