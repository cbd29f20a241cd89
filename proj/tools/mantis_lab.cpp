// mantis-lab: dataset generation, training, evaluation, analysis, ablations
// and the complexity probe, all driven by one JSON config.

#include "mantis/experiment.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace {

using nlohmann::json;

void log_line(const std::string& s) { std::cerr << s << std::endl; }

json generate(const mantis::ExperimentConfig& cfg) {
  const mantis::Dataset ds = mantis::generate_dataset(cfg.data);
  namespace fs = std::filesystem;
  json manifest{{"classes", ds.classes}, {"train", json::array()}, {"test", json::array()}};
  for (const auto& [split, clouds] : {std::pair{"train", &ds.train}, std::pair{"test", &ds.test}}) {
    const fs::path dir = fs::path(cfg.run.out_dir) / split;
    fs::create_directories(dir);
    for (std::size_t i = 0; i < clouds->size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%05zu.txt", i);
      std::ofstream out(dir / name);
      if (!out) throw mantis::ArgumentError("cannot write '" + (dir / name).string() + "'");
      mantis::write_cloud(out, (*clouds)[i]);
      manifest[split].push_back({{"file", (fs::path(split) / name).string()}, {"label", (*clouds)[i].label.value_or(-1)}});
    }
  }
  manifest["config_hash"] = mantis::config_hash(cfg);
  mantis::write_json(cfg.run.out_dir + "/manifest.json", manifest);
  return {{"train", ds.train.size()}, {"test", ds.test.size()}, {"out_dir", cfg.run.out_dir}};
}

void fail(const std::string& kind, const std::string& what) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", what}}}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mantis-lab"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::string axis;

  std::vector<CLI::App*> subs;
  for (const char* name : {"generate", "train", "eval", "analyze", "ablate", "complexity"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--override", overrides, "section.key=value (repeatable)");
    subs.push_back(sub);
  }
  app.get_subcommand("ablate")->add_option("--axis", axis, "curves|r|controller|fusion|modulate|components");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("argument", e.what());
    return 2;
  }

  try {
    const std::string mode = app.get_subcommands().front()->get_name();
    overrides.push_back("run.mode=" + json(mode).dump());
    if (!axis.empty()) overrides.push_back("run.ablation_axis=" + json(axis).dump());
    const mantis::ExperimentConfig cfg = mantis::load_config(config_path, overrides);

    json result;
    if (mode == "generate") result = generate(cfg);
    else if (mode == "train") result = mantis::run_experiment(cfg, log_line);
    else if (mode == "eval") result = mantis::run_eval(cfg);
    else if (mode == "analyze") result = mantis::run_analyze(cfg)["summary"];
    else if (mode == "ablate") result = mantis::run_ablation(cfg, cfg.run.ablation_axis, log_line);
    else result = mantis::run_complexity(cfg);
    std::cout << result.dump(2) << std::endl;
    return 0;
  } catch (const mantis::Error& e) {
    fail(e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    fail("config", e.what());
  } catch (const std::exception& e) {
    fail("internal", e.what());
  }
  return 1;
}
