// tseg: generate synthetic tasks, run experiments, summarize results.
//
//   tseg gen-data --config task.json --out data/
//   tseg run matrix --config run.json --out results/matrix --workers 4
//   tseg report results/matrix
//
// Exit codes: 0 ok, 1 runtime failure, 2 configuration error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tseg/common.hpp"
#include "tseg/harness.hpp"

namespace fs = std::filesystem;
using namespace tseg;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kConfig = 2;

struct Common {
  std::string config;
  std::string out;
  std::optional<int> workers;
  std::uint64_t seed_offset = 0;
};

harness::RunConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? harness::parse_config(nlohmann::json::object())
                              : harness::load_config(c.config);
  if (c.workers) {
    if (*c.workers < 1) throw ConfigError("--workers must be >= 1");
    cfg.experiment.workers = *c.workers;
  }
  harness::apply_seed_offset(cfg, c.seed_offset);
  return cfg;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config; defaults apply to missing fields");
  app->add_option("--out", c.out, "output directory")->required();
  app->add_option("--workers", c.workers, "parallel training cells");
  app->add_option("--seed-offset", c.seed_offset, "added to every model seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"transductive self-training experiments on synthetic segmentation tasks"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Common gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset directory");
  add_common(gen_cmd, gen);

  Common run;
  std::string experiment;
  auto* run_cmd = app.add_subcommand("run", "run an experiment");
  run_cmd->add_option("experiment", experiment, "matrix | ind-vs-transd | ig-curves | calibrate")
      ->required();
  add_common(run_cmd, run);

  std::string results_dir;
  auto* report_cmd = app.add_subcommand("report", "summarize a results directory");
  report_cmd->add_option("results_dir", results_dir, "directory written by 'run'")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen_cmd) {
      const auto cfg = resolve(gen);
      std::cout << harness::gen_data(cfg, gen.out) << '\n';
      return kOk;
    }
    if (*run_cmd) {
      const auto which = harness::parse_experiment(experiment);
      const auto cfg = resolve(run);
      const auto summary = harness::run(which, cfg, run.out, [](const std::string& msg) {
        std::cerr << "[tseg] " << msg << '\n';
      });
      std::cout << summary.run_id << '\n';
      for (const auto& a : summary.artifacts) std::cout << (fs::path(run.out) / a).string() << '\n';
      return kOk;
    }
    return harness::report(results_dir, std::cout, std::cerr);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
}
