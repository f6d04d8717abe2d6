#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "wmb/cli.hpp"
#include "wmb/error.hpp"

namespace {

int run(const std::string& command, const std::string& config_path, const wmb::CliOverrides& o) {
  wmb::RunConfig cfg;
  if (!config_path.empty()) {
    const std::string text = wmb::read_file(config_path);
    const auto dir = std::filesystem::absolute(config_path).parent_path().string();
    cfg = wmb::parse_config(text, dir);
  }
  wmb::apply_overrides(cfg, o);
  cfg.resolve(command);
  cfg.validate(command);
  wmb::run_command(command, cfg, std::cout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Composable world models: train, generate, infer, plan, search, inspect"};
  app.require_subcommand(1);

  std::string config;
  std::uint64_t seed = 0;
  std::string out, model;
  int jobs = 1;

  const char* names[][2] = {
      {"train", "Learn a model from a dataset and save an archive"},
      {"generate", "Sample sequences from an archive"},
      {"infer", "Posterior inference of a dataset under an archive"},
      {"plan", "Run the closed-loop planner in an environment"},
      {"search", "Select depth parameters by model evidence"},
      {"inspect", "Print an archive's structure"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& n : names) {
    CLI::App* sub = app.add_subcommand(n[0], n[1]);
    sub->add_option("--config", config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Run seed (overrides the config)");
    sub->add_option("--out", out, "Output directory (overrides the config)");
    sub->add_option("--jobs", jobs, "Concurrent evaluations")->check(CLI::PositiveNumber);
    sub->add_option("--model", model, "Model archive (overrides the config)");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  for (CLI::App* sub : subs) {
    if (!sub->parsed()) continue;
    wmb::CliOverrides o;
    if (sub->count("--seed")) o.seed = seed;
    if (sub->count("--out")) o.out = out;
    if (sub->count("--jobs")) o.jobs = jobs;
    if (sub->count("--model")) o.model = model;
    try {
      return run(sub->get_name(), config, o);
    } catch (const wmb::Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return e.exit_code();
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 4;
    }
  }
  return 2;
}
