// photogeo: experiment runner and trace plotter.
//
//   photogeo run <spec.json> [--check] [--seed N] [--jobs N] [--out DIR]
//   photogeo plot <fusion.jsonl> [--out DIR]
//
// Exit codes: 0 success, 2 configuration or input error, 3 runtime error.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "photogeo/experiment.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

bool writable_dir(const std::filesystem::path& dir, std::string& why) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    why = ec.message();
    return false;
  }
  const auto probe = dir / ".photogeo_write_probe";
  {
    std::ofstream f(probe);
    if (!f) {
      why = "not writable";
      return false;
    }
  }
  std::filesystem::remove(probe, ec);
  return true;
}

int run(const std::string& spec_path, bool check, const std::optional<std::uint64_t>& seed, unsigned jobs,
        const std::string& out) {
  photogeo::ConfigResult cfg = photogeo::validate_config(spec_path);
  if (!cfg.ok()) {
    for (const auto& e : cfg.errors) std::cerr << spec_path << ": " << e << '\n';
    return kConfigError;
  }
  photogeo::ExperimentSpec spec = *cfg.spec;
  if (seed) spec.seed = *seed;
  if (!out.empty()) spec.output_dir = out;
  if (check) {
    std::cout << photogeo::to_json(spec).dump(2) << '\n';
    return 0;
  }
  std::string why;
  if (!writable_dir(spec.output_dir, why)) {
    std::cerr << "output_dir: cannot write '" << spec.output_dir << "': " << why << '\n';
    return kConfigError;
  }
  try {
    const photogeo::ResultTable table = photogeo::run_experiment(spec, jobs);
    photogeo::write_outputs(table, spec.output_dir);
    photogeo::write_csv(std::cout, table);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}

int plot(const std::string& log, const std::string& out) {
  try {
    for (const auto& p : photogeo::plot_trace(log, out.empty() ? "." : out)) std::cout << p.string() << '\n';
  } catch (const photogeo::ParseError& e) {
    std::cerr << log << ": " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Loop-closure alignment experiments"};
  app.require_subcommand(1);

  std::string spec_path, log_path, out;
  bool check = false;
  std::uint64_t seed_value = 0;
  unsigned jobs = 1;

  auto* run_cmd = app.add_subcommand("run", "Run an experiment grid from a JSON spec");
  run_cmd->add_option("spec", spec_path, "Experiment spec (JSON)")->required();
  run_cmd->add_flag("--check", check, "Validate the spec, print it with defaults filled in, and exit");
  auto* seed_opt = run_cmd->add_option("--seed", seed_value, "Override the spec seed");
  run_cmd->add_option("--jobs", jobs, "Worker threads (0: all cores)");
  run_cmd->add_option("--out", out, "Override the output directory");

  auto* plot_cmd = app.add_subcommand("plot", "Render SVG traces from a fusion log");
  plot_cmd->add_option("log", log_path, "Fusion log (JSON lines)")->required();
  plot_cmd->add_option("--out", out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfigError;
  }

  if (*run_cmd) {
    std::optional<std::uint64_t> seed;
    if (seed_opt->count() > 0) seed = seed_value;
    return run(spec_path, check, seed, jobs, out);
  }
  return plot(log_path, out);
}
