// Command-line front end for the tube experiments.
//
// Exit codes: 0 success, 2 configuration problem, 3 numerical failure,
// 4 a --check threshold or invariant was violated.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "trl/errors.hpp"
#include "trl/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitThreshold = 4;

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  std::int64_t seed = -1;  // negative keeps the config's seed
  bool dry_run = false;
  bool check = false;
};

trl::experiment::ExperimentConfig resolve(const CommonOpts& opts) {
  trl::experiment::ExperimentConfig cfg;
  if (!opts.config_path.empty()) cfg = trl::experiment::load_config(opts.config_path);
  if (opts.seed >= 0) cfg.seed = static_cast<std::uint64_t>(opts.seed);
  return cfg;
}

void echo_config(const trl::experiment::ExperimentConfig& cfg) {
  nlohmann::json j = trl::experiment::config_to_json(cfg);
  j["config_hash"] = trl::experiment::config_hash(cfg);
  std::printf("%s\n", j.dump(2).c_str());
}

int cmd_run(const CommonOpts& opts) {
  auto cfg = resolve(opts);
  echo_config(cfg);
  if (opts.dry_run) return kExitOk;
  auto result = trl::experiment::run_experiment(cfg, opts.out_dir, opts.check);
  if (opts.check && !result.threshold_failures.empty()) return kExitThreshold;
  return kExitOk;
}

int cmd_grid(const CommonOpts& opts, const std::string& grid_path, int jobs) {
  auto cfg = resolve(opts);
  auto axes = trl::experiment::load_grid_axes(grid_path, cfg);
  echo_config(cfg);
  std::size_t cell_count =
      axes.T.size() * axes.delta_s.size() * axes.beta_perp.size() * axes.k_perp.size();
  std::printf("[grid] %zu cells across T x delta_s x beta_perp x k_perp\n", cell_count);
  if (opts.dry_run) return kExitOk;
  trl::experiment::run_grid(cfg, axes, opts.out_dir, jobs);
  return kExitOk;
}

int cmd_oracle(const std::string& suite, const std::string& out_dir, bool check) {
  bool ok = trl::experiment::run_oracle_suite(suite, out_dir);
  std::printf("oracle %s: %s\n", suite.c_str(), ok ? "pass" : "FAIL");
  if (!ok && check) return kExitThreshold;
  return ok ? kExitOk : kExitNumeric;
}

int cmd_inspect(const std::string& tube_path, bool check) {
  auto issues = trl::experiment::inspect_tube(tube_path);
  if (check && !issues.empty()) return kExitThreshold;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tubular posterior experiments"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string grid_path, suite, tube_path;
  int jobs = 1;

  auto* run = app.add_subcommand("run", "train, fit, build the tube, and score every method");
  run->add_option("--config", opts.config_path, "experiment config JSON");
  run->add_option("--out", opts.out_dir, "output directory");
  run->add_option("--seed", opts.seed, "override the config seed");
  run->add_flag("--dry-run", opts.dry_run, "resolve and echo the config, then exit");
  run->add_flag("--check", opts.check, "fail with exit 4 when quality thresholds are missed");

  auto* grid = app.add_subcommand("grid", "sweep tube hyperparameters, resumable per cell");
  grid->add_option("--config", opts.config_path, "experiment config JSON");
  grid->add_option("--grid", grid_path, "grid axes JSON")->required();
  grid->add_option("--out", opts.out_dir, "output directory");
  grid->add_option("--seed", opts.seed, "override the config seed");
  grid->add_option("--jobs", jobs, "worker threads");
  grid->add_flag("--dry-run", opts.dry_run, "resolve, count the cells, then exit");

  auto* oracle = app.add_subcommand("oracle", "write reference values with a self check");
  oracle
      ->add_option("--suite", suite,
                   "one of: fd-hessian, dense-eig, conjugate-linear, quadratic")
      ->required();
  oracle->add_option("--out", opts.out_dir, "output directory");
  oracle->add_flag("--check", opts.check, "fail with exit 4 instead of 3 on a failed self check");

  auto* inspect = app.add_subcommand("inspect-tube", "summarize a tube checkpoint");
  inspect->add_option("tube", tube_path, "tube checkpoint JSON")->required();
  inspect->add_flag("--check", opts.check, "fail with exit 4 when invariants are violated");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(opts);
    if (grid->parsed()) return cmd_grid(opts, grid_path, jobs);
    if (oracle->parsed()) return cmd_oracle(suite, opts.out_dir, opts.check);
    if (inspect->parsed()) return cmd_inspect(tube_path, opts.check);
  } catch (const std::invalid_argument& e) {
    // ConfigError and ShapeError both signal bad input
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const trl::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return kExitNumeric;
  }
  return kExitConfig;
}
