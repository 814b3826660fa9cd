// mimetic — command-line driver for the mimetic-initialization laboratory.
//
// Subcommands:
//   gradcheck    finite-difference audit of the autodiff engine
//   train        train one configuration across seeds
//   sweep-bias   mean-shift magnitude sweep with baseline arms
//   epoch-curve  budget sweep of independent runs (shifted vs control)
//   farm         population of K runs with resume support
//   analyze      population statistics from a snapshot directory

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mimetic/errors.hpp"
#include "mimetic/experiments.hpp"

namespace ex = mimetic::experiments;

namespace {

void add_common(CLI::App* cmd, ex::CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON experiment config")
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", args.out_dir, "output directory (overrides config)");
  cmd->add_option("--seeds", args.seeds, "explicit seed list");
  cmd->add_flag("--force", args.force, "overwrite existing outputs");
  cmd->add_option("--parallel", args.parallel,
                  "worker threads (0 = all hardware threads)")
      ->check(CLI::NonNegativeNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for mimetic MLP initialization"};
  app.require_subcommand(1);

  ex::GradcheckArgs gc_args;
  CLI::App* gc = app.add_subcommand(
      "gradcheck", "compare analytic gradients against finite differences");
  gc->add_option("--ops", gc_args.ops,
                 "subset of case names (default: full suite)");
  gc->add_option("--seed", gc_args.seed, "RNG seed for probe points");

  ex::TrainArgs train_args;
  CLI::App* tr = app.add_subcommand("train", "train one config across seeds");
  add_common(tr, train_args.common);
  tr->add_option("--init", train_args.init_mode,
                 "init override: none|constant:B|rowvec:S|anticorr");
  tr->add_option("--epochs", train_args.epochs, "epoch budget override");

  ex::SweepArgs sweep_args;
  CLI::App* sw =
      app.add_subcommand("sweep-bias", "sweep mean-shift magnitude b");
  add_common(sw, sweep_args.common);
  sw->add_option("--b-grid", sweep_args.b_grid,
                 "bias magnitudes (must include 0)");
  sw->add_option("--epochs", sweep_args.epochs, "epoch budget override");

  ex::EpochCurveArgs curve_args;
  CLI::App* ec = app.add_subcommand(
      "epoch-curve", "independent runs per epoch budget, shifted vs control");
  add_common(ec, curve_args.common);
  ec->add_option("--init", curve_args.init_mode,
                 "treatment init mode compared against none");
  ec->add_option("--epoch-grid", curve_args.epoch_grid, "epoch budgets");

  ex::FarmArgs farm_args;
  CLI::App* fm =
      app.add_subcommand("farm", "train a population of K seeded models");
  add_common(fm, farm_args.common);
  fm->add_option("--count", farm_args.count, "population size K")
      ->check(CLI::PositiveNumber);
  fm->add_option("--epochs", farm_args.epochs, "epoch budget override");

  ex::AnalyzeArgs an_args;
  CLI::App* an =
      app.add_subcommand("analyze", "population statistics from snapshots");
  an->add_option("snapshot_dir", an_args.snapshot_dir,
                 "directory of .mimw snapshots")
      ->required();
  an->add_option("--layer", an_args.layer, "block index of the MLP to study")
      ->check(CLI::NonNegativeNumber);
  an->add_option("--out", an_args.out_dir,
                 "output directory (default: <snapshot_dir>/analysis)");
  an->add_flag("--force", an_args.force, "overwrite existing outputs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gc) return ex::cmd_gradcheck(gc_args);
    if (*tr) return ex::cmd_train(train_args);
    if (*sw) return ex::cmd_sweep_bias(sweep_args);
    if (*ec) return ex::cmd_epoch_curve(curve_args);
    if (*fm) return ex::cmd_farm(farm_args);
    if (*an) return ex::cmd_analyze(an_args);
  } catch (const mimetic::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 3;
  }
  return 0;
}
