#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mimetic/data.hpp"
#include "mimetic/models.hpp"
#include "mimetic/train.hpp"

namespace mimetic::experiments {

// Where runs get their samples. Synthetic datasets are regenerated from
// (spec, data_seed) and never persisted; CIFAR-10 is read from cifar_dir or,
// when that is empty, from $MIMETIC_DATA_DIR.
struct DataSpec {
  std::string kind = "synthetic";  // "synthetic" | "cifar10"
  std::string cifar_dir;
  int subset_per_class = 0;       // >0: balanced train subset (cifar10)
  int test_subset_per_class = 0;  // >0: balanced test subset (cifar10)
  data::SyntheticTaskSpec synthetic;
  std::uint64_t data_seed = 99;   // noise seed, shared by every run
};

struct TrainSpec {
  int epochs = 5;
  int batch_size = 128;
  bool augment = true;
};

// The serializable unit of experiment reproducibility.
struct ExperimentConfig {
  models::ModelConfig model;
  DataSpec data;
  train::OptimSpec optim;
  TrainSpec train;
  std::vector<int> epoch_grid = {1, 2, 5, 10};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<double> b_grid = {0.0,  0.01, -0.01, 0.02, -0.02,
                                0.05, -0.05, 0.1,  -0.1};
  double sigma_b = 0.02;
  std::string out_dir = "results";
};

ExperimentConfig default_config();

// JSON round-trip. Loading fills absent keys with defaults and rejects
// unknown enum strings with ConfigError.
ExperimentConfig load_config_file(const std::filesystem::path& path);
void save_config_file(const ExperimentConfig& cfg,
                      const std::filesystem::path& path);

// Parses an init-mode override: none | constant:B | rowvec:S | anticorr.
void apply_init_mode(init::InitSpec& spec, std::string_view mode);
// Short label of the configured MLP mean mode, for file names and CSVs.
std::string init_mode_label(const init::InitSpec& spec);

std::pair<data::Dataset, data::Dataset> materialize_data(const DataSpec& spec);

// ---------------------------------------------------------------------------
// CLI entry points. Each returns a process exit code and throws
// ConfigError/UsageError/... for misuse (the CLI turns those into stderr).

struct CommonArgs {
  std::string config_path;            // empty: built-in defaults
  std::string out_dir;                // overrides config.out_dir when set
  std::vector<std::uint64_t> seeds;   // overrides config.seeds when non-empty
  bool force = false;
  int parallel = 0;                   // 0: all hardware threads
};

struct GradcheckArgs {
  std::vector<std::string> ops;  // empty: full suite
  std::uint64_t seed = 20240501;
};
int cmd_gradcheck(const GradcheckArgs& args);

struct TrainArgs {
  CommonArgs common;
  std::string init_mode;  // empty: keep config's init
  int epochs = -1;        // -1: keep config's epochs
};
int cmd_train(const TrainArgs& args);

struct SweepArgs {
  CommonArgs common;
  std::vector<double> b_grid;  // empty: config's grid; must contain 0
  int epochs = -1;
};
int cmd_sweep_bias(const SweepArgs& args);

struct EpochCurveArgs {
  CommonArgs common;
  std::string init_mode = "constant:0.02";  // compared against "none"
  std::vector<int> epoch_grid;              // empty: config's grid
};
int cmd_epoch_curve(const EpochCurveArgs& args);

struct FarmArgs {
  CommonArgs common;
  int count = 128;  // seeds 0..count-1
  int epochs = -1;
};
int cmd_farm(const FarmArgs& args);

struct AnalyzeArgs {
  std::string snapshot_dir;
  int layer = 0;
  std::string out_dir;
  bool force = false;
};
int cmd_analyze(const AnalyzeArgs& args);

}  // namespace mimetic::experiments
