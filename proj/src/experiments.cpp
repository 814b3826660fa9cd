#include "mimetic/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

#include "json.hpp"

#include "mimetic/gradcheck.hpp"
#include "mimetic/population.hpp"

namespace mimetic::experiments {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

double sample_std(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

// ---------------------------------------------------------------------------
// Enum <-> string

std::string base_name(init::BaseInit b) {
  return b == init::BaseInit::kaiming_uniform ? "kaiming_uniform"
                                              : "trunc_normal";
}
init::BaseInit base_from(const std::string& s) {
  if (s == "kaiming_uniform") return init::BaseInit::kaiming_uniform;
  if (s == "trunc_normal") return init::BaseInit::trunc_normal;
  throw ConfigError("unknown base init '" + s + "'");
}

std::string mean_name(init::MeanMode m) {
  switch (m) {
    case init::MeanMode::none: return "none";
    case init::MeanMode::constant: return "constant";
    case init::MeanMode::rowvec: return "rowvec";
  }
  return "none";
}
init::MeanMode mean_from(const std::string& s) {
  if (s == "none") return init::MeanMode::none;
  if (s == "constant") return init::MeanMode::constant;
  if (s == "rowvec") return init::MeanMode::rowvec;
  throw ConfigError("unknown mean mode '" + s + "'");
}

std::string bias_name(init::BiasInit b) {
  return b == init::BiasInit::zero ? "zero" : "constant";
}
init::BiasInit bias_from(const std::string& s) {
  if (s == "zero") return init::BiasInit::zero;
  if (s == "constant") return init::BiasInit::constant;
  throw ConfigError("unknown linear_bias_init '" + s + "'");
}

std::string optkind_name(train::OptKind k) {
  return k == train::OptKind::adamw ? "adamw" : "sgd";
}
train::OptKind optkind_from(const std::string& s) {
  if (s == "adamw") return train::OptKind::adamw;
  if (s == "sgd") return train::OptKind::sgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

std::string sched_name(train::ScheduleKind k) {
  return k == train::ScheduleKind::constant ? "constant" : "cosine";
}
train::ScheduleKind sched_from(const std::string& s) {
  if (s == "constant") return train::ScheduleKind::constant;
  if (s == "cosine") return train::ScheduleKind::cosine;
  throw ConfigError("unknown schedule '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config JSON

ordered_json config_to_json(const ExperimentConfig& cfg) {
  const models::ModelConfig& m = cfg.model;
  const init::InitSpec& is = m.init;
  ordered_json j;
  j["model"] = {{"family", models::family_name(m.family)},
                {"embed_dim", m.embed_dim},
                {"depth", m.depth},
                {"expansion", m.expansion},
                {"patch_size", m.patch_size},
                {"filter_size", m.filter_size},
                {"heads", m.heads},
                {"num_classes", m.num_classes},
                {"image_size", m.image_size},
                {"channels", m.channels}};
  j["init"] = {{"base", base_name(is.base)},
               {"mean_mode", mean_name(is.mlp_mean_mode)},
               {"mean_b", is.mean_b},
               {"sigma_b", is.sigma_b},
               {"anticorrelate_w1_w2", is.anticorrelate_w1_w2},
               {"linear_bias_init", bias_name(is.linear_bias_init)},
               {"linear_bias_c", is.linear_bias_c},
               {"learnable_scalar_bias", is.learnable_scalar_bias},
               {"scalar_bias_init", is.scalar_bias_init},
               {"trunc_normal_std", is.trunc_normal_std},
               {"kaiming_gain", is.kaiming_gain}};
  j["data"] = {{"kind", cfg.data.kind},
               {"cifar_dir", cfg.data.cifar_dir},
               {"subset_per_class", cfg.data.subset_per_class},
               {"test_subset_per_class", cfg.data.test_subset_per_class},
               {"data_seed", cfg.data.data_seed},
               {"synthetic",
                {{"num_classes", cfg.data.synthetic.num_classes},
                 {"image_size", cfg.data.synthetic.image_size},
                 {"channels", cfg.data.synthetic.channels},
                 {"frequency_seed", cfg.data.synthetic.frequency_seed},
                 {"samples_per_class", cfg.data.synthetic.samples_per_class},
                 {"noise_std", cfg.data.synthetic.noise_std}}}};
  j["optim"] = {{"kind", optkind_name(cfg.optim.kind)},
                {"lr", cfg.optim.lr},
                {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps},
                {"momentum", cfg.optim.momentum},
                {"weight_decay", cfg.optim.weight_decay},
                {"schedule", sched_name(cfg.optim.schedule)}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"augment", cfg.train.augment}};
  j["epoch_grid"] = cfg.epoch_grid;
  j["seeds"] = cfg.seeds;
  j["b_grid"] = cfg.b_grid;
  j["sigma_b"] = cfg.sigma_b;
  j["out_dir"] = cfg.out_dir;
  return j;
}

ExperimentConfig config_from_json(const ordered_json& j) {
  ExperimentConfig cfg;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    models::ModelConfig& mc = cfg.model;
    mc.family =
        models::family_from_name(m.value("family", std::string("convnext")));
    mc.embed_dim = m.value("embed_dim", mc.embed_dim);
    mc.depth = m.value("depth", mc.depth);
    mc.expansion = m.value("expansion", mc.expansion);
    mc.patch_size = m.value("patch_size", mc.patch_size);
    mc.filter_size = m.value("filter_size", mc.filter_size);
    mc.heads = m.value("heads", mc.heads);
    mc.num_classes = m.value("num_classes", mc.num_classes);
    mc.image_size = m.value("image_size", mc.image_size);
    mc.channels = m.value("channels", mc.channels);
  }
  if (j.contains("init")) {
    const auto& in = j.at("init");
    init::InitSpec& is = cfg.model.init;
    is.base = base_from(in.value("base", base_name(is.base)));
    is.mlp_mean_mode =
        mean_from(in.value("mean_mode", mean_name(is.mlp_mean_mode)));
    is.mean_b = in.value("mean_b", is.mean_b);
    is.sigma_b = in.value("sigma_b", is.sigma_b);
    is.anticorrelate_w1_w2 =
        in.value("anticorrelate_w1_w2", is.anticorrelate_w1_w2);
    is.linear_bias_init =
        bias_from(in.value("linear_bias_init", bias_name(is.linear_bias_init)));
    is.linear_bias_c = in.value("linear_bias_c", is.linear_bias_c);
    is.learnable_scalar_bias =
        in.value("learnable_scalar_bias", is.learnable_scalar_bias);
    is.scalar_bias_init = in.value("scalar_bias_init", is.scalar_bias_init);
    is.trunc_normal_std = in.value("trunc_normal_std", is.trunc_normal_std);
    is.kaiming_gain = in.value("kaiming_gain", is.kaiming_gain);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    cfg.data.kind = d.value("kind", cfg.data.kind);
    cfg.data.cifar_dir = d.value("cifar_dir", cfg.data.cifar_dir);
    cfg.data.subset_per_class =
        d.value("subset_per_class", cfg.data.subset_per_class);
    cfg.data.test_subset_per_class =
        d.value("test_subset_per_class", cfg.data.test_subset_per_class);
    cfg.data.data_seed = d.value("data_seed", cfg.data.data_seed);
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      data::SyntheticTaskSpec& sp = cfg.data.synthetic;
      sp.num_classes = s.value("num_classes", sp.num_classes);
      sp.image_size = s.value("image_size", sp.image_size);
      sp.channels = s.value("channels", sp.channels);
      sp.frequency_seed = s.value("frequency_seed", sp.frequency_seed);
      sp.samples_per_class = s.value("samples_per_class", sp.samples_per_class);
      sp.noise_std = s.value("noise_std", sp.noise_std);
    }
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    cfg.optim.kind = optkind_from(o.value("kind", optkind_name(cfg.optim.kind)));
    cfg.optim.lr = o.value("lr", cfg.optim.lr);
    cfg.optim.beta1 = o.value("beta1", cfg.optim.beta1);
    cfg.optim.beta2 = o.value("beta2", cfg.optim.beta2);
    cfg.optim.eps = o.value("eps", cfg.optim.eps);
    cfg.optim.momentum = o.value("momentum", cfg.optim.momentum);
    cfg.optim.weight_decay = o.value("weight_decay", cfg.optim.weight_decay);
    cfg.optim.schedule =
        sched_from(o.value("schedule", sched_name(cfg.optim.schedule)));
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.augment = t.value("augment", cfg.train.augment);
  }
  cfg.epoch_grid = j.value("epoch_grid", cfg.epoch_grid);
  cfg.seeds = j.value("seeds", cfg.seeds);
  cfg.b_grid = j.value("b_grid", cfg.b_grid);
  cfg.sigma_b = j.value("sigma_b", cfg.sigma_b);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  return cfg;
}

// ---------------------------------------------------------------------------
// Filesystem helpers

void ensure_dir(const fs::path& p) { fs::create_directories(p); }

void require_fresh(const fs::path& p, bool force) {
  if (!fs::exists(p)) return;
  if (!force) {
    throw UsageError(p.string() + " already exists; pass --force to overwrite");
  }
  fs::remove_all(p);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw InputError("cannot write " + p.string());
  out << text;
  if (!out) throw InputError("short write to " + p.string());
}

// ---------------------------------------------------------------------------
// Shared run plumbing

ExperimentConfig resolve_config(const CommonArgs& args) {
  ExperimentConfig cfg = args.config_path.empty()
                             ? default_config()
                             : load_config_file(args.config_path);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (!args.seeds.empty()) cfg.seeds = args.seeds;
  if (cfg.seeds.empty()) throw ConfigError("seed list must be non-empty");
  return cfg;
}

void check_data_model_compat(const models::ModelConfig& m,
                             const data::Dataset& ds) {
  if (ds.channels != m.channels || ds.height != m.image_size ||
      ds.width != m.image_size) {
    throw ConfigError("model expects " + std::to_string(m.channels) + "x" +
                      std::to_string(m.image_size) + "x" +
                      std::to_string(m.image_size) + " images, dataset has " +
                      std::to_string(ds.channels) + "x" +
                      std::to_string(ds.height) + "x" +
                      std::to_string(ds.width));
  }
  if (ds.num_classes != m.num_classes) {
    throw ConfigError("model num_classes " + std::to_string(m.num_classes) +
                      " != dataset classes " + std::to_string(ds.num_classes));
  }
}

train::TrainOptions train_options(const ExperimentConfig& cfg, int epochs) {
  train::TrainOptions opts;
  opts.epochs = epochs >= 0 ? epochs : cfg.train.epochs;
  opts.batch_size = cfg.train.batch_size;
  opts.augment = cfg.train.augment;
  return opts;
}

ordered_json result_to_json(const train::TrainResult& r,
                            const std::string& init_label) {
  ordered_json j;
  j["config_hash"] = hex64(r.config_hash);
  j["seed"] = r.seed;
  j["init_mode"] = init_label;
  j["epochs_requested"] = r.epochs_requested;
  j["failed"] = r.failed;
  j["failure_reason"] = r.failure_reason;
  j["final_test_acc"] = r.final_test_acc;
  ordered_json epochs = ordered_json::array();
  for (const train::EpochStats& e : r.epochs) {
    epochs.push_back({{"train_loss", e.train_loss},
                      {"train_acc", e.train_acc},
                      {"test_acc", e.test_acc},
                      {"seconds", e.seconds}});
  }
  j["epochs"] = epochs;
  return j;
}

std::string seed_stem(std::uint64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "seed%05llu",
                static_cast<unsigned long long>(seed));
  return buf;
}

int effective_parallel(int requested, int tasks) {
  int n = requested > 0 ? requested
                        : static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  return std::min(n, std::max(tasks, 1));
}

}  // namespace

// ---------------------------------------------------------------------------
// Public config API

ExperimentConfig default_config() { return ExperimentConfig{}; }

ExperimentConfig load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config_file(const ExperimentConfig& cfg, const fs::path& path) {
  write_text(path, config_to_json(cfg).dump(2) + "\n");
}

void apply_init_mode(init::InitSpec& spec, std::string_view mode) {
  spec.anticorrelate_w1_w2 = false;
  const auto colon = mode.find(':');
  const std::string_view head = mode.substr(0, colon);
  const auto arg_of = [&](const char* what) {
    if (colon == std::string_view::npos || colon + 1 >= mode.size()) {
      throw ConfigError(std::string("init mode '") + std::string(mode) +
                        "' needs a numeric argument, e.g. " + what);
    }
    const std::string text(mode.substr(colon + 1));
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(text, &used);
    } catch (const std::exception&) {
      throw ConfigError("cannot parse number in init mode '" +
                        std::string(mode) + "'");
    }
    if (used != text.size() || !std::isfinite(v)) {
      throw ConfigError("cannot parse number in init mode '" +
                        std::string(mode) + "'");
    }
    return v;
  };
  if (head == "none") {
    spec.mlp_mean_mode = init::MeanMode::none;
  } else if (head == "constant") {
    spec.mlp_mean_mode = init::MeanMode::constant;
    spec.mean_b = arg_of("constant:0.02");
  } else if (head == "rowvec") {
    spec.mlp_mean_mode = init::MeanMode::rowvec;
    spec.sigma_b = arg_of("rowvec:0.02");
  } else if (head == "anticorr") {
    spec.mlp_mean_mode = init::MeanMode::none;
    spec.anticorrelate_w1_w2 = true;
  } else {
    throw ConfigError("unknown init mode '" + std::string(mode) +
                      "' (expected none|constant:B|rowvec:S|anticorr)");
  }
}

std::string init_mode_label(const init::InitSpec& spec) {
  std::string label;
  switch (spec.mlp_mean_mode) {
    case init::MeanMode::none: label = "none"; break;
    case init::MeanMode::constant:
      label = "constant:" + fmt_short(spec.mean_b);
      break;
    case init::MeanMode::rowvec:
      label = "rowvec:" + fmt_short(spec.sigma_b);
      break;
  }
  if (spec.anticorrelate_w1_w2) label += "+anticorr";
  return label;
}

std::pair<data::Dataset, data::Dataset> materialize_data(const DataSpec& spec) {
  if (spec.kind == "synthetic") {
    return data::make_synthetic(spec.synthetic, spec.data_seed);
  }
  if (spec.kind == "cifar10") {
    std::string dir = spec.cifar_dir;
    if (dir.empty()) {
      if (const char* env = std::getenv("MIMETIC_DATA_DIR")) dir = env;
    }
    if (dir.empty()) {
      throw InputError(
          "no CIFAR-10 location: set data.cifar_dir or MIMETIC_DATA_DIR");
    }
    auto [tr, te] = data::load_cifar10(dir);
    if (spec.subset_per_class > 0) {
      tr = data::balanced_subset(tr, spec.subset_per_class);
    }
    if (spec.test_subset_per_class > 0) {
      te = data::balanced_subset(te, spec.test_subset_per_class);
    }
    return {std::move(tr), std::move(te)};
  }
  throw ConfigError("unknown data kind '" + spec.kind +
                    "' (expected synthetic|cifar10)");
}

// ---------------------------------------------------------------------------
// Commands

int cmd_gradcheck(const GradcheckArgs& args) {
  gradcheck::Options opts;
  opts.seed = args.seed;
  const auto results = gradcheck::run_suite(opts, args.ops);
  bool all_passed = true;
  for (const auto& r : results) {
    std::printf("gradcheck %-18s worst_rel_err=%.3e  tol=%.0e  %s\n",
                r.name.c_str(), r.worst_rel_err, r.tolerance,
                r.passed ? "PASS" : "FAIL");
    all_passed = all_passed && r.passed;
  }
  std::printf("gradcheck: %zu/%zu cases passed\n",
              static_cast<std::size_t>(
                  std::count_if(results.begin(), results.end(),
                                [](const auto& r) { return r.passed; })),
              results.size());
  return all_passed ? 0 : 1;
}

int cmd_train(const TrainArgs& args) {
  ExperimentConfig cfg = resolve_config(args.common);
  if (!args.init_mode.empty()) apply_init_mode(cfg.model.init, args.init_mode);
  const auto [train_ds, test_ds] = materialize_data(cfg.data);
  check_data_model_compat(cfg.model, train_ds);
  const train::TrainOptions topts = train_options(cfg, args.epochs);
  const std::string label = init_mode_label(cfg.model.init);

  const fs::path dir = fs::path(cfg.out_dir) / "train";
  require_fresh(dir, args.common.force);
  ensure_dir(dir);

  std::vector<double> accs;
  int failures = 0;
  for (std::uint64_t seed : cfg.seeds) {
    const auto [result, snap] =
        train::train(cfg.model, train_ds, test_ds, cfg.optim, topts, seed);
    write_text(dir / (seed_stem(seed) + ".json"),
               result_to_json(result, label).dump(2) + "\n");
    if (snap) {
      snapshot::save(*snap, dir / (seed_stem(seed) + ".mimw"));
      accs.push_back(result.final_test_acc);
    } else {
      ++failures;
    }
    std::printf("train seed=%llu init=%s epochs=%d  %s final_acc=%.4f\n",
                static_cast<unsigned long long>(seed), label.c_str(),
                topts.epochs, result.failed ? "FAILED" : "ok",
                result.final_test_acc);
  }
  std::printf(
      "summary init=%s epochs=%d seeds=%zu  mean_acc=%.4f  std_acc=%.4f  "
      "failures=%d\n",
      label.c_str(), topts.epochs, cfg.seeds.size(), mean_of(accs),
      sample_std(accs), failures);
  return 0;
}

int cmd_sweep_bias(const SweepArgs& args) {
  ExperimentConfig cfg = resolve_config(args.common);
  const std::vector<double> grid =
      args.b_grid.empty() ? cfg.b_grid : args.b_grid;
  if (grid.empty()) throw ConfigError("b grid must be non-empty");
  if (std::none_of(grid.begin(), grid.end(),
                   [](double b) { return b == 0.0; })) {
    throw ConfigError("b grid must include 0 (the control)");
  }
  const auto [train_ds, test_ds] = materialize_data(cfg.data);
  check_data_model_compat(cfg.model, train_ds);
  const train::TrainOptions topts = train_options(cfg, args.epochs);

  const fs::path out(cfg.out_dir);
  const fs::path csv_path = out / "sweep_bias.csv";
  const fs::path summary_path = out / "sweep_bias_summary.csv";
  require_fresh(csv_path, args.common.force);
  require_fresh(summary_path, args.common.force);
  ensure_dir(out);

  const char* arms[] = {"meanshift", "bias_init", "scalar_bias"};
  std::string csv = "arm,b,seed,final_acc,failed\n";
  std::string summary = "arm,b,mean_acc,std_acc,num_seeds\n";
  for (const char* arm : arms) {
    for (double b : grid) {
      models::ModelConfig variant = cfg.model;
      variant.init.mlp_mean_mode = init::MeanMode::none;
      variant.init.linear_bias_init = init::BiasInit::zero;
      variant.init.linear_bias_c = 0.0;
      variant.init.learnable_scalar_bias = false;
      variant.init.scalar_bias_init = 0.0;
      if (std::string_view(arm) == "meanshift") {
        variant.init.mlp_mean_mode = init::MeanMode::constant;
        variant.init.mean_b = b;
      } else if (std::string_view(arm) == "bias_init") {
        variant.init.linear_bias_init = init::BiasInit::constant;
        variant.init.linear_bias_c = b;
      } else {
        variant.init.learnable_scalar_bias = true;
        variant.init.scalar_bias_init = b;
      }
      std::vector<double> accs;
      for (std::uint64_t seed : cfg.seeds) {
        const auto [result, snap] =
            train::train(variant, train_ds, test_ds, cfg.optim, topts, seed);
        csv += std::string(arm) + "," + fmt_double(b) + "," +
               std::to_string(seed) + "," + fmt_double(result.final_test_acc) +
               "," + (result.failed ? "1" : "0") + "\n";
        if (!result.failed) accs.push_back(result.final_test_acc);
      }
      summary += std::string(arm) + "," + fmt_double(b) + "," +
                 fmt_double(mean_of(accs)) + "," +
                 fmt_double(sample_std(accs)) + "," +
                 std::to_string(accs.size()) + "\n";
      std::printf("sweep arm=%-11s b=%-7s mean_acc=%.4f std=%.4f (%zu seeds)\n",
                  arm, fmt_short(b).c_str(), mean_of(accs), sample_std(accs),
                  accs.size());
    }
  }
  write_text(csv_path, csv);
  write_text(summary_path, summary);
  std::printf("wrote %s and %s\n", csv_path.string().c_str(),
              summary_path.string().c_str());
  return 0;
}

int cmd_epoch_curve(const EpochCurveArgs& args) {
  ExperimentConfig cfg = resolve_config(args.common);
  const std::vector<int> grid =
      args.epoch_grid.empty() ? cfg.epoch_grid : args.epoch_grid;
  if (grid.empty()) throw ConfigError("epoch grid must be non-empty");
  for (int e : grid) {
    if (e < 0) throw ConfigError("epoch budgets must be >= 0");
  }
  const auto [train_ds, test_ds] = materialize_data(cfg.data);
  check_data_model_compat(cfg.model, train_ds);

  std::vector<std::string> modes = {"none"};
  if (args.init_mode != "none") modes.push_back(args.init_mode);

  const fs::path out(cfg.out_dir);
  const fs::path csv_path = out / "epoch_curve.csv";
  const fs::path summary_path = out / "epoch_curve_summary.csv";
  require_fresh(csv_path, args.common.force);
  require_fresh(summary_path, args.common.force);
  ensure_dir(out);

  std::string csv = "init_mode,epochs,seed,final_acc,failed\n";
  std::string summary = "init_mode,epochs,mean_acc,std_acc,num_seeds\n";
  for (const std::string& mode : modes) {
    models::ModelConfig variant = cfg.model;
    apply_init_mode(variant.init, mode);
    for (int epochs : grid) {
      const train::TrainOptions topts = train_options(cfg, epochs);
      std::vector<double> accs;
      for (std::uint64_t seed : cfg.seeds) {
        const auto [result, snap] =
            train::train(variant, train_ds, test_ds, cfg.optim, topts, seed);
        csv += mode + "," + std::to_string(epochs) + "," +
               std::to_string(seed) + "," + fmt_double(result.final_test_acc) +
               "," + (result.failed ? "1" : "0") + "\n";
        if (!result.failed) accs.push_back(result.final_test_acc);
      }
      summary += mode + "," + std::to_string(epochs) + "," +
                 fmt_double(mean_of(accs)) + "," +
                 fmt_double(sample_std(accs)) + "," +
                 std::to_string(accs.size()) + "\n";
      std::printf(
          "epoch-curve mode=%-14s epochs=%-3d mean_acc=%.4f std=%.4f\n",
          mode.c_str(), epochs, mean_of(accs), sample_std(accs));
    }
  }
  write_text(csv_path, csv);
  write_text(summary_path, summary);
  std::printf("wrote %s and %s\n", csv_path.string().c_str(),
              summary_path.string().c_str());
  return 0;
}

int cmd_farm(const FarmArgs& args) {
  ExperimentConfig cfg = resolve_config(args.common);
  if (args.count < 2) throw ConfigError("farm needs at least 2 models");
  const auto [train_ds, test_ds] = materialize_data(cfg.data);
  check_data_model_compat(cfg.model, train_ds);
  const train::TrainOptions topts = train_options(cfg, args.epochs);
  const std::uint64_t expected_hash = models::model_hash(cfg.model);

  const fs::path dir = fs::path(cfg.out_dir) / "snapshots";
  if (args.common.force) fs::remove_all(dir);
  ensure_dir(dir);

  std::atomic<int> next{0};
  std::atomic<int> completed{0}, skipped{0}, failed{0};
  std::mutex print_mutex;

  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= args.count) return;
      const std::uint64_t seed = static_cast<std::uint64_t>(i);
      const fs::path snap_path = dir / (seed_stem(seed) + ".mimw");
      const fs::path fail_path = dir / (seed_stem(seed) + ".failed.json");
      if (!args.common.force) {
        if (fs::exists(snap_path)) {
          try {
            const auto existing = snapshot::load(snap_path);
            if (existing.config_hash == expected_hash &&
                existing.seed == seed &&
                existing.epoch == static_cast<std::uint32_t>(topts.epochs)) {
              skipped.fetch_add(1);
              continue;
            }
          } catch (const FormatError&) {
            // invalid file: recompute below
          }
        } else if (fs::exists(fail_path)) {
          failed.fetch_add(1);  // deterministic rerun would fail again
          continue;
        }
      }
      const auto [result, snap] =
          train::train(cfg.model, train_ds, test_ds, cfg.optim, topts, seed);
      if (snap) {
        snapshot::save(*snap, snap_path);
        completed.fetch_add(1);
      } else {
        ordered_json j;
        j["seed"] = seed;
        j["config_hash"] = hex64(expected_hash);
        j["reason"] = result.failure_reason;
        write_text(fail_path, j.dump(2) + "\n");
        failed.fetch_add(1);
      }
      {
        std::lock_guard<std::mutex> lock(print_mutex);
        std::printf("farm seed=%llu  %s acc=%.4f\n",
                    static_cast<unsigned long long>(seed),
                    result.failed ? "FAILED" : "done", result.final_test_acc);
        std::fflush(stdout);
      }
    }
  };

  const int workers = effective_parallel(args.common.parallel, args.count);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  std::printf("farm: %d trained, %d skipped (already valid), %d failed -> %s\n",
              completed.load(), skipped.load(), failed.load(),
              dir.string().c_str());
  return 0;
}

int cmd_analyze(const AnalyzeArgs& args) {
  if (args.snapshot_dir.empty()) throw UsageError("snapshot dir required");
  const population::PopulationMatrix pop =
      population::collect(args.snapshot_dir, args.layer);
  const population::PopulationStats stats = population::analyze(pop, true);

  const fs::path out = args.out_dir.empty()
                           ? fs::path(args.snapshot_dir) / "analysis"
                           : fs::path(args.out_dir);
  require_fresh(out, args.force);
  ensure_dir(out);

  ordered_json j;
  j["K"] = stats.K;
  j["layer"] = stats.layer_index;
  j["p"] = stats.p;
  j["n"] = stats.n;
  j["skipped_invalid"] = pop.skipped_invalid;
  j["skipped_failed"] = pop.skipped_failed;
  j["vec_order"] = "row-major";
  j["stripe_scores"] = {
      {"W1", {{"rows", stats.stripes.w1_rows}, {"columns", stats.stripes.w1_cols}}},
      {"W2", {{"rows", stats.stripes.w2_rows}, {"columns", stats.stripes.w2_cols}}}};
  j["cross_correlation"] = {{"rho", stats.cross.rho},
                            {"excluded", stats.cross.excluded},
                            {"total", stats.cross.total}};
  j["covariance_exported"] = stats.has_covariance;
  write_text(out / "stats.json", j.dump(2) + "\n");
  if (stats.has_covariance) {
    population::export_heatmap_data(stats.cov, out / "cov.csv");
  }
  std::printf("analyze layer=%d K=%zu (skipped %d invalid, %d failed)\n",
              stats.layer_index, stats.K, pop.skipped_invalid,
              pop.skipped_failed);
  std::printf("  stripe W1 rows=%.4f cols=%.4f | W2 rows=%.4f cols=%.4f\n",
              stats.stripes.w1_rows, stats.stripes.w1_cols,
              stats.stripes.w2_rows, stats.stripes.w2_cols);
  std::printf("  cross-correlation rho=%.4f (excluded %zu/%zu)\n",
              stats.cross.rho, stats.cross.excluded, stats.cross.total);
  std::printf("wrote %s\n", (out / "stats.json").string().c_str());
  return 0;
}

}  // namespace mimetic::experiments
