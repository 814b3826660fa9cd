#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mimetic/data.hpp"
#include "mimetic/models.hpp"
#include "mimetic/snapshot.hpp"

namespace mimetic::train {

enum class OptKind { adamw, sgd };
enum class ScheduleKind { constant, cosine };

struct OptimSpec {
  OptKind kind = OptKind::adamw;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;  // sgd
  double weight_decay = 0.05;
  ScheduleKind schedule = ScheduleKind::cosine;
};

void validate(const OptimSpec& spec);

// Learning-rate multiplier for 0-based `step` out of `total_steps`:
// linear warmup over the first `warmup_steps`, then cosine decay to 0
// (constant schedule ignores all three).
double schedule_scale(const OptimSpec& spec, long step, long total_steps,
                      long warmup_steps);

// Streaming optimizer over a fixed parameter list. Weight decay is decoupled
// for both kinds: param *= (1 - lr_t * wd) before the gradient update.
class Optimizer {
 public:
  Optimizer(std::vector<ad::Tensor> params, OptimSpec spec);

  // Applies one update using each tensor's current grad buffer;
  // lr_t = spec.lr * lr_scale.
  void step(double lr_scale);
  long steps_taken() const { return t_; }

 private:
  std::vector<ad::Tensor> params_;
  OptimSpec spec_;
  long t_ = 0;
  std::vector<std::vector<double>> m_;  // adamw first moment / sgd velocity
  std::vector<std::vector<double>> v_;  // adamw second moment
};

struct EpochStats {
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  int epochs_requested = 0;
  bool failed = false;
  std::string failure_reason;
  std::vector<EpochStats> epochs;
  double final_test_acc = 0.0;
};

struct TrainOptions {
  int epochs = 5;
  int batch_size = 128;
  bool augment = true;
  int eval_batch_size = 256;
};

// One deterministic run. All randomness (init, mean shift, shuffle order,
// augmentation) derives from `seed` via fixed sub-stream tags; cfg.seed is
// ignored in favor of `seed`. On divergence (non-finite loss) the result is
// marked failed and the snapshot withheld. epochs = 0 evaluates the freshly
// initialized model.
std::pair<TrainResult, std::optional<snapshot::WeightSnapshot>> train(
    const models::ModelConfig& cfg, const data::Dataset& train_ds,
    const data::Dataset& test_ds, const OptimSpec& optim,
    const TrainOptions& opts, std::uint64_t seed);

// Accuracy under argmax with ties broken toward the lowest class index.
double evaluate(const models::TinyModel& model, const data::Dataset& ds,
                int batch_size = 256);

}  // namespace mimetic::train
