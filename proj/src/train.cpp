#include "mimetic/train.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

namespace mimetic::train {

void validate(const OptimSpec& spec) {
  if (!(spec.lr > 0.0) || !std::isfinite(spec.lr)) {
    throw ConfigError("lr must be finite and positive");
  }
  if (spec.beta1 < 0.0 || spec.beta1 >= 1.0 || spec.beta2 < 0.0 ||
      spec.beta2 >= 1.0) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (spec.momentum < 0.0 || spec.momentum >= 1.0) {
    throw ConfigError("momentum must lie in [0, 1)");
  }
  if (spec.weight_decay < 0.0 || !std::isfinite(spec.weight_decay)) {
    throw ConfigError("weight_decay must be finite and >= 0");
  }
  if (spec.eps <= 0.0) throw ConfigError("eps must be positive");
}

double schedule_scale(const OptimSpec& spec, long step, long total_steps,
                      long warmup_steps) {
  if (spec.schedule == ScheduleKind::constant) return 1.0;
  if (warmup_steps > 0 && step < warmup_steps) {
    return static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const long span = std::max<long>(1, total_steps - warmup_steps);
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup_steps) /
                        static_cast<double>(span));
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Optimizer::Optimizer(std::vector<ad::Tensor> params, OptimSpec spec)
    : params_(std::move(params)), spec_(spec) {
  validate(spec_);
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].numel(), 0.0);
    if (spec_.kind == OptKind::adamw) v_[i].assign(params_[i].numel(), 0.0);
  }
}

void Optimizer::step(double lr_scale) {
  ++t_;
  const double lr_t = spec_.lr * lr_scale;
  const double decay = 1.0 - lr_t * spec_.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto data = params_[i].mutable_data();
    auto grad = params_[i].grad();
    std::vector<double>& m = m_[i];
    if (spec_.kind == OptKind::adamw) {
      std::vector<double>& v = v_[i];
      const double bc1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(t_));
      for (std::size_t k = 0; k < data.size(); ++k) {
        const double g = grad.empty() ? 0.0 : grad[k];
        data[k] *= decay;
        m[k] = spec_.beta1 * m[k] + (1.0 - spec_.beta1) * g;
        v[k] = spec_.beta2 * v[k] + (1.0 - spec_.beta2) * g * g;
        const double mhat = m[k] / bc1;
        const double vhat = v[k] / bc2;
        data[k] -= lr_t * mhat / (std::sqrt(vhat) + spec_.eps);
      }
    } else {
      for (std::size_t k = 0; k < data.size(); ++k) {
        const double g = grad.empty() ? 0.0 : grad[k];
        data[k] *= decay;
        m[k] = spec_.momentum * m[k] + g;
        data[k] -= lr_t * m[k];
      }
    }
  }
}

double evaluate(const models::TinyModel& model, const data::Dataset& ds,
                int batch_size) {
  data::BatchStream stream(ds, batch_size, 0, /*shuffle=*/false);
  stream.start_epoch(0);
  ad::Tensor images;
  std::vector<int> labels;
  std::size_t correct = 0;
  while (stream.next(images, labels)) {
    ad::Tape tape(false);
    ad::Tensor logits = model.forward(tape, images);
    const int B = logits.dim(0);
    const int C = logits.dim(1);
    auto d = logits.data();
    for (int b = 0; b < B; ++b) {
      const double* row = d.data() + static_cast<std::size_t>(b) * C;
      int best = 0;
      for (int c = 1; c < C; ++c) {
        if (row[c] > row[best]) best = c;  // ties keep the lowest index
      }
      if (best == labels[b]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

std::pair<TrainResult, std::optional<snapshot::WeightSnapshot>> train(
    const models::ModelConfig& cfg, const data::Dataset& train_ds,
    const data::Dataset& test_ds, const OptimSpec& optim,
    const TrainOptions& opts, std::uint64_t seed) {
  if (opts.epochs < 0) throw ConfigError("epochs must be >= 0");
  validate(optim);

  models::ModelConfig run_cfg = cfg;
  run_cfg.seed = seed;
  models::TinyModel model = models::build_model(run_cfg);

  TrainResult result;
  result.config_hash = models::model_hash(run_cfg);
  result.seed = seed;
  result.epochs_requested = opts.epochs;

  std::vector<ad::Tensor> params;
  for (auto& [name, tensor] : model.params_) params.push_back(tensor);
  Optimizer optimizer(params, optim);

  data::BatchStream stream(train_ds, opts.batch_size,
                           derive_stream(seed, "shuffle"), /*shuffle=*/true);
  Rng augment_rng(derive_stream(seed, "augment"));

  const long steps_per_epoch = static_cast<long>(stream.batches_per_epoch());
  const long total_steps = steps_per_epoch * opts.epochs;
  // Warmup: one epoch, capped at half the horizon so short runs still decay.
  const long warmup_steps = std::min(steps_per_epoch, total_steps / 2);

  long step = 0;
  for (int epoch = 0; epoch < opts.epochs && !result.failed; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    stream.start_epoch(static_cast<std::uint64_t>(epoch));
    ad::Tensor images;
    std::vector<int> labels;
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    while (stream.next(images, labels)) {
      if (opts.augment) data::augment(images, augment_rng);
      ad::Tape tape;
      ad::Tensor logits = model.forward(tape, images);
      ad::Tensor loss = tape.cross_entropy(logits, labels);
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        result.failed = true;
        result.failure_reason =
            "non-finite loss at step " + std::to_string(step);
        break;
      }
      const int B = logits.dim(0);
      const int C = logits.dim(1);
      auto ld = logits.data();
      for (int b = 0; b < B; ++b) {
        const double* row = ld.data() + static_cast<std::size_t>(b) * C;
        int best = 0;
        for (int c = 1; c < C; ++c) {
          if (row[c] > row[best]) best = c;
        }
        if (best == labels[b]) ++correct;
      }
      loss_sum += loss_value * B;
      seen += B;

      model.zero_all_grads();
      tape.backward(loss);
      optimizer.step(schedule_scale(optim, step, total_steps, warmup_steps));
      ++step;
    }
    if (result.failed) break;
    EpochStats stats;
    stats.train_loss = loss_sum / static_cast<double>(seen);
    stats.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    stats.test_acc = evaluate(model, test_ds, opts.eval_batch_size);
    stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    result.epochs.push_back(stats);
  }

  if (result.failed) {
    return {result, std::nullopt};
  }
  result.final_test_acc = result.epochs.empty()
                              ? evaluate(model, test_ds, opts.eval_batch_size)
                              : result.epochs.back().test_acc;
  snapshot::WeightSnapshot snap =
      snapshot::from_model(model, static_cast<std::uint32_t>(opts.epochs));
  return {result, std::move(snap)};
}

}  // namespace mimetic::train
