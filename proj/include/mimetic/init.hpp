#pragma once

#include <cstdint>
#include <span>

#include "mimetic/autodiff.hpp"
#include "mimetic/rng.hpp"

namespace mimetic::models {
struct TinyModel;
}

namespace mimetic::init {

enum class BaseInit { kaiming_uniform, trunc_normal };
enum class MeanMode { none, constant, rowvec };
enum class BiasInit { zero, constant };

// Declarative weight-initialization scheme. The mean modes shift every MLP
// first-layer matrix; all other parameters are untouched by them, so runs
// that differ only in mean mode share base draws under the same seed.
struct InitSpec {
  BaseInit base = BaseInit::kaiming_uniform;
  MeanMode mlp_mean_mode = MeanMode::none;
  double mean_b = 0.0;    // constant mode: W1 += b * ones
  double sigma_b = 0.02;  // rowvec mode: std of the shared column offsets
  bool anticorrelate_w1_w2 = false;
  BiasInit linear_bias_init = BiasInit::zero;
  double linear_bias_c = 0.0;
  bool learnable_scalar_bias = false;
  double scalar_bias_init = 0.0;
  double trunc_normal_std = 0.02;  // truncated at +-2 std
  double kaiming_gain = 1.0;
};

void validate(const InitSpec& spec);

// Base draw for a weight tensor. For 2-D [out x in] matrices fan_in is the
// input dimension (columns); for depthwise kernels [C,f,f] it is f*f.
// kaiming_uniform: U(-g*sqrt(3/fan_in), +g*sqrt(3/fan_in)).
// trunc_normal:    N(0, std^2) resampled beyond +-2 std.
ad::Tensor base_init(ad::Shape shape, const InitSpec& spec, Rng& rng);

// W1' = W1 + b * ones. Input is not mutated.
ad::Tensor apply_constant_mean(const ad::Tensor& w1, double b);

// W1' = W1 + ones_p * b_n^T with b_n ~ N(0, sigma_b^2 I_n): every row gets
// the same offset vector, so column j is shifted by b_n[j].
ad::Tensor apply_rowvec_mean(const ad::Tensor& w1, double sigma_b, Rng& rng);
// Same, with the offset vector supplied by the caller.
ad::Tensor apply_rowvec_mean_with(const ad::Tensor& w1,
                                  std::span<const double> offsets);

// W1' = (W1 - W2^T) / 2. Shapes must be mutually transposed.
ad::Tensor apply_anticorrelated(const ad::Tensor& w1, const ad::Tensor& w2);

// Fills every parameter of a built model: base init for weight matrices and
// conv kernels, ones/zeros for norms, the configured bias init for b1, zeros
// for b2 / patch bias / position embedding / classifier head, then the mean
// mode (and anticorrelation, if set) on each MLP W1.
// init_rng drives base draws; shift_rng drives the rowvec offsets, so mean
// modes never perturb the base stream.
void initialize_model(models::TinyModel& model, const InitSpec& spec,
                      Rng& init_rng, Rng& shift_rng);

}  // namespace mimetic::init
