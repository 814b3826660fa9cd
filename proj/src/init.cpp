#include "mimetic/init.hpp"

#include <cmath>
#include <string>

#include "mimetic/models.hpp"

namespace mimetic::init {

void validate(const InitSpec& spec) {
  if (!std::isfinite(spec.mean_b)) throw ConfigError("mean_b must be finite");
  if (!std::isfinite(spec.sigma_b) || spec.sigma_b < 0.0) {
    throw ConfigError("sigma_b must be finite and >= 0");
  }
  if (!std::isfinite(spec.linear_bias_c)) {
    throw ConfigError("linear_bias_c must be finite");
  }
  if (spec.trunc_normal_std <= 0.0) {
    throw ConfigError("trunc_normal_std must be positive");
  }
  if (!std::isfinite(spec.kaiming_gain) || spec.kaiming_gain <= 0.0) {
    throw ConfigError("kaiming_gain must be positive");
  }
  if (!std::isfinite(spec.scalar_bias_init)) {
    throw ConfigError("scalar_bias_init must be finite");
  }
}

namespace {

int fan_in_of(const ad::Shape& shape) {
  if (shape.size() == 2) return shape[1];
  if (shape.size() == 3) return shape[1] * shape[2];  // depthwise [C,f,f]
  throw ShapeError("base_init expects a 2-D matrix or [C,f,f] kernel, got " +
                   ad::shape_str(shape));
}

void fill_base(std::span<double> out, int fan_in, const InitSpec& spec,
               Rng& rng) {
  if (spec.base == BaseInit::kaiming_uniform) {
    const double bound = spec.kaiming_gain * std::sqrt(3.0 / fan_in);
    for (double& v : out) v = rng.uniform(-bound, bound);
  } else {
    const double s = spec.trunc_normal_std;
    for (double& v : out) v = rng.trunc_normal(s, 2.0 * s);
  }
}

}  // namespace

ad::Tensor base_init(ad::Shape shape, const InitSpec& spec, Rng& rng) {
  const int fan_in = fan_in_of(shape);
  ad::Tensor t = ad::Tensor::zeros(std::move(shape), true);
  fill_base(t.mutable_data(), fan_in, spec, rng);
  return t;
}

ad::Tensor apply_constant_mean(const ad::Tensor& w1, double b) {
  ad::Tensor out = w1.clone(w1.requires_grad());
  for (double& v : out.mutable_data()) v += b;
  return out;
}

ad::Tensor apply_rowvec_mean(const ad::Tensor& w1, double sigma_b, Rng& rng) {
  if (w1.rank() != 2) {
    throw ShapeError("apply_rowvec_mean expects a matrix, got " +
                     ad::shape_str(w1.shape()));
  }
  std::vector<double> offsets(static_cast<std::size_t>(w1.dim(1)));
  for (double& v : offsets) v = rng.normal(0.0, sigma_b);
  return apply_rowvec_mean_with(w1, offsets);
}

ad::Tensor apply_rowvec_mean_with(const ad::Tensor& w1,
                                  std::span<const double> offsets) {
  if (w1.rank() != 2 || static_cast<std::size_t>(w1.dim(1)) != offsets.size()) {
    throw ShapeError("offset length " + std::to_string(offsets.size()) +
                     " does not match " + ad::shape_str(w1.shape()));
  }
  ad::Tensor out = w1.clone(w1.requires_grad());
  auto data = out.mutable_data();
  const int rows = w1.dim(0), cols = w1.dim(1);
  for (int i = 0; i < rows; ++i) {
    double* row = data.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) row[j] += offsets[j];
  }
  return out;
}

ad::Tensor apply_anticorrelated(const ad::Tensor& w1, const ad::Tensor& w2) {
  if (w1.rank() != 2 || w2.rank() != 2 || w1.dim(0) != w2.dim(1) ||
      w1.dim(1) != w2.dim(0)) {
    throw ShapeError("anticorrelated init needs mutually transposed shapes, got " +
                     ad::shape_str(w1.shape()) + " and " +
                     ad::shape_str(w2.shape()));
  }
  ad::Tensor out = w1.clone(w1.requires_grad());
  auto data = out.mutable_data();
  auto w2d = w2.data();
  const int rows = w1.dim(0), cols = w1.dim(1);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      const std::size_t off = static_cast<std::size_t>(i) * cols + j;
      data[off] = 0.5 * (data[off] - w2d[static_cast<std::size_t>(j) * rows + i]);
    }
  }
  return out;
}

namespace {

void copy_into(ad::Tensor& dst, const ad::Tensor& src) {
  auto d = dst.mutable_data();
  auto s = src.data();
  std::copy(s.begin(), s.end(), d.begin());
}

bool is_base_weight(std::string_view name) {
  // Everything drawn from the base distribution. The classifier head and the
  // position embedding are zero-initialized instead.
  return name == "patch.W" || name.ends_with(".conv.K") ||
         name.ends_with(".attn.Wq") || name.ends_with(".attn.Wk") ||
         name.ends_with(".attn.Wv") || name.ends_with(".attn.Wo") ||
         name.ends_with(".mlp.W1") || name.ends_with(".mlp.W2");
}

}  // namespace

void initialize_model(models::TinyModel& model, const InitSpec& spec,
                      Rng& init_rng, Rng& shift_rng) {
  validate(spec);
  for (auto& [name, tensor] : model.params_) {
    if (is_base_weight(name)) {
      fill_base(tensor.mutable_data(), fan_in_of(tensor.shape()), spec,
                init_rng);
    } else if (name.ends_with(".gamma")) {
      std::fill(tensor.mutable_data().begin(), tensor.mutable_data().end(), 1.0);
    } else if (name.ends_with(".mlp.b1")) {
      const double c =
          spec.linear_bias_init == BiasInit::constant ? spec.linear_bias_c : 0.0;
      std::fill(tensor.mutable_data().begin(), tensor.mutable_data().end(), c);
    } else if (name.ends_with(".mlp.s")) {
      tensor.mutable_data()[0] = spec.scalar_bias_init;
    } else {
      // beta, b2, patch.b, pos_embed, head.W, head.b
      std::fill(tensor.mutable_data().begin(), tensor.mutable_data().end(), 0.0);
    }
  }

  for (auto& block_mlp : model.conv_blocks) {
    auto& mlp = block_mlp.mlp;
    if (spec.mlp_mean_mode == MeanMode::constant) {
      copy_into(mlp.w1, apply_constant_mean(mlp.w1, spec.mean_b));
    } else if (spec.mlp_mean_mode == MeanMode::rowvec) {
      copy_into(mlp.w1, apply_rowvec_mean(mlp.w1, spec.sigma_b, shift_rng));
    }
    if (spec.anticorrelate_w1_w2) {
      copy_into(mlp.w1, apply_anticorrelated(mlp.w1, mlp.w2));
    }
  }
  for (auto& block_mlp : model.vit_blocks) {
    auto& mlp = block_mlp.mlp;
    if (spec.mlp_mean_mode == MeanMode::constant) {
      copy_into(mlp.w1, apply_constant_mean(mlp.w1, spec.mean_b));
    } else if (spec.mlp_mean_mode == MeanMode::rowvec) {
      copy_into(mlp.w1, apply_rowvec_mean(mlp.w1, spec.sigma_b, shift_rng));
    }
    if (spec.anticorrelate_w1_w2) {
      copy_into(mlp.w1, apply_anticorrelated(mlp.w1, mlp.w2));
    }
  }
}

}  // namespace mimetic::init
