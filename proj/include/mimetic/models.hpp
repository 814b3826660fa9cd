#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mimetic/autodiff.hpp"
#include "mimetic/init.hpp"
#include "mimetic/rng.hpp"

namespace mimetic::models {

enum class Family { convnext, vit };

std::string family_name(Family f);
Family family_from_name(std::string_view name);

struct ModelConfig {
  Family family = Family::convnext;
  int embed_dim = 16;
  int depth = 3;
  int expansion = 2;  // MLP hidden width = expansion * embed_dim
  int patch_size = 2;
  int filter_size = 3;  // convnext depthwise filter
  int heads = 4;        // vit
  int num_classes = 10;
  int image_size = 16;
  int channels = 3;
  init::InitSpec init;
  std::uint64_t seed = 0;
};

void validate(const ModelConfig& cfg);

// Stable hash of the architecture + init scheme (seed excluded).
std::uint64_t model_hash(const ModelConfig& cfg);

// Two-layer perceptron applied per token: W2 * gelu(W1 * x + b1) + b2.
// scalar_bias, when defined, adds s * sum(x) * ones_p to the pre-activation
// (the learnable-scalar-bias baseline).
struct MlpBlock {
  ad::Tensor w1;  // [p, n]
  ad::Tensor b1;  // [p]
  ad::Tensor w2;  // [n, p]
  ad::Tensor b2;  // [n]
  ad::Tensor scalar_bias;  // rank-0, optional

  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& x2d) const;
};

struct ConvBlock {
  ad::Tensor conv_kernels;  // [n, f, f]
  ad::Tensor norm_gamma, norm_beta;
  MlpBlock mlp;
};

struct VitBlock {
  ad::Tensor norm1_gamma, norm1_beta;
  ad::Tensor wq, wk, wv, wo;  // [n, n]
  ad::Tensor norm2_gamma, norm2_beta;
  MlpBlock mlp;
};

// Standard scaled dot-product attention over [B,T,n] tokens.
ad::Tensor multi_head_self_attention(ad::Tape& tape, const ad::Tensor& x,
                                     const ad::Tensor& wq, const ad::Tensor& wk,
                                     const ad::Tensor& wv, const ad::Tensor& wo,
                                     int heads);

struct TinyModel {
  ModelConfig config;

  ad::Tensor patch_w;  // [n, C*ps*ps]
  ad::Tensor patch_b;  // [n]
  ad::Tensor pos_embed;  // [T, n], vit only
  std::vector<ConvBlock> conv_blocks;
  std::vector<VitBlock> vit_blocks;
  ad::Tensor final_gamma, final_beta;
  ad::Tensor head_w;  // [classes, n], zero-initialized
  ad::Tensor head_b;  // [classes]

  int grid() const { return config.image_size / config.patch_size; }
  int tokens() const { return grid() * grid(); }

  // Unique hierarchical parameter names (e.g. "block.2.mlp.W1"), fixed order.
  const std::vector<std::pair<std::string, ad::Tensor>>& parameters() const {
    return params_;
  }
  ad::Tensor param(std::string_view name) const;
  std::size_t parameter_count() const;
  void zero_all_grads();

  // [B,3,H,W] -> [B,classes]. Token mean-pool before the classifier head.
  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& images) const;

  struct MlpPair {
    int layer_index;
    ad::Tensor w1, w2;  // snapshots, not live parameters
  };
  std::vector<MlpPair> mlp_weight_pairs() const;

  // Populated by build_model.
  std::vector<std::pair<std::string, ad::Tensor>> params_;
};

// Allocates, registers, and initializes all parameters per cfg.init.
// Deterministic: the same config (including seed) yields identical bytes.
TinyModel build_model(const ModelConfig& cfg);
TinyModel build_model(const ModelConfig& cfg, Rng& init_rng, Rng& shift_rng);

// Closed-form parameter count; asserted against the registry in tests.
std::size_t parameter_count_formula(const ModelConfig& cfg);

}  // namespace mimetic::models
