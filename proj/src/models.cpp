#include "mimetic/models.hpp"

#include <cmath>
#include <cstdio>

namespace mimetic::models {

namespace {

constexpr double kLayerNormEps = 1e-6;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string family_name(Family f) {
  return f == Family::convnext ? "convnext" : "vit";
}

Family family_from_name(std::string_view name) {
  if (name == "convnext") return Family::convnext;
  if (name == "vit") return Family::vit;
  throw ConfigError("unknown model family '" + std::string(name) + "'");
}

void validate(const ModelConfig& cfg) {
  if (cfg.embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
  if (cfg.depth < 1) throw ConfigError("depth must be >= 1");
  if (cfg.expansion < 1) throw ConfigError("expansion must be >= 1");
  if (cfg.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (cfg.image_size < 1) throw ConfigError("image_size must be >= 1");
  if (cfg.channels < 1) throw ConfigError("channels must be >= 1");
  if (cfg.patch_size < 1 || cfg.image_size % cfg.patch_size != 0) {
    throw ConfigError("patch_size " + std::to_string(cfg.patch_size) +
                      " must divide image_size " +
                      std::to_string(cfg.image_size));
  }
  if (cfg.family == Family::convnext) {
    if (cfg.filter_size < 1 || cfg.filter_size % 2 == 0) {
      throw ConfigError("filter_size must be odd, got " +
                        std::to_string(cfg.filter_size));
    }
  } else {
    if (cfg.heads < 1 || cfg.embed_dim % cfg.heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(cfg.embed_dim) +
                        " must be divisible by heads " +
                        std::to_string(cfg.heads));
    }
  }
  init::validate(cfg.init);
}

std::uint64_t model_hash(const ModelConfig& cfg) {
  const init::InitSpec& is = cfg.init;
  std::string canon;
  canon += "family=" + family_name(cfg.family);
  canon += ";n=" + std::to_string(cfg.embed_dim);
  canon += ";depth=" + std::to_string(cfg.depth);
  canon += ";exp=" + std::to_string(cfg.expansion);
  canon += ";patch=" + std::to_string(cfg.patch_size);
  canon += ";filter=" + std::to_string(cfg.filter_size);
  canon += ";heads=" + std::to_string(cfg.heads);
  canon += ";classes=" + std::to_string(cfg.num_classes);
  canon += ";image=" + std::to_string(cfg.image_size);
  canon += ";channels=" + std::to_string(cfg.channels);
  canon += ";base=";
  canon += is.base == init::BaseInit::kaiming_uniform ? "kaiming_uniform"
                                                      : "trunc_normal";
  canon += ";mean=";
  switch (is.mlp_mean_mode) {
    case init::MeanMode::none: canon += "none"; break;
    case init::MeanMode::constant: canon += "constant"; break;
    case init::MeanMode::rowvec: canon += "rowvec"; break;
  }
  canon += ";b=" + fmt_double(is.mean_b);
  canon += ";sigma_b=" + fmt_double(is.sigma_b);
  canon += ";anticorr=" + std::to_string(is.anticorrelate_w1_w2 ? 1 : 0);
  canon += ";bias_init=";
  canon += is.linear_bias_init == init::BiasInit::zero ? "zero" : "constant";
  canon += ";bias_c=" + fmt_double(is.linear_bias_c);
  canon += ";scalar_bias=" + std::to_string(is.learnable_scalar_bias ? 1 : 0);
  canon += ";scalar_bias_init=" + fmt_double(is.scalar_bias_init);
  canon += ";tn_std=" + fmt_double(is.trunc_normal_std);
  canon += ";gain=" + fmt_double(is.kaiming_gain);
  return fnv1a64(canon);
}

// ---------------------------------------------------------------------------
// Blocks

ad::Tensor MlpBlock::forward(ad::Tape& tape, const ad::Tensor& x2d) const {
  const int n = w1.dim(1);
  const int p = w1.dim(0);
  if (x2d.rank() != 2 || x2d.dim(1) != n) {
    throw ShapeError("MlpBlock expects [rows x " + std::to_string(n) +
                     "], got " + ad::shape_str(x2d.shape()));
  }
  ad::Tensor pre = tape.add(tape.matmul(x2d, tape.transpose(w1)), b1);
  if (scalar_bias.defined()) {
    // s * sum(x) * ones_p per row: spread the row sums across the hidden
    // width, then scale by the learnable scalar.
    ad::Tensor ones_in = ad::Tensor::full({n, 1}, 1.0);
    ad::Tensor ones_hidden = ad::Tensor::full({1, p}, 1.0);
    ad::Tensor row_sums = tape.matmul(x2d, ones_in);
    ad::Tensor spread = tape.matmul(row_sums, ones_hidden);
    pre = tape.add(pre, tape.mul(spread, scalar_bias));
  }
  return tape.add(tape.matmul(tape.gelu(pre), tape.transpose(w2)), b2);
}

ad::Tensor multi_head_self_attention(ad::Tape& tape, const ad::Tensor& x,
                                     const ad::Tensor& wq, const ad::Tensor& wk,
                                     const ad::Tensor& wv, const ad::Tensor& wo,
                                     int heads) {
  if (x.rank() != 3) {
    throw ShapeError("attention expects [B,T,n], got " +
                     ad::shape_str(x.shape()));
  }
  const int B = x.dim(0), T = x.dim(1), n = x.dim(2);
  if (heads < 1 || n % heads != 0) {
    throw ConfigError("embed dim " + std::to_string(n) +
                      " not divisible by heads " + std::to_string(heads));
  }
  const int dh = n / heads;

  ad::Tensor x2d = tape.reshape(x, {B * T, n});
  auto project_heads = [&](const ad::Tensor& w) {
    ad::Tensor p2d = tape.matmul(x2d, tape.transpose(w));     // [B*T, n]
    ad::Tensor p4 = tape.reshape(p2d, {B, T, heads, dh});
    return tape.reshape(tape.transpose(p4, 1, 2), {B * heads, T, dh});
  };
  ad::Tensor q = project_heads(wq);
  ad::Tensor k = project_heads(wk);
  ad::Tensor v = project_heads(wv);

  ad::Tensor scores =
      tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / std::sqrt(dh));
  ad::Tensor attn = tape.softmax(scores);          // [B*h, T, T]
  ad::Tensor ctx = tape.matmul(attn, v);           // [B*h, T, dh]
  ad::Tensor merged = tape.reshape(
      tape.transpose(tape.reshape(ctx, {B, heads, T, dh}), 1, 2), {B * T, n});
  return tape.reshape(tape.matmul(merged, tape.transpose(wo)), {B, T, n});
}

// ---------------------------------------------------------------------------
// TinyModel

ad::Tensor TinyModel::param(std::string_view name) const {
  for (const auto& [pname, tensor] : params_) {
    if (pname == name) return tensor;
  }
  throw UsageError("no parameter named '" + std::string(name) + "'");
}

std::size_t TinyModel::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [pname, tensor] : params_) total += tensor.numel();
  return total;
}

void TinyModel::zero_all_grads() {
  for (auto& [pname, tensor] : params_) tensor.zero_grad();
}

std::vector<TinyModel::MlpPair> TinyModel::mlp_weight_pairs() const {
  std::vector<MlpPair> pairs;
  const auto take = [&](int index, const MlpBlock& mlp) {
    pairs.push_back({index, mlp.w1.clone(), mlp.w2.clone()});
  };
  for (std::size_t i = 0; i < conv_blocks.size(); ++i) {
    take(static_cast<int>(i), conv_blocks[i].mlp);
  }
  for (std::size_t i = 0; i < vit_blocks.size(); ++i) {
    take(static_cast<int>(i), vit_blocks[i].mlp);
  }
  return pairs;
}

ad::Tensor TinyModel::forward(ad::Tape& tape, const ad::Tensor& images) const {
  const ModelConfig& cfg = config;
  if (images.rank() != 4 || images.dim(1) != cfg.channels ||
      images.dim(2) != cfg.image_size || images.dim(3) != cfg.image_size) {
    throw ShapeError("forward expects [Bx" + std::to_string(cfg.channels) +
                     "x" + std::to_string(cfg.image_size) + "x" +
                     std::to_string(cfg.image_size) + "], got " +
                     ad::shape_str(images.shape()));
  }
  const int B = images.dim(0);
  const int n = cfg.embed_dim;
  const int g = grid();
  const int T = tokens();

  ad::Tensor tok = tape.patchify(images, cfg.patch_size);  // [B,T,C*p*p]
  ad::Tensor emb2d = tape.add(
      tape.matmul(tape.reshape(tok, {B * T, tok.dim(2)}), tape.transpose(patch_w)),
      patch_b);                                            // [B*T, n]
  ad::Tensor x = tape.reshape(emb2d, {B, T, n});

  if (cfg.family == Family::convnext) {
    // Work on the [B,n,g,g] spatial layout between blocks.
    ad::Tensor xs = tape.reshape(tape.transpose(x, 1, 2), {B, n, g, g});
    for (const ConvBlock& block : conv_blocks) {
      ad::Tensor conv = tape.depthwise_conv2d(xs, block.conv_kernels);
      ad::Tensor ct = tape.transpose(tape.reshape(conv, {B, n, T}), 1, 2);
      ad::Tensor normed =
          tape.layernorm(ct, block.norm_gamma, block.norm_beta, kLayerNormEps);
      ad::Tensor mlp_out =
          block.mlp.forward(tape, tape.reshape(normed, {B * T, n}));
      ad::Tensor ms = tape.reshape(
          tape.transpose(tape.reshape(mlp_out, {B, T, n}), 1, 2), {B, n, g, g});
      xs = tape.add(xs, ms);
    }
    x = tape.transpose(tape.reshape(xs, {B, n, T}), 1, 2);
  } else {
    x = tape.add(x, pos_embed);
    for (const VitBlock& block : vit_blocks) {
      ad::Tensor attn_in =
          tape.layernorm(x, block.norm1_gamma, block.norm1_beta, kLayerNormEps);
      ad::Tensor attn = multi_head_self_attention(
          tape, attn_in, block.wq, block.wk, block.wv, block.wo, cfg.heads);
      x = tape.add(x, attn);
      ad::Tensor mlp_in =
          tape.layernorm(x, block.norm2_gamma, block.norm2_beta, kLayerNormEps);
      ad::Tensor mlp_out =
          block.mlp.forward(tape, tape.reshape(mlp_in, {B * T, n}));
      x = tape.add(x, tape.reshape(mlp_out, {B, T, n}));
    }
  }

  ad::Tensor fin = tape.layernorm(x, final_gamma, final_beta, kLayerNormEps);
  ad::Tensor pooled = tape.mean_pool_tokens(fin);  // [B, n]
  return tape.add(tape.matmul(pooled, tape.transpose(head_w)), head_b);
}

// ---------------------------------------------------------------------------
// Construction

namespace {

MlpBlock make_mlp_block(
    const ModelConfig& cfg, const std::string& prefix,
    std::vector<std::pair<std::string, ad::Tensor>>& registry) {
  const int n = cfg.embed_dim;
  const int p = cfg.expansion * n;
  MlpBlock mlp;
  mlp.w1 = ad::Tensor::zeros({p, n}, true);
  mlp.b1 = ad::Tensor::zeros({p}, true);
  mlp.w2 = ad::Tensor::zeros({n, p}, true);
  mlp.b2 = ad::Tensor::zeros({n}, true);
  registry.emplace_back(prefix + ".W1", mlp.w1);
  registry.emplace_back(prefix + ".b1", mlp.b1);
  registry.emplace_back(prefix + ".W2", mlp.w2);
  registry.emplace_back(prefix + ".b2", mlp.b2);
  if (cfg.init.learnable_scalar_bias) {
    mlp.scalar_bias = ad::Tensor::scalar(0.0, true);
    registry.emplace_back(prefix + ".s", mlp.scalar_bias);
  }
  return mlp;
}

}  // namespace

TinyModel build_model(const ModelConfig& cfg, Rng& init_rng, Rng& shift_rng) {
  validate(cfg);
  TinyModel m;
  m.config = cfg;
  const int n = cfg.embed_dim;
  const int T = m.tokens();
  const int patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;

  m.patch_w = ad::Tensor::zeros({n, patch_dim}, true);
  m.patch_b = ad::Tensor::zeros({n}, true);
  m.params_.emplace_back("patch.W", m.patch_w);
  m.params_.emplace_back("patch.b", m.patch_b);
  if (cfg.family == Family::vit) {
    m.pos_embed = ad::Tensor::zeros({T, n}, true);
    m.params_.emplace_back("pos_embed", m.pos_embed);
  }

  for (int i = 0; i < cfg.depth; ++i) {
    const std::string prefix = "block." + std::to_string(i);
    if (cfg.family == Family::convnext) {
      ConvBlock block;
      block.conv_kernels =
          ad::Tensor::zeros({n, cfg.filter_size, cfg.filter_size}, true);
      block.norm_gamma = ad::Tensor::zeros({n}, true);
      block.norm_beta = ad::Tensor::zeros({n}, true);
      m.params_.emplace_back(prefix + ".conv.K", block.conv_kernels);
      m.params_.emplace_back(prefix + ".norm.gamma", block.norm_gamma);
      m.params_.emplace_back(prefix + ".norm.beta", block.norm_beta);
      block.mlp = make_mlp_block(cfg, prefix + ".mlp", m.params_);
      m.conv_blocks.push_back(std::move(block));
    } else {
      VitBlock block;
      block.norm1_gamma = ad::Tensor::zeros({n}, true);
      block.norm1_beta = ad::Tensor::zeros({n}, true);
      block.wq = ad::Tensor::zeros({n, n}, true);
      block.wk = ad::Tensor::zeros({n, n}, true);
      block.wv = ad::Tensor::zeros({n, n}, true);
      block.wo = ad::Tensor::zeros({n, n}, true);
      block.norm2_gamma = ad::Tensor::zeros({n}, true);
      block.norm2_beta = ad::Tensor::zeros({n}, true);
      m.params_.emplace_back(prefix + ".norm1.gamma", block.norm1_gamma);
      m.params_.emplace_back(prefix + ".norm1.beta", block.norm1_beta);
      m.params_.emplace_back(prefix + ".attn.Wq", block.wq);
      m.params_.emplace_back(prefix + ".attn.Wk", block.wk);
      m.params_.emplace_back(prefix + ".attn.Wv", block.wv);
      m.params_.emplace_back(prefix + ".attn.Wo", block.wo);
      m.params_.emplace_back(prefix + ".norm2.gamma", block.norm2_gamma);
      m.params_.emplace_back(prefix + ".norm2.beta", block.norm2_beta);
      block.mlp = make_mlp_block(cfg, prefix + ".mlp", m.params_);
      m.vit_blocks.push_back(std::move(block));
    }
  }

  m.final_gamma = ad::Tensor::zeros({n}, true);
  m.final_beta = ad::Tensor::zeros({n}, true);
  m.head_w = ad::Tensor::zeros({cfg.num_classes, n}, true);
  m.head_b = ad::Tensor::zeros({cfg.num_classes}, true);
  m.params_.emplace_back("final.gamma", m.final_gamma);
  m.params_.emplace_back("final.beta", m.final_beta);
  m.params_.emplace_back("head.W", m.head_w);
  m.params_.emplace_back("head.b", m.head_b);

  init::initialize_model(m, cfg.init, init_rng, shift_rng);
  return m;
}

TinyModel build_model(const ModelConfig& cfg) {
  Rng init_rng(derive_stream(cfg.seed, "init"));
  Rng shift_rng(derive_stream(cfg.seed, "meanshift"));
  return build_model(cfg, init_rng, shift_rng);
}

std::size_t parameter_count_formula(const ModelConfig& cfg) {
  const std::size_t n = static_cast<std::size_t>(cfg.embed_dim);
  const std::size_t p = static_cast<std::size_t>(cfg.expansion) * n;
  const std::size_t T = static_cast<std::size_t>(cfg.image_size / cfg.patch_size) *
                        (cfg.image_size / cfg.patch_size);
  const std::size_t patch_dim = static_cast<std::size_t>(cfg.channels) *
                                cfg.patch_size * cfg.patch_size;
  const std::size_t mlp = 2 * n * p + p + n +
                          (cfg.init.learnable_scalar_bias ? 1 : 0);
  std::size_t per_block;
  if (cfg.family == Family::convnext) {
    per_block = n * cfg.filter_size * cfg.filter_size + 2 * n + mlp;
  } else {
    per_block = 2 * n + 4 * n * n + 2 * n + mlp;
  }
  std::size_t total = n * patch_dim + n;             // patch embedding
  if (cfg.family == Family::vit) total += T * n;     // position embedding
  total += static_cast<std::size_t>(cfg.depth) * per_block;
  total += 2 * n;                                    // final norm
  total += static_cast<std::size_t>(cfg.num_classes) * n + cfg.num_classes;
  return total;
}

}  // namespace mimetic::models
