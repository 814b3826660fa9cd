#include "mimetic/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace mimetic::data {

namespace {

constexpr int kCifarSide = 32;
constexpr int kCifarChannels = 3;
constexpr std::size_t kCifarRecord =
    1 + static_cast<std::size_t>(kCifarChannels) * kCifarSide * kCifarSide;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace

ChannelNorm cifar10_default_norm() {
  return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}};
}

void parse_cifar_blob(std::span<const unsigned char> blob,
                      const ChannelNorm& norm, Dataset& out) {
  if (blob.size() % kCifarRecord != 0) {
    throw FormatError("CIFAR blob length " + std::to_string(blob.size()) +
                      " is not a multiple of " + std::to_string(kCifarRecord));
  }
  if (norm.mean.size() != kCifarChannels ||
      norm.stddev.size() != kCifarChannels) {
    throw ConfigError("CIFAR normalization needs 3 channels");
  }
  out.num_classes = 10;
  out.channels = kCifarChannels;
  out.height = out.width = kCifarSide;
  out.norm = norm;
  const std::size_t records = blob.size() / kCifarRecord;
  out.images.reserve(out.images.size() + records * (kCifarRecord - 1));
  out.labels.reserve(out.labels.size() + records);
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = blob.data() + r * kCifarRecord;
    if (rec[0] > 9) {
      throw FormatError("label byte " + std::to_string(rec[0]) +
                        " out of range at record " + std::to_string(r));
    }
    out.labels.push_back(rec[0]);
    for (int c = 0; c < kCifarChannels; ++c) {
      const double inv_std = 1.0 / norm.stddev[c];
      const unsigned char* plane = rec + 1 + c * kCifarSide * kCifarSide;
      for (int i = 0; i < kCifarSide * kCifarSide; ++i) {
        const double raw01 = plane[i] / 255.0;
        out.images.push_back(
            static_cast<float>((raw01 - norm.mean[c]) * inv_std));
      }
    }
  }
}

std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir,
                                         const ChannelNorm& norm) {
  Dataset train, test;
  train.split = "train";
  test.split = "test";
  for (int i = 1; i <= 5; ++i) {
    const auto path = dir / ("data_batch_" + std::to_string(i) + ".bin");
    const auto bytes = read_file(path);
    try {
      parse_cifar_blob(bytes, norm, train);
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  const auto test_path = dir / "test_batch.bin";
  const auto bytes = read_file(test_path);
  try {
    parse_cifar_blob(bytes, norm, test);
  } catch (const FormatError& e) {
    throw FormatError(test_path.string() + ": " + e.what());
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Synthetic task

void validate(const SyntheticTaskSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic num_classes >= 2");
  if (spec.image_size < 2) throw ConfigError("synthetic image_size >= 2");
  if (spec.channels < 1) throw ConfigError("synthetic channels >= 1");
  if (spec.samples_per_class < 1) {
    throw ConfigError("synthetic samples_per_class >= 1");
  }
  if (!std::isfinite(spec.noise_std) || spec.noise_std < 0.0) {
    throw ConfigError("synthetic noise_std must be finite and >= 0");
  }
}

std::vector<double> synthetic_template(const SyntheticTaskSpec& spec,
                                       int class_index) {
  validate(spec);
  if (class_index < 0 || class_index >= spec.num_classes) {
    throw InputError("class index " + std::to_string(class_index) +
                     " out of range");
  }
  const int S = spec.image_size;
  const std::size_t numel =
      static_cast<std::size_t>(spec.channels) * S * S;
  // One RNG for all templates: skip the draws of earlier classes so each
  // class's pattern is independent of how many templates are rendered.
  Rng rng(derive_stream(spec.frequency_seed, "templates"));
  constexpr int kComponents = 3;
  std::vector<double> tmpl(numel, 0.0);
  for (int cls = 0; cls <= class_index; ++cls) {
    std::fill(tmpl.begin(), tmpl.end(), 0.0);
    for (int ch = 0; ch < spec.channels; ++ch) {
      for (int comp = 0; comp < kComponents; ++comp) {
        const double fx = static_cast<double>(rng.below(3));
        const double fy = static_cast<double>(rng.below(3));
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double amp = rng.uniform(0.5, 1.0);
        double* plane = tmpl.data() + static_cast<std::size_t>(ch) * S * S;
        for (int y = 0; y < S; ++y) {
          for (int x = 0; x < S; ++x) {
            plane[static_cast<std::size_t>(y) * S + x] +=
                amp * std::cos(2.0 * std::numbers::pi * (fx * x + fy * y) / S +
                               phase);
          }
        }
      }
    }
  }
  // Standardize over all pixels so noise_std is relative to unit signal.
  double mean = 0.0;
  for (double v : tmpl) mean += v;
  mean /= static_cast<double>(numel);
  double var = 0.0;
  for (double v : tmpl) var += (v - mean) * (v - mean);
  var /= static_cast<double>(numel);
  const double inv = 1.0 / std::max(std::sqrt(var), 1e-6);
  for (double& v : tmpl) v = (v - mean) * inv;
  return tmpl;
}

namespace {

Dataset synthesize_split(const SyntheticTaskSpec& spec,
                         const std::vector<std::vector<double>>& templates,
                         int per_class, std::uint64_t noise_seed,
                         const std::string& split) {
  Dataset ds;
  ds.split = split;
  ds.num_classes = spec.num_classes;
  ds.channels = spec.channels;
  ds.height = ds.width = spec.image_size;
  ds.norm.mean.assign(spec.channels, 0.0);
  ds.norm.stddev.assign(spec.channels, 1.0);
  const std::size_t numel = templates[0].size();
  ds.images.reserve(static_cast<std::size_t>(per_class) * spec.num_classes *
                    numel);
  Rng rng(noise_seed);
  for (int s = 0; s < per_class; ++s) {
    for (int cls = 0; cls < spec.num_classes; ++cls) {
      ds.labels.push_back(cls);
      const std::vector<double>& tmpl = templates[cls];
      for (std::size_t i = 0; i < numel; ++i) {
        ds.images.push_back(static_cast<float>(
            tmpl[i] + rng.normal(0.0, spec.noise_std)));
      }
    }
  }
  return ds;
}

}  // namespace

std::pair<Dataset, Dataset> make_synthetic(const SyntheticTaskSpec& spec,
                                           std::uint64_t seed) {
  validate(spec);
  std::vector<std::vector<double>> templates;
  templates.reserve(spec.num_classes);
  for (int cls = 0; cls < spec.num_classes; ++cls) {
    templates.push_back(synthetic_template(spec, cls));
  }
  const int test_per_class = (spec.samples_per_class + 3) / 4;
  Dataset train =
      synthesize_split(spec, templates, spec.samples_per_class,
                       derive_stream(seed, "synthetic:train"), "train");
  Dataset test = synthesize_split(spec, templates, test_per_class,
                                  derive_stream(seed, "synthetic:test"), "test");
  return {std::move(train), std::move(test)};
}

Dataset balanced_subset(const Dataset& ds, int per_class) {
  if (per_class < 1) throw ConfigError("subset per_class must be >= 1");
  Dataset out;
  out.split = ds.split;
  out.num_classes = ds.num_classes;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.norm = ds.norm;
  std::vector<int> taken(ds.num_classes, 0);
  const std::size_t numel = ds.sample_numel();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int label = ds.labels[i];
    if (taken[label] >= per_class) continue;
    ++taken[label];
    out.labels.push_back(label);
    const float* src = ds.images.data() + i * numel;
    out.images.insert(out.images.end(), src, src + numel);
  }
  for (int c = 0; c < ds.num_classes; ++c) {
    if (taken[c] < per_class) {
      throw InputError("class " + std::to_string(c) + " has only " +
                       std::to_string(taken[c]) + " samples, need " +
                       std::to_string(per_class));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

void augment(ad::Tensor& batch, Rng& rng, const AugmentOptions& opts) {
  if (batch.rank() != 4) {
    throw ShapeError("augment expects [B,C,H,W], got " +
                     ad::shape_str(batch.shape()));
  }
  const int B = batch.dim(0), C = batch.dim(1), H = batch.dim(2),
            W = batch.dim(3);
  const int span = 2 * opts.pad + 1;
  auto data = batch.mutable_data();
  std::vector<double> plane(static_cast<std::size_t>(H) * W);
  for (int b = 0; b < B; ++b) {
    const bool flip = opts.flip && rng.uniform01() < 0.5;
    int dy = opts.pad, dx = opts.pad;  // center = identity
    if (opts.crop) {
      dy = static_cast<int>(rng.below(span));
      dx = static_cast<int>(rng.below(span));
    }
    if (!flip && dy == opts.pad && dx == opts.pad) continue;
    for (int c = 0; c < C; ++c) {
      double* img = data.data() +
                    (static_cast<std::size_t>(b) * C + c) *
                        (static_cast<std::size_t>(H) * W);
      std::copy(img, img + plane.size(), plane.begin());
      for (int y = 0; y < H; ++y) {
        const int sy = y + dy - opts.pad;
        for (int x = 0; x < W; ++x) {
          int sx = x + dx - opts.pad;
          double v = 0.0;
          if (sy >= 0 && sy < H && sx >= 0 && sx < W) {
            if (flip) sx = W - 1 - sx;
            v = plane[static_cast<std::size_t>(sy) * W + sx];
          }
          img[static_cast<std::size_t>(y) * W + x] = v;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Batching

BatchStream::BatchStream(const Dataset& ds, int batch_size,
                         std::uint64_t shuffle_seed, bool shuffle)
    : ds_(&ds), batch_size_(batch_size), seed_(shuffle_seed),
      shuffle_(shuffle) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (ds.size() == 0) throw InputError("cannot batch an empty dataset");
  order_.resize(ds.size());
  for (std::size_t i = 0; i < order_.size(); ++i) {
    order_[i] = static_cast<std::uint32_t>(i);
  }
  cursor_ = order_.size();  // next() returns false until start_epoch
}

std::size_t BatchStream::batches_per_epoch() const {
  return (ds_->size() + batch_size_ - 1) / batch_size_;
}

void BatchStream::start_epoch(std::uint64_t epoch) {
  for (std::size_t i = 0; i < order_.size(); ++i) {
    order_[i] = static_cast<std::uint32_t>(i);
  }
  if (shuffle_) {
    Rng rng(derive_stream(seed_, "epoch:" + std::to_string(epoch)));
    rng.shuffle(order_);
  }
  cursor_ = 0;
}

bool BatchStream::next(ad::Tensor& images, std::vector<int>& labels) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t count =
      std::min<std::size_t>(batch_size_, order_.size() - cursor_);
  const std::size_t numel = ds_->sample_numel();
  images = ad::Tensor::zeros({static_cast<int>(count), ds_->channels,
                              ds_->height, ds_->width});
  labels.resize(count);
  auto out = images.mutable_data();
  for (std::size_t k = 0; k < count; ++k) {
    const std::uint32_t idx = order_[cursor_ + k];
    labels[k] = ds_->labels[idx];
    const float* src = ds_->images.data() + static_cast<std::size_t>(idx) * numel;
    double* dst = out.data() + k * numel;
    for (std::size_t i = 0; i < numel; ++i) dst[i] = src[i];
  }
  cursor_ += count;
  return true;
}

}  // namespace mimetic::data
