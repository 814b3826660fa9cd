#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mimetic/autodiff.hpp"
#include "mimetic/rng.hpp"

namespace mimetic::data {

// Per-channel normalization applied at load time: v = (raw01 - mean) / stddev.
struct ChannelNorm {
  std::vector<double> mean;
  std::vector<double> stddev;
};

// Widely used CIFAR-10 train statistics.
ChannelNorm cifar10_default_norm();

// Immutable sample collection. Images are stored normalized, channels-first,
// as 32-bit floats (53-bit precision is irrelevant below the quantization
// noise of 8-bit pixels; float halves the footprint of real datasets).
struct Dataset {
  std::string split;  // "train" or "test"
  int num_classes = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  ChannelNorm norm;
  std::vector<float> images;  // [N, C, H, W] flattened
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
};

// Parses concatenated CIFAR-10 binary records (1 label byte + 3072 pixel
// bytes as 1024 R, 1024 G, 1024 B, each row-major 32x32) into `out`.
// Throws FormatError on a short/oversized blob or a label byte > 9.
void parse_cifar_blob(std::span<const unsigned char> blob,
                      const ChannelNorm& norm, Dataset& out);

// Loads data_batch_1..5.bin as train and test_batch.bin as test.
std::pair<Dataset, Dataset> load_cifar10(
    const std::filesystem::path& dir,
    const ChannelNorm& norm = cifar10_default_norm());

// Fast synthetic stand-in task: one fixed low-frequency pattern per class
// (determined by frequency_seed alone), samples = template + pixel noise.
struct SyntheticTaskSpec {
  int num_classes = 10;
  int image_size = 16;
  int channels = 3;
  std::uint64_t frequency_seed = 7;
  int samples_per_class = 128;  // train; test gets ceil(1/4) of this
  double noise_std = 1.0;
};

void validate(const SyntheticTaskSpec& spec);

// Class templates standardized to mean 0 / std 1 over all pixels; noise
// streams for train and test are disjoint sub-streams of `seed`.
std::pair<Dataset, Dataset> make_synthetic(const SyntheticTaskSpec& spec,
                                           std::uint64_t seed);

// Renders the class template (no noise) for inspection/tests.
std::vector<double> synthetic_template(const SyntheticTaskSpec& spec,
                                       int class_index);

// First `per_class` samples of each class, in dataset order.
Dataset balanced_subset(const Dataset& ds, int per_class);

// Training-time augmentation, in place: per image an independent horizontal
// flip (p = 1/2), then a random crop from a `pad`-pixel zero border. RNG
// consumption per image is fixed (flip draw, then dy, dx) so decisions
// stay aligned across paired runs.
struct AugmentOptions {
  bool flip = true;
  bool crop = true;
  int pad = 4;
};
void augment(ad::Tensor& batch, Rng& rng, const AugmentOptions& opts = {});

// Epoch-deterministic shuffled batching; the final partial batch is kept.
// Order for (seed, epoch) is fixed regardless of which epochs ran before.
class BatchStream {
 public:
  BatchStream(const Dataset& ds, int batch_size, std::uint64_t shuffle_seed,
              bool shuffle);

  std::size_t batches_per_epoch() const;
  void start_epoch(std::uint64_t epoch);
  // Fills a fresh [B,C,H,W] tensor and the label vector; false at epoch end.
  bool next(ad::Tensor& images, std::vector<int>& labels);

 private:
  const Dataset* ds_;
  int batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
  std::vector<std::uint32_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace mimetic::data
