#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "doctest.h"
#include "mimetic/data.hpp"
#include "mimetic/rng.hpp"
#include "test_util.hpp"

using mimetic::Rng;
using mimetic::ad::Tensor;
namespace data = mimetic::data;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kRecord = 3073;

// Builds one CIFAR record with label `label` and every pixel of channel c
// equal to `base + c`.
std::vector<unsigned char> make_record(int label, int base) {
  std::vector<unsigned char> rec(kRecord, 0);
  rec[0] = static_cast<unsigned char>(label);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 1024; ++i) {
      rec[1 + static_cast<std::size_t>(c) * 1024 + i] =
          static_cast<unsigned char>(base + c);
    }
  }
  return rec;
}

data::ChannelNorm identity_norm() {
  return data::ChannelNorm{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}};
}

fs::path temp_dir(const char* tag) {
  const fs::path dir = fs::temp_directory_path() /
                       (std::string("mimetic_test_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("cifar blob parsing recovers labels and pixel planes") {
  std::vector<unsigned char> blob = make_record(3, 10);
  const auto rec2 = make_record(9, 200);
  blob.insert(blob.end(), rec2.begin(), rec2.end());

  data::Dataset ds;
  ds.split = "train";
  data::parse_cifar_blob(blob, identity_norm(), ds);
  REQUIRE(ds.size() == 2);
  CHECK(ds.labels == std::vector<int>{3, 9});
  CHECK(ds.channels == 3);
  CHECK(ds.height == 32);
  CHECK(ds.width == 32);
  // Channel planes: sample 0 has R=10/255, G=11/255, B=12/255 everywhere.
  const float r = ds.images[0];
  const float g = ds.images[1024];
  const float b = ds.images[2048];
  CHECK(r == doctest::Approx(10.0 / 255.0));
  CHECK(g == doctest::Approx(11.0 / 255.0));
  CHECK(b == doctest::Approx(12.0 / 255.0));
  // Sample 1 follows immediately.
  CHECK(ds.images[3072] == doctest::Approx(200.0 / 255.0));
}

TEST_CASE("channel normalization is applied at parse time") {
  const auto blob = make_record(0, 128);
  data::Dataset ds;
  data::ChannelNorm norm{{0.5, 0.25, 0.0}, {2.0, 1.0, 0.5}};
  data::parse_cifar_blob(blob, norm, ds);
  CHECK(ds.images[0] ==
        doctest::Approx((128.0 / 255.0 - 0.5) / 2.0));
  CHECK(ds.images[1024] ==
        doctest::Approx((129.0 / 255.0 - 0.25) / 1.0));
  CHECK(ds.images[2048] ==
        doctest::Approx((130.0 / 255.0 - 0.0) / 0.5));
  // Denormalizing recovers the quantized pixel within float error.
  const double recovered = (ds.images[0] * 2.0 + 0.5) * 255.0;
  CHECK(std::abs(recovered - 128.0) < 1e-4);
}

TEST_CASE("truncated and corrupt blobs are rejected") {
  data::Dataset ds;
  std::vector<unsigned char> blob = make_record(1, 5);
  blob.pop_back();
  CHECK_THROWS_AS(data::parse_cifar_blob(blob, identity_norm(), ds),
                  mimetic::FormatError);
  auto bad_label = make_record(1, 5);
  bad_label[0] = 10;
  CHECK_THROWS_AS(data::parse_cifar_blob(bad_label, identity_norm(), ds),
                  mimetic::FormatError);
}

TEST_CASE("load_cifar10 reads the six standard files") {
  const fs::path dir = temp_dir("cifar");
  // Each train file gets two records; the test file gets three.
  for (int f = 1; f <= 5; ++f) {
    std::ofstream out(dir / ("data_batch_" + std::to_string(f) + ".bin"),
                      std::ios::binary);
    for (int r = 0; r < 2; ++r) {
      const auto rec = make_record((f + r) % 10, f * 10 + r);
      out.write(reinterpret_cast<const char*>(rec.data()),
                static_cast<std::streamsize>(rec.size()));
    }
  }
  {
    std::ofstream out(dir / "test_batch.bin", std::ios::binary);
    for (int r = 0; r < 3; ++r) {
      const auto rec = make_record(r, 100 + r);
      out.write(reinterpret_cast<const char*>(rec.data()),
                static_cast<std::streamsize>(rec.size()));
    }
  }
  const auto [train, test] = data::load_cifar10(dir, identity_norm());
  CHECK(train.size() == 10);
  CHECK(test.size() == 3);
  CHECK(train.split == "train");
  CHECK(test.split == "test");
  CHECK(train.labels[0] == 1);  // first record of data_batch_1
  CHECK(test.labels == std::vector<int>{0, 1, 2});

  SUBCASE("missing file names the path") {
    fs::remove(dir / "data_batch_3.bin");
    CHECK_THROWS_WITH_AS(
        (void)data::load_cifar10(dir, identity_norm()),
        doctest::Contains("data_batch_3.bin"), mimetic::InputError);
  }
  fs::remove_all(dir);
}

TEST_CASE("synthetic task is deterministic in the seed") {
  data::SyntheticTaskSpec spec;
  spec.samples_per_class = 8;
  const auto [tr1, te1] = data::make_synthetic(spec, 42);
  const auto [tr2, te2] = data::make_synthetic(spec, 42);
  CHECK(tr1.images == tr2.images);
  CHECK(tr1.labels == tr2.labels);
  CHECK(te1.images == te2.images);
  const auto [tr3, te3] = data::make_synthetic(spec, 43);
  CHECK(tr1.images != tr3.images);
  // Different noise seeds share the class templates (frequency_seed fixed):
  // class means stay close while individual samples differ.
}

TEST_CASE("synthetic datasets are balanced and sized as promised") {
  data::SyntheticTaskSpec spec;
  spec.samples_per_class = 8;
  const auto [train, test] = data::make_synthetic(spec, 1);
  CHECK(train.size() == 80);
  CHECK(test.size() == 20);  // ceil(8/4) per class
  std::map<int, int> train_counts, test_counts;
  for (int l : train.labels) ++train_counts[l];
  for (int l : test.labels) ++test_counts[l];
  for (int c = 0; c < 10; ++c) {
    CHECK(train_counts[c] == 8);
    CHECK(test_counts[c] == 2);
  }
  CHECK(train.height == spec.image_size);
  CHECK(train.channels == spec.channels);
}

TEST_CASE("zero noise reproduces the class template exactly") {
  data::SyntheticTaskSpec spec;
  spec.samples_per_class = 4;
  spec.noise_std = 0.0;
  const auto [train, test] = data::make_synthetic(spec, 9);
  const std::size_t numel = train.sample_numel();
  for (std::size_t s = 0; s < train.size(); ++s) {
    const auto tmpl =
        data::synthetic_template(spec, train.labels[s]);
    REQUIRE(tmpl.size() == numel);
    for (std::size_t i = 0; i < numel; ++i) {
      CHECK(train.images[s * numel + i] ==
            doctest::Approx(tmpl[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("templates are standardized and class-distinct") {
  data::SyntheticTaskSpec spec;
  for (int c = 0; c < spec.num_classes; ++c) {
    const auto tmpl = data::synthetic_template(spec, c);
    double sum = 0, sumsq = 0;
    for (double v : tmpl) {
      sum += v;
      sumsq += v * v;
    }
    const double mean = sum / static_cast<double>(tmpl.size());
    const double var = sumsq / static_cast<double>(tmpl.size()) - mean * mean;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
  const auto a = data::synthetic_template(spec, 0);
  const auto b = data::synthetic_template(spec, 1);
  double dist = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dist += (a[i] - b[i]) * (a[i] - b[i]);
  }
  CHECK(dist > 0.1);  // genuinely different patterns
}

TEST_CASE("template of a class does not depend on how many are rendered") {
  data::SyntheticTaskSpec spec;
  const auto direct = data::synthetic_template(spec, 4);
  data::SyntheticTaskSpec fewer = spec;
  fewer.num_classes = 5;  // class 4 is now the last one
  const auto truncated = data::synthetic_template(fewer, 4);
  CHECK(direct == truncated);
}

TEST_CASE("balanced_subset keeps the first k of each class") {
  data::SyntheticTaskSpec spec;
  spec.samples_per_class = 6;
  const auto [train, test] = data::make_synthetic(spec, 3);
  const data::Dataset sub = data::balanced_subset(train, 2);
  CHECK(sub.size() == 20);
  std::map<int, int> counts;
  for (int l : sub.labels) ++counts[l];
  for (int c = 0; c < 10; ++c) CHECK(counts[c] == 2);
  CHECK_THROWS_AS((void)data::balanced_subset(train, 7),
                  mimetic::InputError);
}

TEST_CASE("augment identity case leaves pixels untouched") {
  // Flip disabled, crop disabled: augmentation is a no-op.
  Tensor batch = Tensor::zeros({2, 3, 8, 8});
  Rng fill(12);
  for (double& v : batch.mutable_data()) v = fill.normal();
  const auto before = test_util::to_vec(batch.data());
  Rng rng(77);
  data::AugmentOptions off;
  off.flip = false;
  off.crop = false;
  data::augment(batch, rng, off);
  CHECK(test_util::to_vec(batch.data()) == before);
}

TEST_CASE("flip mirrors columns when it fires") {
  // pad=0 crop is the identity; run many single-image batches until both
  // flip outcomes have been seen.
  data::AugmentOptions opts;
  opts.crop = false;
  bool saw_flip = false, saw_keep = false;
  Rng rng(5);
  for (int trial = 0; trial < 64 && !(saw_flip && saw_keep); ++trial) {
    Tensor batch = Tensor::zeros({1, 1, 2, 4});
    for (int i = 0; i < 8; ++i) batch.mutable_data()[i] = i;
    data::augment(batch, rng, opts);
    const auto v = test_util::to_vec(batch.data());
    if (v == std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7}) {
      saw_keep = true;
    } else if (v == std::vector<double>{3, 2, 1, 0, 7, 6, 5, 4}) {
      saw_flip = true;
    } else {
      FAIL("augment produced neither the original nor the mirrored image");
    }
  }
  CHECK(saw_flip);
  CHECK(saw_keep);
}

TEST_CASE("crop shifts within the padded window and zero-fills") {
  data::AugmentOptions opts;
  opts.flip = false;
  opts.pad = 1;
  std::set<std::vector<double>> seen;
  Rng rng(9);
  for (int trial = 0; trial < 128; ++trial) {
    Tensor batch = Tensor::full({1, 1, 2, 2}, 1.0);
    data::augment(batch, rng, opts);
    const auto v = test_util::to_vec(batch.data());
    double total = 0.0;
    for (double x : v) {
      CHECK(x >= 0.0);  // zero padding only removes mass
      total += x;
    }
    CHECK(total >= 1.0);  // at least one original pixel survives pad=1
    CHECK(total <= 4.0);
    seen.insert(v);
  }
  CHECK(seen.size() > 1);  // crops actually vary
  // The identity crop must be among them (center offset).
  CHECK(seen.count({1, 1, 1, 1}) == 1);
}

TEST_CASE("batch stream covers each epoch exactly once, shuffled") {
  data::SyntheticTaskSpec spec;
  spec.samples_per_class = 1;
  auto [train, test] = data::make_synthetic(spec, 21);
  REQUIRE(train.size() == 10);
  data::BatchStream stream(train, 4, 123, true);
  CHECK(stream.batches_per_epoch() == 3);  // 4 + 4 + 2

  for (std::uint64_t epoch : {0ULL, 1ULL}) {
    stream.start_epoch(epoch);
    Tensor images;
    std::vector<int> labels;
    std::vector<int> sizes;
    std::multiset<int> seen;
    while (stream.next(images, labels)) {
      sizes.push_back(static_cast<int>(labels.size()));
      CHECK(images.dim(0) == static_cast<int>(labels.size()));
      for (int l : labels) seen.insert(l);
    }
    CHECK(sizes == std::vector<int>{4, 4, 2});
    // Every label 0..9 exactly once (samples_per_class = 1).
    for (int c = 0; c < 10; ++c) CHECK(seen.count(c) == 1);
  }
}

TEST_CASE("epoch order is deterministic and epoch-addressable") {
  data::SyntheticTaskSpec spec;
  spec.samples_per_class = 3;
  auto [train, test] = data::make_synthetic(spec, 22);

  auto epoch_labels = [&](std::uint64_t epoch) {
    data::BatchStream stream(train, 8, 55, true);
    stream.start_epoch(epoch);
    Tensor images;
    std::vector<int> labels, all;
    while (stream.next(images, labels)) {
      all.insert(all.end(), labels.begin(), labels.end());
    }
    return all;
  };
  const auto e0 = epoch_labels(0);
  const auto e1 = epoch_labels(1);
  CHECK(e0 == epoch_labels(0));  // re-creating the stream replays epoch 0
  CHECK(e0 != e1);               // epochs reshuffle

  // Unshuffled stream preserves dataset order.
  data::BatchStream plain(train, 8, 55, false);
  plain.start_epoch(7);
  Tensor images;
  std::vector<int> labels;
  REQUIRE(plain.next(images, labels));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    CHECK(labels[i] == train.labels[i]);
  }
}

TEST_CASE("batch tensors hold the right pixels as doubles") {
  data::SyntheticTaskSpec spec;
  spec.samples_per_class = 2;
  auto [train, test] = data::make_synthetic(spec, 23);
  data::BatchStream stream(train, 5, 0, false);
  stream.start_epoch(0);
  Tensor images;
  std::vector<int> labels;
  REQUIRE(stream.next(images, labels));
  REQUIRE(images.shape() ==
          mimetic::ad::Shape{5, 3, spec.image_size, spec.image_size});
  const std::size_t numel = train.sample_numel();
  for (int s = 0; s < 5; ++s) {
    for (std::size_t i = 0; i < numel; ++i) {
      CHECK(images.data()[static_cast<std::size_t>(s) * numel + i] ==
            static_cast<double>(train.images[static_cast<std::size_t>(s) *
                                                 numel +
                                             i]));
    }
  }
}

TEST_CASE("stream constructor rejects misuse") {
  data::SyntheticTaskSpec spec;
  spec.samples_per_class = 1;
  auto [train, test] = data::make_synthetic(spec, 24);
  CHECK_THROWS_AS(data::BatchStream(train, 0, 1, true),
                  mimetic::ConfigError);
  data::Dataset empty;
  CHECK_THROWS_AS(data::BatchStream(empty, 4, 1, true),
                  mimetic::InputError);
}

TEST_CASE("synthetic spec validation") {
  data::SyntheticTaskSpec spec;
  spec.num_classes = 0;
  CHECK_THROWS_AS(data::validate(spec), mimetic::ConfigError);
  spec = data::SyntheticTaskSpec{};
  spec.noise_std = -1.0;
  CHECK_THROWS_AS(data::validate(spec), mimetic::ConfigError);
}

}  // TEST_SUITE
