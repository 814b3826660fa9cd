#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mimetic/autodiff.hpp"

namespace mimetic::models {
struct TinyModel;
}

namespace mimetic::snapshot {

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<double> data;
};

// Every parameter of one run, in registry order, plus run identity.
struct WeightSnapshot {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const;
};

WeightSnapshot from_model(const models::TinyModel& model, std::uint32_t epoch);

// Binary format, all integers and doubles little-endian:
//   magic "MIMW", u32 version (=1),
//   u64 config_hash, u64 seed, u32 epoch, u32 tensor_count,
//   per tensor: u16 name length, name bytes, u8 rank, rank x u32 dims,
//               numel x f64 data,
//   u32 CRC32 (zlib polynomial) of every preceding byte.
// Bad magic/version/CRC or truncation -> FormatError.
void save(const WeightSnapshot& snap, const std::filesystem::path& path);
WeightSnapshot load(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize(const WeightSnapshot& snap);
WeightSnapshot deserialize(const std::vector<std::uint8_t>& bytes);

}  // namespace mimetic::snapshot
