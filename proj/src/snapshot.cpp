#include "mimetic/snapshot.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "mimetic/models.hpp"

namespace mimetic::snapshot {

namespace {

constexpr char kMagic[4] = {'M', 'I', 'M', 'W'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t limit)
      : bytes_(bytes), limit_(limit) {}

  std::uint16_t u16() { return static_cast<std::uint16_t>(u(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(u(4)); }
  std::uint64_t u64() { return u(8); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(u(1)); }
  double f64() { return std::bit_cast<double>(u(8)); }

  std::string str(std::size_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
    pos_ += len;
    return s;
  }

  std::size_t remaining() const { return limit_ - pos_; }

 private:
  std::uint64_t u(int n) {
    need(n);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += n;
    return v;
  }

  void need(std::size_t n) {
    if (pos_ + n > limit_) throw FormatError("snapshot truncated mid-field");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

std::uint32_t body_crc(const std::uint8_t* data, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data),
              static_cast<uInt>(len)));
}

}  // namespace

const NamedTensor* WeightSnapshot::find(std::string_view name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

WeightSnapshot from_model(const models::TinyModel& model, std::uint32_t epoch) {
  WeightSnapshot snap;
  snap.config_hash = models::model_hash(model.config);
  snap.seed = model.config.seed;
  snap.epoch = epoch;
  for (const auto& [name, tensor] : model.parameters()) {
    NamedTensor nt;
    nt.name = name;
    nt.shape = tensor.shape();
    auto d = tensor.data();
    nt.data.assign(d.begin(), d.end());
    snap.tensors.push_back(std::move(nt));
  }
  return snap;
}

std::vector<std::uint8_t> serialize(const WeightSnapshot& snap) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u64(out, snap.config_hash);
  put_u64(out, snap.seed);
  put_u32(out, snap.epoch);
  put_u32(out, static_cast<std::uint32_t>(snap.tensors.size()));
  for (const NamedTensor& t : snap.tensors) {
    if (t.name.size() > 0xFFFF) throw UsageError("tensor name too long");
    if (ad::shape_numel(t.shape) != t.data.size()) {
      throw UsageError("tensor '" + t.name + "' shape/data mismatch");
    }
    put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data) put_f64(out, v);
  }
  put_u32(out, body_crc(out.data(), out.size()));
  return out;
}

WeightSnapshot deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 + 4 + 8 + 8 + 4 + 4 + 4) {
    throw FormatError("snapshot too short (" + std::to_string(bytes.size()) +
                      " bytes)");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("bad snapshot magic");
  }
  const std::size_t body_len = bytes.size() - 4;
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) {
    stored_crc |= static_cast<std::uint32_t>(bytes[body_len + i]) << (8 * i);
  }
  const std::uint32_t actual_crc = body_crc(bytes.data(), body_len);
  if (stored_crc != actual_crc) {
    throw FormatError("snapshot CRC mismatch");
  }

  Reader r(bytes, body_len);
  r.str(4);  // magic
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw FormatError("unsupported snapshot version " +
                      std::to_string(version));
  }
  WeightSnapshot snap;
  snap.config_hash = r.u64();
  snap.seed = r.u64();
  snap.epoch = r.u32();
  const std::uint32_t count = r.u32();
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint16_t name_len = r.u16();
    t.name = r.str(name_len);
    if (!seen.insert(t.name).second) {
      throw FormatError("duplicate tensor name '" + t.name + "'");
    }
    const std::uint8_t rank = r.u8();
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32();
      if (dim == 0) throw FormatError("zero dimension in '" + t.name + "'");
      t.shape.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    if (rank == 0) numel = 1;
    t.data.reserve(numel);
    for (std::size_t k = 0; k < numel; ++k) t.data.push_back(r.f64());
    snap.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes after last tensor");
  }
  return snap;
}

void save(const WeightSnapshot& snap, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize(snap);
  // Write via a temp file + rename so concurrent readers (the resumable
  // farm) never observe a half-written snapshot.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

WeightSnapshot load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return deserialize(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace mimetic::snapshot
