#pragma once

// SDGC checkpoint container: magic "SDGC", u16 format version, u64 config
// digest, then named arrays (name, dtype tag, rank, dims, little-endian
// payload). Loading validates magic/version/digest and round-trips
// byte-exactly.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sdgc/tensor.hpp"

namespace sdgc::checkpoint {

constexpr uint16_t kFormatVersion = 1;

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

struct ArrayEntry {
  std::string name;
  Dtype dtype = Dtype::F32;
  std::vector<uint32_t> dims;
  std::vector<unsigned char> payload;  // little-endian scalar bytes

  int64_t count() const {
    int64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct Checkpoint {
  uint64_t digest = 0;
  std::vector<ArrayEntry> arrays;

  const ArrayEntry* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }

  void put_f32(const std::string& name, const ad::Shape& shape, const float* data);
  void put_f64(const std::string& name, const ad::Shape& shape, const double* data);
  void put_tensor(const std::string& name, const ad::Tensor<float>& t) { put_f32(name, t.shape, t.data()); }
  void put_tensor(const std::string& name, const ad::Tensor<double>& t) { put_f64(name, t.shape, t.data()); }
  void put_vector(const std::string& name, const std::vector<double>& v) {
    put_f64(name, {static_cast<int64_t>(v.size())}, v.data());
  }

  ad::Tensor<float> get_f32(const std::string& name) const;
  ad::Tensor<double> get_f64(const std::string& name) const;
  std::vector<double> get_vector(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);

// expected_digest, when set, must match the stored one.
Checkpoint load_checkpoint(const std::string& path, std::optional<uint64_t> expected_digest = std::nullopt);

}  // namespace sdgc::checkpoint
