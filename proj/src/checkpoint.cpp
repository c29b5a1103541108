#include "sdgc/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace sdgc::checkpoint {

namespace {

void put_u16(std::vector<unsigned char>& out, uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}
void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::vector<unsigned char>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const unsigned char* p;
  size_t n;
  size_t off = 0;
  const std::string& path;

  void need(size_t k, const char* what) const {
    if (off + k > n) throw DataError(cat("checkpoint '", path, "': truncated while reading ", what));
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint16_t>(p[off] | (p[off + 1] << 8));
    off += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[off + static_cast<size_t>(i)]) << (8 * i);
    off += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[off + static_cast<size_t>(i)]) << (8 * i);
    off += 8;
    return v;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return p[off++];
  }
};

template <typename S>
std::vector<unsigned char> scalars_to_le(const S* data, int64_t n) {
  std::vector<unsigned char> out(static_cast<size_t>(n) * sizeof(S));
  std::memcpy(out.data(), data, out.size());  // little-endian host
  return out;
}

}  // namespace

void Checkpoint::put_f32(const std::string& name, const ad::Shape& shape, const float* data) {
  ArrayEntry e;
  e.name = name;
  e.dtype = Dtype::F32;
  for (auto d : shape) e.dims.push_back(static_cast<uint32_t>(d));
  e.payload = scalars_to_le(data, ad::numel(shape));
  arrays.push_back(std::move(e));
}

void Checkpoint::put_f64(const std::string& name, const ad::Shape& shape, const double* data) {
  ArrayEntry e;
  e.name = name;
  e.dtype = Dtype::F64;
  for (auto d : shape) e.dims.push_back(static_cast<uint32_t>(d));
  e.payload = scalars_to_le(data, ad::numel(shape));
  arrays.push_back(std::move(e));
}

ad::Tensor<float> Checkpoint::get_f32(const std::string& name) const {
  const ArrayEntry* e = find(name);
  if (!e) throw DataError(cat("checkpoint: missing array '", name, "'"));
  if (e->dtype != Dtype::F32) throw DataError(cat("checkpoint: array '", name, "' is not f32"));
  ad::Shape s;
  for (auto d : e->dims) s.push_back(static_cast<int64_t>(d));
  ad::Tensor<float> t = ad::Tensor<float>::zeros(s);
  std::memcpy(t.data(), e->payload.data(), e->payload.size());
  return t;
}

ad::Tensor<double> Checkpoint::get_f64(const std::string& name) const {
  const ArrayEntry* e = find(name);
  if (!e) throw DataError(cat("checkpoint: missing array '", name, "'"));
  if (e->dtype != Dtype::F64) throw DataError(cat("checkpoint: array '", name, "' is not f64"));
  ad::Shape s;
  for (auto d : e->dims) s.push_back(static_cast<int64_t>(d));
  ad::Tensor<double> t = ad::Tensor<double>::zeros(s);
  std::memcpy(t.data(), e->payload.data(), e->payload.size());
  return t;
}

std::vector<double> Checkpoint::get_vector(const std::string& name) const {
  auto t = get_f64(name);
  return std::vector<double>(t.data(), t.data() + t.size());
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::vector<unsigned char> out;
  out.push_back('S');
  out.push_back('D');
  out.push_back('G');
  out.push_back('C');
  put_u16(out, kFormatVersion);
  put_u64(out, ck.digest);
  put_u32(out, static_cast<uint32_t>(ck.arrays.size()));
  for (const auto& a : ck.arrays) {
    put_u32(out, static_cast<uint32_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    out.push_back(static_cast<unsigned char>(a.dtype));
    out.push_back(static_cast<unsigned char>(a.dims.size()));
    for (auto d : a.dims) put_u32(out, d);
    size_t scalar = a.dtype == Dtype::F32 ? 4 : 8;
    if (a.payload.size() != static_cast<size_t>(a.count()) * scalar)
      throw Error(cat("checkpoint: array '", a.name, "' payload/dims mismatch"));
    out.insert(out.end(), a.payload.begin(), a.payload.end());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError(cat("checkpoint: cannot open '", path, "' for writing"));
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError(cat("checkpoint: write failed for '", path, "'"));
}

Checkpoint load_checkpoint(const std::string& path, std::optional<uint64_t> expected_digest) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(cat("checkpoint: cannot open '", path, "'"));
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf.data(), buf.size(), 0, path};

  r.need(4, "magic");
  if (std::memcmp(buf.data(), "SDGC", 4) != 0)
    throw DataError(cat("checkpoint '", path, "': bad magic, not an SDGC container"));
  r.off = 4;
  uint16_t version = r.u16("version");
  if (version != kFormatVersion)
    throw DataError(cat("checkpoint '", path, "': unsupported format version ", version, " (expected ",
                        kFormatVersion, ")"));
  Checkpoint ck;
  ck.digest = r.u64("digest");
  if (expected_digest && *expected_digest != ck.digest)
    throw DataError(cat("checkpoint '", path, "': config digest mismatch (stored ", ck.digest, ", expected ",
                        *expected_digest, "); refusing to load a checkpoint for a different configuration"));
  uint32_t count = r.u32("array count");
  for (uint32_t i = 0; i < count; ++i) {
    ArrayEntry e;
    uint32_t nlen = r.u32("name length");
    r.need(nlen, "name");
    e.name.assign(reinterpret_cast<const char*>(buf.data() + r.off), nlen);
    r.off += nlen;
    uint8_t dt = r.u8("dtype");
    if (dt > 1) throw DataError(cat("checkpoint '", path, "': bad dtype tag ", int(dt)));
    e.dtype = static_cast<Dtype>(dt);
    uint8_t rank = r.u8("rank");
    for (uint8_t k = 0; k < rank; ++k) e.dims.push_back(r.u32("dims"));
    size_t scalar = e.dtype == Dtype::F32 ? 4 : 8;
    size_t bytes = static_cast<size_t>(e.count()) * scalar;
    r.need(bytes, "payload");
    e.payload.assign(buf.data() + r.off, buf.data() + r.off + bytes);
    r.off += bytes;
    ck.arrays.push_back(std::move(e));
  }
  return ck;
}

}  // namespace sdgc::checkpoint
