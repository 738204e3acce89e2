#pragma once

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "sslwb/digest.hpp"
#include "sslwb/models.hpp"

namespace sslwb {

// Checkpoint archive. Header: magic "SSLWB", format_version (u32 LE), config
// digest (32 bytes). Payload: named arrays with explicit shapes and
// little-endian f32 data, plus a small key/value metadata block and optional
// optimizer state. A SHA-256 trailer over everything before it catches
// truncation and corruption. Multi-byte integers are little-endian
// throughout.

struct Checkpoint {
  std::uint32_t format_version = 1;
  Digest256 config_digest{};
  std::string method = "none";
  EncoderConfig encoder;
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Tensor<float>>> arrays;
  bool has_optimizer = false;
  std::uint64_t optimizer_step = 0;
  std::vector<std::pair<std::string, Tensor<float>>> optimizer_arrays;

  const Tensor<float>* find_array(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return &t;
    return nullptr;
  }

  /// Arrays whose name starts with `prefix`, with the prefix stripped.
  std::vector<std::pair<std::string, Tensor<float>>> arrays_with_prefix(
      const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor<float>>> out;
    for (const auto& [n, t] : arrays)
      if (n.rfind(prefix, 0) == 0) out.emplace_back(n.substr(prefix.size()), t);
    return out;
  }
};

namespace detail {

inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_string(std::string& s, const std::string& v) {
  require(v.size() <= 0xffff, "string too long for checkpoint encoding");
  put_u16(s, static_cast<std::uint16_t>(v.size()));
  s += v;
}
inline void put_f32(std::string& s, float v) {
  static_assert(sizeof(float) == 4);
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(s, bits);
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& origin)
      : buf_(buf), origin_(origin) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint16_t u16() {
    const char* p = take(2);
    return static_cast<std::uint16_t>(static_cast<std::uint8_t>(p[0]) |
                                      (static_cast<std::uint8_t>(p[1]) << 8));
  }
  std::uint32_t u32() {
    const char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(p[i]);
    return v;
  }
  std::uint64_t u64() {
    const char* p = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(p[i]);
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str() {
    std::uint16_t n = u16();
    return std::string(take(n), n);
  }
  const char* take(std::size_t n) {
    if (pos_ + n > buf_.size())
      throw EngineError("corrupt checkpoint (truncated): " + origin_);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline void put_arrays(std::string& out,
                       const std::vector<std::pair<std::string, Tensor<float>>>& arrays) {
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    put_string(out, name);
    out.push_back(static_cast<char>(t.ndim()));
    for (std::size_t d : t.shape) put_u64(out, d);
    for (float v : t.data) put_f32(out, v);
  }
}

inline std::vector<std::pair<std::string, Tensor<float>>> read_arrays(Reader& r) {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  std::uint32_t n = r.u32();
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    std::uint8_t ndim = r.u8();
    std::vector<std::size_t> shape;
    for (std::uint8_t d = 0; d < ndim; ++d) shape.push_back(r.u64());
    Tensor<float> t(shape);
    for (std::size_t j = 0; j < t.numel(); ++j) t[j] = r.f32();
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[5] = {'S', 'S', 'L', 'W', 'B'};

inline std::string serialize_checkpoint(const Checkpoint& c) {
  std::string out;
  out.append(kCheckpointMagic, 5);
  detail::put_u32(out, c.format_version);
  out.append(reinterpret_cast<const char*>(c.config_digest.data()), 32);

  detail::put_string(out, c.method);
  detail::put_string(out, arch_name(c.encoder.arch));
  detail::put_u32(out, static_cast<std::uint32_t>(c.encoder.depth));
  detail::put_u32(out, static_cast<std::uint32_t>(c.encoder.width));
  detail::put_u32(out, static_cast<std::uint32_t>(c.encoder.patch_size));
  detail::put_u32(out, static_cast<std::uint32_t>(c.encoder.input_size));
  detail::put_u32(out, static_cast<std::uint32_t>(c.encoder.heads));
  detail::put_u32(out, static_cast<std::uint32_t>(c.encoder.mlp_ratio));
  detail::put_u32(out, c.epoch);
  detail::put_u64(out, c.seed);

  detail::put_u32(out, static_cast<std::uint32_t>(c.metadata.size()));
  for (const auto& [k, v] : c.metadata) {
    detail::put_string(out, k);
    detail::put_string(out, v);
  }

  detail::put_arrays(out, c.arrays);

  out.push_back(c.has_optimizer ? 1 : 0);
  if (c.has_optimizer) {
    detail::put_u64(out, c.optimizer_step);
    detail::put_arrays(out, c.optimizer_arrays);
  }

  Digest256 trailer = sha256(out);
  out.append(reinterpret_cast<const char*>(trailer.data()), 32);
  return out;
}

inline void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  write_file_atomic(path, serialize_checkpoint(c));
}

inline Checkpoint parse_checkpoint(const std::string& buf, const std::string& origin) {
  if (buf.size() < 5 + 4 + 32 + 32 || std::memcmp(buf.data(), kCheckpointMagic, 5) != 0)
    throw EngineError("not a checkpoint file (bad magic): " + origin);
  {
    Digest256 expect = sha256(buf.data(), buf.size() - 32);
    if (std::memcmp(expect.data(), buf.data() + buf.size() - 32, 32) != 0)
      throw EngineError("corrupt checkpoint (digest mismatch): " + origin);
  }
  detail::Reader r(buf, origin);
  r.take(5);
  Checkpoint c;
  c.format_version = r.u32();
  if (c.format_version != 1)
    throw EngineError("unsupported checkpoint format version " +
                      std::to_string(c.format_version) + ": " + origin);
  std::memcpy(c.config_digest.data(), r.take(32), 32);
  c.method = r.str();
  c.encoder.arch = arch_from_name(r.str());
  c.encoder.depth = r.u32();
  c.encoder.width = r.u32();
  c.encoder.patch_size = r.u32();
  c.encoder.input_size = r.u32();
  c.encoder.heads = r.u32();
  c.encoder.mlp_ratio = r.u32();
  c.epoch = r.u32();
  c.seed = r.u64();
  std::uint32_t nmeta = r.u32();
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = r.str();
    c.metadata[k] = r.str();
  }
  c.arrays = detail::read_arrays(r);
  c.has_optimizer = r.u8() != 0;
  if (c.has_optimizer) {
    c.optimizer_step = r.u64();
    c.optimizer_arrays = detail::read_arrays(r);
  }
  return c;
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  return parse_checkpoint(read_text_file(path), path.string());
}

}  // namespace sslwb
