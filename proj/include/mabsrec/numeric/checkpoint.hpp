#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mabsrec/error.hpp"
#include "mabsrec/numeric/params.hpp"

// Checkpoint container layout (all integers and reals little-endian):
//
//   magic      8 bytes  "MABSCKPT"
//   version    u8       kCheckpointVersion
//   n_meta     u32      then n_meta x { u32 len, key bytes, u32 len, value bytes }
//   n_tensors  u32      then n_tensors x {
//                         u32 len, name bytes, u8 rank, rank x u64 dim,
//                         product(dims) x f64 }

namespace mabsrec::numeric {

inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'B', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> metadata;
  ParamSet params;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t u64() { return uint_n(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint_n(4)); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(uint_n(1)); }
  std::string str() {
    const std::size_t n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(char* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::uint64_t uint_n(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint truncated");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  out.push_back(static_cast<char>(kCheckpointVersion));
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    detail::put_str(out, k);
    detail::put_str(out, v);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& e : ckpt.params) {
    detail::put_str(out, e.name);
    out.push_back(static_cast<char>(e.value.rank()));
    for (std::size_t dim : e.value.shape()) detail::put_u64(out, dim);
    for (double v : e.value.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string bytes) {
  if (bytes.size() < 9 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw IoError("not a checkpoint file (bad magic)");
  detail::Reader in(bytes.substr(8));
  const std::uint8_t version = in.u8();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const std::uint32_t n_meta = in.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = in.str();
    ckpt.metadata[k] = in.str();
  }
  const std::uint32_t n_tensors = in.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = in.str();
    const std::uint8_t rank = in.u8();
    std::vector<std::size_t> shape(rank);
    for (auto& dim : shape) dim = static_cast<std::size_t>(in.u64());
    Tensor t(shape);
    for (double& v : t.values()) v = std::bit_cast<double>(in.u64());
    ckpt.params.add(std::move(name), std::move(t));
  }
  if (!in.done()) throw IoError("trailing bytes after checkpoint payload");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  const std::string bytes = encode_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace mabsrec::numeric
