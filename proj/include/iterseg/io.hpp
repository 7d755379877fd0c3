#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iterseg/tensor.hpp"

namespace iterseg {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Little-endian primitives. Values are serialized byte by byte so files are
// identical regardless of host byte order.

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError(what_ + ": truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Netpbm rasters: binary PPM (P6) for RGB, binary PGM (P5) for single channel.

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::string encode_ppm(const Tensor<std::uint8_t>& rgb) {
  if (rgb.rank() != 3 || rgb.channels() != 3) throw ShapeError("encode_ppm: expected 3xHxW");
  std::string out = "P6\n" + std::to_string(rgb.width()) + " " + std::to_string(rgb.height()) + "\n255\n";
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x) {
      for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(rgb(c, y, x)));
    }
  }
  return out;
}

inline std::string encode_pgm(const Tensor<std::uint8_t>& gray) {
  if (gray.rank() != 3 || gray.channels() != 1) throw ShapeError("encode_pgm: expected 1xHxW");
  std::string out = "P5\n" + std::to_string(gray.width()) + " " + std::to_string(gray.height()) + "\n255\n";
  out.append(reinterpret_cast<const char*>(gray.data()), gray.size());
  return out;
}

// Decodes P5/P6 into a CxHxW byte tensor (C = 1 or 3).
inline Tensor<std::uint8_t> decode_pnm(const std::string& bytes, const std::string& what) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) t.push_back(bytes[pos++]);
    return t;
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw IoError(what + ": not a binary PGM/PPM file");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw IoError(what + ": malformed netpbm header");
  }
  if (w < 1 || h < 1 || maxval != 255) throw IoError(what + ": unsupported netpbm geometry or depth");
  ++pos;  // single whitespace after maxval
  const int c = magic == "P6" ? 3 : 1;
  const std::size_t n = static_cast<std::size_t>(w) * h * c;
  if (pos + n > bytes.size()) throw IoError(what + ": truncated raster data");
  Tensor<std::uint8_t> out = Tensor<std::uint8_t>::chw(c, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) out(ch, y, x) = static_cast<std::uint8_t>(bytes[pos++]);
    }
  }
  return out;
}

template <typename T>
Tensor<std::uint8_t> quantize(const Tensor<T>& t) {
  Tensor<std::uint8_t> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = to_byte(static_cast<double>(t[i]));
  return out;
}

inline Tensor<float> dequantize(const Tensor<std::uint8_t>& t) {
  Tensor<float> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<float>(t[i]) / 255.0f;
  return out;
}

// ---------------------------------------------------------------------------
// Named-tensor container shared by checkpoints:
//   "ITSG" | u32 version | u64 meta_len | meta (UTF-8 JSON) | u32 count |
//   count x { u32 name_len | name | u32 rank | u32 dims[rank] | f32 data[] }

inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor<float>> tensors;
};

inline std::string encode_container(const Container& c) {
  std::string out = "ITSG";
  put_u32(out, kContainerVersion);
  const std::string meta = c.meta.dump();
  put_u64(out, meta.size());
  out += meta;
  put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.values()) put_f32(out, v);
  }
  return out;
}

inline Container decode_container(const std::string& bytes, const std::string& what) {
  Reader r(bytes, what);
  if (r.raw(4) != "ITSG") throw IoError(what + ": bad container magic");
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion) throw IoError(what + ": unsupported container version " + std::to_string(version));
  Container c;
  const std::uint64_t meta_len = r.u64();
  try {
    c.meta = nlohmann::json::parse(r.raw(static_cast<std::size_t>(meta_len)));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(what + ": corrupt metadata: " + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.raw(r.u32());
    const std::uint32_t rank = r.u32();
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = r.f32();
    c.tensors.emplace(std::move(name), std::move(t));
  }
  if (!r.at_end()) throw IoError(what + ": trailing bytes after container");
  return c;
}

inline void save_container(const fs::path& path, const Container& c) { write_file(path, encode_container(c)); }

inline Container load_container(const fs::path& path) { return decode_container(read_file(path), path.string()); }

// FNV-1a, used for fingerprints and checksums.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
std::uint64_t checksum(const Tensor<T>& t, std::uint64_t h = 1469598103934665603ull) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(T)), h);
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

}  // namespace io
}  // namespace iterseg
