#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dualharm/tensor.hpp"

namespace dualharm::ckpt {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr char kWeightsMagic[4] = {'D', 'H', 'W', 'T'};
inline constexpr std::uint32_t kWeightsVersion = 1;

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes via a temporary sibling and rename so a failed write never
/// clobbers an existing file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot rename " + tmp + " to " + path.string() + ": " + ec.message());
}

/// Named tensors in a flat binary container:
///   "DHWT" u32 version u32 bytes-per-scalar u64 count
///   per entry: u32 name length, name, i32 n c h w, raw little-endian scalars
template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

namespace detail {

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError(what_ + ": truncated weights container");
  }
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::string encode_weights(const NamedTensors<T>& entries) {
  std::string out(kWeightsMagic, 4);
  detail::put<std::uint32_t>(out, kWeightsVersion);
  detail::put<std::uint32_t>(out, sizeof(T));
  detail::put<std::uint64_t>(out, entries.size());
  for (const auto& [name, t] : entries) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const Shape s = t.shape();
    for (int d : {s.n, s.c, s.h, s.w}) detail::put<std::int32_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(T));
  }
  return out;
}

/// Decodes a container written with either float or double scalars into T.
template <typename T>
NamedTensors<T> decode_weights(std::string_view bytes, const std::string& what = "weights") {
  detail::Reader r(bytes, what);
  if (r.take(4) != std::string_view(kWeightsMagic, 4)) throw CheckpointError(what + ": not a weights container");
  const auto version = r.get<std::uint32_t>();
  if (version != kWeightsVersion)
    throw CheckpointError(what + ": weights container version " + std::to_string(version) + ", expected " +
                          std::to_string(kWeightsVersion));
  const auto width = r.get<std::uint32_t>();
  if (width != 4 && width != 8) throw CheckpointError(what + ": unsupported scalar width " + std::to_string(width));
  const auto count = r.get<std::uint64_t>();
  NamedTensors<T> out;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = r.get<std::uint32_t>();
    std::string name(r.take(len));
    Shape s;
    s.n = r.get<std::int32_t>();
    s.c = r.get<std::int32_t>();
    s.h = r.get<std::int32_t>();
    s.w = r.get<std::int32_t>();
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) throw CheckpointError(what + ": negative extent in " + name);
    Tensor<T> t(s);
    auto raw = r.take(s.size() * width);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (width == 4) {
        float f;
        std::memcpy(&f, raw.data() + i * 4, 4);
        t[i] = static_cast<T>(f);
      } else {
        double d;
        std::memcpy(&d, raw.data() + i * 8, 8);
        t[i] = static_cast<T>(d);
      }
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError(what + ": trailing bytes after last tensor");
  return out;
}

template <typename T>
NamedTensors<T> read_weights(const std::filesystem::path& path) {
  return decode_weights<T>(read_file(path), path.string());
}

}  // namespace dualharm::ckpt
