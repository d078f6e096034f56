#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "focusnet/tensor.hpp"

namespace focusnet {

// FNT1 container (all integers little-endian):
//   "FNT1" | u32 count | count x { u16 name_len | name (UTF-8) | u8 ndim |
//   ndim x u32 dim | prod(dims) x binary32 value (row-major) }
//
// FNS1 is the identical layout with binary64 values. It carries exact
// optimizer/trainer state for bitwise resume; weights ship as FNT1.

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      fail(Errc::format, std::string("truncated tensor file while reading ") + what);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

template <typename Payload>
constexpr std::string_view container_magic() {
  if constexpr (sizeof(Payload) == 4) return "FNT1";
  else return "FNS1";
}

}  // namespace detail

template <typename Payload = float>
std::string encode_tensors(const std::vector<NamedTensor>& tensors) {
  static_assert(std::is_same_v<Payload, float> || std::is_same_v<Payload, double>);
  using Bits = std::conditional_t<sizeof(Payload) == 4, std::uint32_t, std::uint64_t>;
  std::string out(detail::container_magic<Payload>());
  require(tensors.size() <= std::numeric_limits<std::uint32_t>::max(), Errc::format,
          "too many tensors");
  detail::put_le(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    require(!name.empty() && name.size() <= std::numeric_limits<std::uint16_t>::max(),
            Errc::format, "tensor name length out of range");
    require(t.ndim() <= std::numeric_limits<std::uint8_t>::max(), Errc::format,
            "tensor rank out of range");
    detail::put_le(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put_le(out, static_cast<std::uint8_t>(t.ndim()));
    for (std::size_t d : t.shape()) {
      require(d <= std::numeric_limits<std::uint32_t>::max(), Errc::format,
              "tensor dimension out of range");
      detail::put_le(out, static_cast<std::uint32_t>(d));
    }
    for (double v : t.data())
      detail::put_le(out, std::bit_cast<Bits>(static_cast<Payload>(v)));
  }
  return out;
}

template <typename Payload = float>
std::vector<NamedTensor> decode_tensors(std::string_view bytes) {
  using Bits = std::conditional_t<sizeof(Payload) == 4, std::uint32_t, std::uint64_t>;
  detail::ByteReader in(bytes);
  const std::string_view magic = detail::container_magic<Payload>();
  if (bytes.size() < magic.size() || bytes.substr(0, magic.size()) != magic)
    fail(Errc::format, "bad magic: expected " + std::string(magic));
  in.take(magic.size(), "magic");
  const auto count = in.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = in.get<std::uint16_t>("name length");
    std::string name(in.take(len, "name"));
    require(!name.empty(), Errc::format, "empty tensor name");
    const auto ndim = in.get<std::uint8_t>("rank");
    Shape shape;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const auto dim = in.get<std::uint32_t>("dimension");
      require(dim > 0, Errc::format, "zero dimension in tensor '" + name + "'");
      shape.push_back(dim);
    }
    const std::size_t n = shape_size(shape);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i)
      values[i] = static_cast<double>(std::bit_cast<Payload>(in.get<Bits>("values")));
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  require(in.done(), Errc::format, "trailing bytes after last tensor");
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), Errc::io, "cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

/// Writes via a temporary sibling and rename, so readers never observe a
/// partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), Errc::io, "cannot write '" + tmp.string() + "'");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(f), Errc::io, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    fail(Errc::io, "cannot rename into '" + path.string() + "': " + ec.message());
  }
}

inline void save_fnt1(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file_atomic(path, encode_tensors<float>(tensors));
}

inline std::vector<NamedTensor> load_fnt1(const std::filesystem::path& path) {
  return decode_tensors<float>(read_file(path));
}

inline void save_fns1(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  write_file_atomic(path, encode_tensors<double>(tensors));
}

inline std::vector<NamedTensor> load_fns1(const std::filesystem::path& path) {
  return decode_tensors<double>(read_file(path));
}

inline const Tensor& find_tensor(const std::vector<NamedTensor>& tensors, std::string_view name) {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  fail(Errc::format, "tensor '" + std::string(name) + "' not found");
}

}  // namespace focusnet
