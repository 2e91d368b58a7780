#pragma once

// PTT1 tensor container:
//   "PTT1" | u32 count | count x { u32 name_len | name (UTF-8) | u32 rank |
//   u32 dims[rank] | f32 data[prod(dims)] }
// All integers and floats little-endian.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "prototransfer/errors.hpp"
#include "prototransfer/tensor.hpp"

namespace prototransfer {

struct NamedTensor {
  std::string name;
  Tensor tensor;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

using TensorList = std::vector<NamedTensor>;

inline const Tensor* find_tensor(const TensorList& list, const std::string& name) {
  for (const auto& nt : list) {
    if (nt.name == name) return &nt.tensor;
  }
  return nullptr;
}

inline const Tensor& require_tensor(const TensorList& list, const std::string& name) {
  const Tensor* t = find_tensor(list, name);
  if (!t) throw LoadError("checkpoint is missing tensor '" + name + "'");
  return *t;
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw LoadError("PTT1: truncated stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw ContractError(std::string("PTT1: ") + what + " exceeds u32");
  }
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline void write_ptt1(std::ostream& os, const TensorList& tensors) {
  os.write("PTT1", 4);
  detail::put_u32(os, detail::checked_u32(tensors.size(), "tensor count"));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(os, detail::checked_u32(name.size(), "name length"));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, detail::checked_u32(t.rank(), "rank"));
    for (std::size_t d : t.shape()) detail::put_u32(os, detail::checked_u32(d, "dimension"));
    for (float v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw LoadError("PTT1: write failed");
}

inline TensorList read_ptt1(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "PTT1") {
    throw LoadError("PTT1: bad magic");
  }
  const std::uint32_t count = detail::get_u32(is);
  TensorList out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = detail::get_u32(is);
    std::string name(len, '\0');
    if (len && !is.read(name.data(), len)) throw LoadError("PTT1: truncated name");
    const std::uint32_t rank = detail::get_u32(is);
    if (rank > 16) throw LoadError("PTT1: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = detail::get_u32(is);
      if (d == 0) throw LoadError("PTT1: zero dimension in '" + name + "'");
      numel *= d;
      if (numel > (std::uint64_t{1} << 34)) throw LoadError("PTT1: implausible size for '" + name + "'");
    }
    // Grow while reading so a corrupt header cannot force a huge allocation.
    std::vector<float> data;
    data.reserve(std::min<std::uint64_t>(numel, 1u << 20));
    for (std::uint64_t k = 0; k < numel; ++k) data.push_back(std::bit_cast<float>(detail::get_u32(is)));
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (is.peek() != std::char_traits<char>::eof()) throw LoadError("PTT1: trailing bytes after last tensor");
  return out;
}

inline void save_ptt1(const std::filesystem::path& path, const TensorList& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw LoadError("cannot open '" + path.string() + "' for writing");
  write_ptt1(os, tensors);
}

inline TensorList load_ptt1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open '" + path.string() + "'");
  try {
    return read_ptt1(is);
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

}  // namespace prototransfer
