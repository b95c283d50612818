#pragma once

// Parameter checkpoint file:
//   "CADG1" | u64 count | count x { u32 name_len | name | u32 rank | u64 extents[rank] | f64 values }
// All integers and doubles little-endian.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "cadg/binary_io.hpp"
#include "cadg/tensor.hpp"

namespace cadg {

inline constexpr std::string_view kCheckpointMagic = "CADG1";

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline void write_checkpoint(std::ostream& os, std::span<const NamedTensor> params) {
  io::write_magic(os, kCheckpointMagic);
  io::write_le<std::uint64_t>(os, params.size());
  for (const auto& [name, t] : params) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) io::write_le<std::uint64_t>(os, e);
    for (double v : t.data()) io::write_f64(os, v);
  }
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic);
  const auto count = io::read_le<std::uint64_t>(is, "parameter count");
  std::vector<NamedTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = io::read_le<std::uint32_t>(is, "name length");
    if (len > 4096) throw FormatError("implausible name length " + std::to_string(len));
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated file while reading name");
    const auto rank = io::read_le<std::uint32_t>(is, "rank");
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank) + " for " + name);
    Shape shape(rank);
    for (auto& e : shape) {
      e = io::read_le<std::uint64_t>(is, "extent");
      if (e == 0 || e > (1ull << 32)) throw FormatError("implausible extent in " + name);
    }
    // Grow while reading so a corrupt header cannot force a huge allocation.
    const std::size_t n = numel(shape);
    std::vector<double> values;
    values.reserve(std::min<std::size_t>(n, 1u << 16));
    for (std::size_t j = 0; j < n; ++j) values.push_back(io::read_f64(is, "values of " + name));
    out.push_back({std::move(name), Tensor(std::move(shape), values)});
  }
  io::expect_eof(is);
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_checkpoint(os, params);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_checkpoint(is);
}

}  // namespace cadg
