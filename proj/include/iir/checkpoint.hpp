#pragma once

// "IIRK" tensor container.
//
//   magic    4 bytes  "IIRK"
//   version  u32
//   records  until end of file:
//     name_len u32, name (UTF-8, name_len bytes)
//     rank     u32, extents u64 x rank
//     payload  f32 x product(extents)
//
// All integers and floats are little-endian. Save followed by load is
// bit-exact for 32-bit builds.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "iir/tensor.hpp"

namespace iir {

inline constexpr std::uint32_t kArchiveVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_archive(const std::filesystem::path& path, const NamedTensors& records);
NamedTensors load_archive(const std::filesystem::path& path);

std::vector<char> encode_archive(const NamedTensors& records);
NamedTensors decode_archive(const std::vector<char>& bytes);

}  // namespace iir
