// Copyright 2026 The Metaloop Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Tensor archive ("MLT1"): magic, u32 LE rank, rank x u32 LE dims, then
// product(dims) LE float32 values.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "metaloop/tensor.hpp"

namespace metaloop {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorArchive {
  Shape shape;
  std::vector<float> values;
};

namespace archive {

inline constexpr std::array<char, 4> kTensorMagic{'M', 'L', 'T', '1'};

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff),
                         static_cast<char>((v >> 24) & 0xff)};
  os.write(bytes, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char bytes[4];
  if (!is.read(reinterpret_cast<char*>(bytes), 4)) {
    throw ArchiveError("archive: unexpected end of stream");
  }
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) |
         (static_cast<std::uint32_t>(bytes[3]) << 24);
}

inline void write_tensor(std::ostream& os, const Shape& shape, std::span<const float> values) {
  if (shape_numel(shape) != values.size()) {
    throw ArchiveError("archive: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
  }
  os.write(kTensorMagic.data(), 4);
  put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_u32(os, static_cast<std::uint32_t>(d));
  for (float v : values) put_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw ArchiveError("archive: write failed");
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>) {
    write_tensor(os, t.shape(), t.values());
  } else {
    std::vector<float> v(t.values().begin(), t.values().end());
    write_tensor(os, t.shape(), std::span<const float>(v));
  }
}

inline TensorArchive read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4)) throw ArchiveError("archive: missing magic");
  if (magic != kTensorMagic) throw ArchiveError("archive: bad magic, expected MLT1");
  TensorArchive out;
  const auto rank = get_u32(is);
  if (rank > 16) throw ArchiveError("archive: implausible rank " + std::to_string(rank));
  out.shape.resize(rank);
  for (auto& d : out.shape) d = get_u32(is);
  out.values.resize(shape_numel(out.shape));
  for (auto& v : out.values) v = std::bit_cast<float>(get_u32(is));
  return out;
}

template <typename T>
Tensor<T> to_tensor(const TensorArchive& a) {
  return Tensor<T>(a.shape, std::vector<T>(a.values.begin(), a.values.end()));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ArchiveError("archive: cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  os.flush();
  if (!os) throw ArchiveError("archive: failed writing " + path.string());
}

inline TensorArchive load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArchiveError("archive: cannot open " + path.string());
  try {
    return read_tensor(is);
  } catch (const ArchiveError& e) {
    throw ArchiveError(path.string() + ": " + e.what());
  }
}

}  // namespace archive
}  // namespace metaloop
