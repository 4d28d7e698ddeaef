#pragma once

#include <filesystem>
#include <iosfwd>

#include "mindloop/tensor.hpp"

// MDT1 binary tensor format:
//   "MDT1" | u8 rank | rank x u64 extents (little-endian) | f64 payload, row-major
namespace mindloop {

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace mindloop
