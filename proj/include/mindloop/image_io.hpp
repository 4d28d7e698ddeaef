#pragma once

#include <filesystem>

#include "mindloop/tensor.hpp"

namespace mindloop {

// Binary PPM (3 channels) or PGM (1 channel) from a C x H x W tensor in [0,1].
void write_pnm(const std::filesystem::path& path, const Tensor& image);
Tensor read_pnm(const std::filesystem::path& path);

}  // namespace mindloop
