#pragma once

#include <cstdint>
#include <span>
#include <string_view>

#include "mindloop/tensor.hpp"

namespace mindloop {

// One master seed fans out to independent per-stage streams:
// seed = splitmix64(master ^ fnv1a64(stage)).
std::uint64_t derive_seed(std::uint64_t master, std::string_view stage);
std::uint64_t derive_seed(std::uint64_t master, std::string_view stage, std::uint64_t index);

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text);

}  // namespace mindloop
