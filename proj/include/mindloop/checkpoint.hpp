#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mindloop/tensor.hpp"

namespace mindloop {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Checkpoint = JSON header at `path` plus `path.bin` holding one MDT1 record
/// per tensor, in the order listed under header["tensors"].
void save_checkpoint(const std::filesystem::path& path, nlohmann::json header, const NamedTensors& tensors);

struct Checkpoint {
  nlohmann::json header;
  NamedTensors tensors;

  const Tensor& at(const std::string& name) const;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies values from a checkpoint into existing parameters of matching shape.
void assign_parameters(const Checkpoint& ckpt, const NamedTensors& params);

}  // namespace mindloop
