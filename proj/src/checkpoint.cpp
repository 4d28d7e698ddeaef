#include "mindloop/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "mindloop/errors.hpp"
#include "mindloop/tensor_io.hpp"

namespace mindloop {

void save_checkpoint(const std::filesystem::path& path, nlohmann::json header, const NamedTensors& tensors) {
  auto& list = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : tensors) list.push_back({{"name", name}, {"shape", t.shape()}});
  {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write " + path.string());
    os << header.dump(2) << '\n';
  }
  auto bin = path;
  bin += ".bin";
  std::ofstream os(bin, std::ios::binary);
  if (!os) throw FormatError("cannot write " + bin.string());
  for (const auto& entry : tensors) write_tensor(os, entry.second);
}

const Tensor& Checkpoint::at(const std::string& name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& e) { return e.first == name; });
  if (it == tensors.end()) throw FormatError("checkpoint has no tensor '" + name + "'");
  return it->second;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Checkpoint ckpt;
  {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open " + path.string());
    try {
      ckpt.header = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  auto bin = path;
  bin += ".bin";
  std::ifstream is(bin, std::ios::binary);
  if (!is) throw FormatError("cannot open " + bin.string());
  for (const auto& entry : ckpt.header.at("tensors")) {
    Tensor t = read_tensor(is);
    if (t.shape() != entry.at("shape").get<Shape>())
      throw FormatError("checkpoint tensor '" + entry.at("name").get<std::string>() + "' has unexpected shape");
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

void assign_parameters(const Checkpoint& ckpt, const NamedTensors& params) {
  for (const auto& [name, p] : params) {
    const Tensor& src = ckpt.at(name);
    if (src.shape() != p.shape()) throw FormatError("parameter '" + name + "' shape mismatch");
    auto dst = Tensor(p).values();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

}  // namespace mindloop
