#include "mindloop/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "mindloop/errors.hpp"

namespace mindloop {

namespace {

constexpr std::array<char, 4> kMagic{'M', 'D', 'T', '1'};

template <class T>
void put_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), sizeof(T))) throw FormatError("MDT1: truncated stream");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) put_le<std::uint64_t>(os, e);
  for (double v : t.data()) put_le<double>(os, v);
  if (!os) throw FormatError("MDT1: write failed");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError("MDT1: bad magic");
  const auto rank = get_le<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::size_t>(get_le<std::uint64_t>(is));
    if (e == 0) throw FormatError("MDT1: zero extent");
  }
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = get_le<double>(is);
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace mindloop
