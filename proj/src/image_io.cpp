#include "mindloop/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "mindloop/errors.hpp"

namespace mindloop {

void write_pnm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1))
    throw ShapeError("write_pnm: expected 1xHxW or 3xHxW, got " + to_string(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << (c == 3 ? "P6" : "P5") << '\n' << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(image[(ch * h + y) * w + x], 0.0, 1.0);
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
}

Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  is.get();
  if ((magic != "P6" && magic != "P5") || maxval != 255 || w == 0 || h == 0)
    throw FormatError(path.string() + ": unsupported PNM");
  const std::size_t c = magic == "P6" ? 3 : 1;
  Tensor img({c, h, w});
  auto v = img.values();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const int byte = is.get();
        if (byte < 0) throw FormatError(path.string() + ": truncated");
        v[(ch * h + y) * w + x] = byte / 255.0;
      }
  return img;
}

}  // namespace mindloop
