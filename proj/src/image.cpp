// SPDX-License-Identifier: Apache-2.0
#include "bevcon/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace bevcon {

namespace {
std::uint8_t to_byte(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}
}  // namespace

void Image::quantize_8bit() {
  for (double& v : px) v = to_byte(v) / 255.0;
}

void save_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) row[static_cast<size_t>(x) * 3 + c] = to_byte(img.at(y, x, c));
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

Image load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("not a P6 ppm: " + path);
  int w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  if (maxval != 255 || w <= 0 || h <= 0) throw std::runtime_error("unsupported ppm: " + path);
  f.get();  // single whitespace after the header
  Image img(h, w);
  std::vector<std::uint8_t> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!f) throw std::runtime_error("truncated ppm: " + path);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
    }
  }
  return img;
}

}  // namespace bevcon
