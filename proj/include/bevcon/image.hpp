// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bevcon {

// RGB image, values in [0, 1], row-major HWC.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> px;

  Image() = default;
  Image(int h, int w) : height(h), width(w), px(static_cast<size_t>(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * width + x) * 3 + c]; }

  // Snaps every channel to the nearest 8-bit representable value so that the
  // PPM round trip is exact.
  void quantize_8bit();
};

// Binary PPM (P6), 8-bit. Values are written as round(clamp01(v) * 255) and
// read back as byte / 255.
void save_ppm(const Image& img, const std::string& path);
Image load_ppm(const std::string& path);

}  // namespace bevcon
