// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <vector>

namespace surfcap {

/// Row-major interleaved float image, values nominally in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  double& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

/// Binary P6, 8-bit. Values are clamped to [0, 1] and rounded.
void write_ppm(const std::filesystem::path& path, const Image& rgb);
Image read_ppm(const std::filesystem::path& path);

/// Binary P5 with maxval 255 or 65535 (16-bit samples are big-endian).
void write_pgm(const std::filesystem::path& path, const Image& gray, int maxval = 255);
Image read_pgm(const std::filesystem::path& path);

/// Integer box-filter downsampling; dimensions are floored.
Image downsample(const Image& img, int factor);

}  // namespace surfcap
