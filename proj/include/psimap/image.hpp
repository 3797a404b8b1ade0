// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_IMAGE_HPP
#define PSIMAP_IMAGE_HPP

#include <cstdint>
#include <vector>

namespace psimap {

// Dense W x H x C plane, row-major, channel-fastest:
// data[(y * width + x) * channels + c]
template <typename T>
struct Plane {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<T> data;

  Plane() = default;
  Plane(int w, int h, int c, T fill = T{})
      : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, fill) {}

  T& at(int x, int y, int c = 0) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
  const T& at(int x, int y, int c = 0) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  T* pixel(int x, int y) { return &data[(static_cast<size_t>(y) * width + x) * channels]; }
  const T* pixel(int x, int y) const {
    return &data[(static_cast<size_t>(y) * width + x) * channels];
  }

  size_t size() const { return data.size(); }
  int pixel_count() const { return width * height; }
  bool same_shape(const Plane& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

using Image = Plane<double>;
using IntPlane = Plane<int32_t>;

}  // namespace psimap

#endif
