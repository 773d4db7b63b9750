#pragma once

// Dense H x W x C image container. Row-major, channel-last, intensities
// nominally in [0,1] (noise synthesis may push values outside that range;
// clamping happens only at 8-bit export).

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "psid/rng.hpp"

namespace psid {

template <typename T>
struct Image {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<T> data;

  Image() = default;
  Image(int h_, int w_, int c_, T fill = T(0))
      : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, fill) {}

  size_t size() const { return data.size(); }

  T& at(int y, int x, int ch) {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }
  const T& at(int y, int x, int ch) const {
    return data[(static_cast<size_t>(y) * w + x) * c + ch];
  }

  T* pixel(int y, int x) { return &data[(static_cast<size_t>(y) * w + x) * c]; }
  const T* pixel(int y, int x) const {
    return &data[(static_cast<size_t>(y) * w + x) * c];
  }

  bool same_shape(const Image& o) const {
    return h == o.h && w == o.w && c == o.c;
  }
};

using ImageF = Image<float>;
using ImageD = Image<double>;

template <typename T>
void require_same_shape(const Image<T>& a, const Image<T>& b,
                        const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(
        std::string(what) + ": shape mismatch (" + std::to_string(a.h) + "x" +
        std::to_string(a.w) + "x" + std::to_string(a.c) + " vs " +
        std::to_string(b.h) + "x" + std::to_string(b.w) + "x" +
        std::to_string(b.c) + ")");
  }
}

// Axis-aligned square crop at a uniformly drawn even offset. Even offsets
// keep the 2x2 sampling grid of the crop aligned with the source image.
template <typename T>
Image<T> crop_patch(const Image<T>& img, int size, Rng& rng) {
  if (size <= 0 || size % 2 != 0) {
    throw std::invalid_argument("crop_patch: size must be positive and even");
  }
  if (size > img.h || size > img.w) {
    throw std::invalid_argument("crop_patch: size " + std::to_string(size) +
                                " exceeds image extent " +
                                std::to_string(img.h) + "x" +
                                std::to_string(img.w));
  }
  const std::uint64_t ny = static_cast<std::uint64_t>((img.h - size) / 2) + 1;
  const std::uint64_t nx = static_cast<std::uint64_t>((img.w - size) / 2) + 1;
  const int oy = 2 * static_cast<int>(rng.below(ny));
  const int ox = 2 * static_cast<int>(rng.below(nx));
  Image<T> out(size, size, img.c);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const T* src = img.pixel(y + oy, x + ox);
      T* dst = out.pixel(y, x);
      for (int ch = 0; ch < img.c; ++ch) dst[ch] = src[ch];
    }
  }
  return out;
}

template <typename T, typename U>
Image<T> image_cast(const Image<U>& img) {
  Image<T> out(img.h, img.w, img.c);
  for (size_t i = 0; i < img.data.size(); ++i) {
    out.data[i] = static_cast<T>(img.data[i]);
  }
  return out;
}

}  // namespace psid
