#pragma once

// Spatial-redundancy sampling: one noisy image becomes three half-resolution
// sub-images by picking, in every 2x2 block, a pivot pixel p1 and its two
// 4-adjacent neighbors as p2/p3 (the pixel diagonal to p1 is never used).
// The drawn pattern is kept so the identical pixel positions can later be
// replayed onto the denoised full-resolution image.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "psid/rng.hpp"
#include "psid/tensor.hpp"

namespace psid {

// Block positions are row-major within the 2x2 block:
//   0 1
//   2 3
// 4-adjacency inside the block: 0-1, 0-2, 3-1, 3-2.
inline std::array<int, 2> block_neighbors(int p1) {
  switch (p1) {
    case 0: return {1, 2};
    case 1: return {0, 3};
    case 2: return {0, 3};
    case 3: return {1, 2};
  }
  throw std::invalid_argument("block position out of range");
}

struct SamplePattern {
  int bh = 0;  // block rows = h/2
  int bw = 0;  // block cols = w/2
  // Per block: pivot position and which neighbor ordering was drawn.
  std::vector<std::uint8_t> p1;
  std::vector<std::uint8_t> swap;

  size_t blocks() const { return static_cast<size_t>(bh) * bw; }

  // Positions (p1, p2, p3) for block index b.
  std::array<int, 3> triple(size_t b) const {
    const int pivot = p1[b];
    const auto nb = block_neighbors(pivot);
    if (swap[b]) return {pivot, nb[1], nb[0]};
    return {pivot, nb[0], nb[1]};
  }
};

inline SamplePattern draw_pattern(int h, int w, Rng& rng) {
  if (h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0) {
    throw std::invalid_argument("draw_pattern: dimensions must be even and >= 2, got " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  SamplePattern pat;
  pat.bh = h / 2;
  pat.bw = w / 2;
  pat.p1.resize(pat.blocks());
  pat.swap.resize(pat.blocks());
  for (size_t b = 0; b < pat.blocks(); ++b) {
    pat.p1[b] = static_cast<std::uint8_t>(rng.below(4));
    pat.swap[b] = static_cast<std::uint8_t>(rng.below(2));
  }
  return pat;
}

template <typename T>
std::array<Image<T>, 3> apply_pattern(const Image<T>& img,
                                      const SamplePattern& pat) {
  if (img.h != 2 * pat.bh || img.w != 2 * pat.bw) {
    throw std::invalid_argument(
        "apply_pattern: image " + std::to_string(img.h) + "x" +
        std::to_string(img.w) + " does not match pattern for " +
        std::to_string(2 * pat.bh) + "x" + std::to_string(2 * pat.bw));
  }
  std::array<Image<T>, 3> out = {Image<T>(pat.bh, pat.bw, img.c),
                                 Image<T>(pat.bh, pat.bw, img.c),
                                 Image<T>(pat.bh, pat.bw, img.c)};
  for (int by = 0; by < pat.bh; ++by) {
    for (int bx = 0; bx < pat.bw; ++bx) {
      const size_t b = static_cast<size_t>(by) * pat.bw + bx;
      const auto positions = pat.triple(b);
      for (int n = 0; n < 3; ++n) {
        const int pos = positions[n];
        const int y = 2 * by + pos / 2;
        const int x = 2 * bx + pos % 2;
        const T* src = img.pixel(y, x);
        T* dst = out[n].pixel(by, bx);
        for (int ch = 0; ch < img.c; ++ch) dst[ch] = src[ch];
      }
    }
  }
  return out;
}

template <typename T>
std::tuple<Image<T>, Image<T>, Image<T>, SamplePattern> srd_sample(
    const Image<T>& img, Rng& rng) {
  SamplePattern pat = draw_pattern(img.h, img.w, rng);
  auto subs = apply_pattern(img, pat);
  return {std::move(subs[0]), std::move(subs[1]), std::move(subs[2]),
          std::move(pat)};
}

}  // namespace psid
