#pragma once

// Training losses and the scale-replay pass.
//
// rec:  mse(pred, m2) + mse(pred, m3)
// sc:   mse(pred - m1fx - m2 + m2fx) + mse(pred - m1fx - m3 + m3fx)
// diff: mean absolute error between the reconstructed and target latents
// total = w_rec * rec + w_sc * sc + w_diff * diff
//
// The replay terms m*fx come from a gradient-inert inference pass on the
// full-scale image, sub-sampled with the SAME pattern that produced the
// training sub-images; reusing the pattern is what makes the sc residuals
// compare corresponding pixels.

#include <stdexcept>

#include "psid/model.hpp"
#include "psid/sampling.hpp"
#include "psid/tensor.hpp"

namespace psid {

struct LossWeights {
  double rec = 1.0;
  double sc = 1.5;
  double diff = 1.0;

  void validate() const {
    if (rec < 0 || sc < 0 || diff < 0) {
      throw std::invalid_argument("loss weights must be >= 0");
    }
  }
};

template <typename T>
T mse(const Image<T>& a, const Image<T>& b) {
  require_same_shape(a, b, "mse");
  T acc = T(0);
  for (size_t i = 0; i < a.data.size(); ++i) {
    const T d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<T>(a.data.size());
}

template <typename T>
T rec_loss(const Image<T>& pred, const Image<T>& m2, const Image<T>& m3) {
  return mse(pred, m2) + mse(pred, m3);
}

// d(rec)/d(pred), scaled by upstream, accumulated into grad_pred.
template <typename T>
void rec_loss_backward(const Image<T>& pred, const Image<T>& m2,
                       const Image<T>& m3, T upstream, Image<T>& grad_pred) {
  const T s = T(2) * upstream / static_cast<T>(pred.data.size());
  for (size_t i = 0; i < pred.data.size(); ++i) {
    grad_pred.data[i] +=
        s * ((pred.data[i] - m2.data[i]) + (pred.data[i] - m3.data[i]));
  }
}

template <typename T>
struct ReplayTerms {
  Image<T> m1fx, m2fx, m3fx;
};

template <typename T>
T sc_loss(const Image<T>& pred, const Image<T>& m2, const Image<T>& m3,
          const ReplayTerms<T>& r) {
  require_same_shape(pred, r.m1fx, "sc_loss");
  require_same_shape(pred, m2, "sc_loss");
  require_same_shape(pred, m3, "sc_loss");
  const size_t n = pred.data.size();
  T acc2 = T(0), acc3 = T(0);
  for (size_t i = 0; i < n; ++i) {
    const T base = pred.data[i] - r.m1fx.data[i];
    const T r2 = base - m2.data[i] + r.m2fx.data[i];
    const T r3 = base - m3.data[i] + r.m3fx.data[i];
    acc2 += r2 * r2;
    acc3 += r3 * r3;
  }
  return (acc2 + acc3) / static_cast<T>(n);
}

// Gradient flows only through pred; the replay terms are constants.
template <typename T>
void sc_loss_backward(const Image<T>& pred, const Image<T>& m2,
                      const Image<T>& m3, const ReplayTerms<T>& r, T upstream,
                      Image<T>& grad_pred) {
  const size_t n = pred.data.size();
  const T s = T(2) * upstream / static_cast<T>(n);
  for (size_t i = 0; i < n; ++i) {
    const T base = pred.data[i] - r.m1fx.data[i];
    const T r2 = base - m2.data[i] + r.m2fx.data[i];
    const T r3 = base - m3.data[i] + r.m3fx.data[i];
    grad_pred.data[i] += s * (r2 + r3);
  }
}

template <typename T>
T total_loss(T rec, T sc, T diff, const LossWeights& w) {
  return static_cast<T>(w.rec) * rec + static_cast<T>(w.sc) * sc +
         static_cast<T>(w.diff) * diff;
}

// Gradient-inert inference pass on the full-scale image, replayed through
// the training pattern. The result carries values only; nothing here touches
// any gradient accumulator.
template <typename T>
ReplayTerms<T> scale_replay(const ModelParams<T>& m, const Image<T>& x,
                            const SamplePattern& pattern, Rng& rng) {
  const Image<T> fx = denoise_image(m, x, rng);
  auto subs = apply_pattern(fx, pattern);
  return ReplayTerms<T>{std::move(subs[0]), std::move(subs[1]),
                        std::move(subs[2])};
}

}  // namespace psid
