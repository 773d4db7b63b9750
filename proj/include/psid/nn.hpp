#pragma once

// Minimal dense-network primitives with explicit backward passes: same-pad
// convolutions, linear layers, leaky rectifier, global average pooling, and
// per-pixel channel layer normalization. Everything is templated on the
// scalar type; gradient-check tests instantiate double, training runs float.
//
// Layouts:
//   feature maps    Image<T>, row-major channel-last
//   conv weights    (ky, kx, in_ch, out_ch), bias (out_ch)
//   linear weights  (out, in) row-major, optional bias (out)
//
// Backward functions accumulate into Param::g; callers zero grads per batch.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "psid/rng.hpp"
#include "psid/tensor.hpp"

namespace psid {

template <typename T>
using Vec = std::vector<T>;

template <typename T>
struct Param {
  std::vector<int> shape;
  Vec<T> w;
  Vec<T> g;

  Param() = default;
  explicit Param(std::vector<int> s) { reshape(std::move(s)); }

  void reshape(std::vector<int> s) {
    shape = std::move(s);
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    w.assign(n, T(0));
    g.assign(n, T(0));
  }

  size_t size() const { return w.size(); }
  void zero_grad() { std::fill(g.begin(), g.end(), T(0)); }
};

constexpr double kLeakySlope = 0.01;

template <typename T>
void he_init(Param<T>& p, size_t fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : p.w) v = static_cast<T>(std * rng.normal());
}

// ---------------------------------------------------------------------------
// Elementwise leaky rectifier
// ---------------------------------------------------------------------------

template <typename T>
void leaky_relu_inplace(Vec<T>& x) {
  const T slope = static_cast<T>(kLeakySlope);
  for (auto& v : x)
    if (v < T(0)) v *= slope;
}

// grad wrt input given pre-activation values
template <typename T>
void leaky_relu_backward(const Vec<T>& pre, Vec<T>& grad) {
  const T slope = static_cast<T>(kLeakySlope);
  for (size_t i = 0; i < pre.size(); ++i)
    if (pre[i] < T(0)) grad[i] *= slope;
}

// ---------------------------------------------------------------------------
// Convolution, stride 1, same padding, odd kernel
// ---------------------------------------------------------------------------

template <typename T>
Image<T> conv2d_forward(const Image<T>& in, const Param<T>& w,
                        const Param<T>& b, int k) {
  const int ic = in.c;
  const int oc = static_cast<int>(b.size());
  const int pad = k / 2;
  Image<T> out(in.h, in.w, oc);
  for (int y = 0; y < in.h; ++y) {
    for (int x = 0; x < in.w; ++x) {
      T* op = out.pixel(y, x);
      for (int o = 0; o < oc; ++o) op[o] = b.w[o];
      for (int ky = 0; ky < k; ++ky) {
        const int iy = y + ky - pad;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = x + kx - pad;
          if (ix < 0 || ix >= in.w) continue;
          const T* ip = in.pixel(iy, ix);
          const T* wp = &w.w[static_cast<size_t>((ky * k + kx) * ic) * oc];
          for (int i = 0; i < ic; ++i) {
            const T v = ip[i];
            const T* wrow = wp + static_cast<size_t>(i) * oc;
            for (int o = 0; o < oc; ++o) op[o] += v * wrow[o];
          }
        }
      }
    }
  }
  return out;
}

// grad_in may be null when the input gradient is not needed (first layer).
template <typename T>
void conv2d_backward(const Image<T>& in, Param<T>& w, Param<T>& b, int k,
                     const Image<T>& grad_out, Image<T>* grad_in) {
  const int ic = in.c;
  const int oc = static_cast<int>(b.size());
  const int pad = k / 2;
  if (grad_in) *grad_in = Image<T>(in.h, in.w, ic);
  for (int y = 0; y < in.h; ++y) {
    for (int x = 0; x < in.w; ++x) {
      const T* gp = grad_out.pixel(y, x);
      for (int o = 0; o < oc; ++o) b.g[o] += gp[o];
      for (int ky = 0; ky < k; ++ky) {
        const int iy = y + ky - pad;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = x + kx - pad;
          if (ix < 0 || ix >= in.w) continue;
          const T* ip = in.pixel(iy, ix);
          const size_t base = static_cast<size_t>((ky * k + kx) * ic) * oc;
          T* gip = grad_in ? grad_in->pixel(iy, ix) : nullptr;
          for (int i = 0; i < ic; ++i) {
            const T v = ip[i];
            T* gwrow = &w.g[base + static_cast<size_t>(i) * oc];
            const T* wrow = &w.w[base + static_cast<size_t>(i) * oc];
            T acc = T(0);
            for (int o = 0; o < oc; ++o) {
              gwrow[o] += v * gp[o];
              acc += wrow[o] * gp[o];
            }
            if (gip) gip[i] += acc;
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Linear layers on flat vectors
// ---------------------------------------------------------------------------

template <typename T>
Vec<T> linear_forward(const Vec<T>& x, const Param<T>& w, const Param<T>* b) {
  const size_t in = x.size();
  const size_t out = b ? b->size() : w.size() / in;
  Vec<T> y(out);
  for (size_t o = 0; o < out; ++o) {
    T acc = b ? b->w[o] : T(0);
    const T* wrow = &w.w[o * in];
    for (size_t i = 0; i < in; ++i) acc += wrow[i] * x[i];
    y[o] = acc;
  }
  return y;
}

template <typename T>
void linear_backward(const Vec<T>& x, Param<T>& w, Param<T>* b,
                     const Vec<T>& grad_out, Vec<T>* grad_in) {
  const size_t in = x.size();
  const size_t out = grad_out.size();
  if (grad_in) grad_in->assign(in, T(0));
  for (size_t o = 0; o < out; ++o) {
    const T go = grad_out[o];
    if (b) b->g[o] += go;
    T* gwrow = &w.g[o * in];
    const T* wrow = &w.w[o * in];
    for (size_t i = 0; i < in; ++i) {
      gwrow[i] += go * x[i];
      if (grad_in) (*grad_in)[i] += wrow[i] * go;
    }
  }
}

// ---------------------------------------------------------------------------
// Global average pooling over the spatial grid
// ---------------------------------------------------------------------------

template <typename T>
Vec<T> global_avg_pool(const Image<T>& f) {
  Vec<T> pooled(f.c, T(0));
  for (int y = 0; y < f.h; ++y) {
    for (int x = 0; x < f.w; ++x) {
      const T* p = f.pixel(y, x);
      for (int ch = 0; ch < f.c; ++ch) pooled[ch] += p[ch];
    }
  }
  const T inv = T(1) / static_cast<T>(f.h * f.w);
  for (auto& v : pooled) v *= inv;
  return pooled;
}

template <typename T>
void global_avg_pool_backward(const Vec<T>& grad_pooled, Image<T>& grad_f) {
  const T inv = T(1) / static_cast<T>(grad_f.h * grad_f.w);
  for (int y = 0; y < grad_f.h; ++y) {
    for (int x = 0; x < grad_f.w; ++x) {
      T* p = grad_f.pixel(y, x);
      for (int ch = 0; ch < grad_f.c; ++ch) p[ch] += grad_pooled[ch] * inv;
    }
  }
}

// ---------------------------------------------------------------------------
// Layer normalization across channels at each pixel, learned affine
// ---------------------------------------------------------------------------

constexpr double kLayerNormEps = 1e-9;

template <typename T>
struct LayerNormParams {
  Param<T> gamma;
  Param<T> beta;

  void init(int d) {
    gamma.reshape({d});
    beta.reshape({d});
    std::fill(gamma.w.begin(), gamma.w.end(), T(1));
  }
};

template <typename T>
struct LayerNormCache {
  Image<T> xhat;     // normalized pre-affine values
  Vec<T> inv_std;    // one per pixel
};

template <typename T>
Image<T> layer_norm_forward(const Image<T>& f, const LayerNormParams<T>& p,
                            LayerNormCache<T>& cache) {
  const int d = f.c;
  Image<T> out(f.h, f.w, d);
  cache.xhat = Image<T>(f.h, f.w, d);
  cache.inv_std.assign(static_cast<size_t>(f.h) * f.w, T(0));
  const T invd = T(1) / static_cast<T>(d);
  for (int y = 0; y < f.h; ++y) {
    for (int x = 0; x < f.w; ++x) {
      const T* in = f.pixel(y, x);
      T mu = T(0);
      for (int ch = 0; ch < d; ++ch) mu += in[ch];
      mu *= invd;
      T var = T(0);
      for (int ch = 0; ch < d; ++ch) {
        const T c = in[ch] - mu;
        var += c * c;
      }
      var *= invd;
      const T inv_std = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
      cache.inv_std[static_cast<size_t>(y) * f.w + x] = inv_std;
      T* xh = cache.xhat.pixel(y, x);
      T* op = out.pixel(y, x);
      for (int ch = 0; ch < d; ++ch) {
        xh[ch] = (in[ch] - mu) * inv_std;
        op[ch] = p.gamma.w[ch] * xh[ch] + p.beta.w[ch];
      }
    }
  }
  return out;
}

template <typename T>
void layer_norm_backward(const LayerNormCache<T>& cache, LayerNormParams<T>& p,
                         const Image<T>& grad_out, Image<T>& grad_in) {
  const int d = grad_out.c;
  const T invd = T(1) / static_cast<T>(d);
  for (int y = 0; y < grad_out.h; ++y) {
    for (int x = 0; x < grad_out.w; ++x) {
      const T* go = grad_out.pixel(y, x);
      const T* xh = cache.xhat.pixel(y, x);
      const T inv_std =
          cache.inv_std[static_cast<size_t>(y) * grad_out.w + x];
      T mean_g = T(0), mean_gx = T(0);
      for (int ch = 0; ch < d; ++ch) {
        const T gxh = go[ch] * p.gamma.w[ch];
        mean_g += gxh;
        mean_gx += gxh * xh[ch];
        p.gamma.g[ch] += go[ch] * xh[ch];
        p.beta.g[ch] += go[ch];
      }
      mean_g *= invd;
      mean_gx *= invd;
      T* gi = grad_in.pixel(y, x);
      for (int ch = 0; ch < d; ++ch) {
        const T gxh = go[ch] * p.gamma.w[ch];
        gi[ch] += inv_std * (gxh - mean_g - xh[ch] * mean_gx);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Small vector helpers
// ---------------------------------------------------------------------------

template <typename T>
void axpy(T a, const Vec<T>& x, Vec<T>& y) {
  for (size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

template <typename T>
T dot(const Vec<T>& a, const Vec<T>& b) {
  T acc = T(0);
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace psid
