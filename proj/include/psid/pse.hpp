#pragma once

// Pixel structure encoder: a small residual conv stack, global average
// pooling, and a two-layer head that maps an image of any even resolution to
// a fixed-length latent vector. The same weights encode both the half-scale
// sub-image and the full-scale image, which is what makes the two scales
// comparable in latent space.

#include <stdexcept>
#include <vector>

#include "psid/nn.hpp"
#include "psid/tensor.hpp"

namespace psid {

struct PseConfig {
  int channels = 3;
  int res_blocks = 4;
  int width = 64;
  int hidden = 256;
  int latent = 256;
};

template <typename T>
struct PseResBlock {
  Param<T> conv1_w, conv1_b;
  Param<T> conv2_w, conv2_b;
};

template <typename T>
struct PseParams {
  PseConfig cfg;
  Param<T> stem_w, stem_b;
  std::vector<PseResBlock<T>> blocks;
  Param<T> fc1_w, fc1_b;
  Param<T> fc2_w, fc2_b;

  template <typename F>
  void visit(F&& f) {
    f("stem.w", stem_w);
    f("stem.b", stem_b);
    for (size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "res" + std::to_string(i) + ".";
      f(p + "conv1.w", blocks[i].conv1_w);
      f(p + "conv1.b", blocks[i].conv1_b);
      f(p + "conv2.w", blocks[i].conv2_w);
      f(p + "conv2.b", blocks[i].conv2_b);
    }
    f("fc1.w", fc1_w);
    f("fc1.b", fc1_b);
    f("fc2.w", fc2_w);
    f("fc2.b", fc2_b);
  }
};

template <typename T>
PseParams<T> pse_init(const PseConfig& cfg, Rng& rng) {
  PseParams<T> p;
  p.cfg = cfg;
  p.stem_w.reshape({3, 3, cfg.channels, cfg.width});
  p.stem_b.reshape({cfg.width});
  he_init(p.stem_w, 9 * static_cast<size_t>(cfg.channels), rng);
  p.blocks.resize(cfg.res_blocks);
  for (auto& b : p.blocks) {
    b.conv1_w.reshape({3, 3, cfg.width, cfg.width});
    b.conv1_b.reshape({cfg.width});
    b.conv2_w.reshape({3, 3, cfg.width, cfg.width});
    b.conv2_b.reshape({cfg.width});
    he_init(b.conv1_w, 9 * static_cast<size_t>(cfg.width), rng);
    he_init(b.conv2_w, 9 * static_cast<size_t>(cfg.width), rng);
  }
  p.fc1_w.reshape({cfg.hidden, cfg.width});
  p.fc1_b.reshape({cfg.hidden});
  he_init(p.fc1_w, static_cast<size_t>(cfg.width), rng);
  p.fc2_w.reshape({cfg.latent, cfg.hidden});
  p.fc2_b.reshape({cfg.latent});
  he_init(p.fc2_w, static_cast<size_t>(cfg.hidden), rng);
  return p;
}

template <typename T>
struct PseCache {
  Image<T> input;
  Image<T> stem_pre;          // stem output before activation
  Image<T> stem_act;
  std::vector<Image<T>> block_in;
  std::vector<Image<T>> block_pre1;   // conv1 output before activation
  std::vector<Image<T>> block_act1;
  Image<T> features;          // final conv-stack output (pooling input)
  Vec<T> pooled;
  Vec<T> fc1_pre;
  Vec<T> fc1_act;
};

// Conv stack up to (and excluding) the pooling layer.
template <typename T>
Image<T> pse_features(const PseParams<T>& p, const Image<T>& img,
                      PseCache<T>& cache) {
  if (img.c != p.cfg.channels) {
    throw std::invalid_argument("pse: image has " + std::to_string(img.c) +
                                " channels, model expects " +
                                std::to_string(p.cfg.channels));
  }
  cache.input = img;
  cache.stem_pre = conv2d_forward(img, p.stem_w, p.stem_b, 3);
  cache.stem_act = cache.stem_pre;
  leaky_relu_inplace(cache.stem_act.data);

  cache.block_in.clear();
  cache.block_pre1.clear();
  cache.block_act1.clear();
  Image<T> f = cache.stem_act;
  for (const auto& b : p.blocks) {
    cache.block_in.push_back(f);
    Image<T> pre1 = conv2d_forward(f, b.conv1_w, b.conv1_b, 3);
    cache.block_pre1.push_back(pre1);
    leaky_relu_inplace(pre1.data);
    cache.block_act1.push_back(pre1);
    Image<T> v = conv2d_forward(pre1, b.conv2_w, b.conv2_b, 3);
    for (size_t i = 0; i < f.data.size(); ++i) f.data[i] += v.data[i];
  }
  cache.features = f;
  return f;
}

// Pooling plus the two-layer head; spatial structure of `features` only
// enters through the pooled mean.
template <typename T>
Vec<T> pse_head(const PseParams<T>& p, const Image<T>& features,
                PseCache<T>& cache) {
  cache.pooled = global_avg_pool(features);
  cache.fc1_pre = linear_forward(cache.pooled, p.fc1_w, &p.fc1_b);
  cache.fc1_act = cache.fc1_pre;
  leaky_relu_inplace(cache.fc1_act);
  return linear_forward(cache.fc1_act, p.fc2_w, &p.fc2_b);
}

template <typename T>
Vec<T> pse_forward(const PseParams<T>& p, const Image<T>& img,
                   PseCache<T>& cache) {
  return pse_head(p, pse_features(p, img, cache), cache);
}

template <typename T>
Vec<T> pse_forward(const PseParams<T>& p, const Image<T>& img) {
  PseCache<T> cache;
  return pse_forward(p, img, cache);
}

template <typename T>
void pse_backward(PseParams<T>& p, const PseCache<T>& cache,
                  const Vec<T>& grad_rep) {
  Vec<T> g_fc1_act;
  linear_backward(cache.fc1_act, p.fc2_w, &p.fc2_b, grad_rep, &g_fc1_act);
  leaky_relu_backward(cache.fc1_pre, g_fc1_act);
  Vec<T> g_pooled;
  linear_backward(cache.pooled, p.fc1_w, &p.fc1_b, g_fc1_act, &g_pooled);

  Image<T> g_f(cache.features.h, cache.features.w, cache.features.c);
  global_avg_pool_backward(g_pooled, g_f);

  for (int i = static_cast<int>(p.blocks.size()) - 1; i >= 0; --i) {
    auto& b = p.blocks[i];
    Image<T> g_act1;
    conv2d_backward(cache.block_act1[i], b.conv2_w, b.conv2_b, 3, g_f,
                    &g_act1);
    leaky_relu_backward(cache.block_pre1[i].data, g_act1.data);
    Image<T> g_in;
    conv2d_backward(cache.block_in[i], b.conv1_w, b.conv1_b, 3, g_act1, &g_in);
    // residual skip
    for (size_t j = 0; j < g_f.data.size(); ++j) g_f.data[j] += g_in.data[j];
  }

  leaky_relu_backward(cache.stem_pre.data, g_f.data);
  conv2d_backward<T>(cache.input, p.stem_w, p.stem_b, 3, g_f, nullptr);
}

}  // namespace psid
