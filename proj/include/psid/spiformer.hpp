#pragma once

// Prompt-integrative transformer denoiser. Each block runs
//   F <- F + attention(sam(F, prompt))
//   F <- F + gate(F)
// where sam fuses pooled channel attention with the structural prompt,
// attention is channel-wise (transposed) multi-head self-attention with
// spatially L2-normalized queries/keys and a learned per-head temperature,
// and gate is a split-and-multiply gated conv pair. A global residual maps
// the input image straight to the output, so the stack learns the noise
// delta. All parameters are resolution-independent: the same weights apply
// to half-scale sub-images and full-scale images.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "psid/nn.hpp"
#include "psid/tensor.hpp"

namespace psid {

struct SpiformerConfig {
  int channels = 3;
  int width = 48;    // feature channels d
  int blocks = 4;
  int heads = 2;
  int latent = 256;  // prompt length N

  void validate() const {
    if (width % heads != 0) {
      throw std::invalid_argument("spiformer: heads must divide width");
    }
  }
};

constexpr double kAttnNormEps = 1e-12;

// ---------------------------------------------------------------------------
// Structural attention module (prompt fusion)
// ---------------------------------------------------------------------------

template <typename T>
struct SamParams {
  Param<T> l1_w, l1_b;   // pooled-feature linear, d -> d
  Param<T> s1_w, s2_w;   // channel-attention maps, d -> d
  Param<T> c1_w, c2_w;   // prompt maps, N -> d

  template <typename F>
  void visit(F&& f) {
    f("l1.w", l1_w);
    f("l1.b", l1_b);
    f("s1.w", s1_w);
    f("s2.w", s2_w);
    f("c1.w", c1_w);
    f("c2.w", c2_w);
  }
};

template <typename T>
struct SamCache {
  Image<T> input;
  Vec<T> pooled;
  Vec<T> c_sca;
  Vec<T> s1, s2, c1, c2;
  Image<T> norm;  // layer-normalized input
  LayerNormCache<T> ln;
};

// out[p] = (s1 .* c1) .* norm(F)[p] + (s2 .* c2), with
// c_sca = W_l1 * avgpool(F) + b_l1, s_i = W_si * c_sca, c_i = W_ci * prompt.
template <typename T>
Image<T> sam_forward(const SamParams<T>& p, const LayerNormParams<T>& ln,
                     const Image<T>& f, const Vec<T>& prompt,
                     SamCache<T>& cache) {
  const int d = f.c;
  cache.input = f;
  cache.pooled = global_avg_pool(f);
  cache.c_sca = linear_forward(cache.pooled, p.l1_w, &p.l1_b);
  cache.s1 = linear_forward<T>(cache.c_sca, p.s1_w, nullptr);
  cache.s2 = linear_forward<T>(cache.c_sca, p.s2_w, nullptr);
  cache.c1 = linear_forward<T>(prompt, p.c1_w, nullptr);
  cache.c2 = linear_forward<T>(prompt, p.c2_w, nullptr);
  cache.norm = layer_norm_forward(f, ln, cache.ln);

  Image<T> out(f.h, f.w, d);
  Vec<T> mul(d), add(d);
  for (int ch = 0; ch < d; ++ch) {
    mul[ch] = cache.s1[ch] * cache.c1[ch];
    add[ch] = cache.s2[ch] * cache.c2[ch];
  }
  for (int y = 0; y < f.h; ++y) {
    for (int x = 0; x < f.w; ++x) {
      const T* np = cache.norm.pixel(y, x);
      T* op = out.pixel(y, x);
      for (int ch = 0; ch < d; ++ch) op[ch] = mul[ch] * np[ch] + add[ch];
    }
  }
  return out;
}

// Accumulates parameter grads and the prompt grad; returns grad wrt F.
template <typename T>
Image<T> sam_backward(SamParams<T>& p, LayerNormParams<T>& ln,
                      const SamCache<T>& cache, const Vec<T>& prompt,
                      const Image<T>& grad_out, Vec<T>& grad_prompt) {
  const int d = grad_out.c;
  Vec<T> mul(d);
  for (int ch = 0; ch < d; ++ch) mul[ch] = cache.s1[ch] * cache.c1[ch];

  Vec<T> d_mul(d, T(0)), d_add(d, T(0));
  Image<T> d_norm(grad_out.h, grad_out.w, d);
  for (int y = 0; y < grad_out.h; ++y) {
    for (int x = 0; x < grad_out.w; ++x) {
      const T* go = grad_out.pixel(y, x);
      const T* np = cache.norm.pixel(y, x);
      T* dn = d_norm.pixel(y, x);
      for (int ch = 0; ch < d; ++ch) {
        d_mul[ch] += go[ch] * np[ch];
        d_add[ch] += go[ch];
        dn[ch] = go[ch] * mul[ch];
      }
    }
  }

  Vec<T> d_s1(d), d_c1(d), d_s2(d), d_c2(d);
  for (int ch = 0; ch < d; ++ch) {
    d_s1[ch] = d_mul[ch] * cache.c1[ch];
    d_c1[ch] = d_mul[ch] * cache.s1[ch];
    d_s2[ch] = d_add[ch] * cache.c2[ch];
    d_c2[ch] = d_add[ch] * cache.s2[ch];
  }

  Vec<T> d_csca(d, T(0)), tmp;
  linear_backward<T>(cache.c_sca, p.s1_w, nullptr, d_s1, &tmp);
  axpy(T(1), tmp, d_csca);
  linear_backward<T>(cache.c_sca, p.s2_w, nullptr, d_s2, &tmp);
  axpy(T(1), tmp, d_csca);
  linear_backward<T>(prompt, p.c1_w, nullptr, d_c1, &tmp);
  axpy(T(1), tmp, grad_prompt);
  linear_backward<T>(prompt, p.c2_w, nullptr, d_c2, &tmp);
  axpy(T(1), tmp, grad_prompt);

  Vec<T> d_pooled;
  linear_backward(cache.pooled, p.l1_w, &p.l1_b, d_csca, &d_pooled);

  Image<T> grad_f(grad_out.h, grad_out.w, d);
  global_avg_pool_backward(d_pooled, grad_f);
  layer_norm_backward(cache.ln, ln, d_norm, grad_f);
  return grad_f;
}

// ---------------------------------------------------------------------------
// Channel-wise multi-head self-attention
// ---------------------------------------------------------------------------

template <typename T>
struct AttnParams {
  Param<T> q_w, q_b;        // 1x1 conv d -> d
  Param<T> k_w, k_b;
  Param<T> v_w, v_b;
  Param<T> temperature;     // one scalar per head
  Param<T> proj_w, proj_b;  // 1x1 conv d -> d

  template <typename F>
  void visit(F&& f) {
    f("q.w", q_w);
    f("q.b", q_b);
    f("k.w", k_w);
    f("k.b", k_b);
    f("v.w", v_w);
    f("v.b", v_b);
    f("temp", temperature);
    f("proj.w", proj_w);
    f("proj.b", proj_b);
  }
};

template <typename T>
struct AttnCache {
  Image<T> input;
  Image<T> q, k, v;
  std::vector<Vec<T>> q_inv_norm, k_inv_norm;  // per head: 1/||row||, dh each
  std::vector<Vec<T>> scores;                  // per head: raw dh x dh dots
  std::vector<Vec<T>> attn;                    // per head: softmax rows
  Image<T> merged;                             // pre-projection output
};

template <typename T>
Image<T> attention_forward(const AttnParams<T>& p, int heads,
                           const Image<T>& f, AttnCache<T>& cache) {
  const int d = f.c;
  if (d % heads != 0) {
    throw std::invalid_argument("attention: heads must divide channel width");
  }
  const int dh = d / heads;
  const size_t hw = static_cast<size_t>(f.h) * f.w;

  cache.input = f;
  cache.q = conv2d_forward(f, p.q_w, p.q_b, 1);
  cache.k = conv2d_forward(f, p.k_w, p.k_b, 1);
  cache.v = conv2d_forward(f, p.v_w, p.v_b, 1);
  cache.q_inv_norm.assign(heads, Vec<T>());
  cache.k_inv_norm.assign(heads, Vec<T>());
  cache.scores.assign(heads, Vec<T>());
  cache.attn.assign(heads, Vec<T>());
  cache.merged = Image<T>(f.h, f.w, d);

  for (int h = 0; h < heads; ++h) {
    const int c0 = h * dh;
    auto& qn = cache.q_inv_norm[h];
    auto& kn = cache.k_inv_norm[h];
    qn.assign(dh, T(0));
    kn.assign(dh, T(0));
    for (int i = 0; i < dh; ++i) {
      T qs = T(0), ks = T(0);
      for (size_t s = 0; s < hw; ++s) {
        const T qv = cache.q.data[s * d + c0 + i];
        const T kv = cache.k.data[s * d + c0 + i];
        qs += qv * qv;
        ks += kv * kv;
      }
      qn[i] = T(1) / std::sqrt(qs + static_cast<T>(kAttnNormEps));
      kn[i] = T(1) / std::sqrt(ks + static_cast<T>(kAttnNormEps));
    }

    auto& scores = cache.scores[h];
    scores.assign(static_cast<size_t>(dh) * dh, T(0));
    for (size_t s = 0; s < hw; ++s) {
      const T* qp = &cache.q.data[s * d + c0];
      const T* kp = &cache.k.data[s * d + c0];
      for (int i = 0; i < dh; ++i) {
        const T qv = qp[i];
        T* row = &scores[static_cast<size_t>(i) * dh];
        for (int j = 0; j < dh; ++j) row[j] += qv * kp[j];
      }
    }
    for (int i = 0; i < dh; ++i) {
      for (int j = 0; j < dh; ++j) {
        scores[static_cast<size_t>(i) * dh + j] *= qn[i] * kn[j];
      }
    }

    const T tau = p.temperature.w[h];
    auto& attn = cache.attn[h];
    attn.assign(static_cast<size_t>(dh) * dh, T(0));
    for (int i = 0; i < dh; ++i) {
      const T* srow = &scores[static_cast<size_t>(i) * dh];
      T* arow = &attn[static_cast<size_t>(i) * dh];
      T maxv = tau * srow[0];
      for (int j = 1; j < dh; ++j) maxv = std::max(maxv, tau * srow[j]);
      T sum = T(0);
      for (int j = 0; j < dh; ++j) {
        arow[j] = std::exp(tau * srow[j] - maxv);
        sum += arow[j];
      }
      const T inv = T(1) / sum;
      for (int j = 0; j < dh; ++j) arow[j] *= inv;
    }

    for (size_t s = 0; s < hw; ++s) {
      const T* vp = &cache.v.data[s * d + c0];
      T* op = &cache.merged.data[s * d + c0];
      for (int i = 0; i < dh; ++i) {
        const T* arow = &attn[static_cast<size_t>(i) * dh];
        T acc = T(0);
        for (int j = 0; j < dh; ++j) acc += arow[j] * vp[j];
        op[i] = acc;
      }
    }
  }
  return conv2d_forward(cache.merged, p.proj_w, p.proj_b, 1);
}

template <typename T>
Image<T> attention_backward(AttnParams<T>& p, int heads,
                            const AttnCache<T>& cache,
                            const Image<T>& grad_out) {
  const Image<T>& f = cache.input;
  const int d = f.c;
  const int dh = d / heads;
  const size_t hw = static_cast<size_t>(f.h) * f.w;

  Image<T> d_merged;
  conv2d_backward(cache.merged, p.proj_w, p.proj_b, 1, grad_out, &d_merged);

  Image<T> d_q(f.h, f.w, d), d_k(f.h, f.w, d), d_v(f.h, f.w, d);

  for (int h = 0; h < heads; ++h) {
    const int c0 = h * dh;
    const auto& attn = cache.attn[h];
    const auto& scores = cache.scores[h];
    const auto& qn = cache.q_inv_norm[h];
    const auto& kn = cache.k_inv_norm[h];
    const T tau = p.temperature.w[h];

    // dattn and dV
    Vec<T> d_attn(static_cast<size_t>(dh) * dh, T(0));
    for (size_t s = 0; s < hw; ++s) {
      const T* go = &d_merged.data[s * d + c0];
      const T* vp = &cache.v.data[s * d + c0];
      T* dvp = &d_v.data[s * d + c0];
      for (int i = 0; i < dh; ++i) {
        const T g = go[i];
        const T* arow = &attn[static_cast<size_t>(i) * dh];
        T* darow = &d_attn[static_cast<size_t>(i) * dh];
        for (int j = 0; j < dh; ++j) {
          darow[j] += g * vp[j];
          dvp[j] += arow[j] * g;
        }
      }
    }

    // softmax backward, then temperature and raw-score grads
    Vec<T> d_scaled(static_cast<size_t>(dh) * dh);  // grad wrt tau * scores
    for (int i = 0; i < dh; ++i) {
      const T* arow = &attn[static_cast<size_t>(i) * dh];
      const T* darow = &d_attn[static_cast<size_t>(i) * dh];
      T inner = T(0);
      for (int j = 0; j < dh; ++j) inner += arow[j] * darow[j];
      for (int j = 0; j < dh; ++j) {
        d_scaled[static_cast<size_t>(i) * dh + j] =
            arow[j] * (darow[j] - inner);
      }
    }
    T d_tau = T(0);
    Vec<T> d_scores(static_cast<size_t>(dh) * dh);
    for (size_t i = 0; i < d_scores.size(); ++i) {
      d_tau += d_scaled[i] * scores[i];
      d_scores[i] = d_scaled[i] * tau;
    }
    p.temperature.g[h] += d_tau;

    // scores_ij = qn_i * kn_j * (Q_i . K_j)  with qn, kn the inverse norms.
    // Split the gradient into the dot-product part and the norm part.
    Vec<T> d_dot(static_cast<size_t>(dh) * dh);
    Vec<T> d_qn(dh, T(0)), d_kn(dh, T(0));
    for (int i = 0; i < dh; ++i) {
      for (int j = 0; j < dh; ++j) {
        const size_t idx = static_cast<size_t>(i) * dh + j;
        const T raw_dot = scores[idx] / (qn[i] * kn[j]);
        d_dot[idx] = d_scores[idx] * qn[i] * kn[j];
        d_qn[i] += d_scores[idx] * kn[j] * raw_dot;
        d_kn[j] += d_scores[idx] * qn[i] * raw_dot;
      }
    }
    // d(qn_i)/d(Q_i[s]) = -qn_i^3 * Q_i[s]
    Vec<T> q_coef(dh), k_coef(dh);
    for (int i = 0; i < dh; ++i) {
      q_coef[i] = -d_qn[i] * qn[i] * qn[i] * qn[i];
      k_coef[i] = -d_kn[i] * kn[i] * kn[i] * kn[i];
    }
    for (size_t s = 0; s < hw; ++s) {
      const T* qp = &cache.q.data[s * d + c0];
      const T* kp = &cache.k.data[s * d + c0];
      T* dqp = &d_q.data[s * d + c0];
      T* dkp = &d_k.data[s * d + c0];
      for (int i = 0; i < dh; ++i) {
        T acc_q = q_coef[i] * qp[i];
        T acc_k = k_coef[i] * kp[i];
        const T* drow = &d_dot[static_cast<size_t>(i) * dh];
        for (int j = 0; j < dh; ++j) {
          acc_q += drow[j] * kp[j];
          // d_dot is indexed (query i, key j); the key-side gradient of
          // K_i[s] collects column i.
          acc_k += d_dot[static_cast<size_t>(j) * dh + i] * qp[j];
        }
        dqp[i] += acc_q;
        dkp[i] += acc_k;
      }
    }
  }

  Image<T> grad_f(f.h, f.w, d), tmp;
  conv2d_backward(f, p.q_w, p.q_b, 1, d_q, &tmp);
  for (size_t i = 0; i < grad_f.data.size(); ++i) grad_f.data[i] += tmp.data[i];
  conv2d_backward(f, p.k_w, p.k_b, 1, d_k, &tmp);
  for (size_t i = 0; i < grad_f.data.size(); ++i) grad_f.data[i] += tmp.data[i];
  conv2d_backward(f, p.v_w, p.v_b, 1, d_v, &tmp);
  for (size_t i = 0; i < grad_f.data.size(); ++i) grad_f.data[i] += tmp.data[i];
  return grad_f;
}

// ---------------------------------------------------------------------------
// Gated feed-forward
// ---------------------------------------------------------------------------

template <typename T>
struct GateParams {
  Param<T> expand_w, expand_b;  // 3x3 conv, d -> 2g
  Param<T> proj_w, proj_b;      // 1x1 conv, g -> d

  template <typename F>
  void visit(F&& f) {
    f("expand.w", expand_w);
    f("expand.b", expand_b);
    f("proj.w", proj_w);
    f("proj.b", proj_b);
  }
};

template <typename T>
struct GateCache {
  Image<T> norm;
  LayerNormCache<T> ln;
  Image<T> expanded;  // 2g channels
  Image<T> gated;     // g channels, first half * second half
};

template <typename T>
Image<T> gate_forward(const GateParams<T>& p, const LayerNormParams<T>& ln,
                      const Image<T>& f, GateCache<T>& cache) {
  const int two_g = p.expand_b.shape[0];
  if (two_g % 2 != 0) {
    throw std::invalid_argument("gate: expansion width must be even");
  }
  const int g = two_g / 2;
  cache.norm = layer_norm_forward(f, ln, cache.ln);
  cache.expanded = conv2d_forward(cache.norm, p.expand_w, p.expand_b, 3);
  cache.gated = Image<T>(f.h, f.w, g);
  for (int y = 0; y < f.h; ++y) {
    for (int x = 0; x < f.w; ++x) {
      const T* up = cache.expanded.pixel(y, x);
      T* gp = cache.gated.pixel(y, x);
      for (int ch = 0; ch < g; ++ch) gp[ch] = up[ch] * up[g + ch];
    }
  }
  return conv2d_forward(cache.gated, p.proj_w, p.proj_b, 1);
}

template <typename T>
Image<T> gate_backward(GateParams<T>& p, LayerNormParams<T>& ln,
                       const GateCache<T>& cache, const Image<T>& f,
                       const Image<T>& grad_out) {
  const int g = cache.gated.c;
  Image<T> d_gated;
  conv2d_backward(cache.gated, p.proj_w, p.proj_b, 1, grad_out, &d_gated);

  Image<T> d_expanded(f.h, f.w, 2 * g);
  for (int y = 0; y < f.h; ++y) {
    for (int x = 0; x < f.w; ++x) {
      const T* up = cache.expanded.pixel(y, x);
      const T* dg = d_gated.pixel(y, x);
      T* de = d_expanded.pixel(y, x);
      for (int ch = 0; ch < g; ++ch) {
        de[ch] = dg[ch] * up[g + ch];
        de[g + ch] = dg[ch] * up[ch];
      }
    }
  }

  Image<T> d_norm;
  conv2d_backward(cache.norm, p.expand_w, p.expand_b, 3, d_expanded, &d_norm);
  Image<T> grad_f(f.h, f.w, f.c);
  layer_norm_backward(cache.ln, ln, d_norm, grad_f);
  return grad_f;
}

// ---------------------------------------------------------------------------
// Full denoiser
// ---------------------------------------------------------------------------

template <typename T>
struct BlockParams {
  SamParams<T> sam;
  LayerNormParams<T> ln_sam;
  AttnParams<T> attn;
  GateParams<T> gate;
  LayerNormParams<T> ln_gate;

  template <typename F>
  void visit(F&& f) {
    sam.visit([&](const std::string& n, Param<T>& q) { f("sam." + n, q); });
    f("ln_sam.gamma", ln_sam.gamma);
    f("ln_sam.beta", ln_sam.beta);
    attn.visit([&](const std::string& n, Param<T>& q) { f("attn." + n, q); });
    gate.visit([&](const std::string& n, Param<T>& q) { f("gate." + n, q); });
    f("ln_gate.gamma", ln_gate.gamma);
    f("ln_gate.beta", ln_gate.beta);
  }
};

template <typename T>
struct SpiformerParams {
  SpiformerConfig cfg;
  Param<T> conv_in_w, conv_in_b;
  std::vector<BlockParams<T>> blocks;
  Param<T> conv_out_w, conv_out_b;

  template <typename F>
  void visit(F&& f) {
    f("conv_in.w", conv_in_w);
    f("conv_in.b", conv_in_b);
    for (size_t i = 0; i < blocks.size(); ++i) {
      const std::string prefix = "block" + std::to_string(i) + ".";
      blocks[i].visit(
          [&](const std::string& n, Param<T>& q) { f(prefix + n, q); });
    }
    f("conv_out.w", conv_out_w);
    f("conv_out.b", conv_out_b);
  }
};

template <typename T>
SpiformerParams<T> spiformer_init(const SpiformerConfig& cfg, Rng& rng) {
  cfg.validate();
  SpiformerParams<T> p;
  p.cfg = cfg;
  const int d = cfg.width;
  const int n = cfg.latent;

  p.conv_in_w.reshape({3, 3, cfg.channels, d});
  p.conv_in_b.reshape({d});
  he_init(p.conv_in_w, 9 * static_cast<size_t>(cfg.channels), rng);

  p.blocks.resize(cfg.blocks);
  for (auto& b : p.blocks) {
    b.sam.l1_w.reshape({d, d});
    b.sam.l1_b.reshape({d});
    b.sam.s1_w.reshape({d, d});
    b.sam.s2_w.reshape({d, d});
    b.sam.c1_w.reshape({d, n});
    b.sam.c2_w.reshape({d, n});
    he_init(b.sam.l1_w, static_cast<size_t>(d), rng);
    he_init(b.sam.s1_w, static_cast<size_t>(d), rng);
    he_init(b.sam.s2_w, static_cast<size_t>(d), rng);
    he_init(b.sam.c1_w, static_cast<size_t>(n), rng);
    he_init(b.sam.c2_w, static_cast<size_t>(n), rng);
    b.ln_sam.init(d);

    b.attn.q_w.reshape({1, 1, d, d});
    b.attn.q_b.reshape({d});
    b.attn.k_w.reshape({1, 1, d, d});
    b.attn.k_b.reshape({d});
    b.attn.v_w.reshape({1, 1, d, d});
    b.attn.v_b.reshape({d});
    he_init(b.attn.q_w, static_cast<size_t>(d), rng);
    he_init(b.attn.k_w, static_cast<size_t>(d), rng);
    he_init(b.attn.v_w, static_cast<size_t>(d), rng);
    b.attn.temperature.reshape({cfg.heads});
    std::fill(b.attn.temperature.w.begin(), b.attn.temperature.w.end(), T(1));
    b.attn.proj_w.reshape({1, 1, d, d});
    b.attn.proj_b.reshape({d});
    he_init(b.attn.proj_w, static_cast<size_t>(d), rng);

    b.gate.expand_w.reshape({3, 3, d, 2 * d});
    b.gate.expand_b.reshape({2 * d});
    he_init(b.gate.expand_w, 9 * static_cast<size_t>(d), rng);
    b.gate.proj_w.reshape({1, 1, d, d});
    b.gate.proj_b.reshape({d});
    he_init(b.gate.proj_w, static_cast<size_t>(d), rng);
    b.ln_gate.init(d);
  }

  // Zero output projection: the stack starts as the identity map and learns
  // the noise delta from there.
  p.conv_out_w.reshape({3, 3, d, cfg.channels});
  p.conv_out_b.reshape({cfg.channels});
  return p;
}

template <typename T>
struct SpiBlockCache {
  Image<T> in;
  SamCache<T> sam;
  AttnCache<T> attn;
  Image<T> mid;  // after attention residual, input to the gate path
  GateCache<T> gate;
};

template <typename T>
struct SpiformerCache {
  Image<T> input;
  Image<T> f0;
  std::vector<SpiBlockCache<T>> blocks;
  Image<T> f_final;
};

template <typename T>
Image<T> spiformer_forward(const SpiformerParams<T>& p, const Image<T>& img,
                           const Vec<T>& prompt, SpiformerCache<T>& cache) {
  if (img.c != p.cfg.channels) {
    throw std::invalid_argument("spiformer: image has " +
                                std::to_string(img.c) +
                                " channels, model expects " +
                                std::to_string(p.cfg.channels));
  }
  cache.input = img;
  cache.f0 = conv2d_forward(img, p.conv_in_w, p.conv_in_b, 3);
  cache.blocks.assign(p.blocks.size(), SpiBlockCache<T>{});

  Image<T> f = cache.f0;
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    auto& bc = cache.blocks[i];
    const auto& b = p.blocks[i];
    bc.in = f;
    Image<T> sam_out = sam_forward(b.sam, b.ln_sam, f, prompt, bc.sam);
    Image<T> attn_out = attention_forward(b.attn, p.cfg.heads, sam_out, bc.attn);
    for (size_t j = 0; j < f.data.size(); ++j) f.data[j] += attn_out.data[j];
    bc.mid = f;
    Image<T> gate_out = gate_forward(b.gate, b.ln_gate, f, bc.gate);
    for (size_t j = 0; j < f.data.size(); ++j) f.data[j] += gate_out.data[j];
  }
  cache.f_final = f;

  Image<T> delta = conv2d_forward(f, p.conv_out_w, p.conv_out_b, 3);
  Image<T> out(img.h, img.w, img.c);
  for (size_t j = 0; j < out.data.size(); ++j) {
    out.data[j] = img.data[j] + delta.data[j];
  }
  return out;
}

template <typename T>
Image<T> spiformer_forward(const SpiformerParams<T>& p, const Image<T>& img,
                           const Vec<T>& prompt) {
  SpiformerCache<T> cache;
  return spiformer_forward(p, img, prompt, cache);
}

// Accumulates parameter grads and the prompt grad. The grad wrt the input
// image is not produced; inputs are data, not parameters.
template <typename T>
void spiformer_backward(SpiformerParams<T>& p, const SpiformerCache<T>& cache,
                        const Vec<T>& prompt, const Image<T>& grad_out,
                        Vec<T>& grad_prompt) {
  Image<T> g_f;
  conv2d_backward(cache.f_final, p.conv_out_w, p.conv_out_b, 3, grad_out,
                  &g_f);

  for (int i = static_cast<int>(p.blocks.size()) - 1; i >= 0; --i) {
    auto& b = p.blocks[i];
    const auto& bc = cache.blocks[i];
    // mid -> mid + gate(mid)
    Image<T> g_mid =
        gate_backward(b.gate, b.ln_gate, bc.gate, bc.mid, g_f);
    for (size_t j = 0; j < g_f.data.size(); ++j) g_mid.data[j] += g_f.data[j];
    // in -> in + attn(sam(in))
    Image<T> g_sam_out =
        attention_backward(b.attn, p.cfg.heads, bc.attn, g_mid);
    Image<T> g_in = sam_backward(b.sam, b.ln_sam, bc.sam, prompt, g_sam_out,
                                 grad_prompt);
    for (size_t j = 0; j < g_in.data.size(); ++j) g_in.data[j] += g_mid.data[j];
    g_f = std::move(g_in);
  }

  conv2d_backward<T>(cache.input, p.conv_in_w, p.conv_in_b, 3, g_f, nullptr);
}

}  // namespace psid
