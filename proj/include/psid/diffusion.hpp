#pragma once

// Latent diffusion over the structural representation vector: linear beta
// schedule, closed-form forward noising, a conditional MLP noise predictor
// (conditioned by concatenating the sub-image representation and a sinusoidal
// time embedding), and the deterministic reverse update
//
//   c_{t-1} = ( c_t - predicted_noise * (1 - alpha_t) / sqrt(1 - alpha_bar_t) )
//             / sqrt(alpha_t)
//
// applied from the start step down to t = 1. No stochastic term is added in
// the reverse update. Training backpropagates through the entire chain.

#include <cmath>
#include <concepts>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "psid/nn.hpp"

namespace psid {

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

template <typename T>
struct DiffusionSchedule {
  int t_steps = 0;
  Vec<T> beta;       // beta[t-1] for t = 1..T
  Vec<T> alpha;      // 1 - beta
  Vec<T> alpha_bar;  // running product of alpha

  T beta_at(int t) const { return beta[static_cast<size_t>(t) - 1]; }
  T alpha_at(int t) const { return alpha[static_cast<size_t>(t) - 1]; }
  T alpha_bar_at(int t) const { return alpha_bar[static_cast<size_t>(t) - 1]; }

  void require_step(int t) const {
    if (t < 1 || t > t_steps) {
      throw std::out_of_range("diffusion step " + std::to_string(t) +
                              " outside [1, " + std::to_string(t_steps) + "]");
    }
  }
};

template <typename T>
DiffusionSchedule<T> make_schedule(int t_steps, double beta_start,
                                   double beta_end) {
  if (t_steps < 1) throw std::invalid_argument("schedule: need T >= 1");
  if (!(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule<T> s;
  s.t_steps = t_steps;
  s.beta.resize(t_steps);
  s.alpha.resize(t_steps);
  s.alpha_bar.resize(t_steps);
  T prod = T(1);
  for (int t = 1; t <= t_steps; ++t) {
    const double frac =
        (t_steps == 1) ? 0.0 : static_cast<double>(t - 1) / (t_steps - 1);
    const T b = static_cast<T>(beta_start + frac * (beta_end - beta_start));
    s.beta[t - 1] = b;
    s.alpha[t - 1] = T(1) - b;
    prod *= s.alpha[t - 1];
    s.alpha_bar[t - 1] = prod;
  }
  return s;
}

// c_t = sqrt(alpha_bar_t) * c0 + sqrt(1 - alpha_bar_t) * eps
template <typename T>
Vec<T> forward_diffuse(const DiffusionSchedule<T>& sched, const Vec<T>& c0,
                       int t, const Vec<T>& eps) {
  sched.require_step(t);
  if (c0.size() != eps.size()) {
    throw std::invalid_argument("forward_diffuse: c0/eps length mismatch");
  }
  const T ab = sched.alpha_bar_at(t);
  const T a = std::sqrt(ab);
  const T b = std::sqrt(T(1) - ab);
  Vec<T> out(c0.size());
  for (size_t i = 0; i < c0.size(); ++i) out[i] = a * c0[i] + b * eps[i];
  return out;
}

// ---------------------------------------------------------------------------
// Sinusoidal time embedding: wavelengths geometric between 1 and 1e4
// ---------------------------------------------------------------------------

template <typename T>
Vec<T> time_embedding(int t, int dim) {
  if (dim < 4 || dim % 2 != 0) {
    throw std::invalid_argument("time embedding dim must be even and >= 4");
  }
  const int k = dim / 2;
  Vec<T> emb(dim);
  for (int i = 0; i < k; ++i) {
    const double wavelength =
        std::pow(1e4, static_cast<double>(i) / static_cast<double>(k - 1));
    const double phase = static_cast<double>(t) / wavelength;
    emb[2 * i] = static_cast<T>(std::sin(phase));
    emb[2 * i + 1] = static_cast<T>(std::cos(phase));
  }
  return emb;
}

// ---------------------------------------------------------------------------
// Conditional MLP noise predictor
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  int latent = 256;
  int hidden = 512;
  int time_dim = 64;
};

template <typename T>
struct DenoiserParams {
  DenoiserConfig cfg;
  Param<T> l1_w, l1_b;
  Param<T> l2_w, l2_b;
  Param<T> l3_w, l3_b;

  template <typename F>
  void visit(F&& f) {
    f("l1.w", l1_w);
    f("l1.b", l1_b);
    f("l2.w", l2_w);
    f("l2.b", l2_b);
    f("l3.w", l3_w);
    f("l3.b", l3_b);
  }
};

template <typename T>
DenoiserParams<T> denoiser_init(const DenoiserConfig& cfg, Rng& rng) {
  DenoiserParams<T> p;
  p.cfg = cfg;
  const int in = 2 * cfg.latent + cfg.time_dim;
  p.l1_w.reshape({cfg.hidden, in});
  p.l1_b.reshape({cfg.hidden});
  p.l2_w.reshape({cfg.hidden, cfg.hidden});
  p.l2_b.reshape({cfg.hidden});
  p.l3_w.reshape({cfg.latent, cfg.hidden});
  p.l3_b.reshape({cfg.latent});
  he_init(p.l1_w, static_cast<size_t>(in), rng);
  he_init(p.l2_w, static_cast<size_t>(cfg.hidden), rng);
  he_init(p.l3_w, static_cast<size_t>(cfg.hidden), rng);
  return p;
}

template <typename T>
struct DenoiserCache {
  Vec<T> input;    // concat(c_t, c_sub, time embedding)
  Vec<T> z1, a1;   // first hidden pre/post activation
  Vec<T> z2, a2;
};

template <typename T>
Vec<T> denoiser_forward(const DenoiserParams<T>& p, const Vec<T>& c_t,
                        const Vec<T>& c_sub, int t, DenoiserCache<T>& cache) {
  const int n = p.cfg.latent;
  if (static_cast<int>(c_t.size()) != n || static_cast<int>(c_sub.size()) != n) {
    throw std::invalid_argument("denoiser: latent length mismatch");
  }
  cache.input.clear();
  cache.input.reserve(2 * n + p.cfg.time_dim);
  cache.input.insert(cache.input.end(), c_t.begin(), c_t.end());
  cache.input.insert(cache.input.end(), c_sub.begin(), c_sub.end());
  const Vec<T> emb = time_embedding<T>(t, p.cfg.time_dim);
  cache.input.insert(cache.input.end(), emb.begin(), emb.end());

  cache.z1 = linear_forward(cache.input, p.l1_w, &p.l1_b);
  cache.a1 = cache.z1;
  leaky_relu_inplace(cache.a1);
  cache.z2 = linear_forward(cache.a1, p.l2_w, &p.l2_b);
  cache.a2 = cache.z2;
  leaky_relu_inplace(cache.a2);
  return linear_forward(cache.a2, p.l3_w, &p.l3_b);
}

template <typename T>
Vec<T> denoiser_forward(const DenoiserParams<T>& p, const Vec<T>& c_t,
                        const Vec<T>& c_sub, int t) {
  DenoiserCache<T> cache;
  return denoiser_forward(p, c_t, c_sub, t, cache);
}

// Returns (grad_c_t, grad_c_sub); parameter grads accumulate in-place.
template <typename T>
std::pair<Vec<T>, Vec<T>> denoiser_backward(DenoiserParams<T>& p,
                                            const DenoiserCache<T>& cache,
                                            const Vec<T>& grad_out) {
  Vec<T> g_a2;
  linear_backward(cache.a2, p.l3_w, &p.l3_b, grad_out, &g_a2);
  leaky_relu_backward(cache.z2, g_a2);
  Vec<T> g_a1;
  linear_backward(cache.a1, p.l2_w, &p.l2_b, g_a2, &g_a1);
  leaky_relu_backward(cache.z1, g_a1);
  Vec<T> g_in;
  linear_backward(cache.input, p.l1_w, &p.l1_b, g_a1, &g_in);

  const int n = p.cfg.latent;
  Vec<T> g_ct(g_in.begin(), g_in.begin() + n);
  Vec<T> g_csub(g_in.begin() + n, g_in.begin() + 2 * n);
  return {std::move(g_ct), std::move(g_csub)};
}

// ---------------------------------------------------------------------------
// Reverse process
// ---------------------------------------------------------------------------

// One deterministic reverse update given a noise prediction.
template <typename T>
Vec<T> reverse_update(const DiffusionSchedule<T>& sched, const Vec<T>& c_t,
                      const Vec<T>& eps_pred, int t) {
  sched.require_step(t);
  const T a = sched.alpha_at(t);
  const T inv_sqrt_a = T(1) / std::sqrt(a);
  const T coef = (T(1) - a) / std::sqrt(T(1) - sched.alpha_bar_at(t));
  Vec<T> out(c_t.size());
  for (size_t i = 0; i < c_t.size(); ++i) {
    out[i] = inv_sqrt_a * (c_t[i] - eps_pred[i] * coef);
  }
  return out;
}

// Single reverse step through an arbitrary predictor. The predictor is a
// callable (c_t, c_sub, t) -> noise estimate, so tests can inject oracles.
template <typename T, typename Predictor>
  requires std::invocable<Predictor&, const Vec<T>&, const Vec<T>&, int>
Vec<T> reverse_step(Predictor&& predict, const DiffusionSchedule<T>& sched,
                    const Vec<T>& c_t, const Vec<T>& c_sub, int t) {
  return reverse_update(sched, c_t, predict(c_t, c_sub, t), t);
}

template <typename T>
Vec<T> reverse_step(const DenoiserParams<T>& p,
                    const DiffusionSchedule<T>& sched, const Vec<T>& c_t,
                    const Vec<T>& c_sub, int t) {
  return reverse_update(sched, c_t, denoiser_forward(p, c_t, c_sub, t), t);
}

// Folds reverse steps from start_t down to 1, returning the reconstruction.
template <typename T, typename Predictor>
  requires std::invocable<Predictor&, const Vec<T>&, const Vec<T>&, int>
Vec<T> reverse_chain(Predictor&& predict, const DiffusionSchedule<T>& sched,
                     const Vec<T>& start, int start_t, const Vec<T>& c_sub) {
  sched.require_step(start_t);
  Vec<T> c = start;
  for (int t = start_t; t >= 1; --t) {
    c = reverse_step<T>(predict, sched, c, c_sub, t);
  }
  return c;
}

template <typename T>
Vec<T> reverse_chain(const DenoiserParams<T>& p,
                     const DiffusionSchedule<T>& sched, const Vec<T>& start,
                     int start_t, const Vec<T>& c_sub) {
  return reverse_chain<T>(
      [&p](const Vec<T>& c_t, const Vec<T>& cond, int t) {
        return denoiser_forward(p, c_t, cond, t);
      },
      sched, start, start_t, c_sub);
}

// Training-mode chain: keeps per-step caches so gradients can flow back
// through every reverse step.
template <typename T>
struct ChainCache {
  int start_t = 0;
  std::vector<Vec<T>> states;               // states[i] = c at t = start_t - i
  std::vector<DenoiserCache<T>> dn_caches;  // one per step
};

template <typename T>
Vec<T> reverse_chain_train(const DenoiserParams<T>& p,
                           const DiffusionSchedule<T>& sched,
                           const Vec<T>& start, int start_t,
                           const Vec<T>& c_sub, ChainCache<T>& cache) {
  sched.require_step(start_t);
  cache.start_t = start_t;
  cache.states.assign(1, start);
  cache.dn_caches.assign(static_cast<size_t>(start_t), DenoiserCache<T>{});
  for (int t = start_t; t >= 1; --t) {
    const size_t i = static_cast<size_t>(start_t - t);
    const Vec<T> eps =
        denoiser_forward(p, cache.states[i], c_sub, t, cache.dn_caches[i]);
    cache.states.push_back(reverse_update(sched, cache.states[i], eps, t));
  }
  return cache.states.back();
}

// Returns grad wrt the chain start state; c_sub grads accumulate into
// grad_c_sub. Parameter grads accumulate in-place.
template <typename T>
Vec<T> reverse_chain_backward(DenoiserParams<T>& p,
                              const DiffusionSchedule<T>& sched,
                              const ChainCache<T>& cache,
                              const Vec<T>& grad_c0, Vec<T>& grad_c_sub) {
  Vec<T> g = grad_c0;
  for (int t = 1; t <= cache.start_t; ++t) {
    const size_t i = static_cast<size_t>(cache.start_t - t);
    const T a = sched.alpha_at(t);
    const T inv_sqrt_a = T(1) / std::sqrt(a);
    const T coef = (T(1) - a) / std::sqrt(T(1) - sched.alpha_bar_at(t));
    Vec<T> g_eps(g.size());
    for (size_t j = 0; j < g.size(); ++j) {
      g_eps[j] = -coef * inv_sqrt_a * g[j];
    }
    auto [g_ct_mlp, g_csub] = denoiser_backward(p, cache.dn_caches[i], g_eps);
    for (size_t j = 0; j < g.size(); ++j) {
      g[j] = inv_sqrt_a * g[j] + g_ct_mlp[j];
    }
    axpy(T(1), g_csub, grad_c_sub);
  }
  return g;
}

// ---------------------------------------------------------------------------
// L1 constraint on the reconstructed representation
// ---------------------------------------------------------------------------

template <typename T>
T diff_loss(const Vec<T>& recon, const Vec<T>& target) {
  if (recon.size() != target.size()) {
    throw std::invalid_argument("diff_loss: length mismatch");
  }
  T acc = T(0);
  for (size_t i = 0; i < recon.size(); ++i) {
    acc += std::abs(recon[i] - target[i]);
  }
  return acc / static_cast<T>(recon.size());
}

// Accumulates d(loss)/d(recon) and d(loss)/d(target), scaled by `upstream`.
template <typename T>
void diff_loss_backward(const Vec<T>& recon, const Vec<T>& target, T upstream,
                        Vec<T>& grad_recon, Vec<T>& grad_target) {
  const T inv_n = upstream / static_cast<T>(recon.size());
  for (size_t i = 0; i < recon.size(); ++i) {
    const T r = recon[i] - target[i];
    const T s = r > T(0) ? inv_n : (r < T(0) ? -inv_n : T(0));
    grad_recon[i] += s;
    grad_target[i] -= s;
  }
}

}  // namespace psid
