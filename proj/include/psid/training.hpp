#pragma once

// Optimization loop: Adam with bias correction, EMA shadow weights, the
// per-iteration orchestration (sample -> encode -> diffuse -> denoise ->
// replay -> losses -> backprop -> update), checkpointing, and CSV logging.
//
// Replay runs on live weights inside each iteration; evaluation and the
// denoise command read the EMA shadow. Everything is single-threaded and
// draws from one Rng stream in a fixed order, so runs with equal seeds are
// bit-identical and a run resumed from a checkpoint continues exactly.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "psid/image_io.hpp"
#include "psid/losses.hpp"
#include "psid/model.hpp"
#include "psid/sampling.hpp"
#include "psid/tensor.hpp"

namespace psid {

struct TrainConfig {
  double lr = 2e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  double ema_decay = 0.999;
  std::uint64_t steps = 10000;
  int batch = 4;
  int patch = 32;
  LossWeights weights;
  std::uint64_t lr_halve_every = 0;  // 0: resolve to steps / 5
  std::uint64_t seed = 1;
  std::uint64_t checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const {
    if (lr <= 0) throw std::invalid_argument("train: lr must be > 0");
    if (steps < 1) throw std::invalid_argument("train: steps must be >= 1");
    if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
    if (patch < 2 || patch % 2 != 0) {
      throw std::invalid_argument("train: patch must be even and >= 2");
    }
    weights.validate();
  }

  std::uint64_t resolved_halve_every() const {
    if (lr_halve_every > 0) return lr_halve_every;
    return steps >= 5 ? steps / 5 : steps + 1;
  }

  double lr_at(std::uint64_t step) const {
    const std::uint64_t halve = resolved_halve_every();
    const std::uint64_t halvings = (step - 1) / halve;
    return lr * std::pow(0.5, static_cast<double>(halvings));
  }
};

// ---------------------------------------------------------------------------
// Trainer state: live params + Adam moments + EMA shadow, in visit order
// ---------------------------------------------------------------------------

template <typename T>
struct ModelState {
  ModelParams<T> params;
  std::vector<Vec<T>> ema;
  std::vector<Vec<T>> adam_m;
  std::vector<Vec<T>> adam_v;
  std::uint64_t step = 0;

  void attach_buffers() {
    ema.clear();
    adam_m.clear();
    adam_v.clear();
    params.visit([&](const std::string&, Param<T>& p) {
      ema.push_back(p.w);
      adam_m.emplace_back(p.size(), T(0));
      adam_v.emplace_back(p.size(), T(0));
    });
  }
};

template <typename T>
ModelState<T> model_state_init(const ModelConfig& cfg, Rng& rng) {
  ModelState<T> s;
  s.params = model_init<T>(cfg, rng);
  s.attach_buffers();
  return s;
}

// Copy of the model with EMA weights substituted for the live ones.
template <typename T>
ModelParams<T> ema_model(const ModelState<T>& state) {
  ModelParams<T> m = state.params;
  size_t i = 0;
  m.visit([&](const std::string&, Param<T>& p) { p.w = state.ema[i++]; });
  return m;
}

// Bias-corrected Adam update from the accumulated gradients. Refuses to
// apply non-finite gradients.
template <typename T>
void adam_step(ModelState<T>& state, double lr, const TrainConfig& cfg) {
  state.step += 1;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  size_t i = 0;
  state.params.visit([&](const std::string& name, Param<T>& p) {
    Vec<T>& m = state.adam_m[i];
    Vec<T>& v = state.adam_v[i];
    ++i;
    for (size_t j = 0; j < p.size(); ++j) {
      const double g = static_cast<double>(p.g[j]);
      if (!std::isfinite(g)) {
        throw std::runtime_error("adam: non-finite gradient in " + name +
                                 " at optimizer step " +
                                 std::to_string(state.step));
      }
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / corr1;
      const double vhat = vj / corr2;
      p.w[j] = static_cast<T>(static_cast<double>(p.w[j]) -
                              lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
  });
}

template <typename T>
void ema_update(ModelState<T>& state, double decay) {
  const T one_minus = static_cast<T>(1.0 - decay);
  size_t i = 0;
  state.params.visit([&](const std::string&, Param<T>& p) {
    Vec<T>& shadow = state.ema[i++];
    for (size_t j = 0; j < p.size(); ++j) {
      shadow[j] += one_minus * (p.w[j] - shadow[j]);
    }
  });
}

// ---------------------------------------------------------------------------
// Per-patch pass
// ---------------------------------------------------------------------------

// All randomness a single training patch consumes, drawn up front so tests
// can pin it while probing gradients.
template <typename T>
struct PatchDraws {
  SamplePattern pattern;
  int t = 1;            // sampled diffusion step
  Vec<T> eps;           // forward-diffusion noise
  Vec<T> replay_start;  // reverse-chain start for the replay pass
};

template <typename T>
PatchDraws<T> draw_patch_randomness(int h, int w, int latent, int t_steps,
                                    Rng& rng) {
  PatchDraws<T> d;
  d.pattern = draw_pattern(h, w, rng);
  d.t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(t_steps)));
  d.eps.resize(latent);
  for (auto& v : d.eps) v = static_cast<T>(rng.normal());
  d.replay_start.resize(latent);
  for (auto& v : d.replay_start) v = static_cast<T>(rng.normal());
  return d;
}

// Inference with an injected chain start instead of a fresh draw.
template <typename T>
Image<T> denoise_image_with_start(const ModelParams<T>& m, const Image<T>& img,
                                  const Vec<T>& start) {
  const Vec<T> c_x = pse_forward(m.pse, img);
  const Vec<T> prompt =
      reverse_chain(m.den, m.sched, start, m.sched.t_steps, c_x);
  return spiformer_forward(m.spi, img, prompt);
}

template <typename T>
ReplayTerms<T> scale_replay_with_start(const ModelParams<T>& m,
                                       const Image<T>& x,
                                       const SamplePattern& pattern,
                                       const Vec<T>& start) {
  const Image<T> fx = denoise_image_with_start(m, x, start);
  auto subs = apply_pattern(fx, pattern);
  return ReplayTerms<T>{std::move(subs[0]), std::move(subs[1]),
                        std::move(subs[2])};
}

template <typename T>
struct PatchLosses {
  T rec = T(0);
  T sc = T(0);
  T diff = T(0);
  T total = T(0);
};

// The differentiable part of one training patch: encode both scales, run the
// forward diffusion to the sampled step and the reverse chain back, denoise
// the sub-image with the reconstructed prompt, and score against the fixed
// replay terms. When with_grad is set, parameter gradients accumulate scaled
// by grad_scale.
template <typename T>
PatchLosses<T> patch_pass(ModelParams<T>& m, const Image<T>& x,
                          const Image<T>& m1, const Image<T>& m2,
                          const Image<T>& m3, const PatchDraws<T>& draws,
                          const ReplayTerms<T>& replay, const LossWeights& w,
                          T grad_scale, bool with_grad) {
  PseCache<T> cache_sub, cache_org;
  const Vec<T> c_sub = pse_forward(m.pse, m1, cache_sub);
  const Vec<T> c_org0 = pse_forward(m.pse, x, cache_org);

  const Vec<T> c_t = forward_diffuse(m.sched, c_org0, draws.t, draws.eps);
  ChainCache<T> chain_cache;
  const Vec<T> c_hat0 =
      reverse_chain_train(m.den, m.sched, c_t, draws.t, c_sub, chain_cache);

  SpiformerCache<T> spi_cache;
  const Image<T> pred = spiformer_forward(m.spi, m1, c_hat0, spi_cache);

  PatchLosses<T> out;
  out.rec = rec_loss(pred, m2, m3);
  out.sc = sc_loss(pred, m2, m3, replay);
  out.diff = diff_loss(c_hat0, c_org0);
  out.total = total_loss(out.rec, out.sc, out.diff, w);

  if (with_grad) {
    Image<T> g_pred(pred.h, pred.w, pred.c);
    rec_loss_backward(pred, m2, m3, static_cast<T>(w.rec) * grad_scale,
                      g_pred);
    sc_loss_backward(pred, m2, m3, replay, static_cast<T>(w.sc) * grad_scale,
                     g_pred);

    Vec<T> g_c_hat0(c_hat0.size(), T(0));
    spiformer_backward(m.spi, spi_cache, c_hat0, g_pred, g_c_hat0);

    Vec<T> g_c_org0(c_org0.size(), T(0));
    diff_loss_backward(c_hat0, c_org0, static_cast<T>(w.diff) * grad_scale,
                       g_c_hat0, g_c_org0);

    Vec<T> g_c_sub(c_sub.size(), T(0));
    const Vec<T> g_c_t = reverse_chain_backward(m.den, m.sched, chain_cache,
                                                g_c_hat0, g_c_sub);

    const T sqrt_ab = std::sqrt(m.sched.alpha_bar_at(draws.t));
    axpy(sqrt_ab, g_c_t, g_c_org0);

    pse_backward(m.pse, cache_org, g_c_org0);
    pse_backward(m.pse, cache_sub, g_c_sub);
  }
  return out;
}

// ---------------------------------------------------------------------------
// One optimizer iteration over a batch of noisy patches
// ---------------------------------------------------------------------------

template <typename T>
PatchLosses<T> train_step(ModelState<T>& state,
                          const std::vector<Image<T>>& patches,
                          const TrainConfig& cfg, double lr, Rng& rng) {
  if (patches.empty()) throw std::invalid_argument("train_step: empty batch");
  state.params.zero_grads();
  const T scale = T(1) / static_cast<T>(patches.size());

  PatchLosses<T> mean;
  for (const Image<T>& x : patches) {
    if (x.h % 2 != 0 || x.w % 2 != 0) {
      throw std::invalid_argument("train_step: patch dims must be even");
    }
    PatchDraws<T> draws = draw_patch_randomness<T>(
        x.h, x.w, state.params.cfg.latent, state.params.cfg.t_steps, rng);
    auto subs = apply_pattern(x, draws.pattern);
    const ReplayTerms<T> replay = scale_replay_with_start(
        state.params, x, draws.pattern, draws.replay_start);
    const PatchLosses<T> l =
        patch_pass(state.params, x, subs[0], subs[1], subs[2], draws, replay,
                   cfg.weights, scale, /*with_grad=*/true);
    if (!std::isfinite(static_cast<double>(l.total))) {
      throw std::runtime_error(
          "train_step: non-finite loss at optimizer step " +
          std::to_string(state.step + 1) + " (rec=" + std::to_string(l.rec) +
          " sc=" + std::to_string(l.sc) + " diff=" + std::to_string(l.diff) +
          ")");
    }
    mean.rec += l.rec * scale;
    mean.sc += l.sc * scale;
    mean.diff += l.diff * scale;
    mean.total += l.total * scale;
  }

  adam_step(state, lr, cfg);
  ema_update(state, cfg.ema_decay);
  return mean;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Versioned binary container, little-endian:
//   magic "PSIDCKPT", version u32
//   model config (13 fixed fields)
//   optimizer step u64, rng state 4 x u64
//   blob count u32, then named f32 blobs with shapes
// Blobs cover live weights, Adam moments, and the EMA shadow, so a resumed
// run continues bit-exactly.

namespace detail {

inline void put_u64le(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
  }
}

inline std::uint64_t get_u64le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f64le(std::vector<unsigned char>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64le(out, bits);
}

inline double get_f64le(const unsigned char* p) {
  const std::uint64_t bits = get_u64le(p);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

struct ByteCursor {
  const std::vector<unsigned char>& bytes;
  size_t pos = 0;
  const unsigned char* take(size_t n, const std::string& what) {
    if (pos + n > bytes.size()) {
      throw std::runtime_error("checkpoint truncated while reading " + what);
    }
    const unsigned char* p = &bytes[pos];
    pos += n;
    return p;
  }
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::vector<unsigned char> encode_checkpoint(ModelState<T>& state,
                                             const Rng& rng) {
  std::vector<unsigned char> out;
  const char magic[8] = {'P', 'S', 'I', 'D', 'C', 'K', 'P', 'T'};
  out.insert(out.end(), magic, magic + 8);
  detail::put_u32le(out, kCheckpointVersion);

  const ModelConfig& c = state.params.cfg;
  for (int v : {c.channels, c.latent, c.pse_blocks, c.pse_width, c.pse_hidden,
                c.t_steps, c.den_hidden, c.time_dim, c.spi_width, c.spi_blocks,
                c.heads}) {
    detail::put_u32le(out, static_cast<std::uint32_t>(v));
  }
  detail::put_f64le(out, c.beta_start);
  detail::put_f64le(out, c.beta_end);

  detail::put_u64le(out, state.step);
  for (std::uint64_t word : rng.state()) detail::put_u64le(out, word);

  std::uint32_t blob_count = 0;
  state.params.visit([&](const std::string&, Param<T>&) { blob_count += 4; });
  detail::put_u32le(out, blob_count);

  auto put_blob = [&out](const std::string& name,
                         const std::vector<int>& shape, const Vec<T>& data) {
    out.push_back(static_cast<unsigned char>(name.size() & 0xff));
    out.push_back(static_cast<unsigned char>((name.size() >> 8) & 0xff));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<unsigned char>(shape.size()));
    for (int d : shape) detail::put_u32le(out, static_cast<std::uint32_t>(d));
    for (const T v : data) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32le(out, bits);
    }
  };

  size_t i = 0;
  state.params.visit([&](const std::string& name, Param<T>& p) {
    put_blob("w/" + name, p.shape, p.w);
    put_blob("m/" + name, p.shape, state.adam_m[i]);
    put_blob("v/" + name, p.shape, state.adam_v[i]);
    put_blob("ema/" + name, p.shape, state.ema[i]);
    ++i;
  });
  return out;
}

template <typename T>
void save_checkpoint(ModelState<T>& state, const Rng& rng,
                     const std::string& path) {
  detail::write_file(path, encode_checkpoint(state, rng));
}

// Restores a trainer state and the training Rng. When expected is non-null,
// the stored model config must match it exactly.
template <typename T>
std::pair<ModelState<T>, Rng> load_checkpoint(const std::string& path,
                                              const ModelConfig* expected) {
  const auto bytes = detail::read_file(path);
  detail::ByteCursor cur{bytes};
  const unsigned char* magic = cur.take(8, "magic");
  if (std::memcmp(magic, "PSIDCKPT", 8) != 0) {
    throw std::runtime_error("not a PSID checkpoint: " + path);
  }
  const std::uint32_t version = detail::get_u32le(cur.take(4, "version"));
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version) + ": " + path);
  }

  ModelConfig cfg;
  auto read_i = [&cur](const char* what) {
    return static_cast<int>(detail::get_u32le(cur.take(4, what)));
  };
  cfg.channels = read_i("channels");
  cfg.latent = read_i("latent");
  cfg.pse_blocks = read_i("pse_blocks");
  cfg.pse_width = read_i("pse_width");
  cfg.pse_hidden = read_i("pse_hidden");
  cfg.t_steps = read_i("t_steps");
  cfg.den_hidden = read_i("den_hidden");
  cfg.time_dim = read_i("time_dim");
  cfg.spi_width = read_i("spi_width");
  cfg.spi_blocks = read_i("spi_blocks");
  cfg.heads = read_i("heads");
  cfg.beta_start = detail::get_f64le(cur.take(8, "beta_start"));
  cfg.beta_end = detail::get_f64le(cur.take(8, "beta_end"));

  if (expected && !(cfg == *expected)) {
    throw std::invalid_argument(
        "checkpoint model config does not match the requested config "
        "(stored latent " +
        std::to_string(cfg.latent) + ", spi " + std::to_string(cfg.spi_width) +
        "x" + std::to_string(cfg.spi_blocks) + " vs requested latent " +
        std::to_string(expected->latent) + ", spi " +
        std::to_string(expected->spi_width) + "x" +
        std::to_string(expected->spi_blocks) + "): " + path);
  }

  ModelState<T> state;
  Rng stub(0);
  state.params = model_init<T>(cfg, stub);  // shapes only; weights overwritten
  state.attach_buffers();
  state.step = detail::get_u64le(cur.take(8, "step"));
  std::array<std::uint64_t, 4> rng_state;
  for (auto& word : rng_state) word = detail::get_u64le(cur.take(8, "rng"));
  Rng rng(0);
  rng.set_state(rng_state);

  const std::uint32_t blob_count = detail::get_u32le(cur.take(4, "blob count"));
  std::uint32_t expected_blobs = 0;
  state.params.visit([&](const std::string&, Param<T>&) { expected_blobs += 4; });
  if (blob_count != expected_blobs) {
    throw std::runtime_error("checkpoint blob count mismatch: " + path);
  }

  auto read_blob = [&cur, &path](const std::string& name,
                                 const std::vector<int>& shape, Vec<T>& data) {
    const unsigned char* np = cur.take(2, "blob name length");
    const size_t name_len = static_cast<size_t>(np[0]) | (static_cast<size_t>(np[1]) << 8);
    const unsigned char* nb = cur.take(name_len, "blob name");
    const std::string stored(reinterpret_cast<const char*>(nb), name_len);
    if (stored != name) {
      throw std::runtime_error("checkpoint blob order mismatch (got '" +
                               stored + "', want '" + name + "'): " + path);
    }
    const std::uint8_t ndim = *cur.take(1, "blob rank");
    if (ndim != shape.size()) {
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": " +
                               path);
    }
    size_t count = 1;
    for (size_t d = 0; d < ndim; ++d) {
      const std::uint32_t dim = detail::get_u32le(cur.take(4, "blob dim"));
      if (static_cast<int>(dim) != shape[d]) {
        throw std::runtime_error("checkpoint shape mismatch for " + name +
                                 " (dim " + std::to_string(d) + " is " +
                                 std::to_string(dim) + ", want " +
                                 std::to_string(shape[d]) + "): " + path);
      }
      count *= dim;
    }
    const unsigned char* payload = cur.take(count * 4, "blob payload");
    data.resize(count);
    for (size_t j = 0; j < count; ++j) {
      const std::uint32_t bits = detail::get_u32le(payload + j * 4);
      float f;
      std::memcpy(&f, &bits, 4);
      data[j] = static_cast<T>(f);
    }
  };

  size_t i = 0;
  state.params.visit([&](const std::string& name, Param<T>& p) {
    read_blob("w/" + name, p.shape, p.w);
    read_blob("m/" + name, p.shape, state.adam_m[i]);
    read_blob("v/" + name, p.shape, state.adam_v[i]);
    read_blob("ema/" + name, p.shape, state.ema[i]);
    ++i;
  });
  if (cur.pos != bytes.size()) {
    throw std::runtime_error("trailing bytes in checkpoint: " + path);
  }
  return {std::move(state), rng};
}

// ---------------------------------------------------------------------------
// Full training run
// ---------------------------------------------------------------------------

template <typename T>
struct TrainRun {
  ModelState<T> state;
  Rng rng{0};
};

// Trains on patches cropped from `dataset`, logging one CSV row per step and
// writing periodic plus final checkpoints. Pass resume_from to continue a
// previous run; the loss log is then appended from the restored step.
template <typename T>
TrainRun<T> run_training(const ModelConfig& model_cfg, const TrainConfig& cfg,
                         const std::vector<Image<T>>& dataset,
                         const std::string& log_path,
                         const std::string& checkpoint_path,
                         const std::string& resume_from = "") {
  cfg.validate();
  model_cfg.validate();
  if (dataset.empty()) {
    throw std::invalid_argument("run_training: empty dataset");
  }
  for (const auto& img : dataset) {
    if (img.h < cfg.patch || img.w < cfg.patch) {
      throw std::invalid_argument(
          "run_training: image smaller than the training patch size");
    }
    if (img.c != model_cfg.channels) {
      throw std::invalid_argument(
          "run_training: dataset channels do not match the model");
    }
  }

  TrainRun<T> run;
  if (resume_from.empty()) {
    run.rng = Rng(cfg.seed);
    run.state = model_state_init<T>(model_cfg, run.rng);
  } else {
    auto [state, rng] = load_checkpoint<T>(resume_from, &model_cfg);
    run.state = std::move(state);
    run.rng = rng;
  }

  std::FILE* log = nullptr;
  if (!log_path.empty()) {
    log = std::fopen(log_path.c_str(), resume_from.empty() ? "wb" : "ab");
    if (!log) {
      throw std::runtime_error("cannot open training log: " + log_path);
    }
    if (resume_from.empty()) {
      std::fputs("step,loss_rec,loss_sc,loss_diff,loss_total,lr\n", log);
    }
  }

  try {
    while (run.state.step < cfg.steps) {
      const std::uint64_t step = run.state.step + 1;
      const double lr = cfg.lr_at(step);

      std::vector<Image<T>> batch;
      batch.reserve(cfg.batch);
      for (int b = 0; b < cfg.batch; ++b) {
        const size_t idx =
            static_cast<size_t>(run.rng.below(dataset.size()));
        batch.push_back(crop_patch(dataset[idx], cfg.patch, run.rng));
      }

      const PatchLosses<T> l = train_step(run.state, batch, cfg, lr, run.rng);

      if (log) {
        std::fprintf(log, "%llu,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                     static_cast<unsigned long long>(step),
                     static_cast<double>(l.rec), static_cast<double>(l.sc),
                     static_cast<double>(l.diff), static_cast<double>(l.total),
                     lr);
      }
      if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 &&
          step < cfg.steps && !checkpoint_path.empty()) {
        save_checkpoint(run.state, run.rng,
                        checkpoint_path + ".step" + std::to_string(step));
      }
    }
  } catch (...) {
    if (log) std::fclose(log);
    throw;
  }
  if (log) std::fclose(log);
  if (!checkpoint_path.empty()) {
    save_checkpoint(run.state, run.rng, checkpoint_path);
  }
  return run;
}

}  // namespace psid
