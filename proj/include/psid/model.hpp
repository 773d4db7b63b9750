#pragma once

// Bundle of everything trainable plus the shared diffusion schedule, with a
// stable named-parameter visitation order used by the optimizer, EMA,
// checkpoints, and the gradient-check tests. Also hosts the full-resolution
// inference path.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "psid/diffusion.hpp"
#include "psid/pse.hpp"
#include "psid/rng.hpp"
#include "psid/spiformer.hpp"

namespace psid {

struct ModelConfig {
  int channels = 3;
  int latent = 256;       // structural representation length N

  // encoder
  int pse_blocks = 4;
  int pse_width = 64;
  int pse_hidden = 256;

  // diffusion branch
  int t_steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int den_hidden = 512;
  int time_dim = 64;

  // transformer denoiser
  int spi_width = 48;
  int spi_blocks = 4;
  int heads = 2;

  void validate() const {
    if (channels != 1 && channels != 3) {
      throw std::invalid_argument("model: channels must be 1 or 3");
    }
    if (latent < 1 || pse_blocks < 1 || pse_width < 1 || pse_hidden < 1 ||
        den_hidden < 1 || spi_width < 1 || spi_blocks < 1 || heads < 1) {
      throw std::invalid_argument("model: all sizes must be positive");
    }
    if (spi_width % heads != 0) {
      throw std::invalid_argument("model: heads must divide spi_width");
    }
    if (time_dim < 4 || time_dim % 2 != 0) {
      throw std::invalid_argument("model: time_dim must be even and >= 4");
    }
    if (t_steps < 1) throw std::invalid_argument("model: t_steps must be >= 1");
  }

  PseConfig pse_config() const {
    return PseConfig{channels, pse_blocks, pse_width, pse_hidden, latent};
  }
  DenoiserConfig denoiser_config() const {
    return DenoiserConfig{latent, den_hidden, time_dim};
  }
  SpiformerConfig spiformer_config() const {
    return SpiformerConfig{channels, spi_width, spi_blocks, heads, latent};
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct ModelParams {
  ModelConfig cfg;
  DiffusionSchedule<T> sched;
  PseParams<T> pse;
  DenoiserParams<T> den;
  SpiformerParams<T> spi;

  template <typename F>
  void visit(F&& f) {
    pse.visit([&](const std::string& n, Param<T>& p) { f("pse." + n, p); });
    den.visit([&](const std::string& n, Param<T>& p) { f("den." + n, p); });
    spi.visit([&](const std::string& n, Param<T>& p) { f("spi." + n, p); });
  }

  void zero_grads() {
    visit([](const std::string&, Param<T>& p) { p.zero_grad(); });
  }
};

template <typename T>
ModelParams<T> model_init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams<T> m;
  m.cfg = cfg;
  m.sched = make_schedule<T>(cfg.t_steps, cfg.beta_start, cfg.beta_end);
  m.pse = pse_init<T>(cfg.pse_config(), rng);
  m.den = denoiser_init<T>(cfg.denoiser_config(), rng);
  m.spi = spiformer_init<T>(cfg.spiformer_config(), rng);
  return m;
}

// Full-resolution inference: encode the image, run the reverse chain from a
// fresh unit-normal draw at t = T conditioned on that encoding, then denoise
// with the resulting prompt.
template <typename T>
Image<T> denoise_image(const ModelParams<T>& m, const Image<T>& img,
                       Rng& rng) {
  const Vec<T> c_x = pse_forward(m.pse, img);
  Vec<T> start(c_x.size());
  for (auto& v : start) v = static_cast<T>(rng.normal());
  const Vec<T> prompt =
      reverse_chain(m.den, m.sched, start, m.sched.t_steps, c_x);
  return spiformer_forward(m.spi, img, prompt);
}

}  // namespace psid
