#pragma once

// Synthetic corruption of clean images. Four settings: fixed / ranged
// Gaussian (sigma quoted on the 0-255 scale) and fixed / ranged Poisson
// (lambda on the event-rate scale). Range settings draw one level per image.
// Outputs are intentionally not clamped: clamping would bias the noise mean
// near 0 and 1 and break the zero-mean premise the training objective needs.

#include <stdexcept>
#include <string>

#include "psid/rng.hpp"
#include "psid/tensor.hpp"

namespace psid {

struct NoiseSpec {
  enum class Kind { GaussianFixed, GaussianRange, PoissonFixed, PoissonRange };

  Kind kind = Kind::GaussianFixed;
  double sigma = 25.0;       // GaussianFixed, 0-255 scale
  double sigma_min = 5.0;    // GaussianRange
  double sigma_max = 50.0;
  double lambda = 30.0;      // PoissonFixed
  double lambda_min = 5.0;   // PoissonRange
  double lambda_max = 50.0;

  void validate() const {
    switch (kind) {
      case Kind::GaussianFixed:
        if (sigma < 0) throw std::invalid_argument("noise: sigma must be >= 0");
        break;
      case Kind::GaussianRange:
        if (sigma_min < 0 || sigma_min > sigma_max)
          throw std::invalid_argument("noise: need 0 <= sigma_min <= sigma_max");
        break;
      case Kind::PoissonFixed:
        if (lambda <= 0) throw std::invalid_argument("noise: lambda must be > 0");
        break;
      case Kind::PoissonRange:
        if (lambda_min <= 0 || lambda_min > lambda_max)
          throw std::invalid_argument("noise: need 0 < lambda_min <= lambda_max");
        break;
    }
  }
};

template <typename T>
Image<T> apply_noise(const Image<T>& clean, const NoiseSpec& spec, Rng& rng) {
  spec.validate();
  Image<T> out(clean.h, clean.w, clean.c);
  switch (spec.kind) {
    case NoiseSpec::Kind::GaussianFixed:
    case NoiseSpec::Kind::GaussianRange: {
      double sigma = spec.sigma;
      if (spec.kind == NoiseSpec::Kind::GaussianRange) {
        sigma = spec.sigma_min + (spec.sigma_max - spec.sigma_min) * rng.uniform();
      }
      const double scale = sigma / 255.0;
      for (size_t i = 0; i < clean.data.size(); ++i) {
        out.data[i] =
            clean.data[i] + static_cast<T>(scale * rng.normal());
      }
      break;
    }
    case NoiseSpec::Kind::PoissonFixed:
    case NoiseSpec::Kind::PoissonRange: {
      double lambda = spec.lambda;
      if (spec.kind == NoiseSpec::Kind::PoissonRange) {
        lambda =
            spec.lambda_min + (spec.lambda_max - spec.lambda_min) * rng.uniform();
      }
      for (size_t i = 0; i < clean.data.size(); ++i) {
        const double mean = lambda * static_cast<double>(clean.data[i]);
        out.data[i] =
            static_cast<T>(static_cast<double>(rng.poisson(mean)) / lambda);
      }
      break;
    }
  }
  return out;
}

inline std::string noise_kind_name(NoiseSpec::Kind k) {
  switch (k) {
    case NoiseSpec::Kind::GaussianFixed: return "gaussian";
    case NoiseSpec::Kind::GaussianRange: return "gaussian_range";
    case NoiseSpec::Kind::PoissonFixed: return "poisson";
    case NoiseSpec::Kind::PoissonRange: return "poisson_range";
  }
  return "?";
}

}  // namespace psid
