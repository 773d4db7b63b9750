#pragma once

// Shared test utilities: random fixtures, the central-difference gradient
// checker, and a tiny scratch-directory RAII helper.

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "psid/image_io.hpp"
#include "psid/nn.hpp"
#include "psid/rng.hpp"
#include "psid/tensor.hpp"

namespace testutil {

template <typename T>
psid::Image<T> random_image(int h, int w, int c, psid::Rng& rng, double lo = 0.0,
                            double hi = 1.0) {
  psid::Image<T> img(h, w, c);
  for (auto& v : img.data) {
    v = static_cast<T>(lo + (hi - lo) * rng.uniform());
  }
  return img;
}

template <typename T>
psid::Vec<T> random_vec(size_t n, psid::Rng& rng, double scale = 1.0) {
  psid::Vec<T> v(n);
  for (auto& x : v) x = static_cast<T>(scale * rng.normal());
  return v;
}

// Central-difference check of analytic parameter gradients.
//
// `loss` must be a pure forward evaluation of the scalar objective whose
// analytic gradients are already stored in the Param::g fields. Samples
// `count` random parameter entries (all of them if fewer exist) and returns
// the worst guarded relative error |fd - an| / max(|fd|, |an|, floor).
//
// The floor keeps gradients that sit below the finite-difference noise level
// from dominating: with the fixed step 1e-5, truncation noise through deep
// compositions reaches ~1e-8, so end-to-end checks pass floor 1e-4 while
// single-module checks (O(1) gradients) keep the tight default.
template <typename T, typename Visitable, typename LossFn>
double fd_max_rel_err(Visitable& params, LossFn&& loss, size_t count,
                      psid::Rng& rng, double step = 1e-5,
                      double floor = 1e-6) {
  std::vector<psid::Param<T>*> plist;
  params.visit([&](const std::string&, psid::Param<T>& p) {
    if (p.size() > 0) plist.push_back(&p);
  });
  size_t total = 0;
  for (auto* p : plist) total += p->size();

  std::vector<std::pair<size_t, size_t>> picks;  // (tensor, entry)
  if (count >= total) {
    for (size_t ti = 0; ti < plist.size(); ++ti) {
      for (size_t j = 0; j < plist[ti]->size(); ++j) picks.emplace_back(ti, j);
    }
  } else {
    for (size_t k = 0; k < count; ++k) {
      size_t flat = static_cast<size_t>(rng.below(total));
      size_t ti = 0;
      while (flat >= plist[ti]->size()) {
        flat -= plist[ti]->size();
        ++ti;
      }
      picks.emplace_back(ti, flat);
    }
  }

  double worst = 0.0;
  for (const auto& [ti, j] : picks) {
    psid::Param<T>& p = *plist[ti];
    const T saved = p.w[j];
    p.w[j] = saved + static_cast<T>(step);
    const double lp = static_cast<double>(loss());
    p.w[j] = saved - static_cast<T>(step);
    const double lm = static_cast<double>(loss());
    p.w[j] = saved;
    const double fd = (lp - lm) / (2.0 * step);
    const double an = static_cast<double>(p.g[j]);
    const double denom = std::max({std::abs(fd), std::abs(an), floor});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return worst;
}

// Same idea for gradients with respect to a flat value array (loss inputs).
template <typename T, typename LossFn>
double fd_max_rel_err_values(psid::Vec<T>& values,
                             const psid::Vec<T>& analytic, LossFn&& loss,
                             size_t count, psid::Rng& rng,
                             double step = 1e-5) {
  double worst = 0.0;
  const size_t n = values.size();
  for (size_t k = 0; k < count; ++k) {
    const size_t j = (count >= n) ? k % n : static_cast<size_t>(rng.below(n));
    const T saved = values[j];
    values[j] = saved + static_cast<T>(step);
    const double lp = static_cast<double>(loss());
    values[j] = saved - static_cast<T>(step);
    const double lm = static_cast<double>(loss());
    values[j] = saved;
    const double fd = (lp - lm) / (2.0 * step);
    const double an = static_cast<double>(analytic[j]);
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return worst;
}

// Joins a module's parameters with a layer-norm affine so the gradient
// checker can sweep both at once.
template <typename Module, typename T = double>
struct WithNorm {
  Module* module;
  psid::LayerNormParams<T>* ln;
  template <typename F>
  void visit(F&& fn) {
    module->visit(fn);
    fn("ln.gamma", ln->gamma);
    fn("ln.beta", ln->beta);
  }
};

// Unique scratch directory removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("psid_test_" + tag + "_" + std::to_string(++counter) + "_" +
             std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& rel = "") const {
    return rel.empty() ? path_.string() : (path_ / rel).string();
  }

 private:
  std::filesystem::path path_;
};

inline std::vector<unsigned char> slurp(const std::string& path) {
  return psid::detail::read_file(path);
}

}  // namespace testutil
