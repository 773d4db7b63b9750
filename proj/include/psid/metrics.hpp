#pragma once

// PSNR / SSIM evaluation. PSNR uses the plain log-ratio definition with an
// infinity sentinel for identical images; SSIM is the windowed formulation
// (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03), computed per
// channel over all fully covered window positions and averaged. Dataset PSNR
// is averaged in dB.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "psid/image_io.hpp"
#include "psid/tensor.hpp"

namespace psid {

template <typename T>
double psnr(const Image<T>& a, const Image<T>& b, double peak = 1.0) {
  require_same_shape(a, b, "psnr");
  if (peak <= 0) throw std::invalid_argument("psnr: peak must be > 0");
  double mse = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<size_t>(size) * size);
  const int half = size / 2;
  double sum = 0.0;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dy = y - half;
      const double dx = x - half;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      w[static_cast<size_t>(y) * size + x] = v;
      sum += v;
    }
  }
  for (auto& v : w) v /= sum;
  return w;
}

template <typename T>
double ssim(const Image<T>& a, const Image<T>& b, double peak = 1.0) {
  require_same_shape(a, b, "ssim");
  constexpr int kWindow = 11;
  constexpr double kSigma = 1.5;
  if (a.h < kWindow || a.w < kWindow) {
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  }
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  static const std::vector<double> window = gaussian_window(kWindow, kSigma);

  double total = 0.0;
  size_t count = 0;
  for (int ch = 0; ch < a.c; ++ch) {
    for (int y = 0; y + kWindow <= a.h; ++y) {
      for (int x = 0; x + kWindow <= a.w; ++x) {
        double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
        for (int wy = 0; wy < kWindow; ++wy) {
          for (int wx = 0; wx < kWindow; ++wx) {
            const double wgt = window[static_cast<size_t>(wy) * kWindow + wx];
            const double va = static_cast<double>(a.at(y + wy, x + wx, ch));
            const double vb = static_cast<double>(b.at(y + wy, x + wx, ch));
            mu_a += wgt * va;
            mu_b += wgt * vb;
            aa += wgt * va * va;
            bb += wgt * vb * vb;
            ab += wgt * va * vb;
          }
        }
        const double var_a = aa - mu_a * mu_a;
        const double var_b = bb - mu_b * mu_b;
        const double cov = ab - mu_a * mu_b;
        total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

struct MetricReport {
  std::vector<std::string> names;
  std::vector<double> psnr_db;
  std::vector<double> ssim_score;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  size_t count() const { return names.size(); }
};

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".png" || ext == ".psid";
}

// Pairs files by name (sorted) between a result directory and a reference
// directory. A result file without a reference counterpart is an error.
inline MetricReport evaluate_dir(const std::string& result_dir,
                                 const std::string& reference_dir,
                                 double peak = 1.0) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(result_dir)) {
    throw std::runtime_error("not a directory: " + result_dir);
  }
  if (!fs::is_directory(reference_dir)) {
    throw std::runtime_error("not a directory: " + reference_dir);
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(result_dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    throw std::runtime_error("no images found in " + result_dir);
  }

  MetricReport report;
  double psnr_sum = 0.0, ssim_sum = 0.0;
  for (const auto& f : files) {
    const fs::path ref = fs::path(reference_dir) / f.filename();
    if (!fs::exists(ref)) {
      throw std::runtime_error("missing reference counterpart for " +
                               f.filename().string() + " in " + reference_dir);
    }
    const ImageF a = load_image<float>(f.string());
    const ImageF b = load_image<float>(ref.string());
    const double p = psnr(a, b, peak);
    const double s = ssim(a, b, peak);
    report.names.push_back(f.filename().string());
    report.psnr_db.push_back(p);
    report.ssim_score.push_back(s);
    psnr_sum += p;
    ssim_sum += s;
  }
  report.mean_psnr = psnr_sum / static_cast<double>(report.count());
  report.mean_ssim = ssim_sum / static_cast<double>(report.count());
  return report;
}

}  // namespace psid
