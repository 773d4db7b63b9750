#pragma once

// Flat key-value run configuration: one `key = value` per line, `#` comments,
// unknown keys rejected so typos cannot silently fall back to defaults.

#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include "psid/model.hpp"
#include "psid/noise.hpp"
#include "psid/training.hpp"

namespace psid {

class RunConfig {
 public:
  static RunConfig parse_file(const std::string& path) {
    const auto bytes = detail::read_file(path);
    return parse_text(std::string(bytes.begin(), bytes.end()), path);
  }

  static RunConfig parse_text(const std::string& text,
                              const std::string& origin = "<memory>") {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const size_t eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument(origin + ":" + std::to_string(line_no) +
                                    ": expected 'key = value'");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) {
        throw std::invalid_argument(origin + ":" + std::to_string(line_no) +
                                    ": empty key");
      }
      if (!known_keys().count(key)) {
        throw std::invalid_argument(origin + ":" + std::to_string(line_no) +
                                    ": unknown key '" + key + "'");
      }
      if (cfg.values_.count(key)) {
        throw std::invalid_argument(origin + ":" + std::to_string(line_no) +
                                    ": duplicate key '" + key + "'");
      }
      cfg.values_[key] = value;
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
      throw std::invalid_argument("config: missing required key '" + key + "'");
    }
    return it->second;
  }

  std::string get_string(const std::string& key, const std::string& dflt) const {
    auto it = values_.find(key);
    return it == values_.end() ? dflt : it->second;
  }

  double get_double(const std::string& key, double dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    return parse_double(key, it->second);
  }

  std::int64_t get_int(const std::string& key, std::int64_t dflt) const {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    return parse_int(key, it->second);
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.channels = static_cast<int>(get_int("model.channels", m.channels));
    m.latent = static_cast<int>(get_int("model.n", m.latent));
    m.pse_blocks = static_cast<int>(get_int("model.r", m.pse_blocks));
    m.pse_width = static_cast<int>(get_int("model.c_pse", m.pse_width));
    m.pse_hidden = static_cast<int>(get_int("model.n_hidden", m.pse_hidden));
    m.t_steps = static_cast<int>(get_int("model.t", m.t_steps));
    m.beta_start = get_double("model.beta_start", m.beta_start);
    m.beta_end = get_double("model.beta_end", m.beta_end);
    m.den_hidden = static_cast<int>(get_int("model.h_d", m.den_hidden));
    m.time_dim = static_cast<int>(get_int("model.time_dim", m.time_dim));
    m.spi_width = static_cast<int>(get_int("model.d", m.spi_width));
    m.spi_blocks = static_cast<int>(get_int("model.b", m.spi_blocks));
    m.heads = static_cast<int>(get_int("model.heads", m.heads));
    m.validate();
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.lr = get_double("train.lr", t.lr);
    t.adam_beta1 = get_double("train.adam_beta1", t.adam_beta1);
    t.adam_beta2 = get_double("train.adam_beta2", t.adam_beta2);
    t.adam_eps = get_double("train.adam_eps", t.adam_eps);
    t.ema_decay = get_double("train.ema_decay", t.ema_decay);
    t.steps = static_cast<std::uint64_t>(get_int("train.steps", 10000));
    t.batch = static_cast<int>(get_int("train.batch", t.batch));
    t.patch = static_cast<int>(get_int("train.patch", t.patch));
    t.weights.rec = get_double("train.w_rec", t.weights.rec);
    t.weights.sc = get_double("train.w_sc", t.weights.sc);
    t.weights.diff = get_double("train.w_diff", t.weights.diff);
    t.lr_halve_every =
        static_cast<std::uint64_t>(get_int("train.lr_halve_every", 0));
    t.seed = static_cast<std::uint64_t>(get_int("train.seed", 1));
    t.checkpoint_every =
        static_cast<std::uint64_t>(get_int("train.checkpoint_every", 0));
    t.validate();
    return t;
  }

  NoiseSpec noise_spec() const {
    NoiseSpec n;
    const std::string kind = get_string("noise.kind", "gaussian");
    if (kind == "gaussian") {
      n.kind = NoiseSpec::Kind::GaussianFixed;
    } else if (kind == "gaussian_range") {
      n.kind = NoiseSpec::Kind::GaussianRange;
    } else if (kind == "poisson") {
      n.kind = NoiseSpec::Kind::PoissonFixed;
    } else if (kind == "poisson_range") {
      n.kind = NoiseSpec::Kind::PoissonRange;
    } else {
      throw std::invalid_argument("config: unknown noise.kind '" + kind + "'");
    }
    n.sigma = get_double("noise.sigma", n.sigma);
    n.sigma_min = get_double("noise.sigma_min", n.sigma_min);
    n.sigma_max = get_double("noise.sigma_max", n.sigma_max);
    n.lambda = get_double("noise.lambda", n.lambda);
    n.lambda_min = get_double("noise.lambda_min", n.lambda_min);
    n.lambda_max = get_double("noise.lambda_max", n.lambda_max);
    n.validate();
    return n;
  }

 private:
  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "model.channels", "model.n", "model.r", "model.c_pse",
        "model.n_hidden", "model.t", "model.beta_start", "model.beta_end",
        "model.h_d", "model.time_dim", "model.d", "model.b", "model.heads",
        "train.lr", "train.adam_beta1", "train.adam_beta2", "train.adam_eps",
        "train.ema_decay", "train.steps", "train.batch", "train.patch",
        "train.w_rec", "train.w_sc", "train.w_diff", "train.lr_halve_every",
        "train.seed", "train.checkpoint_every",
        "noise.kind", "noise.sigma", "noise.sigma_min", "noise.sigma_max",
        "noise.lambda", "noise.lambda_min", "noise.lambda_max",
        "paths.train_dir", "paths.checkpoint", "paths.log",
    };
    return keys;
  }

  static std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
  }

  static double parse_double(const std::string& key, const std::string& v) {
    try {
      size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing characters");
      return d;
    } catch (const std::exception&) {
      throw std::invalid_argument("config: key '" + key +
                                  "' has non-numeric value '" + v + "'");
    }
  }

  static std::int64_t parse_int(const std::string& key, const std::string& v) {
    try {
      size_t used = 0;
      const std::int64_t i = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing characters");
      return i;
    } catch (const std::exception&) {
      throw std::invalid_argument("config: key '" + key +
                                  "' has non-integer value '" + v + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace psid
