#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "psid/spiformer.hpp"

using psid::AttnCache;
using psid::GateCache;
using psid::Image;
using psid::LayerNormCache;
using psid::LayerNormParams;
using psid::Rng;
using psid::SamCache;
using psid::SpiformerCache;
using psid::SpiformerConfig;
using psid::Vec;

namespace {

const SpiformerConfig kTiny{1, 4, 1, 1, 6};  // channels, d, blocks, heads, N

template <typename P>
void zero_all(P& params) {
  params.visit([](const std::string&, psid::Param<double>& q) {
    std::fill(q.w.begin(), q.w.end(), 0.0);
  });
}

// Direct per-definition layer norm used by the oracles below.
std::vector<double> oracle_layer_norm(const std::vector<double>& x,
                                      const std::vector<double>& gamma,
                                      const std::vector<double>& beta) {
  const size_t d = x.size();
  double mu = 0;
  for (const double v : x) mu += v;
  mu /= d;
  double var = 0;
  for (const double v : x) var += (v - mu) * (v - mu);
  var /= d;
  const double inv = 1.0 / std::sqrt(var + 1e-9);
  std::vector<double> out(d);
  for (size_t i = 0; i < d; ++i) out[i] = gamma[i] * (x[i] - mu) * inv + beta[i];
  return out;
}

}  // namespace

TEST_CASE("per-pixel layer norm standardizes before affine", "[spiformer]") {
  Rng rng(1);
  LayerNormParams<double> ln;
  ln.init(16);
  const Image<double> f = testutil::random_image<double>(5, 7, 16, rng, -2, 2);
  LayerNormCache<double> cache;
  const Image<double> out = psid::layer_norm_forward(f, ln, cache);
  for (int y = 0; y < f.h; ++y) {
    for (int x = 0; x < f.w; ++x) {
      double mu = 0, var = 0;
      for (int ch = 0; ch < 16; ++ch) mu += out.at(y, x, ch);
      mu /= 16;
      for (int ch = 0; ch < 16; ++ch) {
        var += (out.at(y, x, ch) - mu) * (out.at(y, x, ch) - mu);
      }
      var /= 16;
      REQUIRE(std::abs(mu) < 1e-6);
      REQUIRE(std::abs(var - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("sam reduces to the normalized map when fusion is the identity",
          "[spiformer][sam]") {
  Rng rng(2);
  auto p = psid::spiformer_init<double>(kTiny, rng);
  auto& sam = p.blocks[0].sam;
  auto& ln = p.blocks[0].ln_sam;
  const int d = kTiny.width;

  zero_all(p);
  std::fill(ln.gamma.w.begin(), ln.gamma.w.end(), 1.0);
  // c_sca = 1 via bias alone; s1 = identity * c_sca = 1
  std::fill(sam.l1_b.w.begin(), sam.l1_b.w.end(), 1.0);
  for (int i = 0; i < d; ++i) sam.s1_w.w[i * d + i] = 1.0;
  // c1 = prompt[0] * ones = ones
  for (int i = 0; i < d; ++i) sam.c1_w.w[i * kTiny.latent] = 1.0;

  Vec<double> prompt(kTiny.latent, 0.0);
  prompt[0] = 1.0;
  const Image<double> f = testutil::random_image<double>(4, 4, d, rng);
  SamCache<double> cache;
  const Image<double> out = psid::sam_forward(sam, ln, f, prompt, cache);
  LayerNormCache<double> ln_cache;
  const Image<double> norm = psid::layer_norm_forward(f, ln, ln_cache);
  for (size_t i = 0; i < out.data.size(); ++i) {
    REQUIRE(out.data[i] == Catch::Approx(norm.data[i]).margin(1e-14));
  }
}

TEST_CASE("sam zero input with zero bias collapses to zero", "[spiformer][sam]") {
  Rng rng(3);
  auto p = psid::spiformer_init<double>(kTiny, rng);
  auto& sam = p.blocks[0].sam;
  std::fill(sam.l1_b.w.begin(), sam.l1_b.w.end(), 0.0);
  const Image<double> f(3, 3, kTiny.width, 0.0);
  const Vec<double> prompt = testutil::random_vec<double>(kTiny.latent, rng);
  SamCache<double> cache;
  const Image<double> out =
      psid::sam_forward(sam, p.blocks[0].ln_sam, f, prompt, cache);
  for (const double v : out.data) REQUIRE(v == 0.0);
}

TEST_CASE("sam matches a direct-summation oracle and its gradients check out",
          "[spiformer][sam]") {
  Rng rng(5);
  SpiformerConfig cfg{1, 4, 1, 1, 6};
  auto p = psid::spiformer_init<double>(cfg, rng);
  auto& sam = p.blocks[0].sam;
  auto& ln = p.blocks[0].ln_sam;
  // random affine so the norm path is nontrivial
  for (auto& v : ln.gamma.w) v = 0.5 + rng.uniform();
  for (auto& v : ln.beta.w) v = rng.normal() * 0.1;

  const int d = 4, n = 6;
  const Image<double> f = testutil::random_image<double>(2, 2, d, rng);
  const Vec<double> prompt = testutil::random_vec<double>(n, rng);

  SamCache<double> cache;
  const Image<double> out = psid::sam_forward(sam, ln, f, prompt, cache);

  // independent oracle: everything written out elementwise
  Vec<double> pooled(d, 0.0);
  for (int px = 0; px < 4; ++px) {
    for (int ch = 0; ch < d; ++ch) pooled[ch] += f.data[px * d + ch];
  }
  for (auto& v : pooled) v /= 4.0;
  auto matvec = [](const psid::Param<double>& w, const Vec<double>& x,
                   const Vec<double>* b) {
    const size_t rows = w.size() / x.size();
    Vec<double> y(rows, 0.0);
    for (size_t r = 0; r < rows; ++r) {
      for (size_t c = 0; c < x.size(); ++c) y[r] += w.w[r * x.size() + c] * x[c];
      if (b) y[r] += (*b)[r];
    }
    return y;
  };
  const Vec<double> c_sca = matvec(sam.l1_w, pooled, &sam.l1_b.w);
  const Vec<double> s1 = matvec(sam.s1_w, c_sca, nullptr);
  const Vec<double> s2 = matvec(sam.s2_w, c_sca, nullptr);
  const Vec<double> c1 = matvec(sam.c1_w, prompt, nullptr);
  const Vec<double> c2 = matvec(sam.c2_w, prompt, nullptr);
  for (int px = 0; px < 4; ++px) {
    std::vector<double> pixel(d);
    for (int ch = 0; ch < d; ++ch) pixel[ch] = f.data[px * d + ch];
    const auto norm = oracle_layer_norm(pixel, ln.gamma.w, ln.beta.w);
    for (int ch = 0; ch < d; ++ch) {
      const double expect = s1[ch] * c1[ch] * norm[ch] + s2[ch] * c2[ch];
      REQUIRE(std::abs(out.data[px * d + ch] - expect) < 1e-12);
    }
  }

  // finite differences over the six weight tensors plus the norm affine
  const Image<double> probe = testutil::random_image<double>(2, 2, d, rng, -1, 1);
  testutil::WithNorm<psid::SamParams<double>> bundle{&sam, &ln};

  bundle.visit([](const std::string&, psid::Param<double>& q) { q.zero_grad(); });
  SamCache<double> cache2;
  psid::sam_forward(sam, ln, f, prompt, cache2);
  Vec<double> g_prompt(n, 0.0);
  psid::sam_backward(sam, ln, cache2, prompt, probe, g_prompt);

  auto loss = [&]() {
    SamCache<double> c;
    const Image<double> o = psid::sam_forward(sam, ln, f, prompt, c);
    double acc = 0;
    for (size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * probe.data[i];
    return acc;
  };
  REQUIRE(testutil::fd_max_rel_err<double>(bundle, loss, 200, rng) < 1e-4);

  // prompt gradient through the same probe
  Vec<double> prompt_copy = prompt;
  auto loss_prompt = [&]() {
    SamCache<double> c;
    const Image<double> o = psid::sam_forward(sam, ln, f, prompt_copy, c);
    double acc = 0;
    for (size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * probe.data[i];
    return acc;
  };
  REQUIRE(testutil::fd_max_rel_err_values<double>(prompt_copy, g_prompt,
                                                  loss_prompt, n, rng) < 1e-4);
}

TEST_CASE("attention rows are probability vectors", "[spiformer][attn]") {
  Rng rng(7);
  SpiformerConfig cfg{1, 8, 1, 2, 6};
  auto p = psid::spiformer_init<double>(cfg, rng);
  const Image<double> f = testutil::random_image<double>(4, 4, 8, rng, -1, 1);
  AttnCache<double> cache;
  psid::attention_forward(p.blocks[0].attn, 2, f, cache);
  for (const auto& attn : cache.attn) {
    const int dh = 4;
    for (int i = 0; i < dh; ++i) {
      double sum = 0;
      for (int j = 0; j < dh; ++j) {
        const double a = attn[i * dh + j];
        REQUIRE(a >= 0.0);
        sum += a;
      }
      REQUIRE(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("zero value projection leaves only the projection bias",
          "[spiformer][attn]") {
  Rng rng(9);
  auto p = psid::spiformer_init<double>(kTiny, rng);
  auto& attn = p.blocks[0].attn;
  std::fill(attn.v_w.w.begin(), attn.v_w.w.end(), 0.0);
  std::fill(attn.v_b.w.begin(), attn.v_b.w.end(), 0.0);
  const Image<double> f = testutil::random_image<double>(3, 3, kTiny.width, rng);
  AttnCache<double> cache;
  const Image<double> out = psid::attention_forward(attn, 1, f, cache);
  for (const double v : out.data) REQUIRE(v == 0.0);  // proj bias is zero
}

TEST_CASE("attention matches an explicit-matrix oracle", "[spiformer][attn]") {
  Rng rng(11);
  SpiformerConfig cfg{1, 4, 1, 1, 6};
  auto p = psid::spiformer_init<double>(cfg, rng);
  auto& ap = p.blocks[0].attn;
  for (auto& v : ap.q_b.w) v = rng.normal() * 0.1;
  for (auto& v : ap.k_b.w) v = rng.normal() * 0.1;
  for (auto& v : ap.v_b.w) v = rng.normal() * 0.1;
  ap.temperature.w[0] = 1.3;

  const int d = 4;
  const size_t hw = 4;
  const Image<double> f = testutil::random_image<double>(2, 2, d, rng, -1, 1);
  AttnCache<double> cache;
  const Image<double> out = psid::attention_forward(ap, 1, f, cache);

  // oracle: 1x1 convs as matrices, explicit d x d score matrix
  auto conv1x1 = [&](const psid::Param<double>& w, const psid::Param<double>& b,
                     const Image<double>& in) {
    Image<double> o(in.h, in.w, d);
    for (size_t s = 0; s < hw; ++s) {
      for (int oc = 0; oc < d; ++oc) {
        double acc = b.w[oc];
        for (int ic = 0; ic < d; ++ic) {
          acc += in.data[s * d + ic] * w.w[ic * d + oc];
        }
        o.data[s * d + oc] = acc;
      }
    }
    return o;
  };
  const Image<double> q = conv1x1(ap.q_w, ap.q_b, f);
  const Image<double> k = conv1x1(ap.k_w, ap.k_b, f);
  const Image<double> v = conv1x1(ap.v_w, ap.v_b, f);

  auto channel = [&](const Image<double>& m, int ch) {
    Vec<double> col(hw);
    for (size_t s = 0; s < hw; ++s) col[s] = m.data[s * d + ch];
    return col;
  };
  auto normalized = [&](Vec<double> col) {
    double nrm = 0;
    for (const double x : col) nrm += x * x;
    nrm = std::sqrt(nrm + 1e-12);
    for (auto& x : col) x /= nrm;
    return col;
  };
  std::vector<Vec<double>> qn(d), kn(d);
  for (int ch = 0; ch < d; ++ch) {
    qn[ch] = normalized(channel(q, ch));
    kn[ch] = normalized(channel(k, ch));
  }
  // scores, softmax, and the attention-weighted values, fully written out
  std::vector<std::vector<double>> a(d, std::vector<double>(d));
  for (int i = 0; i < d; ++i) {
    double maxv = -1e300;
    for (int j = 0; j < d; ++j) {
      double dot = 0;
      for (size_t s = 0; s < hw; ++s) dot += qn[i][s] * kn[j][s];
      a[i][j] = 1.3 * dot;
      maxv = std::max(maxv, a[i][j]);
    }
    double sum = 0;
    for (int j = 0; j < d; ++j) {
      a[i][j] = std::exp(a[i][j] - maxv);
      sum += a[i][j];
    }
    for (int j = 0; j < d; ++j) a[i][j] /= sum;
  }
  Image<double> merged(2, 2, d);
  for (size_t s = 0; s < hw; ++s) {
    for (int i = 0; i < d; ++i) {
      double acc = 0;
      for (int j = 0; j < d; ++j) acc += a[i][j] * v.data[s * d + j];
      merged.data[s * d + i] = acc;
    }
  }
  const Image<double> expect = conv1x1(ap.proj_w, ap.proj_b, merged);
  for (size_t i = 0; i < out.data.size(); ++i) {
    REQUIRE(std::abs(out.data[i] - expect.data[i]) < 1e-12);
  }
}

TEST_CASE("attention gradients match central differences", "[spiformer][attn]") {
  Rng rng(13);
  SpiformerConfig cfg{1, 4, 1, 2, 6};
  auto p = psid::spiformer_init<double>(cfg, rng);
  auto& ap = p.blocks[0].attn;
  ap.temperature.w = {0.8, 1.4};
  const Image<double> f = testutil::random_image<double>(3, 3, 4, rng, -1, 1);
  const Image<double> probe = testutil::random_image<double>(3, 3, 4, rng, -1, 1);

  ap.visit([](const std::string&, psid::Param<double>& q) { q.zero_grad(); });
  AttnCache<double> cache;
  psid::attention_forward(ap, 2, f, cache);
  psid::attention_backward(ap, 2, cache, probe);

  auto loss = [&]() {
    AttnCache<double> c;
    const Image<double> o = psid::attention_forward(ap, 2, f, c);
    double acc = 0;
    for (size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * probe.data[i];
    return acc;
  };
  REQUIRE(testutil::fd_max_rel_err<double>(ap, loss, 200, rng) < 1e-4);
}

TEST_CASE("gate fully open and fully closed", "[spiformer][gate]") {
  Rng rng(15);
  auto p = psid::spiformer_init<double>(kTiny, rng);
  auto& gp = p.blocks[0].gate;
  const int d = kTiny.width;
  const Image<double> f = testutil::random_image<double>(3, 3, d, rng);

  SECTION("second half forced to one passes the first half through") {
    std::fill(gp.expand_w.w.begin(), gp.expand_w.w.end(), 0.0);
    for (int ch = 0; ch < d; ++ch) {
      gp.expand_b.w[ch] = 0.25 * (ch + 1);  // u1 constant per channel
      gp.expand_b.w[d + ch] = 1.0;          // u2 = 1
    }
    GateCache<double> cache;
    const Image<double> out = psid::gate_forward(gp, p.blocks[0].ln_gate, f, cache);
    // expected: 1x1 projection of the constant u1 map
    Image<double> u1(3, 3, d);
    for (int px = 0; px < 9; ++px) {
      for (int ch = 0; ch < d; ++ch) u1.data[px * d + ch] = 0.25 * (ch + 1);
    }
    const Image<double> expect = psid::conv2d_forward(u1, gp.proj_w, gp.proj_b, 1);
    for (size_t i = 0; i < out.data.size(); ++i) {
      REQUIRE(out.data[i] == Catch::Approx(expect.data[i]).margin(1e-14));
    }
  }

  SECTION("either half zero closes the gate to the projection bias") {
    std::fill(gp.expand_w.w.begin(), gp.expand_w.w.end(), 0.0);
    std::fill(gp.expand_b.w.begin(), gp.expand_b.w.end(), 0.0);
    for (auto& v : gp.proj_b.w) v = rng.normal();
    GateCache<double> cache;
    const Image<double> out = psid::gate_forward(gp, p.blocks[0].ln_gate, f, cache);
    for (int px = 0; px < 9; ++px) {
      for (int ch = 0; ch < d; ++ch) {
        REQUIRE(out.data[px * d + ch] == gp.proj_b.w[ch]);
      }
    }
  }
}

TEST_CASE("gate matches a direct oracle and its gradients check out",
          "[spiformer][gate]") {
  Rng rng(17);
  auto p = psid::spiformer_init<double>(kTiny, rng);
  auto& gp = p.blocks[0].gate;
  auto& ln = p.blocks[0].ln_gate;
  for (auto& v : ln.gamma.w) v = 0.5 + rng.uniform();
  for (auto& v : ln.beta.w) v = rng.normal() * 0.1;
  const int d = kTiny.width;
  const Image<double> f = testutil::random_image<double>(2, 3, d, rng);

  GateCache<double> cache;
  const Image<double> out = psid::gate_forward(gp, ln, f, cache);

  // oracle: layer norm, full 3x3 conv, split-multiply, 1x1 projection,
  // all written against the definitions
  Image<double> norm(f.h, f.w, d);
  for (int y = 0; y < f.h; ++y) {
    for (int x = 0; x < f.w; ++x) {
      std::vector<double> px(d);
      for (int ch = 0; ch < d; ++ch) px[ch] = f.at(y, x, ch);
      const auto n = oracle_layer_norm(px, ln.gamma.w, ln.beta.w);
      for (int ch = 0; ch < d; ++ch) norm.at(y, x, ch) = n[ch];
    }
  }
  Image<double> u(f.h, f.w, 2 * d);
  for (int y = 0; y < f.h; ++y) {
    for (int x = 0; x < f.w; ++x) {
      for (int oc = 0; oc < 2 * d; ++oc) {
        double acc = gp.expand_b.w[oc];
        for (int ky = -1; ky <= 1; ++ky) {
          for (int kx = -1; kx <= 1; ++kx) {
            const int yy = y + ky, xx = x + kx;
            if (yy < 0 || yy >= f.h || xx < 0 || xx >= f.w) continue;
            for (int ic = 0; ic < d; ++ic) {
              acc += norm.at(yy, xx, ic) *
                     gp.expand_w.w[(((ky + 1) * 3 + (kx + 1)) * d + ic) * 2 * d + oc];
            }
          }
        }
        u.at(y, x, oc) = acc;
      }
    }
  }
  for (int y = 0; y < f.h; ++y) {
    for (int x = 0; x < f.w; ++x) {
      for (int oc = 0; oc < d; ++oc) {
        double acc = gp.proj_b.w[oc];
        for (int ic = 0; ic < d; ++ic) {
          acc += u.at(y, x, ic) * u.at(y, x, d + ic) * gp.proj_w.w[ic * d + oc];
        }
        REQUIRE(std::abs(out.at(y, x, oc) - acc) < 1e-12);
      }
    }
  }

  // gradients
  const Image<double> probe = testutil::random_image<double>(2, 3, d, rng, -1, 1);
  testutil::WithNorm<psid::GateParams<double>> bundle{&gp, &ln};
  bundle.visit([](const std::string&, psid::Param<double>& q) { q.zero_grad(); });
  GateCache<double> cache2;
  psid::gate_forward(gp, ln, f, cache2);
  psid::gate_backward(gp, ln, cache2, f, probe);

  auto loss = [&]() {
    GateCache<double> c;
    const Image<double> o = psid::gate_forward(gp, ln, f, c);
    double acc = 0;
    for (size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * probe.data[i];
    return acc;
  };
  REQUIRE(testutil::fd_max_rel_err<double>(bundle, loss, 200, rng) < 1e-4);
}

TEST_CASE("gate rejects odd expansion widths", "[spiformer][gate]") {
  Rng rng(18);
  auto p = psid::spiformer_init<double>(kTiny, rng);
  auto gp = p.blocks[0].gate;
  gp.expand_b.reshape({5});
  const Image<double> f = testutil::random_image<double>(2, 2, kTiny.width, rng);
  GateCache<double> cache;
  REQUIRE_THROWS(psid::gate_forward(gp, p.blocks[0].ln_gate, f, cache));
}

TEST_CASE("zero-weight denoiser is the identity", "[spiformer]") {
  Rng rng(19);
  SpiformerConfig cfg{3, 8, 2, 2, 6};
  auto p = psid::spiformer_init<double>(cfg, rng);
  zero_all(p);
  const Image<double> img = testutil::random_image<double>(6, 6, 3, rng);
  const Vec<double> prompt = testutil::random_vec<double>(6, rng);
  const Image<double> out = psid::spiformer_forward(p, img, prompt);
  REQUIRE(out.data == img.data);
}

TEST_CASE("one parameter set serves both scales", "[spiformer]") {
  Rng rng(21);
  const auto p = psid::spiformer_init<double>(kTiny, rng);
  const Vec<double> prompt = testutil::random_vec<double>(kTiny.latent, rng);
  const Image<double> big = testutil::random_image<double>(8, 8, 1, rng);
  const Image<double> small = testutil::random_image<double>(4, 4, 1, rng);
  const Image<double> out_big = psid::spiformer_forward(p, big, prompt);
  const Image<double> out_small = psid::spiformer_forward(p, small, prompt);
  REQUIRE(out_big.h == 8);
  REQUIRE(out_small.h == 4);
}

TEST_CASE("the prompt path is live", "[spiformer]") {
  Rng rng(23);
  const auto p = psid::spiformer_init<double>(kTiny, rng);
  const Image<double> img = testutil::random_image<double>(4, 4, 1, rng);
  Vec<double> prompt = testutil::random_vec<double>(kTiny.latent, rng);
  const Image<double> base = psid::spiformer_forward(p, img, prompt);
  prompt[2] += 0.25;
  const Image<double> moved = psid::spiformer_forward(p, img, prompt);
  double diff = 0;
  for (size_t i = 0; i < base.data.size(); ++i) {
    diff = std::max(diff, std::abs(base.data[i] - moved.data[i]));
  }
  REQUIRE(diff > 1e-9);
}

TEST_CASE("end-to-end gradients match central differences", "[spiformer]") {
  Rng rng(25);
  SpiformerConfig cfg{2, 4, 2, 2, 5};
  auto p = psid::spiformer_init<double>(cfg, rng);
  const Image<double> img = testutil::random_image<double>(4, 4, 2, rng);
  const Vec<double> prompt = testutil::random_vec<double>(5, rng);
  const Image<double> probe = testutil::random_image<double>(4, 4, 2, rng, -1, 1);

  p.visit([](const std::string&, psid::Param<double>& q) { q.zero_grad(); });
  SpiformerCache<double> cache;
  psid::spiformer_forward(p, img, prompt, cache);
  Vec<double> g_prompt(5, 0.0);
  psid::spiformer_backward(p, cache, prompt, probe, g_prompt);

  auto loss = [&]() {
    const Image<double> o = psid::spiformer_forward(p, img, prompt);
    double acc = 0;
    for (size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * probe.data[i];
    return acc;
  };
  // a random ~1.5% subsample of the parameters
  REQUIRE(testutil::fd_max_rel_err<double>(p, loss, 140, rng) < 1e-4);

  Vec<double> prompt_copy = prompt;
  auto loss_prompt = [&]() {
    const Image<double> o = psid::spiformer_forward(p, img, prompt_copy);
    double acc = 0;
    for (size_t i = 0; i < o.data.size(); ++i) acc += o.data[i] * probe.data[i];
    return acc;
  };
  REQUIRE(testutil::fd_max_rel_err_values<double>(prompt_copy, g_prompt,
                                                  loss_prompt, 5, rng) < 1e-4);
}
