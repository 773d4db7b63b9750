// Drives the actual psid binary (path in $PSID_BIN) through temp-dir
// fixtures: golden files, exit codes, determinism.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "helpers.hpp"
#include "psid/psid.hpp"
#include "synth.hpp"

namespace fs = std::filesystem;

namespace {

std::string psid_bin() {
  const char* bin = std::getenv("PSID_BIN");
  REQUIRE(bin != nullptr);
  return bin;
}

struct RunResult {
  int exit_code;
  std::string out;
  std::string err;
};

RunResult run_cli(const std::string& args, const testutil::ScratchDir& dir) {
  const std::string out_path = dir.str("cli_stdout.txt");
  const std::string err_path = dir.str("cli_stderr.txt");
  const std::string cmd =
      psid_bin() + " " + args + " > " + out_path + " 2> " + err_path;
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto read = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  r.out = read(out_path);
  r.err = read(err_path);
  return r;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// 8x8 gray fixtures plus a minimal training config.
void make_fixture(const testutil::ScratchDir& dir, int images = 3,
                  int size = 16) {
  fs::create_directories(dir.str("clean"));
  psid::Rng rng(404);
  for (int i = 0; i < images; ++i) {
    const auto img = testutil::synth_clean_image<float>(size, size, 1, rng);
    psid::save_image(img, dir.str("clean/img" + std::to_string(i) + ".png"));
  }
  write_text(dir.str("run.cfg"),
             "model.channels = 1\n"
             "model.n = 8\n"
             "model.d = 4\n"
             "model.b = 1\n"
             "model.heads = 1\n"
             "model.r = 1\n"
             "model.c_pse = 4\n"
             "model.n_hidden = 8\n"
             "model.t = 3\n"
             "model.h_d = 8\n"
             "model.time_dim = 4\n"
             "train.steps = 8\n"
             "train.batch = 1\n"
             "train.patch = 8\n"
             "train.seed = 3\n"
             "noise.kind = gaussian\n"
             "noise.sigma = 25\n"
             "paths.train_dir = " + dir.str("noisy") + "\n"
             "paths.checkpoint = " + dir.str("model.ckpt") + "\n"
             "paths.log = " + dir.str("train.csv") + "\n");
}

}  // namespace

TEST_CASE("make-noisy writes float and preview files per input", "[cli]") {
  testutil::ScratchDir dir("cli_noise");
  make_fixture(dir);
  const auto r = run_cli("make-noisy --config " + dir.str("run.cfg") +
                             " --input " + dir.str("clean") + " --output " +
                             dir.str("noisy") + " --seed 5",
                         dir);
  REQUIRE(r.exit_code == 0);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(fs::exists(dir.str("noisy/img" + std::to_string(i) + ".psid")));
    REQUIRE(fs::exists(dir.str("noisy/img" + std::to_string(i) + ".png")));
  }
  // zero-mean corruption, stored without clamping
  const auto clean = psid::load_image<float>(dir.str("clean/img0.png"));
  const auto noisy = psid::load_image<float>(dir.str("noisy/img0.psid"));
  REQUIRE(clean.same_shape(noisy));
  REQUIRE(clean.data != noisy.data);
}

TEST_CASE("dump-schedule emits the audited CSV", "[cli]") {
  testutil::ScratchDir dir("cli_sched");
  write_text(dir.str("sched.cfg"),
             "model.t = 3\nmodel.beta_start = 0.1\nmodel.beta_end = 0.3\n");
  const auto r = run_cli("dump-schedule --config " + dir.str("sched.cfg") +
                             " --output " + dir.str("sched.csv"),
                         dir);
  REQUIRE(r.exit_code == 0);
  std::ifstream in(dir.str("sched.csv"));
  std::string text(std::istreambuf_iterator<char>(in), {});
  REQUIRE(text ==
          "t,beta,alpha,alpha_bar\n"
          "1,0.1,0.9,0.9\n"
          "2,0.2,0.8,0.72\n"
          "3,0.3,0.7,0.504\n");
}

TEST_CASE("sample-check provenance map uses exactly four colors", "[cli]") {
  testutil::ScratchDir dir("cli_sample");
  make_fixture(dir, 1, 16);
  const auto r = run_cli("sample-check --input " + dir.str("clean/img0.png") +
                             " --output " + dir.str("samp") + " --seed 2",
                         dir);
  REQUIRE(r.exit_code == 0);
  const auto m1 = psid::load_image<float>(dir.str("samp/m1.png"));
  REQUIRE(m1.h == 8);
  REQUIRE(m1.w == 8);

  const auto prov = psid::load_image<float>(dir.str("samp/provenance.png"));
  REQUIRE(prov.c == 3);
  std::set<std::array<int, 3>> colors;
  for (int y = 0; y < prov.h; ++y) {
    for (int x = 0; x < prov.w; ++x) {
      colors.insert({int(prov.at(y, x, 0) * 255), int(prov.at(y, x, 1) * 255),
                     int(prov.at(y, x, 2) * 255)});
    }
  }
  const std::set<std::array<int, 3>> expect = {
      {0, 0, 0}, {255, 0, 0}, {0, 255, 0}, {0, 0, 255}};
  REQUIRE(colors == expect);
}

TEST_CASE("train smoke: completes, logs, and the checkpoint loads", "[cli][slow]") {
  testutil::ScratchDir dir("cli_train");
  make_fixture(dir);
  REQUIRE(run_cli("make-noisy --config " + dir.str("run.cfg") + " --input " +
                      dir.str("clean") + " --output " + dir.str("noisy"),
                  dir)
              .exit_code == 0);

  const auto r = run_cli("train --config " + dir.str("run.cfg"), dir);
  INFO(r.err);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(dir.str("model.ckpt")));
  REQUIRE(fs::exists(dir.str("train.csv")));

  auto [state, rng] = psid::load_checkpoint<float>(dir.str("model.ckpt"),
                                                   nullptr);
  REQUIRE(state.step == 8);

  // same seed, same log
  fs::rename(dir.str("train.csv"), dir.str("train_a.csv"));
  REQUIRE(run_cli("train --config " + dir.str("run.cfg") + " --seed 3", dir)
              .exit_code == 0);
  REQUIRE(testutil::slurp(dir.str("train_a.csv")) ==
          testutil::slurp(dir.str("train.csv")));
}

TEST_CASE("train without a data directory key exits 2 naming the key",
          "[cli]") {
  testutil::ScratchDir dir("cli_nokey");
  write_text(dir.str("bad.cfg"), "model.n = 8\n");
  const auto r = run_cli("train --config " + dir.str("bad.cfg"), dir);
  REQUIRE(r.exit_code == 2);
  REQUIRE(r.err.find("paths.train_dir") != std::string::npos);
}

TEST_CASE("unknown config keys exit 2", "[cli]") {
  testutil::ScratchDir dir("cli_badkey");
  write_text(dir.str("bad.cfg"), "model.q = 8\n");
  const auto r = run_cli("train --config " + dir.str("bad.cfg"), dir);
  REQUIRE(r.exit_code == 2);
  REQUIRE(r.err.find("model.q") != std::string::npos);
}

TEST_CASE("denoise with a zero checkpoint is the identity and is seed-stable",
          "[cli][slow]") {
  testutil::ScratchDir dir("cli_denoise");
  make_fixture(dir);
  REQUIRE(run_cli("make-noisy --config " + dir.str("run.cfg") + " --input " +
                      dir.str("clean") + " --output " + dir.str("noisy"),
                  dir)
              .exit_code == 0);

  // hand-built checkpoint with every weight (and shadow) zeroed
  const auto cfg = psid::RunConfig::parse_file(dir.str("run.cfg"));
  psid::Rng init(1);
  auto state = psid::model_state_init<float>(cfg.model_config(), init);
  state.params.visit([](const std::string&, psid::Param<float>& p) {
    std::fill(p.w.begin(), p.w.end(), 0.0f);
  });
  for (auto& shadow : state.ema) std::fill(shadow.begin(), shadow.end(), 0.0f);
  psid::save_checkpoint(state, init, dir.str("zero.ckpt"));

  const std::string args = "denoise --config " + dir.str("run.cfg") +
                           " --checkpoint " + dir.str("zero.ckpt") +
                           " --input " + dir.str("noisy") + " --output ";
  REQUIRE(run_cli(args + dir.str("outA") + " --seed 11", dir).exit_code == 0);
  REQUIRE(run_cli(args + dir.str("outB") + " --seed 11", dir).exit_code == 0);

  int produced = 0;
  for (int i = 0; i < 3; ++i) {
    const std::string name = "img" + std::to_string(i);
    REQUIRE(fs::exists(dir.str("outA/" + name + ".png")));
    const auto in = psid::load_image<float>(dir.str("noisy/" + name + ".psid"));
    const auto out =
        psid::load_image<float>(dir.str("outA/" + name + ".psid"));
    REQUIRE(out.data == in.data);  // global residual with zero weights
    REQUIRE(testutil::slurp(dir.str("outA/" + name + ".psid")) ==
            testutil::slurp(dir.str("outB/" + name + ".psid")));
    ++produced;
  }
  REQUIRE(produced == 3);
}

TEST_CASE("denoise rejects a checkpoint that disagrees with the config",
          "[cli]") {
  testutil::ScratchDir dir("cli_mismatch");
  make_fixture(dir);
  REQUIRE(run_cli("make-noisy --config " + dir.str("run.cfg") + " --input " +
                      dir.str("clean") + " --output " + dir.str("noisy"),
                  dir)
              .exit_code == 0);
  psid::ModelConfig other;  // defaults: latent 256 etc.
  other.channels = 1;
  psid::Rng init(1);
  auto state = psid::model_state_init<float>(other, init);
  psid::save_checkpoint(state, init, dir.str("other.ckpt"));

  const auto r = run_cli("denoise --config " + dir.str("run.cfg") +
                             " --checkpoint " + dir.str("other.ckpt") +
                             " --input " + dir.str("noisy") + " --output " +
                             dir.str("out"),
                         dir);
  REQUIRE(r.exit_code == 2);
  REQUIRE(r.err.find("does not match") != std::string::npos);
}

TEST_CASE("eval on identical directories reports ssim 1", "[cli]") {
  testutil::ScratchDir dir("cli_eval");
  make_fixture(dir, 2, 16);
  const auto r = run_cli("eval --input " + dir.str("clean") + " --reference " +
                             dir.str("clean") + " --csv " + dir.str("m.csv"),
                         dir);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.out.find("inf") != std::string::npos);

  std::ifstream in(dir.str("m.csv"));
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  REQUIRE(last == "mean,inf,1");
}

TEST_CASE("usage errors exit 2", "[cli]") {
  testutil::ScratchDir dir("cli_usage");
  REQUIRE(run_cli("frobnicate", dir).exit_code == 2);
  REQUIRE(run_cli("train", dir).exit_code == 2);  // missing --config
  const auto r = run_cli("train --config /nonexistent.cfg", dir);
  REQUIRE(r.exit_code == 2);
}
