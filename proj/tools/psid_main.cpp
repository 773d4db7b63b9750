// psid command-line tool: training, inference, evaluation, noise synthesis,
// schedule dumps, and sampler inspection, all driven by a flat key-value
// config file. Exit codes: 0 success, 1 runtime failure, 2 usage/config
// error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "psid/psid.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<fs::path> list_images(const std::string& dir) {
  if (!fs::is_directory(dir)) {
    throw std::runtime_error("not a directory: " + dir);
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && psid::is_image_file(e.path())) {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no images found in " + dir);
  return files;
}

psid::RunConfig load_config(const std::string& path) {
  if (!fs::exists(path)) {
    throw std::invalid_argument("config file does not exist: " + path);
  }
  return psid::RunConfig::parse_file(path);
}

std::uint64_t effective_seed(const psid::RunConfig& cfg, std::int64_t flag) {
  // --seed beats the config value.
  if (flag >= 0) return static_cast<std::uint64_t>(flag);
  return static_cast<std::uint64_t>(cfg.get_int("train.seed", 1));
}

int cmd_train(const std::string& config_path, std::int64_t seed_flag,
              const std::string& resume) {
  const psid::RunConfig cfg = load_config(config_path);
  const psid::ModelConfig model_cfg = cfg.model_config();
  psid::TrainConfig train_cfg = cfg.train_config();
  train_cfg.seed = effective_seed(cfg, seed_flag);

  const std::string train_dir = cfg.get_string("paths.train_dir");
  const std::string ckpt = cfg.get_string("paths.checkpoint");
  const std::string log = cfg.get_string("paths.log", ckpt + ".log.csv");

  std::vector<psid::ImageF> dataset;
  for (const auto& f : list_images(train_dir)) {
    dataset.push_back(psid::load_image<float>(f.string()));
  }

  auto run = psid::run_training<float>(model_cfg, train_cfg, dataset, log,
                                       ckpt, resume);
  std::printf("trained %llu steps on %zu images; checkpoint: %s\n",
              static_cast<unsigned long long>(run.state.step), dataset.size(),
              ckpt.c_str());
  return 0;
}

int cmd_denoise(const std::string& config_path, const std::string& ckpt,
                const std::string& input_dir, const std::string& output_dir,
                std::int64_t seed_flag) {
  const psid::RunConfig cfg = load_config(config_path);
  const psid::ModelConfig model_cfg = cfg.model_config();
  auto [state, train_rng] = psid::load_checkpoint<float>(ckpt, &model_cfg);
  (void)train_rng;
  const psid::ModelParams<float> model = psid::ema_model(state);
  const std::uint64_t seed = effective_seed(cfg, seed_flag);

  fs::create_directories(output_dir);
  const auto files = list_images(input_dir);
  const psid::Rng base(seed);
  for (size_t i = 0; i < files.size(); ++i) {
    const psid::ImageF img = psid::load_image<float>(files[i].string());
    psid::Rng rng = base.derive(i);
    const psid::ImageF out = psid::denoise_image(model, img, rng);
    const std::string stem = files[i].stem().string();
    psid::save_image(out, (fs::path(output_dir) / (stem + ".png")).string());
    psid::save_image(out, (fs::path(output_dir) / (stem + ".psid")).string());
  }
  std::printf("denoised %zu images into %s\n", files.size(),
              output_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& input_dir, const std::string& reference_dir,
             const std::string& csv_path) {
  const psid::MetricReport report =
      psid::evaluate_dir(input_dir, reference_dir);
  std::printf("%-32s %10s %8s\n", "image", "psnr(db)", "ssim");
  for (size_t i = 0; i < report.count(); ++i) {
    std::printf("%-32s %10.4f %8.4f\n", report.names[i].c_str(),
                report.psnr_db[i], report.ssim_score[i]);
  }
  std::printf("%-32s %10.4f %8.4f  (%zu images)\n", "mean", report.mean_psnr,
              report.mean_ssim, report.count());
  if (!csv_path.empty()) {
    std::FILE* f = std::fopen(csv_path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot write " + csv_path);
    std::fputs("image,psnr_db,ssim\n", f);
    for (size_t i = 0; i < report.count(); ++i) {
      std::fprintf(f, "%s,%.9g,%.9g\n", report.names[i].c_str(),
                   report.psnr_db[i], report.ssim_score[i]);
    }
    std::fprintf(f, "mean,%.9g,%.9g\n", report.mean_psnr, report.mean_ssim);
    std::fclose(f);
  }
  return 0;
}

int cmd_make_noisy(const std::string& config_path, const std::string& input_dir,
                   const std::string& output_dir, std::int64_t seed_flag) {
  const psid::RunConfig cfg = load_config(config_path);
  const psid::NoiseSpec spec = cfg.noise_spec();
  const std::uint64_t seed = effective_seed(cfg, seed_flag);

  fs::create_directories(output_dir);
  const auto files = list_images(input_dir);
  const psid::Rng base(seed);
  for (size_t i = 0; i < files.size(); ++i) {
    const psid::ImageF clean = psid::load_image<float>(files[i].string());
    psid::Rng rng = base.derive(i);
    const psid::ImageF noisy = psid::apply_noise(clean, spec, rng);
    const std::string stem = files[i].stem().string();
    psid::save_image(noisy, (fs::path(output_dir) / (stem + ".psid")).string());
    psid::save_image(noisy, (fs::path(output_dir) / (stem + ".png")).string());
  }
  std::printf("corrupted %zu images (%s) into %s\n", files.size(),
              psid::noise_kind_name(spec.kind).c_str(), output_dir.c_str());
  return 0;
}

int cmd_dump_schedule(const std::string& config_path,
                      const std::string& out_path) {
  const psid::RunConfig cfg = load_config(config_path);
  const psid::ModelConfig model_cfg = cfg.model_config();
  const auto sched = psid::make_schedule<double>(
      model_cfg.t_steps, model_cfg.beta_start, model_cfg.beta_end);

  std::FILE* f = stdout;
  if (!out_path.empty()) {
    f = std::fopen(out_path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot write " + out_path);
  }
  std::fputs("t,beta,alpha,alpha_bar\n", f);
  for (int t = 1; t <= sched.t_steps; ++t) {
    std::fprintf(f, "%d,%.12g,%.12g,%.12g\n", t, sched.beta_at(t),
                 sched.alpha_at(t), sched.alpha_bar_at(t));
  }
  if (f != stdout) std::fclose(f);
  return 0;
}

int cmd_sample_check(const std::string& input, const std::string& output_dir,
                     std::int64_t seed_flag) {
  const psid::ImageF img = psid::load_image<float>(input);
  psid::Rng rng(seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : 1);
  auto [m1, m2, m3, pattern] = psid::srd_sample(img, rng);

  fs::create_directories(output_dir);
  psid::save_image(m1, (fs::path(output_dir) / "m1.png").string());
  psid::save_image(m2, (fs::path(output_dir) / "m2.png").string());
  psid::save_image(m3, (fs::path(output_dir) / "m3.png").string());

  // Provenance map: red = p1, green = p2, blue = p3, black = unused.
  psid::ImageF prov(img.h, img.w, 3);
  for (int by = 0; by < pattern.bh; ++by) {
    for (int bx = 0; bx < pattern.bw; ++bx) {
      const auto triple =
          pattern.triple(static_cast<size_t>(by) * pattern.bw + bx);
      for (int n = 0; n < 3; ++n) {
        const int pos = triple[n];
        prov.at(2 * by + pos / 2, 2 * bx + pos % 2, n) = 1.0f;
      }
    }
  }
  psid::save_image(prov, (fs::path(output_dir) / "provenance.png").string());
  std::printf("wrote m1/m2/m3 and provenance map into %s\n",
              output_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"psid: self-supervised single-image denoising"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, input, output, reference, resume,
      csv_path;
  std::int64_t seed = -1;

  auto* train = app.add_subcommand("train", "train a model from a config");
  train->add_option("--config", config_path, "run config file")->required();
  train->add_option("--seed", seed, "seed override");
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* denoise = app.add_subcommand("denoise", "denoise a directory");
  denoise->add_option("--config", config_path, "run config file")->required();
  denoise->add_option("--checkpoint", checkpoint, "trained checkpoint")
      ->required();
  denoise->add_option("--input", input, "noisy input directory")->required();
  denoise->add_option("--output", output, "output directory")->required();
  denoise->add_option("--seed", seed, "seed override");

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM against references");
  eval->add_option("--input", input, "denoised directory")->required();
  eval->add_option("--reference", reference, "reference directory")
      ->required();
  eval->add_option("--csv", csv_path, "also write a CSV report");

  auto* make_noisy =
      app.add_subcommand("make-noisy", "corrupt clean images per the config");
  make_noisy->add_option("--config", config_path, "run config file")
      ->required();
  make_noisy->add_option("--input", input, "clean input directory")
      ->required();
  make_noisy->add_option("--output", output, "output directory")->required();
  make_noisy->add_option("--seed", seed, "seed override");

  auto* dump =
      app.add_subcommand("dump-schedule", "emit the diffusion schedule CSV");
  dump->add_option("--config", config_path, "run config file")->required();
  dump->add_option("--output", output, "CSV path (default stdout)");

  auto* sample =
      app.add_subcommand("sample-check", "dump sub-images and provenance map");
  sample->add_option("--input", input, "source image")->required();
  sample->add_option("--output", output, "output directory")->required();
  sample->add_option("--seed", seed, "sampler seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, seed, resume);
    if (denoise->parsed())
      return cmd_denoise(config_path, checkpoint, input, output, seed);
    if (eval->parsed()) return cmd_eval(input, reference, csv_path);
    if (make_noisy->parsed())
      return cmd_make_noisy(config_path, input, output, seed);
    if (dump->parsed()) return cmd_dump_schedule(config_path, output);
    if (sample->parsed()) return cmd_sample_check(input, output, seed);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
