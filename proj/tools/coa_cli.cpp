#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "coa/checkpoint.hpp"
#include "coa/coa_trainer.hpp"
#include "coa/data_synth.hpp"
#include "coa/image_io.hpp"
#include "coa/metrics.hpp"

namespace fs = std::filesystem;
using namespace coa;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value config file");
  cmd->add_option("--seed", c.seed, "RNG seed");
  cmd->add_option("--out", c.out, "output directory");
}

TrainConfig resolve(const Common& c) {
  TrainConfig cfg = c.config.empty() ? TrainConfig{} : load_train_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.out_dir = c.out;
  return cfg;
}

PairedDataset load_pairs(const fs::path& manifest) {
  const DatasetManifest m = read_manifest(manifest);
  if (m.pairs.empty()) throw InputError(manifest.string() + ": no hazy/clean pairs");
  PairedDataset d;
  for (const auto& p : m.pairs) {
    d.hazy.push_back(read_png(p.hazy));
    d.clean.push_back(read_png(p.clean));
  }
  d.validate();
  return d;
}

RealDataset load_real(const fs::path& manifest) {
  const DatasetManifest m = read_manifest(manifest);
  RealDataset d;
  for (const auto& p : m.images) d.images.push_back(read_png(p));
  for (const auto& p : m.pairs) d.images.push_back(read_png(p.hazy));
  if (d.images.empty()) throw InputError(manifest.string() + ": no images");
  return d;
}

void echo_config(const TrainConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  std::ofstream(cfg.out_dir / "resolved_config.txt") << dump_train_config(cfg);
}

std::string fmt_shape(const Shape& s) { return std::to_string(s.h) + "x" + std::to_string(s.w); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compression-and-adaptation dehazing pipeline"};
  app.require_subcommand(1);

  Common common;

  auto* synth = app.add_subcommand("synth-data", "generate synthetic pairs and a real-domain stand-in set");
  std::size_t n_pairs = 200, n_real = 64;
  Index size = 64;
  std::string clean_dir;
  add_common(synth, common);
  synth->add_option("--pairs", n_pairs, "number of hazy/clean pairs");
  synth->add_option("--real", n_real, "number of real-domain images");
  synth->add_option("--size", size, "image side in pixels");
  synth->add_option("--clean-dir", clean_dir, "directory of clean PNGs to haze instead of procedural scenes");

  auto* teacher_cmd = app.add_subcommand("train-teacher", "supervised teacher training");
  std::string data;
  std::optional<long> steps;
  add_common(teacher_cmd, common);
  teacher_cmd->add_option("--data", data, "paired dataset manifest")->required();
  teacher_cmd->add_option("--steps", steps, "optimizer steps");

  auto* moc_cmd = app.add_subcommand("moc", "distil the teacher into a student");
  std::string teacher_ckpt;
  add_common(moc_cmd, common);
  moc_cmd->add_option("--teacher", teacher_ckpt, "teacher checkpoint")->required();
  moc_cmd->add_option("--data", data, "paired dataset manifest")->required();
  moc_cmd->add_option("--steps", steps, "optimizer steps");

  auto* prompts_cmd = app.add_subcommand("train-prompts", "train the haze/clear prompt classifier");
  std::string real_manifest;
  std::optional<double> temperature;
  add_common(prompts_cmd, common);
  prompts_cmd->add_option("--data", data, "paired dataset manifest")->required();
  prompts_cmd->add_option("--real", real_manifest, "extra hazy images for the haze class");
  prompts_cmd->add_option("--steps", steps, "optimizer steps");
  prompts_cmd->add_option("--temperature", temperature, "softmax temperature of the similarity logits");

  auto* bia_cmd = app.add_subcommand("bia", "adapt a student to the real domain");
  std::string student_ckpt, prompts_dir, mode;
  std::optional<double> alpha;
  add_common(bia_cmd, common);
  bia_cmd->add_option("--student", student_ckpt, "student checkpoint")->required();
  bia_cmd->add_option("--real", real_manifest, "real-domain manifest")->required();
  bia_cmd->add_option("--prompts", prompts_dir, "train-prompts output directory")->required();
  bia_cmd->add_option("--alpha", alpha, "EMA coefficient");
  bia_cmd->add_option("--steps", steps, "adaptation iterations");
  bia_cmd->add_option("--mode", mode, "full|lower-only|upper-only");

  auto* eval_cmd = app.add_subcommand("eval", "score a model on a dataset");
  std::string model_ckpt;
  bool with_gt = false, identity = false;
  add_common(eval_cmd, common);
  eval_cmd->add_option("--model", model_ckpt, "checkpoint to evaluate");
  eval_cmd->add_flag("--identity", identity, "score the inputs themselves");
  eval_cmd->add_option("--data", data, "dataset manifest")->required();
  eval_cmd->add_flag("--with-gt", with_gt, "compute PSNR/SSIM against the clean images");

  auto* bench_cmd = app.add_subcommand("bench", "parameter, FLOP and latency report");
  std::vector<Index> sides{64, 128, 256};
  int runs = 20;
  add_common(bench_cmd, common);
  bench_cmd->add_option("--model", model_ckpt, "checkpoint (default: teacher and student default configs)");
  bench_cmd->add_option("--sizes", sides, "square input sides");
  bench_cmd->add_option("--runs", runs, "timed runs per shape");

  auto* dehaze_cmd = app.add_subcommand("dehaze", "dehaze a single PNG");
  std::string in_png, out_png;
  dehaze_cmd->add_option("--model", model_ckpt, "checkpoint")->required();
  dehaze_cmd->add_option("--in", in_png, "input PNG")->required();
  dehaze_cmd->add_option("--out", out_png, "output PNG")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      SynthOptions opts;
      opts.size = size;
      const std::uint64_t seed = common.seed.value_or(0);
      std::optional<fs::path> dir;
      if (!clean_dir.empty()) dir = clean_dir;
      const PairedDataset pairs = build_synthetic_dataset(dir, n_pairs, seed, opts);
      const RealDataset real = build_real_dataset(n_real, seed, opts);
      const fs::path out = common.out;
      fs::create_directories(out / "pairs");
      fs::create_directories(out / "real");
      DatasetManifest pm, rm;
      char name[64];
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::snprintf(name, sizeof name, "%05zu", i);
        const fs::path h = out / "pairs" / (std::string(name) + "_hazy.png");
        const fs::path c = out / "pairs" / (std::string(name) + "_clean.png");
        write_png(h, pairs.hazy[i]);
        write_png(c, pairs.clean[i]);
        pm.pairs.push_back({h, c});
      }
      for (std::size_t i = 0; i < real.size(); ++i) {
        std::snprintf(name, sizeof name, "%05zu.png", i);
        write_png(out / "real" / name, real.images[i]);
        rm.images.push_back(out / "real" / name);
      }
      write_manifest(out / "pairs.json", pm);
      write_manifest(out / "real.json", rm);
      std::cout << "wrote " << pairs.size() << " pairs and " << real.size() << " real images to " << out << "\n";
    } else if (teacher_cmd->parsed()) {
      TrainConfig cfg = resolve(common);
      if (steps) cfg.n_teacher = *steps;
      echo_config(cfg);
      const PairedDataset d = load_pairs(data);
      const MocResult r = train_teacher(ModelHandle(NetConfig::teacher_default(), cfg.seed), d, cfg);
      std::cout << "teacher: final loss " << (r.log.empty() ? 0.0 : r.log.back().total) << "\n";
    } else if (moc_cmd->parsed()) {
      TrainConfig cfg = resolve(common);
      if (steps) cfg.n_moc = *steps;
      echo_config(cfg);
      ModelHandle teacher = load_checkpoint(teacher_ckpt);
      const PairedDataset d = load_pairs(data);
      const MocResult r = run_moc(teacher, ModelHandle(NetConfig::student_default(), cfg.seed + 1), d, cfg);
      if (!r.log.empty()) {
        std::cout << "moc: align " << r.log.front().align << " -> " << r.log.back().align << ", total "
                  << r.log.back().total << "\n";
      }
    } else if (prompts_cmd->parsed()) {
      TrainConfig cfg = resolve(common);
      const PairedDataset d = load_pairs(data);
      std::vector<Image> hazy = d.hazy;
      if (!real_manifest.empty()) {
        for (auto& img : load_real(real_manifest).images) hazy.push_back(std::move(img));
      }
      PromptTrainOptions opts;
      opts.seed = cfg.seed;
      if (steps) opts.steps = *steps;
      if (temperature) opts.temperature = *temperature;
      EmbeddingBackend<float> backend = EmbeddingBackend<float>::desk_default(cfg.seed);
      const PromptTrainResult r = train_prompts(hazy, d.clean, backend, opts);
      fs::create_directories(cfg.out_dir);
      save_prompts(cfg.out_dir / "prompts.json", r.prompts);
      save_backend(cfg.out_dir / "backend", backend);
      std::cout << "prompts: holdout accuracy " << r.prompts.holdout_accuracy << ", mean p(hazy) on hazy "
                << r.mean_prob_hazy << ", on clear " << r.mean_prob_clear << "\n";
    } else if (bia_cmd->parsed()) {
      TrainConfig cfg = resolve(common);
      if (steps) cfg.t_bia = *steps;
      if (alpha) cfg.alpha = *alpha;
      if (!mode.empty()) cfg.bia_mode = bia_mode_from_string(mode);
      cfg.validate();
      echo_config(cfg);
      const ModelHandle student = load_checkpoint(student_ckpt);
      const RealDataset real = load_real(real_manifest);
      const PromptPair prompts = load_prompts(fs::path(prompts_dir) / "prompts.json");
      EmbeddingBackend<float> backend = load_backend(fs::path(prompts_dir) / "backend");
      const BiaResult r = run_bia(student, real, prompts, backend, cfg);
      if (!r.log.empty()) {
        std::cout << "bia (" << to_string(cfg.bia_mode) << "): l_rea " << r.log.front().l_rea << " -> "
                  << r.log.back().l_rea << "\n";
      }
    } else if (eval_cmd->parsed()) {
      if (model_ckpt.empty() == !identity) throw InputError("eval: give exactly one of --model or --identity");
      const DatasetManifest m = read_manifest(data);
      std::vector<Image> inputs, targets;
      for (const auto& p : m.pairs) {
        inputs.push_back(read_png(p.hazy));
        targets.push_back(read_png(p.clean));
      }
      for (const auto& p : m.images) inputs.push_back(read_png(p));
      if (with_gt && !m.images.empty()) throw InputError("eval: --with-gt needs a paired manifest");
      Dehazer dehaze = [](const Image& x) { return x; };
      if (!identity) dehaze = as_dehazer(load_checkpoint(model_ckpt));
      const MetricReport report = evaluate(dehaze, inputs, targets.empty() ? nullptr : &targets, with_gt);
      const fs::path out = common.out;
      fs::create_directories(out);
      report.write(out / "metrics.json", out / "metrics.csv");
      std::cout << report.to_json()["aggregate"].dump() << "\n";
    } else if (bench_cmd->parsed()) {
      std::vector<Shape> shapes;
      for (Index s : sides) shapes.push_back({1, 3, s, s});
      BenchOptions opts;
      opts.runs = runs;
      nlohmann::json j;
      auto run = [&](const std::string& label, const ModelHandle& model) {
        const EfficiencyReport r = bench_efficiency(model, shapes, opts);
        j[label] = r.to_json();
        std::cout << label << ": params " << r.params << ", flops@" << fmt_shape(r.flops_shape) << " " << r.flops;
        for (const auto& e : r.latency) std::cout << ", " << fmt_shape(e.shape) << " " << e.median_ms << " ms";
        std::cout << "\n";
      };
      if (!model_ckpt.empty()) {
        run("model", load_checkpoint(model_ckpt));
      } else {
        run("teacher", ModelHandle(NetConfig::teacher_default(), 0));
        run("student", ModelHandle(NetConfig::student_default(), 0));
      }
      fs::create_directories(common.out);
      std::ofstream(fs::path(common.out) / "bench.json") << j.dump(2) << "\n";
    } else if (dehaze_cmd->parsed()) {
      const ModelHandle model = load_checkpoint(model_ckpt);
      write_png(out_png, model.forward(read_png(in_png)).y);
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
