#include "coa/coa_trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "coa/checkpoint.hpp"
#include "coa/metrics.hpp"

namespace coa {
namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finaliser over a combined key
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Image crop_only(const Image& img, Index crop) {
  const Shape s = img.shape();
  AugmentDraw d;
  d.crop = crop;
  d.top = (s.h - crop) / 2;
  d.left = (s.w - crop) / 2;
  return apply_augment(img, d);
}

bool finite(double v) { return std::isfinite(v); }

void write_run_manifest(const TrainConfig& cfg, const std::string& phase, const nlohmann::json& extra = {}) {
  if (cfg.out_dir.empty()) return;
  std::filesystem::create_directories(cfg.out_dir);
  nlohmann::json j{{"phase", phase}, {"config", cfg.to_json()}};
  if (!extra.is_null()) j["extra"] = extra;
  std::ofstream(cfg.out_dir / ("run_manifest_" + phase + ".json")) << j.dump(2) << "\n";
}

/// Shared loop of teacher training and MoC.
MocResult supervised_train(const ModelHandle& init, ModelHandle* teacher, const PairedDataset& data,
                           const TrainConfig& cfg, double eta, long steps, const LossWeights& weights,
                           const AlignWeights& align, const std::string& phase, Role role) {
  cfg.validate();
  if (data.size() == 0) throw InputError(phase + ": empty dataset");
  if (data.clean.size() != data.hazy.size()) throw InputError(phase + ": clean/hazy counts differ");

  MocResult result;
  result.student = init;
  ModelHandle& model = result.student;
  const bool use_align = !align.all_zero();
  if (teacher) {
    if (teacher->stages() != model.stages()) {
      throw ConfigError(phase + ": teacher has " + std::to_string(teacher->stages()) + " stages, student " +
                        std::to_string(model.stages()));
    }
    result.projections = ContextProjections<float>(model.config().encoder_widths, teacher->config().encoder_widths,
                                                   mix(cfg.seed, 0x9a0));
  }
  ParamList<float> params = model.params();
  if (use_align) {
    for (const auto& p : result.projections.params()) params.push_back(p);
  }

  Optimizer<float> opt(cfg.optimizer, cfg.adam);
  const CosineSchedule schedule{eta, eta * cfg.lr_end_ratio, steps};
  for (long step = 0; step < steps; ++step) {
    auto [x, y] = sample_pairs(data, cfg, step, 1);
    zero_grads(params);
    FeatureTaps<float> teacher_taps;
    if (teacher && use_align) teacher_taps = teacher->encode(x);
    NetTrace<float> trace;
    const NetOutput<float> out = model.forward(x, &trace);
    MocGrads<float> grads;
    const MocTerms<float> terms = moc_loss(out.y, y, teacher_taps, out.taps, weights, align, teacher,
                                           use_align ? &result.projections : nullptr, &grads);
    if (!finite(terms.total)) {
      throw NumericError(phase + ": non-finite loss at step " + std::to_string(step));
    }
    model.backward(trace, &grads.dout, grads.dtaps.empty() ? nullptr : &grads.dtaps, true);
    const double lr = schedule.at(step);
    opt.step(params, lr);
    result.log.push_back({step, lr, terms.total, terms.su, terms.ss, terms.pe, terms.align});

    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(cfg.out_dir / (phase + "_step" + std::to_string(step + 1)), model, role, step + 1, phase);
    }
  }

  if (!cfg.out_dir.empty()) {
    write_moc_log(cfg.out_dir / (phase + "_log.csv"), result.log);
    const std::string final_name = phase == "moc" ? "student_moc_final" : phase + "_final";
    save_checkpoint(cfg.out_dir / final_name, model, role, steps, phase);
    write_run_manifest(cfg, phase);
  }
  return result;
}

}  // namespace

std::string to_string(BiaMode mode) {
  switch (mode) {
    case BiaMode::full: return "full";
    case BiaMode::lower_only: return "lower-only";
    case BiaMode::upper_only: return "upper-only";
  }
  return "?";
}

BiaMode bia_mode_from_string(const std::string& s) {
  if (s == "full") return BiaMode::full;
  if (s == "lower-only") return BiaMode::lower_only;
  if (s == "upper-only") return BiaMode::upper_only;
  throw ConfigError("unknown BiA mode '" + s + "' (expected full|lower-only|upper-only)");
}

void TrainConfig::validate() const {
  if (!(eta_teacher > 0) || !(eta_moc > 0) || !(eta_bia > 0)) throw ConfigError("TrainConfig: step sizes must be > 0");
  if (!(lr_end_ratio > 0) || lr_end_ratio > 1) throw ConfigError("TrainConfig: lr_end_ratio must be in (0, 1]");
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("TrainConfig: alpha must be in [0, 1]");
  if (n_teacher < 0 || n_moc < 0 || t_bia < 0) throw ConfigError("TrainConfig: iteration counts must be >= 0");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (crop < 1) throw ConfigError("TrainConfig: crop must be >= 1");
  if (loss.lambda_su < 0 || loss.lambda_ss < 0 || loss.lambda_pe < 0) {
    throw ConfigError("TrainConfig: loss weights must be >= 0");
  }
}

AlignWeights TrainConfig::resolved_align(Index stages) const {
  if (align_weights.empty()) return AlignWeights::uniform(stages);
  AlignWeights w{align_weights};
  w.validate(stages);
  return w;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"eta_teacher", eta_teacher},
          {"eta_moc", eta_moc},
          {"eta_bia", eta_bia},
          {"lr_end_ratio", lr_end_ratio},
          {"alpha", alpha},
          {"n_teacher", n_teacher},
          {"n_moc", n_moc},
          {"t_bia", t_bia},
          {"adam_beta1", adam.beta1},
          {"adam_beta2", adam.beta2},
          {"adam_eps", adam.eps},
          {"optimizer", coa::to_string(optimizer)},
          {"batch_size", batch_size},
          {"crop", crop},
          {"augment", augment},
          {"seed", seed},
          {"lambda_su", loss.lambda_su},
          {"lambda_ss", loss.lambda_ss},
          {"lambda_pe", loss.lambda_pe},
          {"align_weights", align_weights},
          {"bia_mode", coa::to_string(bia_mode)},
          {"checkpoint_every", checkpoint_every}};
}

namespace {

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
}

long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long d = std::stoll(v, &used);
    if (used == v.size()) return static_cast<long>(d);
  } catch (const std::exception&) {
  }
  throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (key == "teacher.eta") cfg.eta_teacher = parse_double(key, v);
  else if (key == "teacher.n_steps") cfg.n_teacher = parse_long(key, v);
  else if (key == "moc.eta") cfg.eta_moc = parse_double(key, v);
  else if (key == "moc.n_steps") cfg.n_moc = parse_long(key, v);
  else if (key == "moc.align_weights") {
    cfg.align_weights.clear();
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, ',');) {
      if (!trim(item).empty()) cfg.align_weights.push_back(parse_double(key, trim(item)));
    }
  } else if (key == "bia.eta") cfg.eta_bia = parse_double(key, v);
  else if (key == "bia.n_steps") cfg.t_bia = parse_long(key, v);
  else if (key == "bia.alpha") cfg.alpha = parse_double(key, v);
  else if (key == "bia.mode") cfg.bia_mode = bia_mode_from_string(v);
  else if (key == "loss.lambda_su") cfg.loss.lambda_su = parse_double(key, v);
  else if (key == "loss.lambda_ss") cfg.loss.lambda_ss = parse_double(key, v);
  else if (key == "loss.lambda_pe") cfg.loss.lambda_pe = parse_double(key, v);
  else if (key == "optim.kind") cfg.optimizer = optimizer_from_string(v);
  else if (key == "optim.beta1") cfg.adam.beta1 = parse_double(key, v);
  else if (key == "optim.beta2") cfg.adam.beta2 = parse_double(key, v);
  else if (key == "optim.eps") cfg.adam.eps = parse_double(key, v);
  else if (key == "optim.lr_end_ratio") cfg.lr_end_ratio = parse_double(key, v);
  else if (key == "data.batch_size") cfg.batch_size = parse_long(key, v);
  else if (key == "data.crop") cfg.crop = parse_long(key, v);
  else if (key == "data.augment") cfg.augment = parse_bool(key, v);
  else if (key == "run.seed") cfg.seed = static_cast<std::uint64_t>(parse_long(key, v));
  else if (key == "run.checkpoint_every") cfg.checkpoint_every = parse_long(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

TrainConfig load_train_config(const std::filesystem::path& file, TrainConfig base) {
  std::ifstream in(file);
  if (!in) throw InputError("cannot open config " + file.string());
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(file.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    apply_config_value(base, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  base.validate();
  return base;
}

std::string dump_train_config(const TrainConfig& cfg) {
  std::string weights;
  for (std::size_t i = 0; i < cfg.align_weights.size(); ++i) weights += (i ? "," : "") + fmt(cfg.align_weights[i]);
  std::ostringstream os;
  os << "teacher.eta = " << fmt(cfg.eta_teacher) << "\n"
     << "teacher.n_steps = " << cfg.n_teacher << "\n"
     << "moc.eta = " << fmt(cfg.eta_moc) << "\n"
     << "moc.n_steps = " << cfg.n_moc << "\n"
     << "moc.align_weights = " << weights << "\n"
     << "bia.eta = " << fmt(cfg.eta_bia) << "\n"
     << "bia.n_steps = " << cfg.t_bia << "\n"
     << "bia.alpha = " << fmt(cfg.alpha) << "\n"
     << "bia.mode = " << to_string(cfg.bia_mode) << "\n"
     << "loss.lambda_su = " << fmt(cfg.loss.lambda_su) << "\n"
     << "loss.lambda_ss = " << fmt(cfg.loss.lambda_ss) << "\n"
     << "loss.lambda_pe = " << fmt(cfg.loss.lambda_pe) << "\n"
     << "optim.kind = " << to_string(cfg.optimizer) << "\n"
     << "optim.beta1 = " << fmt(cfg.adam.beta1) << "\n"
     << "optim.beta2 = " << fmt(cfg.adam.beta2) << "\n"
     << "optim.eps = " << fmt(cfg.adam.eps) << "\n"
     << "optim.lr_end_ratio = " << fmt(cfg.lr_end_ratio) << "\n"
     << "data.batch_size = " << cfg.batch_size << "\n"
     << "data.crop = " << cfg.crop << "\n"
     << "data.augment = " << (cfg.augment ? "true" : "false") << "\n"
     << "run.seed = " << cfg.seed << "\n"
     << "run.checkpoint_every = " << cfg.checkpoint_every << "\n";
  return os.str();
}

std::pair<Image, Image> sample_pairs(const PairedDataset& data, const TrainConfig& cfg, long step,
                                     std::uint64_t stream) {
  if (data.size() == 0) throw InputError("sample_pairs: empty dataset");
  std::mt19937_64 rng(mix(mix(cfg.seed, stream), static_cast<std::uint64_t>(step)));
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<Image> xs, ys;
  for (Index i = 0; i < cfg.batch_size; ++i) {
    const std::size_t k = pick(rng);
    if (cfg.augment) {
      auto [h, c] = augment(data.hazy[k], data.clean[k], rng(), cfg.crop);
      xs.push_back(std::move(h));
      ys.push_back(std::move(c));
    } else {
      xs.push_back(crop_only(data.hazy[k], cfg.crop));
      ys.push_back(crop_only(data.clean[k], cfg.crop));
    }
  }
  return {stack(xs), stack(ys)};
}

Image sample_images(const std::vector<Image>& images, const TrainConfig& cfg, long step, std::uint64_t stream) {
  if (images.empty()) throw InputError("sample_images: empty dataset");
  std::mt19937_64 rng(mix(mix(cfg.seed, stream), static_cast<std::uint64_t>(step)));
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  std::vector<Image> xs;
  for (Index i = 0; i < cfg.batch_size; ++i) {
    const std::size_t k = pick(rng);
    if (cfg.augment) {
      xs.push_back(apply_augment(images[k], draw_augment(images[k].shape(), cfg.crop, rng())));
    } else {
      xs.push_back(crop_only(images[k], cfg.crop));
    }
  }
  return stack(xs);
}

MocResult train_teacher(const ModelHandle& teacher, const PairedDataset& data, const TrainConfig& cfg) {
  LossWeights weights = cfg.loss;
  weights.lambda_pe = 0.0;
  return supervised_train(teacher, nullptr, data, cfg, cfg.eta_teacher, cfg.n_teacher, weights,
                          AlignWeights::zeros(teacher.stages()), "teacher", Role::teacher);
}

MocResult run_moc(ModelHandle& teacher, const ModelHandle& student, const PairedDataset& data,
                  const TrainConfig& cfg) {
  return supervised_train(student, &teacher, data, cfg, cfg.eta_moc, cfg.n_moc, cfg.loss,
                          cfg.resolved_align(student.stages()), "moc", Role::student_syn);
}

BiAState BiAState::from_student(const ModelHandle& student, const TrainConfig& cfg) {
  return BiAState{student, student, Optimizer<float>(cfg.optimizer, cfg.adam), 0};
}

BiaTerms bia_gradients(BiAState& state, const Image& real_batch, const PromptPair& prompts,
                       EmbeddingBackend<float>& backend, bool use_l1) {
  const ParamList<float> params = state.lower.params();
  zero_grads(params);
  NetTrace<float> trace;
  const Image y = state.lower.forward(real_batch, &trace).y;
  BiaTerms terms;
  Image dy;
  terms.l_rea = l_rea(y, prompts, backend, &dy);
  if (use_l1) {
    const Image anchor = state.upper.forward(real_batch).y;
    Image d1;
    terms.l1 = l1_loss(y, anchor, &d1);
    dy.array() += d1.array();
  }
  terms.total = terms.l_rea + terms.l1;
  auto diagnostics = [&] {
    return " (l_rea=" + std::to_string(terms.l_rea) + ", l1=" + std::to_string(terms.l1) + ", step " +
           std::to_string(state.step) + ")";
  };
  if (!finite(terms.total)) throw NumericError("bia: non-finite loss" + diagnostics());
  state.lower.backward(trace, &dy, nullptr, true);
  for (const auto& p : params)
    if (!p.grads().allFinite()) throw NumericError("bia: non-finite gradient in " + p.name + diagnostics());
  return terms;
}

BiaTerms bia_lower_step(BiAState& state, const Image& real_batch, const PromptPair& prompts,
                        EmbeddingBackend<float>& backend, double lr, bool use_l1) {
  const BiaTerms terms = bia_gradients(state, real_batch, prompts, backend, use_l1);
  state.optimizer.step(state.lower.params(), lr);
  ++state.step;
  return terms;
}

void bia_ema_step(BiAState& state, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("bia_ema_step: alpha must be in [0, 1]");
  const ParamList<float> upper = state.upper.params();
  const ParamList<float> lower = state.lower.params();
  if (upper.size() != lower.size()) throw ConfigError("bia_ema_step: parameter lists differ");
  const float a = static_cast<float>(alpha);
  const float b = static_cast<float>(1.0 - alpha);
  for (std::size_t i = 0; i < upper.size(); ++i) {
    if (upper[i].shape != lower[i].shape) throw ConfigError("bia_ema_step: shape mismatch for " + upper[i].name);
    upper[i].values() = a * upper[i].values() + b * lower[i].values();
  }
}

double ema_distance(BiAState& state) {
  const VectorX<float> u = flatten(state.upper.params());
  const VectorX<float> l = flatten(state.lower.params());
  return (u.cast<double>() - l.cast<double>()).norm();
}

BiaResult run_bia(const ModelHandle& student, const RealDataset& real_data, const PromptPair& prompts,
                  EmbeddingBackend<float>& backend, const TrainConfig& cfg, const BiaObserver& observer) {
  cfg.validate();
  if (cfg.t_bia > 0 && real_data.size() == 0) throw InputError("run_bia: empty real-domain dataset");
  if (cfg.t_bia > 0 && !prompts.trained) throw StateError("run_bia: prompts have not been trained");

  BiAState state = BiAState::from_student(student, cfg);
  const bool use_l1 = cfg.bia_mode != BiaMode::upper_only;
  const bool use_ema = cfg.bia_mode == BiaMode::full;
  const CosineSchedule schedule{cfg.eta_bia, cfg.eta_bia * cfg.lr_end_ratio, cfg.t_bia};
  BiaResult result;
  for (long t = 0; t < cfg.t_bia; ++t) {
    const Image batch = sample_images(real_data.images, cfg, t, 2);
    const double lr = schedule.at(t);
    const BiaTerms terms = bia_lower_step(state, batch, prompts, backend, lr, use_l1);
    if (use_ema) bia_ema_step(state, cfg.alpha);
    result.log.push_back({t, lr, terms.total, terms.l_rea, terms.l1, ema_distance(state)});
    if (observer) observer(t, state);
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0) {
      ModelHandle& current = use_ema ? state.upper : state.lower;
      save_checkpoint(cfg.out_dir / ("bia_step" + std::to_string(t + 1)), current, Role::student_rea, t + 1, "bia");
    }
  }
  result.model = use_ema ? state.upper : state.lower;
  result.lower = state.lower;
  if (cfg.t_bia == 0) result.model = student;

  if (!cfg.out_dir.empty()) {
    write_bia_log(cfg.out_dir / "bia_log.csv", result.log);
    save_checkpoint(cfg.out_dir / "student_bia_final", result.model, Role::student_rea, cfg.t_bia, "bia");
    write_run_manifest(cfg, "bia");
  }
  return result;
}

double mean_psnr(const ModelHandle& model, const PairedDataset& data) {
  if (data.size() == 0) throw InputError("mean_psnr: empty dataset");
  double total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) total += psnr(model.forward(data.hazy[i]).y, data.clean[i]);
  return total / static_cast<double>(data.size());
}

double mean_l_rea(const ModelHandle& model, const std::vector<Image>& images, const PromptPair& prompts,
                  EmbeddingBackend<float>& backend) {
  if (images.empty()) throw InputError("mean_l_rea: no images");
  double total = 0;
  for (const Image& img : images) total += l_rea(model.forward(img).y, prompts, backend);
  return total / static_cast<double>(images.size());
}

void write_moc_log(const std::filesystem::path& file, const std::vector<MocLogRow>& log) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  out << std::setprecision(9) << "step,lr,loss_total,loss_su,loss_ss,loss_pe,loss_align\n";
  for (const auto& r : log) {
    out << r.step << "," << r.lr << "," << r.total << "," << r.su << "," << r.ss << "," << r.pe << "," << r.align
        << "\n";
  }
}

void write_bia_log(const std::filesystem::path& file, const std::vector<BiaLogRow>& log) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  out << std::setprecision(9) << "step,lr,loss_total,l_rea,l_1,ema_distance\n";
  for (const auto& r : log) {
    out << r.step << "," << r.lr << "," << r.total << "," << r.l_rea << "," << r.l1 << "," << r.ema_distance << "\n";
  }
}

}  // namespace coa
