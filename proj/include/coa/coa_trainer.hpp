#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "coa/data_synth.hpp"
#include "coa/dehaze_net.hpp"
#include "coa/losses.hpp"
#include "coa/optim.hpp"
#include "coa/real_guidance.hpp"
#include "json.hpp"

namespace coa {

enum class BiaMode { full, lower_only, upper_only };

std::string to_string(BiaMode mode);
BiaMode bia_mode_from_string(const std::string& s);

/// Every scalar of the two-phase schedule. Each phase runs Adam with a cosine
/// schedule from its eta down to eta * lr_end_ratio.
struct TrainConfig {
  double eta_teacher = 1e-4;
  double eta_moc = 1e-4;
  double eta_bia = 1e-4;
  double lr_end_ratio = 1e-2;
  double alpha = 0.95;
  long n_teacher = 300;
  long n_moc = 300;
  long t_bia = 200;
  AdamOptions adam;
  OptimizerKind optimizer = OptimizerKind::adam;
  Index batch_size = 8;
  Index crop = 64;
  bool augment = true;
  std::uint64_t seed = 0;
  LossWeights loss;
  /// Empty means uniform 1/L.
  std::vector<double> align_weights;
  BiaMode bia_mode = BiaMode::full;
  /// Where logs, checkpoints and the run manifest go; nothing is written when empty.
  std::filesystem::path out_dir;
  long checkpoint_every = 0;

  void validate() const;
  AlignWeights resolved_align(Index stages) const;
  nlohmann::json to_json() const;
};

/// Sets one flat dotted key (e.g. "moc.n_steps", "bia.alpha") from its text value.
void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Reads `key = value` lines ('#' starts a comment) on top of `base`.
TrainConfig load_train_config(const std::filesystem::path& file, TrainConfig base = {});

/// Inverse of load_train_config: every key with its resolved value.
std::string dump_train_config(const TrainConfig& cfg);

struct MocLogRow {
  long step = 0;
  double lr = 0;
  double total = 0;
  double su = 0;
  double ss = 0;
  double pe = 0;
  double align = 0;
};

struct MocResult {
  ModelHandle student;
  ContextProjections<float> projections;
  std::vector<MocLogRow> log;
};

/// Supervised teacher training on the synthetic pairs (L1 + SSIM, no
/// distillation terms), n_teacher steps at eta_teacher.
MocResult train_teacher(const ModelHandle& teacher, const PairedDataset& data, const TrainConfig& cfg);

/// Model-compression phase: n_moc optimizer steps on moc_loss with the frozen
/// teacher providing the alignment targets and the perceptual features.
MocResult run_moc(ModelHandle& teacher, const ModelHandle& student, const PairedDataset& data,
                  const TrainConfig& cfg);

/// Lower (gradient-trained) and upper (EMA-tracked) models of the adaptation phase.
struct BiAState {
  ModelHandle lower;
  ModelHandle upper;
  Optimizer<float> optimizer;
  long step = 0;

  /// Both levels start from the same parameters.
  static BiAState from_student(const ModelHandle& student, const TrainConfig& cfg);
};

struct BiaTerms {
  double total = 0;
  double l_rea = 0;
  double l1 = 0;
};

/// Evaluates L_rea(lower(x)) + L1(lower(x), upper(x)) and leaves its gradient
/// in the lower model's parameter gradients. The upper output is a constant.
BiaTerms bia_gradients(BiAState& state, const Image& real_batch, const PromptPair& prompts,
                       EmbeddingBackend<float>& backend, bool use_l1 = true);

/// One lower-level step at learning rate `lr`; the upper model is untouched.
BiaTerms bia_lower_step(BiAState& state, const Image& real_batch, const PromptPair& prompts,
                        EmbeddingBackend<float>& backend, double lr, bool use_l1 = true);

/// upper <- alpha * upper + (1 - alpha) * lower, elementwise.
void bia_ema_step(BiAState& state, double alpha);

/// L2 distance between the flattened upper and lower parameters.
double ema_distance(BiAState& state);

struct BiaLogRow {
  long step = 0;
  double lr = 0;
  double total = 0;
  double l_rea = 0;
  double l1 = 0;
  double ema_distance = 0;
};

struct BiaResult {
  ModelHandle model;
  ModelHandle lower;
  std::vector<BiaLogRow> log;
};

/// Called after every iteration with the iteration index t (0-based).
using BiaObserver = std::function<void(long, BiAState&)>;

/// Adaptation phase. `full` interleaves lower steps with EMA updates and
/// returns the upper model; `lower_only` skips the EMA and returns the lower
/// model; `upper_only` fine-tunes a single model on L_rea alone.
BiaResult run_bia(const ModelHandle& student, const RealDataset& real_data, const PromptPair& prompts,
                  EmbeddingBackend<float>& backend, const TrainConfig& cfg, const BiaObserver& observer = {});

/// Deterministic minibatch of `batch_size` pairs for a given step.
std::pair<Image, Image> sample_pairs(const PairedDataset& data, const TrainConfig& cfg, long step,
                                     std::uint64_t stream);
Image sample_images(const std::vector<Image>& images, const TrainConfig& cfg, long step, std::uint64_t stream);

/// Mean PSNR of `model` over the dataset (full images, no augmentation).
double mean_psnr(const ModelHandle& model, const PairedDataset& data);

/// Mean l_rea of the model's outputs over `images`.
double mean_l_rea(const ModelHandle& model, const std::vector<Image>& images, const PromptPair& prompts,
                  EmbeddingBackend<float>& backend);

void write_moc_log(const std::filesystem::path& file, const std::vector<MocLogRow>& log);
void write_bia_log(const std::filesystem::path& file, const std::vector<BiaLogRow>& log);

}  // namespace coa
