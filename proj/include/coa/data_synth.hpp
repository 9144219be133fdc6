#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "coa/tensor.hpp"

namespace coa {

using DepthMap = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Parameters of the atmospheric scattering model I = J t + A (1 - t) with
/// t = exp(-beta * depth).
struct HazeParams {
  std::array<float, 3> airlight{1.0f, 1.0f, 1.0f};
  double beta = 1.0;
  DepthMap depth;

  void validate() const;
  DepthMap transmission() const;
};

/// Index-aligned clean/hazy pairs.
struct PairedDataset {
  std::vector<Image> clean;
  std::vector<Image> hazy;
  std::uint64_t seed = 0;

  std::size_t size() const { return clean.size(); }
  void validate() const;
  /// Splits off the last `count` pairs.
  std::pair<PairedDataset, PairedDataset> split_tail(std::size_t count) const;
};

/// Unlabelled real-domain images.
struct RealDataset {
  std::vector<Image> images;
  std::uint64_t seed = 0;

  std::size_t size() const { return images.size(); }
  void validate() const;
  std::pair<RealDataset, RealDataset> split_tail(std::size_t count) const;
};

struct SynthOptions {
  Index size = 64;
  double beta_min = 0.5;
  double beta_max = 2.5;
  double airlight_min = 0.7;
  double airlight_max = 1.0;
  double depth_max = 3.0;
};

/// Applies the scattering model; output clipped to [0, 1].
Image synthesize_haze(const Image& clean, const HazeParams& params);

/// Smooth random field (bilinear upsampling of a coarse noise grid) rescaled
/// to [lo, hi].
DepthMap smooth_field(Index h, Index w, Index coarse, double lo, double hi, std::mt19937_64& rng);

/// Procedural scene: colour-gradient background with textured shapes. Writes
/// a matching depth map normalised to [0, depth_max] into `depth`.
Image procedural_clean(Index size, std::mt19937_64& rng, DepthMap& depth, double depth_max = 3.0);

/// n synthetic pairs with beta ~ U[beta_min, beta_max] and grey airlight in
/// [airlight_min, airlight_max]. Clean images come from `clean_dir` (PNG
/// files, cycled) when given, otherwise from procedural_clean.
PairedDataset build_synthetic_dataset(const std::optional<std::filesystem::path>& clean_dir, std::size_t n,
                                      std::uint64_t seed, const SynthOptions& opts = {});

/// Real-domain stand-in: spatially varying scattering and colour-cast
/// airlight; the clean scenes are discarded.
RealDataset build_real_dataset(std::size_t n, std::uint64_t seed, const SynthOptions& opts = {});

/// One geometric augmentation: quarter-turn rotation, optional horizontal
/// flip, then a crop of side `crop` at (top, left) in the rotated frame.
struct AugmentDraw {
  int quarter_turns = 0;
  bool flip = false;
  Index top = 0;
  Index left = 0;
  Index crop = 0;
};

AugmentDraw draw_augment(const Shape& shape, Index crop, std::uint64_t seed);
Image apply_augment(const Image& image, const AugmentDraw& draw);

/// Applies the same random draw to both images.
std::pair<Image, Image> augment(const Image& hazy, const Image& clean, std::uint64_t seed, Index crop);

}  // namespace coa
