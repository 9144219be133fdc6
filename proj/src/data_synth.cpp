#include "coa/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "coa/image_io.hpp"

namespace coa {
namespace {

bool in_unit_range(const Image& img) {
  return (img.array() >= 0.0f).all() && (img.array() <= 1.0f).all();
}

std::mt19937_64 sub_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::array<float, 3> random_colour(std::mt19937_64& rng) {
  std::array<float, 3> c{};
  for (float& v : c) v = static_cast<float>(uniform(rng, 0.0, 1.0));
  return c;
}

/// Centre crop or tile a loaded image to size x size.
Image fit_square(const Image& src, Index size) {
  const Shape s = src.shape();
  Image out(1, 3, size, size);
  const Index top = s.h > size ? (s.h - size) / 2 : 0;
  const Index left = s.w > size ? (s.w - size) / 2 : 0;
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) out(0, c, y, x) = src(0, c, (top + y) % s.h, (left + x) % s.w);
  return out;
}

}  // namespace

void HazeParams::validate() const {
  for (float a : airlight)
    if (!(a >= 0.0f && a <= 1.0f)) throw InputError("HazeParams: airlight outside [0,1]");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw InputError("HazeParams: beta must be finite and >= 0");
  if (!depth.allFinite() || (depth < 0.0f).any()) throw InputError("HazeParams: depth must be finite and >= 0");
}

DepthMap HazeParams::transmission() const { return (-static_cast<float>(beta) * depth).exp(); }

Image synthesize_haze(const Image& clean, const HazeParams& params) {
  params.validate();
  const Shape s = clean.shape();
  if (s.c != 3) throw DimensionError("synthesize_haze: expected RGB, got " + s.str());
  if (params.depth.rows() != s.h || params.depth.cols() != s.w) {
    throw DimensionError("synthesize_haze: depth map " + std::to_string(params.depth.rows()) + "x" +
                         std::to_string(params.depth.cols()) + " does not match image " + s.str());
  }
  const DepthMap t = params.transmission();
  Image hazy(s);
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < 3; ++c) {
      hazy.plane(n, c) = (clean.plane(n, c) * t + params.airlight[c] * (1.0f - t)).max(0.0f).min(1.0f);
    }
  return hazy;
}

DepthMap smooth_field(Index h, Index w, Index coarse, double lo, double hi, std::mt19937_64& rng) {
  DepthMap grid(coarse + 1, coarse + 1);
  for (Index i = 0; i < grid.size(); ++i) grid.data()[i] = static_cast<float>(uniform(rng, 0.0, 1.0));
  DepthMap field(h, w);
  for (Index y = 0; y < h; ++y) {
    const double gy = static_cast<double>(y) / static_cast<double>(std::max<Index>(h - 1, 1)) * coarse;
    const Index y0 = std::min<Index>(static_cast<Index>(gy), coarse - 1);
    const float fy = static_cast<float>(gy - y0);
    for (Index x = 0; x < w; ++x) {
      const double gx = static_cast<double>(x) / static_cast<double>(std::max<Index>(w - 1, 1)) * coarse;
      const Index x0 = std::min<Index>(static_cast<Index>(gx), coarse - 1);
      const float fx = static_cast<float>(gx - x0);
      // smoothstep weights remove the grid creases of plain bilinear blending
      const float sy = fy * fy * (3 - 2 * fy);
      const float sx = fx * fx * (3 - 2 * fx);
      field(y, x) = (1 - sy) * ((1 - sx) * grid(y0, x0) + sx * grid(y0, x0 + 1)) +
                    sy * ((1 - sx) * grid(y0 + 1, x0) + sx * grid(y0 + 1, x0 + 1));
    }
  }
  const float mn = field.minCoeff();
  const float mx = field.maxCoeff();
  const float range = mx > mn ? mx - mn : 1.0f;
  return static_cast<float>(lo) + (field - mn) / range * static_cast<float>(hi - lo);
}

Image procedural_clean(Index size, std::mt19937_64& rng, DepthMap& depth, double depth_max) {
  Image img(1, 3, size, size);
  const auto top = random_colour(rng);
  const auto bottom = random_colour(rng);
  for (Index y = 0; y < size; ++y) {
    const float a = static_cast<float>(y) / static_cast<float>(size - 1);
    for (Index c = 0; c < 3; ++c)
      for (Index x = 0; x < size; ++x) img(0, c, y, x) = (1 - a) * top[c] + a * bottom[c];
  }
  depth = smooth_field(size, size, 3, 0.0, 1.0, rng);

  const int shapes = std::uniform_int_distribution<int>(3, 6)(rng);
  for (int k = 0; k < shapes; ++k) {
    const auto colour = random_colour(rng);
    const bool circle = uniform(rng, 0.0, 1.0) < 0.5;
    const double cy = uniform(rng, 0.0, static_cast<double>(size));
    const double cx = uniform(rng, 0.0, static_cast<double>(size));
    const double r = uniform(rng, 0.08, 0.3) * static_cast<double>(size);
    const double rh = uniform(rng, 0.5, 1.5) * r;
    const float near = static_cast<float>(uniform(rng, 0.0, 0.8));
    const double freq = uniform(rng, 0.4, 1.4);
    const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        const bool inside = circle ? dy * dy + dx * dx <= r * r : std::abs(dy) <= rh && std::abs(dx) <= r;
        if (!inside) continue;
        const float texture = static_cast<float>(0.12 * std::sin(freq * static_cast<double>(x + y) + phase));
        for (Index c = 0; c < 3; ++c) img(0, c, y, x) = std::clamp(colour[c] + texture, 0.0f, 1.0f);
        depth(y, x) = std::min(depth(y, x), near);
      }
  }

  // Keep the per-pixel channel minimum low, as in haze-free outdoor scenes.
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      const float m = std::min({img(0, 0, y, x), img(0, 1, y, x), img(0, 2, y, x)});
      const float excess = std::max(0.0f, m - 0.35f);
      for (Index c = 0; c < 3; ++c) img(0, c, y, x) -= excess;
    }

  const float mn = depth.minCoeff();
  const float mx = depth.maxCoeff();
  depth = (depth - mn) / (mx > mn ? mx - mn : 1.0f) * static_cast<float>(depth_max);
  return img;
}

void PairedDataset::validate() const {
  if (clean.size() != hazy.size()) throw InputError("PairedDataset: clean/hazy counts differ");
  for (std::size_t i = 0; i < clean.size(); ++i) {
    require_same_shape(clean[i], hazy[i], "PairedDataset");
    if (!in_unit_range(clean[i]) || !in_unit_range(hazy[i])) {
      throw InputError("PairedDataset: pixel outside [0,1] in pair " + std::to_string(i));
    }
  }
}

std::pair<PairedDataset, PairedDataset> PairedDataset::split_tail(std::size_t count) const {
  if (count > size()) throw InputError("split_tail: not enough pairs");
  PairedDataset head{{clean.begin(), clean.end() - count}, {hazy.begin(), hazy.end() - count}, seed};
  PairedDataset tail{{clean.end() - count, clean.end()}, {hazy.end() - count, hazy.end()}, seed};
  return {std::move(head), std::move(tail)};
}

void RealDataset::validate() const {
  for (std::size_t i = 0; i < images.size(); ++i)
    if (!in_unit_range(images[i])) throw InputError("RealDataset: pixel outside [0,1] in image " + std::to_string(i));
}

std::pair<RealDataset, RealDataset> RealDataset::split_tail(std::size_t count) const {
  if (count > size()) throw InputError("split_tail: not enough images");
  return {RealDataset{{images.begin(), images.end() - count}, seed},
          RealDataset{{images.end() - count, images.end()}, seed}};
}

PairedDataset build_synthetic_dataset(const std::optional<std::filesystem::path>& clean_dir, std::size_t n,
                                      std::uint64_t seed, const SynthOptions& opts) {
  if (n < 1) throw InputError("build_synthetic_dataset: n must be >= 1");
  std::vector<Image> sources;
  if (clean_dir) {
    if (!std::filesystem::is_directory(*clean_dir)) {
      throw InputError("build_synthetic_dataset: not a directory: " + clean_dir->string());
    }
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(*clean_dir))
      if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw InputError("build_synthetic_dataset: no PNG files in " + clean_dir->string());
    for (const auto& f : files) sources.push_back(fit_square(read_png(f), opts.size));
  }

  PairedDataset ds;
  ds.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = sub_rng(seed, i);
    HazeParams params;
    Image clean;
    if (sources.empty()) {
      clean = procedural_clean(opts.size, rng, params.depth, opts.depth_max);
    } else {
      clean = sources[i % sources.size()];
      params.depth = smooth_field(opts.size, opts.size, 3, 0.0, opts.depth_max, rng);
    }
    params.beta = uniform(rng, opts.beta_min, opts.beta_max);
    const float a = static_cast<float>(uniform(rng, opts.airlight_min, opts.airlight_max));
    params.airlight = {a, a, a};
    ds.hazy.push_back(synthesize_haze(clean, params));
    ds.clean.push_back(std::move(clean));
  }
  return ds;
}

RealDataset build_real_dataset(std::size_t n, std::uint64_t seed, const SynthOptions& opts) {
  if (n < 1) throw InputError("build_real_dataset: n must be >= 1");
  RealDataset ds;
  ds.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    // a separate stream family keeps real scenes distinct from synthetic ones
    auto rng = sub_rng(seed ^ 0x9e3779b97f4a7c15ULL, i);
    HazeParams params;
    const Image clean = procedural_clean(opts.size, rng, params.depth, opts.depth_max);
    const DepthMap beta = smooth_field(opts.size, opts.size, 2, opts.beta_min, opts.beta_max, rng);
    params.depth = params.depth * beta;
    params.beta = 1.0;
    for (float& a : params.airlight) a = static_cast<float>(uniform(rng, opts.airlight_min, opts.airlight_max));
    ds.images.push_back(synthesize_haze(clean, params));
  }
  return ds;
}

AugmentDraw draw_augment(const Shape& shape, Index crop, std::uint64_t seed) {
  if (crop < 1 || shape.h < crop || shape.w < crop) {
    throw InputError("augment: image " + shape.str() + " smaller than crop " + std::to_string(crop));
  }
  auto rng = sub_rng(seed, 0xa11a);
  AugmentDraw d;
  d.quarter_turns = std::uniform_int_distribution<int>(0, 3)(rng);
  d.flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  const Index h = d.quarter_turns % 2 == 0 ? shape.h : shape.w;
  const Index w = d.quarter_turns % 2 == 0 ? shape.w : shape.h;
  d.top = std::uniform_int_distribution<Index>(0, h - crop)(rng);
  d.left = std::uniform_int_distribution<Index>(0, w - crop)(rng);
  d.crop = crop;
  return d;
}

Image apply_augment(const Image& image, const AugmentDraw& d) {
  const Shape s = image.shape();
  const Index rh = d.quarter_turns % 2 == 0 ? s.h : s.w;
  const Index rw = d.quarter_turns % 2 == 0 ? s.w : s.h;
  if (d.crop < 1 || d.top < 0 || d.left < 0 || d.top + d.crop > rh || d.left + d.crop > rw) {
    throw InputError("augment: crop window outside image " + s.str());
  }
  Image out(Shape{s.n, s.c, d.crop, d.crop});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      auto src = image.plane(n, c);
      auto dst = out.plane(n, c);
      for (Index y = 0; y < d.crop; ++y)
        for (Index x = 0; x < d.crop; ++x) {
          // (ry, rx) in the rotated+flipped frame, mapped back to the source
          const Index ry = d.top + y;
          const Index rx0 = d.left + x;
          const Index rx = d.flip ? rw - 1 - rx0 : rx0;
          Index sy = ry, sx = rx;
          switch (d.quarter_turns & 3) {
            case 1: sy = s.h - 1 - rx; sx = ry; break;          // 90 deg clockwise
            case 2: sy = s.h - 1 - ry; sx = s.w - 1 - rx; break;
            case 3: sy = rx; sx = s.w - 1 - ry; break;
            default: break;
          }
          dst(y, x) = src(sy, sx);
        }
    }
  return out;
}

std::pair<Image, Image> augment(const Image& hazy, const Image& clean, std::uint64_t seed, Index crop) {
  require_same_shape(hazy, clean, "augment");
  const AugmentDraw d = draw_augment(hazy.shape(), crop, seed);
  return {apply_augment(hazy, d), apply_augment(clean, d)};
}

}  // namespace coa
