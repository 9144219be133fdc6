#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "coa/dehaze_net.hpp"
#include "coa/tensor.hpp"
#include "json.hpp"

namespace coa {

/// Shannon entropy (bits) of the 256-bin histogram of BT.601 luma.
double entropy(const Image& image);

/// 10 log10(1 / MSE), capped at 100 dB once MSE < 1e-10.
double psnr(const Image& pred, const Image& target);

/// Mean SSIM (Gaussian window 11, sigma 1.5), evaluated in double precision.
double ssim_metric(const Image& pred, const Image& target);

/// Mean of the dark channel: per-pixel RGB minimum followed by a 7x7 minimum
/// filter with reflect padding.
double haze_density_proxy(const Image& image);

struct ImageMetrics {
  std::string id;
  std::optional<double> psnr;
  std::optional<double> ssim;
  double entropy = 0.0;
  double haze_density = 0.0;
};

struct MetricReport {
  std::vector<ImageMetrics> per_image;
  struct Aggregate {
    std::optional<double> psnr;
    std::optional<double> ssim;
    double entropy = 0.0;
    double haze_density = 0.0;
  } aggregate;

  void recompute_aggregate();
  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
  void write(const std::filesystem::path& json_file, const std::filesystem::path& csv_file) const;
};

using Dehazer = std::function<Image(const Image&)>;

Dehazer as_dehazer(ModelHandle model);

/// Runs `dehaze` on every input and scores the outputs. PSNR/SSIM require
/// `targets` when `with_ground_truth` is set.
MetricReport evaluate(const Dehazer& dehaze, const std::vector<Image>& inputs, const std::vector<Image>* targets,
                      bool with_ground_truth);

struct LatencyEntry {
  Shape shape;
  double median_ms = 0.0;
};

struct EfficiencyReport {
  Index params = 0;
  Index flops = 0;
  Shape flops_shape;
  std::vector<LatencyEntry> latency;

  nlohmann::json to_json() const;
};

struct BenchOptions {
  int warmup = 3;
  int runs = 20;
};

/// Parameter count, FLOPs at the first shape, and median forward latency per shape.
EfficiencyReport bench_efficiency(const ModelHandle& model, const std::vector<Shape>& shapes,
                                  const BenchOptions& opts = {});

}  // namespace coa
