#include "coa/metrics.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "coa/losses.hpp"

namespace coa {

double entropy(const Image& image) {
  const Shape s = image.shape();
  if (image.empty()) throw InputError("entropy: empty image");
  if (s.c != 3) throw DimensionError("entropy: expected RGB, got " + s.str());
  std::array<double, 256> hist{};
  for (Index n = 0; n < s.n; ++n)
    for (Index y = 0; y < s.h; ++y)
      for (Index x = 0; x < s.w; ++x) {
        const double luma = 0.299 * image(n, 0, y, x) + 0.587 * image(n, 1, y, x) + 0.114 * image(n, 2, y, x);
        const auto level = static_cast<int>(std::nearbyint(std::clamp(luma, 0.0, 1.0) * 255.0));
        hist[level] += 1.0;
      }
  const double total = static_cast<double>(s.n * s.h * s.w);
  double h = 0.0;
  for (double count : hist) {
    if (count == 0) continue;
    const double p = count / total;
    h -= p * std::log2(p);
  }
  return h;
}

double psnr(const Image& pred, const Image& target) {
  require_same_shape(pred, target, "psnr");
  if (pred.empty()) throw InputError("psnr: empty image");
  const double mse = (pred.array().cast<double>() - target.array().cast<double>()).square().mean();
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim_metric(const Image& pred, const Image& target) {
  require_same_shape(pred, target, "ssim_metric");
  return ssim_mean(pred.cast<double>(), target.cast<double>());
}

double haze_density_proxy(const Image& image) {
  const Shape s = image.shape();
  if (s.c != 3) throw DimensionError("haze_density_proxy: expected RGB, got " + s.str());
  if (image.empty()) throw InputError("haze_density_proxy: empty image");
  constexpr Index radius = 3;
  auto reflect = [](Index i, Index n) {
    if (n == 1) return Index(0);
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  double total = 0.0;
  for (Index n = 0; n < s.n; ++n) {
    Eigen::ArrayXXf dark(s.h, s.w);
    for (Index y = 0; y < s.h; ++y)
      for (Index x = 0; x < s.w; ++x)
        dark(y, x) = std::min({image(n, 0, y, x), image(n, 1, y, x), image(n, 2, y, x)});
    // separable min filter: rows then columns
    Eigen::ArrayXXf rows(s.h, s.w);
    for (Index y = 0; y < s.h; ++y)
      for (Index x = 0; x < s.w; ++x) {
        float m = dark(y, x);
        for (Index d = -radius; d <= radius; ++d) m = std::min(m, dark(y, reflect(x + d, s.w)));
        rows(y, x) = m;
      }
    for (Index y = 0; y < s.h; ++y)
      for (Index x = 0; x < s.w; ++x) {
        float m = rows(y, x);
        for (Index d = -radius; d <= radius; ++d) m = std::min(m, rows(reflect(y + d, s.h), x));
        total += m;
      }
  }
  return total / static_cast<double>(s.n * s.h * s.w);
}

void MetricReport::recompute_aggregate() {
  aggregate = {};
  if (per_image.empty()) return;
  const double n = static_cast<double>(per_image.size());
  double psnr_sum = 0, ssim_sum = 0;
  bool has_gt = true;
  for (const auto& m : per_image) {
    aggregate.entropy += m.entropy / n;
    aggregate.haze_density += m.haze_density / n;
    if (m.psnr && m.ssim) {
      psnr_sum += *m.psnr;
      ssim_sum += *m.ssim;
    } else {
      has_gt = false;
    }
  }
  if (has_gt) {
    aggregate.psnr = psnr_sum / n;
    aggregate.ssim = ssim_sum / n;
  }
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["per_image"] = nlohmann::json::array();
  for (const auto& m : per_image) {
    nlohmann::json e{{"id", m.id}, {"entropy", m.entropy}, {"haze_density", m.haze_density}};
    if (m.psnr) e["psnr"] = *m.psnr;
    if (m.ssim) e["ssim"] = *m.ssim;
    j["per_image"].push_back(e);
  }
  nlohmann::json a{{"entropy", aggregate.entropy}, {"haze_density", aggregate.haze_density}};
  if (aggregate.psnr) a["psnr"] = *aggregate.psnr;
  if (aggregate.ssim) a["ssim"] = *aggregate.ssim;
  j["aggregate"] = a;
  return j;
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  for (const auto& e : j.at("per_image")) {
    ImageMetrics m;
    m.id = e.at("id").get<std::string>();
    m.entropy = e.at("entropy").get<double>();
    m.haze_density = e.at("haze_density").get<double>();
    if (e.contains("psnr")) m.psnr = e["psnr"].get<double>();
    if (e.contains("ssim")) m.ssim = e["ssim"].get<double>();
    r.per_image.push_back(m);
  }
  const auto& a = j.at("aggregate");
  r.aggregate.entropy = a.at("entropy").get<double>();
  r.aggregate.haze_density = a.at("haze_density").get<double>();
  if (a.contains("psnr")) r.aggregate.psnr = a["psnr"].get<double>();
  if (a.contains("ssim")) r.aggregate.ssim = a["ssim"].get<double>();
  return r;
}

void MetricReport::write(const std::filesystem::path& json_file, const std::filesystem::path& csv_file) const {
  for (const auto& f : {json_file, csv_file})
    if (f.has_parent_path()) std::filesystem::create_directories(f.parent_path());
  std::ofstream(json_file) << to_json().dump(2) << "\n";
  std::ofstream csv(csv_file);
  csv << std::setprecision(17) << "id,psnr,ssim,entropy,haze_density\n";
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string();
    std::ostringstream os;
    os << std::setprecision(17) << *v;
    return os.str();
  };
  for (const auto& m : per_image) {
    csv << m.id << "," << opt(m.psnr) << "," << opt(m.ssim) << "," << m.entropy << "," << m.haze_density << "\n";
  }
}

Dehazer as_dehazer(ModelHandle model) {
  return [model = std::move(model)](const Image& x) { return model.forward(x).y; };
}

MetricReport evaluate(const Dehazer& dehaze, const std::vector<Image>& inputs, const std::vector<Image>* targets,
                      bool with_ground_truth) {
  if (inputs.empty()) throw InputError("evaluate: empty dataset");
  if (with_ground_truth && (!targets || targets->size() != inputs.size())) {
    throw InputError("evaluate: ground truth requested but missing or misaligned");
  }
  MetricReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Image out = dehaze(inputs[i]);
    ImageMetrics m;
    m.id = std::to_string(i);
    m.entropy = entropy(out);
    m.haze_density = haze_density_proxy(out);
    if (with_ground_truth) {
      m.psnr = psnr(out, (*targets)[i]);
      m.ssim = ssim_metric(out, (*targets)[i]);
    }
    report.per_image.push_back(std::move(m));
  }
  report.recompute_aggregate();
  return report;
}

nlohmann::json EfficiencyReport::to_json() const {
  nlohmann::json j{{"params", params},
                   {"flops", flops},
                   {"flops_shape", {flops_shape.n, flops_shape.c, flops_shape.h, flops_shape.w}}};
  j["latency"] = nlohmann::json::array();
  for (const auto& l : latency) {
    j["latency"].push_back({{"shape", {l.shape.n, l.shape.c, l.shape.h, l.shape.w}}, {"median_ms", l.median_ms}});
  }
  return j;
}

EfficiencyReport bench_efficiency(const ModelHandle& model, const std::vector<Shape>& shapes,
                                  const BenchOptions& opts) {
  if (shapes.empty()) throw InputError("bench_efficiency: no shapes");
  EfficiencyReport r;
  r.params = param_count(model);
  r.flops_shape = shapes.front();
  r.flops = flops_estimate(model, shapes.front());
  for (const Shape& shape : shapes) {
    const Image x = Image::constant(shape, 0.5f);
    for (int i = 0; i < opts.warmup; ++i) (void)model.forward(x);
    std::vector<double> times;
    for (int i = 0; i < opts.runs; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = model.forward(x);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      if (out.y.empty()) throw NumericError("bench_efficiency: empty output");
    }
    std::sort(times.begin(), times.end());
    const std::size_t m = times.size() / 2;
    const double median = times.size() % 2 ? times[m] : 0.5 * (times[m - 1] + times[m]);
    r.latency.push_back({shape, median});
  }
  return r;
}

}  // namespace coa
