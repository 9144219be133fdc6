#include "coa/real_guidance.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "coa/optim.hpp"
#include "json.hpp"

namespace coa {
namespace {

struct Sample {
  const Image* image;
  float label;
};

double accuracy(const std::vector<Sample>& samples, const PromptPair& prompts, const EmbeddingBackend<float>& backend) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    const double p = haze_probability(*s.image, prompts, backend);
    correct += ((p > 0.5) == (s.label > 0.5f)) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

}  // namespace

PromptTrainResult train_prompts(const std::vector<Image>& hazy, const std::vector<Image>& clear,
                                EmbeddingBackend<float>& backend, const PromptTrainOptions& opts) {
  if (hazy.empty() || clear.empty()) throw InputError("train_prompts: both classes must be non-empty");
  if (opts.batch_size < 2) throw ConfigError("train_prompts: batch_size must be >= 2");
  std::mt19937_64 rng(opts.seed);

  std::vector<Sample> train, holdout;
  auto split = [&](const std::vector<Image>& images, float label) {
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_hold = images.size() < 2
                            ? std::size_t{0}
                            : static_cast<std::size_t>(std::llround(opts.holdout_fraction * images.size()));
    for (std::size_t i = 0; i < order.size(); ++i) {
      (i < n_hold ? holdout : train).push_back({&images[order[i]], label});
    }
  };
  split(hazy, 1.0f);
  split(clear, 0.0f);
  std::vector<Sample> train_hazy, train_clear;
  for (const auto& s : train) (s.label > 0.5f ? train_hazy : train_clear).push_back(s);

  PromptPair pair = PromptPair::random(backend.dim(), opts.seed);
  pair.temperature = opts.temperature;
  VectorX<float> th = pair.haze_embed.cast<float>();
  VectorX<float> tc = pair.clear_embed.cast<float>();
  VectorX<float> gth = VectorX<float>::Zero(th.size());
  VectorX<float> gtc = VectorX<float>::Zero(tc.size());

  ParamList<float> params = backend.params();
  params.push_back({"prompt.haze", {th.size()}, th.data(), gth.data(), th.size()});
  params.push_back({"prompt.clear", {tc.size()}, tc.data(), gtc.data(), tc.size()});
  Optimizer<float> opt(OptimizerKind::adam);

  PromptTrainResult result;
  const Index half = opts.batch_size / 2;
  const float inv_t = static_cast<float>(1.0 / opts.temperature);
  for (long step = 0; step < opts.steps; ++step) {
    std::vector<Image> items;
    std::vector<float> labels;
    for (Index i = 0; i < half; ++i) {
      const auto& h = train_hazy[std::uniform_int_distribution<std::size_t>(0, train_hazy.size() - 1)(rng)];
      const auto& c = train_clear[std::uniform_int_distribution<std::size_t>(0, train_clear.size() - 1)(rng)];
      items.push_back(*h.image);
      labels.push_back(1.0f);
      items.push_back(*c.image);
      labels.push_back(0.0f);
    }
    const Tensor<float> batch = stack(items);
    const Index n = batch.shape().n;

    zero_grads(params);
    EmbeddingBackend<float>::Trace trace;
    const MatrixX<float> u = backend.embed(batch, &trace);
    const float nh = th.norm(), nc = tc.norm();
    const VectorX<float> hh = th / nh;
    const VectorX<float> hc = tc / nc;
    const VectorX<float> sim_h = u.transpose() * hh;
    const VectorX<float> sim_c = u.transpose() * hc;

    double loss = 0.0;
    MatrixX<float> du(u.rows(), n);
    VectorX<float> d_hh = VectorX<float>::Zero(hh.size());
    VectorX<float> d_hc = VectorX<float>::Zero(hc.size());
    for (Index i = 0; i < n; ++i) {
      const double p = two_class_softmax(sim_h(i), sim_c(i), opts.temperature);
      loss += binary_cross_entropy(p, labels[i]) / static_cast<double>(n);
      const float dlogit = static_cast<float>((p - labels[i]) / static_cast<double>(n));
      du.col(i) = dlogit * inv_t * (hh - hc);
      d_hh += dlogit * inv_t * u.col(i);
      d_hc -= dlogit * inv_t * u.col(i);
    }
    if (!std::isfinite(loss)) throw NumericError("train_prompts: non-finite loss at step " + std::to_string(step));
    result.loss_history.push_back(loss);

    gth = (d_hh - hh * hh.dot(d_hh)) / nh;
    gtc = (d_hc - hc * hc.dot(d_hc)) / nc;
    backend.embed_backward(trace, du, true);
    opt.step(params, opts.lr);
  }

  pair.haze_embed = th.cast<double>();
  pair.clear_embed = tc.cast<double>();
  pair.trained = true;
  pair.holdout_accuracy = accuracy(holdout.empty() ? train : holdout, pair, backend);
  result.train_accuracy = accuracy(train, pair, backend);

  double sum_h = 0, sum_c = 0;
  for (const auto& s : train_hazy) sum_h += haze_probability(*s.image, pair, backend);
  for (const auto& s : train_clear) sum_c += haze_probability(*s.image, pair, backend);
  result.mean_prob_hazy = sum_h / static_cast<double>(train_hazy.size());
  result.mean_prob_clear = sum_c / static_cast<double>(train_clear.size());
  result.prompts = std::move(pair);
  return result;
}

void save_prompts(const std::filesystem::path& file, const PromptPair& prompts) {
  nlohmann::json j;
  j["dim"] = prompts.dim();
  j["haze_embed"] = std::vector<double>(prompts.haze_embed.data(), prompts.haze_embed.data() + prompts.dim());
  j["clear_embed"] = std::vector<double>(prompts.clear_embed.data(), prompts.clear_embed.data() + prompts.dim());
  j["holdout_accuracy"] = prompts.holdout_accuracy;
  j["seed"] = prompts.seed;
  j["temperature"] = prompts.temperature;
  j["trained"] = prompts.trained;
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw InputError("save_prompts: cannot write " + file.string());
  out << j.dump(2) << "\n";
}

PromptPair load_prompts(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw InputError("load_prompts: cannot open " + file.string());
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    PromptPair p;
    const auto h = j.at("haze_embed").get<std::vector<double>>();
    const auto c = j.at("clear_embed").get<std::vector<double>>();
    if (static_cast<Index>(h.size()) != j.at("dim").get<Index>() || h.size() != c.size()) {
      throw InputError("load_prompts: embedding length does not match dim");
    }
    p.haze_embed = Eigen::Map<const Eigen::VectorXd>(h.data(), static_cast<Index>(h.size()));
    p.clear_embed = Eigen::Map<const Eigen::VectorXd>(c.data(), static_cast<Index>(c.size()));
    p.holdout_accuracy = j.value("holdout_accuracy", 0.0);
    p.seed = j.value("seed", std::uint64_t{0});
    p.temperature = j.value("temperature", 1.0);
    p.trained = j.value("trained", true);
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("load_prompts: " + file.string() + ": " + e.what());
  }
}

}  // namespace coa
