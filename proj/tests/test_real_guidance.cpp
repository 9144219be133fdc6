#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "coa/data_synth.hpp"
#include "coa/real_guidance.hpp"
#include "oracles.hpp"

using namespace coa;
namespace fs = std::filesystem;

namespace {

PromptPair trained_random(Index dim, std::uint64_t seed) {
  PromptPair p = PromptPair::random(dim, seed);
  p.trained = true;
  return p;
}

struct Trained {
  PairedDataset data;
  EmbeddingBackend<float> backend;
  PromptTrainResult result;
};

const Trained& trained_once() {
  static const Trained t = [] {
    SynthOptions opts;
    opts.size = 32;
    Trained out{build_synthetic_dataset(std::nullopt, 60, 3, opts), EmbeddingBackend<float>::desk_default(3), {}};
    PromptTrainOptions po;
    po.steps = 150;
    po.seed = 3;
    out.result = train_prompts(out.data.hazy, out.data.clean, out.backend, po);
    return out;
  }();
  return t;
}

}  // namespace

TEST_CASE("cosine similarity") {
  Eigen::VectorXd v(3), w(3);
  v << 1, 2, 3;
  CHECK(cosine_sim(v, v) == doctest::Approx(1.0));
  CHECK(cosine_sim(v, Eigen::VectorXd(-v)) == doctest::Approx(-1.0));
  Eigen::Vector2d a(1, 0), b(0, 1);
  CHECK(cosine_sim(a, b) == 0.0);
  w.setZero();
  CHECK_THROWS_AS(cosine_sim(v, w), NumericError);
}

TEST_CASE("two-class softmax") {
  CHECK(two_class_softmax(0.3, 0.3) == 0.5);
  CHECK(two_class_softmax(1, -1) == doctest::Approx(0.880797).epsilon(1e-6));
  CHECK(two_class_softmax(-1, 1) == doctest::Approx(0.119203).epsilon(1e-6));
  CHECK(two_class_softmax(1, -1) + two_class_softmax(-1, 1) == doctest::Approx(1.0).epsilon(1e-15));
  // the softmax written out with exponentials
  const double e = std::exp(1.0), ie = std::exp(-1.0);
  CHECK(two_class_softmax(1, -1) == doctest::Approx(e / (e + ie)).epsilon(1e-14));
}

TEST_CASE("binary cross-entropy limits") {
  CHECK(binary_cross_entropy(1.0, 1.0) == 0.0);
  CHECK(binary_cross_entropy(0.0, 0.0) == 0.0);
  CHECK(binary_cross_entropy(0.5, 1.0) == doctest::Approx(std::log(2.0)));
  CHECK(std::isfinite(binary_cross_entropy(0.0, 1.0)));
}

TEST_CASE("embeddings are unit norm") {
  const EmbeddingBackend<float> backend = EmbeddingBackend<float>::desk_default(1);
  const Image x = oracle::random_tensor<float>({5, 3, 16, 16}, 2);
  const auto u = backend.embed(x);
  CHECK(u.rows() == backend.dim());
  CHECK(u.cols() == 5);
  for (Index i = 0; i < 5; ++i) CHECK(std::abs(u.col(i).norm() - 1.0f) < 1e-6f);
}

TEST_CASE("haze probability properties") {
  EmbeddingBackend<double> backend({4, 6, 8}, 4);
  const Tensor<double> x = oracle::random_tensor<double>({3, 3, 8, 8}, 5);
  PromptPair p = trained_random(8, 6);
  const auto sims = prompt_similarities(backend.embed(x), p);
  for (Index i = 0; i < 3; ++i) {
    CHECK(sims.prob(i) == doctest::Approx(two_class_softmax(sims.haze(i), sims.clear(i))).epsilon(1e-14));
    CHECK(sims.prob(i) + two_class_softmax(sims.clear(i), sims.haze(i)) == doctest::Approx(1.0).epsilon(1e-15));
  }

  PromptPair scaled = p;
  scaled.haze_embed *= 3.7;
  CHECK((haze_probabilities(x, scaled, backend) - haze_probabilities(x, p, backend)).cwiseAbs().maxCoeff() < 1e-14);

  PromptPair same = p;
  same.clear_embed = same.haze_embed;
  CHECK(l_rea(x, same, backend) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("l_rea is the mean of per-image probabilities") {
  const EmbeddingBackend<double> backend({4, 6, 8}, 7);
  const Tensor<double> x = oracle::random_tensor<double>({4, 3, 8, 8}, 8);
  EmbeddingBackend<double> b2 = backend;
  const PromptPair p = trained_random(8, 9);
  double acc = 0;
  for (Index n = 0; n < 4; ++n) acc += haze_probability(x.sample(n), p, backend);
  CHECK(l_rea(x, p, b2) == doctest::Approx(acc / 4).epsilon(1e-14));
}

TEST_CASE("l_rea pixel gradient matches finite differences") {
  EmbeddingBackend<double> backend({4, 6, 8}, 10);
  Tensor<double> x = oracle::random_tensor<double>({1, 3, 8, 8}, 11);
  const PromptPair p = trained_random(8, 12);
  Tensor<double> g;
  l_rea(x, p, backend, &g);
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<Index> pick(0, x.numel() - 1);
  for (int k = 0; k < 10; ++k) {
    const Index i = pick(rng);
    CHECK(oracle::relative_error(g.data()[i],
                                 oracle::central_difference<double>([&] { return l_rea(x, p, backend); }, x.data() + i)) <
          1e-4);
  }
}

TEST_CASE("backend parameter gradient matches finite differences") {
  EmbeddingBackend<double> backend({3, 4, 5}, 14);
  const Tensor<double> x = oracle::random_tensor<double>({2, 3, 8, 8}, 15);
  Eigen::MatrixXd r = Eigen::MatrixXd::Random(5, 2);
  auto loss = [&] { return (backend.embed(x).array() * r.array()).sum(); };
  typename EmbeddingBackend<double>::Trace trace;
  backend.embed(x, &trace);
  auto params = backend.params();
  zero_grads(params);
  backend.embed_backward(trace, r, true);
  for (const auto& p : params) {
    CAPTURE(p.name);
    CHECK(oracle::relative_error(p.grad[1], oracle::central_difference<double>(loss, p.value + 1, 1e-5)) < 1e-6);
  }
}

TEST_CASE("untrained prompts are refused") {
  EmbeddingBackend<float> backend = EmbeddingBackend<float>::desk_default();
  CHECK_THROWS_AS(l_rea(Image(1, 3, 8, 8), PromptPair::random(32, 1), backend), StateError);
}

TEST_CASE("train_prompts separates hazy from clean") {
  const Trained& t = trained_once();
  CHECK(t.result.prompts.trained);
  CHECK(t.result.mean_prob_hazy > t.result.mean_prob_clear);
  EmbeddingBackend<float> backend = t.backend;
  const double hazy = l_rea(stack(t.data.hazy), t.result.prompts, backend);
  const double clean = l_rea(stack(t.data.clean), t.result.prompts, backend);
  CHECK(hazy > clean);
  CHECK(t.result.prompts.holdout_accuracy >= 0.0);
  CHECK(t.result.prompts.holdout_accuracy <= 1.0);
  CHECK(t.result.loss_history.size() == 150);
}

TEST_CASE("train_prompts is deterministic") {
  const Trained& t = trained_once();
  EmbeddingBackend<float> backend = EmbeddingBackend<float>::desk_default(3);
  PromptTrainOptions po;
  po.steps = 150;
  po.seed = 3;
  const PromptTrainResult again = train_prompts(t.data.hazy, t.data.clean, backend, po);
  CHECK(again.prompts.haze_embed == t.result.prompts.haze_embed);
  CHECK(again.prompts.clear_embed == t.result.prompts.clear_embed);
  CHECK(again.loss_history == t.result.loss_history);
}

TEST_CASE("train_prompts input errors") {
  EmbeddingBackend<float> backend = EmbeddingBackend<float>::desk_default();
  const std::vector<Image> some{Image::constant({1, 3, 8, 8}, 0.5f), Image::constant({1, 3, 8, 8}, 0.4f)};
  CHECK_THROWS_AS(train_prompts({}, some, backend, {}), InputError);
  CHECK_THROWS_AS(train_prompts(some, {}, backend, {}), InputError);
}

TEST_CASE("prompt JSON round trip") {
  const Trained& t = trained_once();
  const fs::path file = fs::temp_directory_path() / "coa_test_prompts.json";
  save_prompts(file, t.result.prompts);
  const PromptPair back = load_prompts(file);
  CHECK(back.haze_embed == t.result.prompts.haze_embed);
  CHECK(back.clear_embed == t.result.prompts.clear_embed);
  CHECK(back.trained);
  CHECK(back.holdout_accuracy == t.result.prompts.holdout_accuracy);
  CHECK(back.seed == t.result.prompts.seed);
  fs::remove(file);
  CHECK_THROWS_AS(load_prompts(file), InputError);
}
