#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "coa/losses.hpp"
#include "oracles.hpp"

using namespace coa;

namespace {

using T = Tensor<double>;

FeatureTaps<double> taps_of(std::vector<T> t) { return FeatureTaps<double>{std::move(t)}; }

T shuffled(const T& x, const std::vector<Index>& order) {
  T out(x.shape());
  for (Index n = 0; n < static_cast<Index>(order.size()); ++n) out.set_sample(n, x.sample(order[n]));
  return out;
}

template <typename F>
void check_gradient(T& x, const T& analytic, F loss, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick(0, x.numel() - 1);
  for (int k = 0; k < 10; ++k) {
    const Index i = pick(rng);
    CHECK(oracle::relative_error(analytic.data()[i], oracle::central_difference<double>(loss, x.data() + i)) < 1e-4);
  }
}

DehazeNet<double> small_extractor(std::uint64_t seed) { return DehazeNet<double>(NetConfig{{4, 6}, {4, 6}, 1}, seed); }

}  // namespace

TEST_CASE("l1 values") {
  const T a = oracle::random_tensor<double>({2, 3, 4, 4}, 1);
  const T b = oracle::random_tensor<double>({2, 3, 4, 4}, 2);
  CHECK(l1_loss<double>(a, a) == 0.0);
  CHECK(l1_loss<double>(T::constant({1, 3, 4, 4}, 0.5), T::constant({1, 3, 4, 4}, 0.25)) == doctest::Approx(0.25));
  CHECK(l1_loss<double>(a, b) == doctest::Approx(oracle::l1(a, b)).epsilon(1e-12));
  CHECK_THROWS_AS(l1_loss<double>(a, T(2, 3, 4, 5)), DimensionError);
}

TEST_CASE("l1 subgradient is zero where the inputs agree") {
  T a = oracle::random_tensor<double>({1, 1, 2, 2}, 3);
  T g;
  l1_loss<double>(a, a, &g);
  CHECK(g.array().abs().maxCoeff() == 0.0);
}

TEST_CASE("ssim against the windowed oracle") {
  const T a = oracle::random_tensor<double>({1, 1, 16, 16}, 4);
  const T b = oracle::random_tensor<double>({1, 1, 16, 16}, 5);
  CHECK(std::abs(ssim_mean<double>(a, b) - oracle::ssim(a, b)) < 1e-6);
  const T c = oracle::random_tensor<double>({2, 3, 20, 18}, 6);
  const T d = oracle::random_tensor<double>({2, 3, 20, 18}, 7);
  CHECK(std::abs(ssim_mean<double>(c, d) - oracle::ssim(c, d)) < 1e-6);
  SsimOptions opt;
  opt.window = 7;
  CHECK(std::abs(ssim_mean<double>(c, d, nullptr, opt) - oracle::ssim(c, d, 7)) < 1e-6);
}

TEST_CASE("ssim loss identities and range") {
  const T a = oracle::random_tensor<double>({1, 3, 16, 16}, 8);
  CHECK(std::abs(ssim_loss<double>(a, a)) < 1e-12);
  T bin(1, 1, 16, 16);
  for (Index y = 0; y < 16; ++y)
    for (Index x = 0; x < 16; ++x) bin(0, 0, y, x) = ((x * 7 + y * 3) % 5 < 2) ? 1.0 : 0.0;
  T inv(bin.shape());
  inv.array() = 1.0 - bin.array();
  const double v = ssim_loss<double>(bin, inv);
  CHECK(v > 0.0);
  CHECK(v <= 2.0);
  CHECK_THROWS_AS(ssim_loss<double>(T(1, 1, 10, 16), T(1, 1, 10, 16)), InputError);
}

TEST_CASE("ssim gradient on 16x16 with the default window") {
  T a = oracle::random_tensor<double>({1, 2, 16, 16}, 9);
  const T b = oracle::random_tensor<double>({1, 2, 16, 16}, 10);
  T g;
  ssim_loss<double>(a, b, &g);
  check_gradient(a, g, [&] { return ssim_loss<double>(a, b); }, 11);
}

TEST_CASE("loss gradients on 8x8") {
  T a = oracle::random_tensor<double>({2, 3, 8, 8}, 12);
  const T b = oracle::random_tensor<double>({2, 3, 8, 8}, 13);
  T g;
  l1_loss<double>(a, b, &g);
  check_gradient(a, g, [&] { return l1_loss<double>(a, b); }, 14);
  SsimOptions opt;
  opt.window = 7;
  ssim_loss<double>(a, b, &g, opt);
  check_gradient(a, g, [&] { return ssim_loss<double>(a, b, nullptr, opt); }, 15);
  DehazeNet<double> ex = small_extractor(16);
  perceptual_loss<double>(a, b, ex, &g);
  check_gradient(a, g, [&] { return perceptual_loss<double>(a, b, ex); }, 17);
}

TEST_CASE("perceptual loss") {
  const T a = oracle::random_tensor<double>({2, 3, 8, 8}, 18);
  const T b = oracle::random_tensor<double>({2, 3, 8, 8}, 19);
  DehazeNet<double> ex = small_extractor(20);
  CHECK(perceptual_loss<double>(a, a, ex) == 0.0);
  CHECK(perceptual_loss<double>(a, b, ex) == doctest::Approx(perceptual_loss<double>(b, a, ex)).epsilon(1e-12));
  CHECK_THROWS_AS(perceptual_loss<double>(a, b, ex, nullptr, {2}), ConfigError);

  // one stage whose conv passes pixels through and whose block adds zero
  DehazeNet<double> ident(NetConfig{{1}, {1}, 1, 1, Activation::identity, true}, 0);
  ident.encoder()[0][0].set_identity();
  ident.encoder()[0][1].weight.setZero();
  ident.encoder()[0][1].bias.setZero();
  const T p = oracle::random_tensor<double>({1, 1, 2, 2}, 21);
  const T q = oracle::random_tensor<double>({1, 1, 2, 2}, 22);
  double hand = 0;
  for (Index y = 0; y < 2; ++y)
    for (Index x = 0; x < 2; ++x) hand += (p(0, 0, y, x) - q(0, 0, y, x)) * (p(0, 0, y, x) - q(0, 0, y, x));
  CHECK(perceptual_loss<double>(p, q, ident) == doctest::Approx(hand / 4).epsilon(1e-12));
}

TEST_CASE("context alignment by hand") {
  T t(1, 1, 1, 2), s(1, 1, 1, 2);
  t(0, 0, 0, 0) = 1;
  t(0, 0, 0, 1) = 2;
  auto proj = ContextProjections<double>::identity({1});
  CHECK(context_align_loss<double>(taps_of({t}), taps_of({s}), AlignWeights{{1.0}}, proj) == doctest::Approx(2.5));
  CHECK(context_align_loss<double>(taps_of({t}), taps_of({t}), AlignWeights{{1.0}}, proj) == 0.0);
}

TEST_CASE("context alignment against the weighted loop") {
  const auto tt = taps_of({oracle::random_tensor<double>({2, 4, 4, 4}, 23), oracle::random_tensor<double>({2, 6, 2, 2}, 24)});
  const auto st = taps_of({oracle::random_tensor<double>({2, 2, 4, 4}, 25), oracle::random_tensor<double>({2, 3, 2, 2}, 26)});
  ContextProjections<double> proj({2, 3}, {4, 6}, 27);
  const AlignWeights w{{0.5, 2.0}};
  double ref = 0;
  for (Index i = 0; i < 2; ++i) {
    auto& conv = proj.stage(i);
    std::vector<std::vector<double>> wm(conv.out_channels(), std::vector<double>(conv.in_channels()));
    std::vector<double> bias(conv.out_channels());
    for (Index o = 0; o < conv.out_channels(); ++o) {
      bias[o] = conv.bias(o);
      for (Index c = 0; c < conv.in_channels(); ++c) wm[o][c] = conv.weight(c, o);
    }
    ref += w.w[i] * oracle::mse(oracle::pointwise(st.per_stage[i], wm, bias), tt.per_stage[i]);
  }
  CHECK(std::abs(context_align_loss<double>(tt, st, w, proj) - ref) < 1e-7);
}

TEST_CASE("context alignment errors and gradient") {
  const auto tt = taps_of({oracle::random_tensor<double>({1, 4, 4, 4}, 28), oracle::random_tensor<double>({1, 4, 2, 2}, 29)});
  auto st = taps_of({oracle::random_tensor<double>({1, 2, 4, 4}, 30), oracle::random_tensor<double>({1, 2, 2, 2}, 31)});
  ContextProjections<double> proj({2, 2}, {4, 4}, 32);
  CHECK_THROWS_AS(context_align_loss<double>(tt, taps_of({st.per_stage[0]}), AlignWeights{{1.0}}, proj), ConfigError);
  CHECK_THROWS_AS(context_align_loss<double>(tt, st, AlignWeights{{0.0, 0.0}}, proj), ConfigError);
  CHECK_THROWS_AS(context_align_loss<double>(tt, st, AlignWeights{{1.0}}, proj), ConfigError);

  const AlignWeights w{{0.3, 0.7}};
  std::vector<T> ds;
  auto pp = proj.params();
  zero_grads(pp);
  context_align_loss<double>(tt, st, w, proj, &ds);
  auto loss = [&] { return context_align_loss<double>(tt, st, w, proj); };
  for (Index i = 0; i < st.per_stage[1].numel(); i += 3) {
    CHECK(oracle::relative_error(ds[1].data()[i], oracle::central_difference<double>(loss, st.per_stage[1].data() + i)) <
          1e-6);
  }
  for (const auto& p : pp) {
    CHECK(oracle::relative_error(p.grad[0], oracle::central_difference<double>(loss, p.value)) < 1e-6);
  }
}

TEST_CASE("teacher taps at another resolution are resized") {
  const auto tt = taps_of({T::constant({1, 2, 8, 8}, 0.5)});
  const auto st = taps_of({T::constant({1, 2, 4, 4}, 0.25)});
  auto proj = ContextProjections<double>::identity({2});
  CHECK(context_align_loss<double>(tt, st, AlignWeights{{1.0}}, proj) == doctest::Approx(0.0625));
}

TEST_CASE("moc loss composition") {
  const T a = oracle::random_tensor<double>({2, 3, 16, 16}, 33);
  const T b = oracle::random_tensor<double>({2, 3, 16, 16}, 34);
  DehazeNet<double> teacher(NetConfig{{4, 6}, {4, 6}, 1}, 35);
  DehazeNet<double> student(NetConfig{{2, 3}, {2, 3}, 1}, 36);
  ContextProjections<double> proj({2, 3}, {4, 6}, 37);
  const auto tt = teacher.encode(a);
  const auto st = student.encode(a);
  const AlignWeights w{{0.5, 0.5}};

  const auto terms = moc_loss<double>(a, b, tt, st, LossWeights{1.0, 0.5, 0.1}, w, &teacher, &proj);
  const double ref = oracle::l1(a, b) + 0.5 * (1.0 - oracle::ssim(a, b)) + 0.1 * perceptual_loss<double>(a, b, teacher) +
                     context_align_loss<double>(tt, st, w, proj);
  CHECK(std::abs(terms.total - ref) < 1e-7);

  const auto only_l1 = moc_loss<double>(a, b, tt, st, LossWeights{1.0, 0.0, 0.0}, AlignWeights::zeros(2),
                                static_cast<DehazeNet<double>*>(nullptr), nullptr);
  CHECK(only_l1.total == l1_loss<double>(a, b));

  const auto doubled = moc_loss<double>(a, b, tt, st, LossWeights{1.0, 1.0, 0.1}, w, &teacher, &proj);
  CHECK(doubled.total - terms.total == doctest::Approx(0.5 * terms.ss).epsilon(1e-9));

  auto ident = ContextProjections<double>::identity({4, 6});
  CHECK(moc_loss<double>(a, a, tt, tt, LossWeights{}, AlignWeights::uniform(2), &teacher, &ident).total == doctest::Approx(0.0));
  CHECK_THROWS_AS(moc_loss<double>(a, b, tt, st, LossWeights{1.0, 0.5, 0.1}, w, static_cast<DehazeNet<double>*>(nullptr), &proj),
                  ConfigError);
}

TEST_CASE("moc output gradient") {
  T a = oracle::random_tensor<double>({1, 3, 16, 16}, 38);
  const T b = oracle::random_tensor<double>({1, 3, 16, 16}, 39);
  DehazeNet<double> teacher(NetConfig{{4, 6}, {4, 6}, 1}, 40);
  const FeatureTaps<double> none;
  MocGrads<double> g;
  const LossWeights lw{1.0, 0.5, 0.1};
  moc_loss<double>(a, b, none, none, lw, AlignWeights{}, &teacher, nullptr, &g);
  check_gradient(a, g.dout, [&] { return moc_loss<double>(a, b, none, none, lw, AlignWeights{}, &teacher, nullptr).total; }, 41);
}

TEST_CASE("losses are invariant to batch order") {
  const T a = oracle::random_tensor<double>({3, 3, 12, 12}, 42);
  const T b = oracle::random_tensor<double>({3, 3, 12, 12}, 43);
  const std::vector<Index> order{2, 0, 1};
  const T as = shuffled(a, order), bs = shuffled(b, order);
  DehazeNet<double> ex = small_extractor(44);
  CHECK(l1_loss<double>(as, bs) == doctest::Approx(l1_loss<double>(a, b)).epsilon(1e-14));
  CHECK(ssim_loss<double>(as, bs) == doctest::Approx(ssim_loss<double>(a, b)).epsilon(1e-14));
  CHECK(perceptual_loss<double>(as, bs, ex) == doctest::Approx(perceptual_loss<double>(a, b, ex)).epsilon(1e-14));
}

TEST_CASE("weight validation") {
  CHECK_THROWS_AS((LossWeights{0, 0, 0}.validate()), ConfigError);
  CHECK_THROWS_AS((LossWeights{-1, 0, 0}.validate()), ConfigError);
  CHECK_THROWS_AS((AlignWeights{{1.0, -1.0}}.validate(2)), ConfigError);
  CHECK_THROWS_AS((AlignWeights{{1.0}}.validate(2)), ConfigError);
  CHECK(AlignWeights::uniform(4).sum() == doctest::Approx(1.0));
}
