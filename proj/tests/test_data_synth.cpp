#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <set>

#include "coa/data_synth.hpp"
#include "coa/image_io.hpp"
#include "coa/metrics.hpp"
#include "oracles.hpp"

using namespace coa;
namespace fs = std::filesystem;

namespace {

HazeParams uniform_params(Index h, Index w, double beta, float depth, float airlight = 1.0f) {
  HazeParams p;
  p.beta = beta;
  p.airlight = {airlight, airlight, airlight};
  p.depth = DepthMap::Constant(h, w, depth);
  return p;
}

// Every pixel carries its own (row, col) so a transform can be read back as a permutation.
Image coordinate_image(Index h, Index w) {
  Image img(1, 3, h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      img(0, 0, y, x) = static_cast<float>(y);
      img(0, 1, y, x) = static_cast<float>(x);
      img(0, 2, y, x) = static_cast<float>(y * w + x);
    }
  return img;
}

bool in_unit(const Image& img) { return img.array().minCoeff() >= 0.0f && img.array().maxCoeff() <= 1.0f; }

}  // namespace

TEST_CASE("scattering model values") {
  const Image clean = oracle::random_tensor<float>({1, 3, 8, 8}, 1);
  CHECK(synthesize_haze(clean, uniform_params(8, 8, 0.0, 2.0f)) == clean);

  const Image occluded = synthesize_haze(clean, uniform_params(8, 8, 1.0, 1e4f, 0.8f));
  CHECK((occluded.array() - 0.8f).abs().maxCoeff() < 1e-6f);

  const Image grey = Image::constant({1, 3, 4, 4}, 0.5f);
  const Image blended = synthesize_haze(grey, uniform_params(4, 4, std::log(2.0), 1.0f));
  CHECK((blended.array() - 0.75f).abs().maxCoeff() < 1e-6f);
}

TEST_CASE("scattering model errors and invariants") {
  const Image clean = oracle::random_tensor<float>({1, 3, 8, 8}, 2);
  CHECK_THROWS_AS(synthesize_haze(clean, uniform_params(8, 6, 1.0, 1.0f)), DimensionError);
  HazeParams bad = uniform_params(8, 8, -1.0, 1.0f);
  CHECK_THROWS_AS(bad.validate(), InputError);

  std::mt19937_64 rng(3);
  HazeParams lo = uniform_params(8, 8, 0.7, 0.0f);
  lo.depth = smooth_field(8, 8, 3, 0.0, 3.0, rng);
  HazeParams hi = lo;
  hi.beta = 1.9;
  CHECK((hi.transmission() <= lo.transmission()).all());
  CHECK(lo.transmission().maxCoeff() <= 1.0f);
  CHECK(hi.transmission().minCoeff() > 0.0f);
  CHECK(in_unit(synthesize_haze(clean, hi)));
}

TEST_CASE("synthetic dataset is seeded") {
  const PairedDataset a = build_synthetic_dataset(std::nullopt, 8, 0);
  const PairedDataset b = build_synthetic_dataset(std::nullopt, 8, 0);
  const PairedDataset c = build_synthetic_dataset(std::nullopt, 8, 1);
  REQUIRE(a.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(a.hazy[i] == b.hazy[i]);
    CHECK(a.clean[i] == b.clean[i]);
  }
  bool differs = false;
  for (std::size_t i = 0; i < 8; ++i) differs = differs || !(a.hazy[i] == c.hazy[i]);
  CHECK(differs);
  CHECK(a.hazy[0].shape() == Shape{1, 3, 64, 64});
}

TEST_CASE("haze raises the dark-channel proxy on every pair") {
  const PairedDataset d = build_synthetic_dataset(std::nullopt, 200, 11);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CAPTURE(i);
    CHECK(haze_density_proxy(d.hazy[i]) > haze_density_proxy(d.clean[i]));
    CHECK(in_unit(d.hazy[i]));
    CHECK(in_unit(d.clean[i]));
  }
}

TEST_CASE("dataset errors") {
  CHECK_THROWS_AS(build_synthetic_dataset(std::nullopt, 0, 0), InputError);
  const fs::path empty = fs::temp_directory_path() / "coa_test_empty_clean";
  fs::remove_all(empty);
  fs::create_directories(empty);
  CHECK_THROWS_AS(build_synthetic_dataset(empty, 4, 0), InputError);
  fs::remove_all(empty);
}

TEST_CASE("clean images from a directory") {
  const fs::path dir = fs::temp_directory_path() / "coa_test_clean_dir";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Image a = oracle::random_tensor<float>({1, 3, 64, 64}, 5);
  write_png(dir / "a.png", a);
  const PairedDataset d = build_synthetic_dataset(dir, 3, 2);
  REQUIRE(d.size() == 3);
  const Image back = read_png(dir / "a.png");
  for (std::size_t i = 0; i < 3; ++i) CHECK(d.clean[i] == back);
  fs::remove_all(dir);
}

TEST_CASE("real-domain stand-in") {
  const RealDataset r = build_real_dataset(6, 4);
  const RealDataset again = build_real_dataset(6, 4);
  REQUIRE(r.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(r.images[i] == again.images[i]);
    CHECK(in_unit(r.images[i]));
  }
  const PairedDataset s = build_synthetic_dataset(std::nullopt, 6, 4);
  CHECK(!(r.images[0] == s.hazy[0]));
  const auto [head, tail] = r.split_tail(2);
  CHECK(head.size() == 4);
  CHECK(tail.size() == 2);
  CHECK(tail.images[1] == r.images[5]);
}

TEST_CASE("identity augmentation") {
  const Image img = oracle::random_tensor<float>({1, 3, 16, 16}, 6);
  AugmentDraw d;
  d.crop = 16;
  CHECK(apply_augment(img, d) == img);
}

TEST_CASE("half turn twice is the identity") {
  const Image img = oracle::random_tensor<float>({1, 3, 12, 12}, 7);
  AugmentDraw d;
  d.crop = 12;
  d.quarter_turns = 2;
  CHECK(apply_augment(apply_augment(img, d), d) == img);
  d.quarter_turns = 1;
  AugmentDraw back = d;
  back.quarter_turns = 3;
  CHECK(apply_augment(apply_augment(img, d), back) == img);
}

TEST_CASE("quarter turn is clockwise") {
  const Image img = coordinate_image(4, 4);
  AugmentDraw d;
  d.crop = 4;
  d.quarter_turns = 1;
  const Image r = apply_augment(img, d);
  // clockwise: out(y, x) = in(H-1-x, y)
  for (Index y = 0; y < 4; ++y)
    for (Index x = 0; x < 4; ++x) {
      CHECK(r(0, 0, y, x) == static_cast<float>(3 - x));
      CHECK(r(0, 1, y, x) == static_cast<float>(y));
    }
}

TEST_CASE("paired augmentation moves both images identically") {
  const Image coords = coordinate_image(16, 16);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const AugmentDraw d = draw_augment(coords.shape(), 8, seed);
    const Image moved = apply_augment(coords, d);
    CHECK(moved.shape() == Shape{1, 3, 8, 8});
    // the result is a selection of distinct source pixels
    std::set<float> seen(moved.channel(2), moved.channel(2) + 64);
    CHECK(seen.size() == 64);

    const Image img = oracle::random_tensor<float>({1, 3, 16, 16}, seed + 100);
    Image shifted(img.shape());
    shifted.array() = img.array() * 0.5f + 0.25f;
    const auto [h, c] = augment(img, shifted, seed, 8);
    for (Index y = 0; y < 8; ++y)
      for (Index x = 0; x < 8; ++x) {
        const Index sy = static_cast<Index>(moved(0, 0, y, x)), sx = static_cast<Index>(moved(0, 1, y, x));
        for (Index ch = 0; ch < 3; ++ch) {
          CHECK(h(0, ch, y, x) == img(0, ch, sy, sx));
          CHECK(c(0, ch, y, x) == shifted(0, ch, sy, sx));
        }
      }
    const auto [a, b] = augment(img, img, seed, 8);
    CHECK(a == b);
  }
}

TEST_CASE("crop larger than the image is an input error") {
  CHECK_THROWS_AS(draw_augment(Shape{1, 3, 16, 16}, 32, 0), InputError);
  const Image img(1, 3, 16, 16);
  CHECK_THROWS_AS(augment(img, Image(1, 3, 16, 8), 0, 8), DimensionError);
}

TEST_CASE("png round trip and manifest") {
  const fs::path dir = fs::temp_directory_path() / "coa_test_png";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Image img = oracle::random_tensor<float>({1, 3, 5, 7}, 8);
  for (Index i = 0; i < img.numel(); ++i) img.data()[i] = std::nearbyint(img.data()[i] * 255.0f) / 255.0f;
  write_png(dir / "x.png", img);
  const Image back = read_png(dir / "x.png");
  CHECK((back.array() - img.array()).abs().maxCoeff() < 1e-7f);

  DatasetManifest m;
  m.pairs.push_back({dir / "x.png", dir / "x.png"});
  m.images.push_back(dir / "x.png");
  write_manifest(dir / "m.json", m);
  const DatasetManifest mb = read_manifest(dir / "m.json");
  REQUIRE(mb.pairs.size() == 1);
  CHECK(fs::equivalent(mb.pairs[0].hazy, dir / "x.png"));
  CHECK(fs::equivalent(mb.images[0], dir / "x.png"));
  CHECK_THROWS_AS(read_png(dir / "missing.png"), InputError);
  fs::remove_all(dir);
}
