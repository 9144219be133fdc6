#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "coa/checkpoint.hpp"
#include "coa/dehaze_net.hpp"
#include "oracles.hpp"

using namespace coa;
namespace fs = std::filesystem;

namespace {

std::vector<double> weights_oihw(const Conv2d<double>& conv) {
  // library stores (Cin*k*k) x Cout; the oracle wants [o][i][ky][kx]
  const Index cin = conv.in_channels(), cout = conv.out_channels(), k = conv.kernel();
  std::vector<double> w(static_cast<std::size_t>(cout * cin * k * k));
  for (Index o = 0; o < cout; ++o)
    for (Index r = 0; r < cin * k * k; ++r) w[o * cin * k * k + r] = conv.weight(r, o);
  return w;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("coa_test_net_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("single conv counts") {
  Conv2d<float> conv(3, 8, 3);
  CHECK(conv.param_count() == 224);
  CHECK(2 * conv.macs(Shape{1, 3, 8, 8}) == 27648);
}

TEST_CASE("conv forward matches direct convolution") {
  std::mt19937_64 rng(1);
  for (auto [k, stride] : {std::pair<Index, Index>{3, 1}, {3, 2}, {1, 1}, {5, 1}}) {
    Conv2d<double> conv(3, 5, k, stride);
    conv.init(rng, 1.0);
    conv.bias.setRandom();
    const Tensor<double> x = oracle::random_tensor<double>({2, 3, 8, 6}, 2, -1, 1);
    const Tensor<double> ref = oracle::conv2d(x, weights_oihw(conv), {conv.bias.data(), conv.bias.data() + 5}, 5, k, stride);
    const Tensor<double> y = conv.forward(x);
    REQUIRE(y.shape() == ref.shape());
    CHECK((y.array() - ref.array()).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv backward matches finite differences") {
  std::mt19937_64 rng(3);
  Conv2d<double> conv(2, 3, 3, 2);
  conv.init(rng, 1.0);
  Tensor<double> x = oracle::random_tensor<double>({2, 2, 6, 6}, 4, -1, 1);
  const Tensor<double> r = oracle::random_tensor<double>(conv.output_shape(x.shape()), 5, -1, 1);
  auto loss = [&] { return (conv.forward(x).array() * r.array()).sum(); };
  conv.grad_weight.setZero();
  conv.grad_bias.setZero();
  const Tensor<double> dx = conv.backward(x, r, true, true);
  for (Index i = 0; i < x.numel(); i += 7) {
    CHECK(oracle::relative_error(dx.data()[i], oracle::central_difference<double>(loss, x.data() + i)) < 1e-7);
  }
  for (Index i = 0; i < conv.weight.size(); i += 5) {
    CHECK(oracle::relative_error(conv.grad_weight.data()[i],
                                 oracle::central_difference<double>(loss, conv.weight.data() + i)) < 1e-7);
  }
  CHECK(oracle::relative_error(conv.grad_bias(1), oracle::central_difference<double>(loss, conv.bias.data() + 1)) <
        1e-7);
}

TEST_CASE("forward shape, range and determinism") {
  const ModelHandle net(NetConfig::student_default(), 1);
  const Image x = oracle::random_tensor<float>({2, 3, 64, 64}, 6);
  const NetOutput<float> a = net.forward(x);
  const NetOutput<float> b = net.forward(x);
  CHECK(a.y.shape() == x.shape());
  CHECK(a.y == b.y);
  REQUIRE(a.taps.stages() == net.stages());
  for (Index i = 0; i < net.stages(); ++i) {
    CHECK(a.taps.per_stage[i].shape().h == 64 >> i);
    CHECK(a.taps.per_stage[i].shape().w == 64 >> i);
  }

  ModelHandle wild(NetConfig::student_default(), 2);
  std::mt19937_64 rng(9);
  wild.head().init(rng, 4.0);
  const Image far = oracle::random_tensor<float>({1, 3, 16, 16}, 7, -5, 5);
  const Image y = wild.forward(far).y;
  CHECK(y.array().minCoeff() >= 0.0f);
  CHECK(y.array().maxCoeff() <= 1.0f);
}

TEST_CASE("zero head starts as the identity") {
  const ModelHandle net(NetConfig::student_default(), 3);
  const Image x = oracle::random_tensor<float>({1, 3, 16, 16}, 8, 0.05, 0.95);
  CHECK((net.forward(x).y.array() - x.array()).abs().maxCoeff() < 1e-5f);
}

TEST_CASE("indivisible spatial size is a dimension error") {
  const ModelHandle net(NetConfig::student_default());
  CHECK_THROWS_AS(net.forward(Image(1, 3, 12, 16)), DimensionError);
  CHECK_THROWS_AS(net.forward(Image(1, 1, 16, 16)), DimensionError);
  CHECK_NOTHROW(net.forward(Image(1, 3, 8, 8)));
}

TEST_CASE("parameter gradients match finite differences") {
  DehazeNet<double> net(NetConfig{{4, 8, 8}, {4, 8, 8}, 1}, 4);
  std::mt19937_64 rng(10);
  net.head().init(rng, 1.0);
  Tensor<double> x = oracle::random_tensor<double>({1, 3, 8, 8}, 11);
  auto loss = [&] { return net.forward(x).y.array().mean(); };
  auto params = net.params();
  zero_grads(params);
  NetTrace<double> trace;
  const Tensor<double> y = net.forward(x, &trace).y;
  Tensor<double> dy = Tensor<double>::constant(y.shape(), 1.0 / static_cast<double>(y.numel()));
  const Tensor<double> dx = net.backward(trace, &dy, nullptr, true);

  std::uniform_int_distribution<std::size_t> which(0, params.size() - 1);
  for (int k = 0; k < 10; ++k) {
    const auto& p = params[which(rng)];
    const Index i = std::uniform_int_distribution<Index>(0, p.size - 1)(rng);
    CAPTURE(p.name);
    CHECK(oracle::relative_error(p.grad[i], oracle::central_difference<double>(loss, p.value + i)) < 1e-4);
  }
  for (Index i = 0; i < x.numel(); i += 17) {
    CHECK(oracle::relative_error(dx.data()[i], oracle::central_difference<double>(loss, x.data() + i)) < 1e-4);
  }
}

TEST_CASE("tap gradients reach the encoder") {
  DehazeNet<double> net(NetConfig{{3, 5}, {3, 5}, 2}, 5);
  Tensor<double> x = oracle::random_tensor<double>({2, 3, 8, 8}, 12);
  const std::vector<Tensor<double>> r{oracle::random_tensor<double>({2, 3, 8, 8}, 13),
                                      oracle::random_tensor<double>({2, 5, 4, 4}, 14)};
  auto loss = [&] {
    const FeatureTaps<double> t = net.encode(x);
    return (t.per_stage[0].array() * r[0].array()).sum() + (t.per_stage[1].array() * r[1].array()).sum();
  };
  EncoderTrace<double> trace;
  net.encode(x, &trace);
  auto params = net.params();
  zero_grads(params);
  const Tensor<double> dx = net.encode_backward(trace, r, true);
  for (Index i = 0; i < x.numel(); i += 11) {
    CHECK(oracle::relative_error(dx.data()[i], oracle::central_difference<double>(loss, x.data() + i)) < 1e-6);
  }
  const auto& p = params.front();
  CHECK(oracle::relative_error(p.grad[3], oracle::central_difference<double>(loss, p.value + 3)) < 1e-6);
}

TEST_CASE("default configurations") {
  const ModelHandle teacher(NetConfig::teacher_default());
  const ModelHandle student(NetConfig::student_default());
  CHECK(param_count(teacher) > param_count(student));
  CHECK(static_cast<double>(param_count(student)) <= 0.27 * static_cast<double>(param_count(teacher)));
  const Shape s{1, 3, 64, 64};
  CHECK(static_cast<double>(flops_estimate(student, s)) <= 0.2 * static_cast<double>(flops_estimate(teacher, s)));
  CHECK(flops_estimate(student, Shape{1, 3, 128, 128}) == 4 * flops_estimate(student, s));
  CHECK(teacher.stages() == student.stages());
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS((NetConfig{{4, 8}, {4}, 1}.validate()), ConfigError);
  CHECK_THROWS_AS((NetConfig{{4, 0}, {4, 8}, 1}.validate()), ConfigError);
  CHECK_THROWS_AS((NetConfig{{4, 8}, {4, 8}, 0}.validate()), ConfigError);
  CHECK_THROWS_AS(ModelHandle(NetConfig{{}, {}, 1}), ConfigError);
}

TEST_CASE("role names") {
  for (Role r : {Role::teacher, Role::student_syn, Role::student_rea}) CHECK(role_from_string(to_string(r)) == r);
  CHECK(to_string(Role::student_syn) == "student-syn");
  CHECK_THROWS_AS(role_from_string("mentor"), ConfigError);
}

TEST_CASE("cast to double and back preserves parameters") {
  ModelHandle net(NetConfig::student_default(), 6);
  ModelHandle back = net.cast<double>().cast<float>();
  CHECK(flatten(back.params()) == flatten(net.params()));
}

TEST_CASE("checkpoint round trip") {
  ModelHandle net(NetConfig::student_default(), 7);
  std::mt19937_64 rng(1);
  net.head().init(rng, 1.0);
  const fs::path dir = scratch("roundtrip");
  save_checkpoint(dir, net, Role::student_syn, 42, "moc");
  CheckpointInfo info;
  const ModelHandle loaded = load_checkpoint(dir, &info);
  const Image x = oracle::random_tensor<float>({2, 3, 16, 16}, 15);
  CHECK(loaded.forward(x).y == net.forward(x).y);
  CHECK(role_from_string(info.role) == Role::student_syn);
  CHECK(info.step == 42);
  CHECK(info.phase == "moc");
  CHECK(loaded.config() == net.config());

  Index blob_values = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".bin") blob_values += static_cast<Index>(fs::file_size(e.path()) / 4);
  CHECK(blob_values == param_count(net));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint with a wrong blob size is rejected") {
  ModelHandle net(NetConfig::student_default(), 8);
  const fs::path dir = scratch("corrupt");
  save_checkpoint(dir, net, Role::teacher, 0, "teacher");
  fs::resize_file(dir / "head.bias.bin", 8);
  CHECK_THROWS_AS(load_checkpoint(dir), InputError);
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_checkpoint(dir), InputError);
}
