#include <cmath>
#include <numbers>
#include <stdexcept>

#include "doctest.h"
#include "dsem/nn.hpp"
#include "dsem/ops.hpp"
#include "fd_check.hpp"
#include "test_util.hpp"

using namespace dsem;
using namespace dsem::testing;

TEST_CASE("every differentiable op passes finite differences on 20 random instances") {
  for (const auto& check : differentiable_op_checks()) {
    Rng rng = derive_stream(7, "test/fd/" + check.name);
    for (int i = 0; i < 20; ++i) {
      const double err = check.instance(rng);
      INFO(check.name << " instance " << i << " error " << err);
      CHECK(err < kFdTolerance);
    }
  }
}

TEST_CASE("conv2d") {
  SUBCASE("all-ones 3x3 sums to 9") {
    auto x = TensorD::full({1, 1, 3, 3}, 1.0);
    auto w = TensorD::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, w, TensorD{}, 1, 0, 1);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == 9.0);
  }
  SUBCASE("unit 1x1 kernel is the identity") {
    Rng rng(3);
    auto x = random_tensor(rng, {2, 1, 5, 4}, -1, 1, false);
    auto w = TensorD::full({1, 1, 1, 1}, 1.0);
    auto b = TensorD::zeros({1, 1, 1, 1});
    CHECK(values(conv2d(x, w, b, 1, 0, 1)) == values(x));
  }
  SUBCASE("dilated 2x3x8x8 case against finite differences") {
    Rng rng(11);
    auto x = random_tensor(rng, {2, 3, 8, 8});
    auto w = random_tensor(rng, {4, 3, 3, 3});
    auto b = random_tensor(rng, {1, 4, 1, 1});
    auto y = conv2d(x, w, b, 1, 2, 2);
    CHECK(y.shape() == Shape{2, 4, 8, 8});
    CHECK(fd_relative_error({x, w, b}, [&] { return conv2d(x, w, b, 1, 2, 2); }, rng) < kFdTolerance);
  }
  SUBCASE("errors") {
    auto x = TensorD::zeros({1, 2, 4, 4});
    auto w = TensorD::zeros({1, 3, 3, 3});
    try {
      conv2d(x, w, TensorD{}, 1, 0, 1);
      FAIL("expected a shape error");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("1x2x4x4") != std::string::npos);
      CHECK(msg.find("1x3x3x3") != std::string::npos);
    }
    auto w2 = TensorD::zeros({1, 2, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w2, TensorD{}, 0, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS(conv2d(x, w2, TensorD{}, 1, 0, 0), std::invalid_argument);
  }
}

TEST_CASE("grl") {
  Rng rng(5);
  auto x = random_tensor(rng, {2, 3, 4, 4});
  std::vector<double> g(x.numel());
  for (double& v : g) v = rng.uniform(-2, 2);

  auto y = grl(x, 1.0);
  CHECK(values(y) == values(x));
  backward(y, std::span<const double>(g));
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(x.grad()[i] == -g[i]);

  x.zero_grad();
  backward(grl(x, 0.0), std::span<const double>(g));
  for (double v : x.grad()) CHECK(v == 0.0);

  CHECK_THROWS_AS(grl(x, -1.0), std::invalid_argument);
}

TEST_CASE("adaptive_avg_pool") {
  SUBCASE("one bin is the channel mean") {
    auto x = tensor({1, 2, 2, 3}, {1, 2, 3, 4, 5, 6, 0, 0, 0, 0, 0, 12});
    auto y = adaptive_avg_pool(x, 1);
    CHECK(y.shape() == Shape{1, 2, 1, 1});
    CHECK(y.data()[0] == doctest::Approx(3.5));
    CHECK(y.data()[1] == doctest::Approx(2.0));
  }
  SUBCASE("bins equal to the size are the identity") {
    auto x = tensor({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(values(adaptive_avg_pool(x, 2)) == values(x));
  }
  SUBCASE("quadrant means of a 4x4 ramp") {
    std::vector<double> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[i] = i;
    auto y = adaptive_avg_pool(tensor({1, 1, 4, 4}, ramp), 2);
    const std::vector<double> expected{2.5, 4.5, 10.5, 12.5};
    for (int i = 0; i < 4; ++i) CHECK(std::abs(y.data()[i] - expected[i]) <= 1e-12);
  }
  SUBCASE("bins larger than the map") {
    CHECK_THROWS_AS(adaptive_avg_pool(TensorD::zeros({1, 1, 2, 2}), 4), std::invalid_argument);
  }
}

TEST_CASE("upsample_nearest") {
  auto seven = upsample_nearest(tensor({1, 1, 1, 1}, {7}), 4, 4);
  CHECK(values(seven) == std::vector<double>(16, 7.0));

  auto x = tensor({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(values(upsample_nearest(x, 2, 2)) == values(x));
  const std::vector<double> blocks{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  CHECK(values(upsample_nearest(x, 4, 4)) == blocks);
}

TEST_CASE("elementwise_mul and add") {
  Rng rng(9);
  auto a = random_tensor(rng, {1, 2, 3, 3}, -1, 1, false);
  CHECK(values(elementwise_mul(a, TensorD::full(a.shape(), 1.0))) == values(a));
  CHECK(values(elementwise_mul(a, TensorD::zeros(a.shape()))) == std::vector<double>(a.numel(), 0.0));
  CHECK_THROWS_AS(elementwise_mul(a, TensorD::zeros({1, 2, 3, 2})), ShapeError);
  CHECK_THROWS_AS(add(a, TensorD::zeros({1, 1, 3, 3})), ShapeError);
}

TEST_CASE("concat_channels") {
  auto a = tensor({1, 2, 1, 1}, {1, 2}, true);
  auto b = tensor({1, 3, 1, 1}, {3, 4, 5}, true);
  const std::vector<TensorD> one{a};
  CHECK(values(concat_channels<double>(one)) == values(a));
  const std::vector<TensorD> both{a, b};
  auto y = concat_channels<double>(both);
  CHECK(y.shape() == Shape{1, 5, 1, 1});
  CHECK(values(y) == std::vector<double>{1, 2, 3, 4, 5});

  // A cotangent on the b-slice only reaches b.
  const std::vector<double> seed{0, 0, 1, 1, 1};
  backward(y, std::span<const double>(seed));
  CHECK((!a.has_grad() || grads(a) == std::vector<double>{0, 0}));
  CHECK(grads(b) == std::vector<double>{1, 1, 1});

  const std::vector<TensorD> bad{a, TensorD::zeros({1, 1, 2, 1})};
  CHECK_THROWS_AS(concat_channels<double>(bad), ShapeError);
}

TEST_CASE("activations") {
  auto r = relu(tensor({1, 1, 1, 2}, {-1, 2}));
  CHECK(values(r) == std::vector<double>{0, 2});
  CHECK(sigmoid(tensor({1, 1, 1, 1}, {0})).item() == 0.5);

  Rng rng(2);
  auto s = softmax_channels(random_tensor(rng, {2, 4, 3, 3}, -5, 5, false));
  for (int n = 0; n < 2; ++n)
    for (int h = 0; h < 3; ++h)
      for (int w = 0; w < 3; ++w) {
        double total = 0;
        for (int c = 0; c < 4; ++c) total += s.at(n, c, h, w);
        CHECK(std::abs(total - 1.0) <= 1e-6);
      }
}

TEST_CASE("losses") {
  for (double label : {0.0, 0.3, 1.0})
    CHECK(binary_cross_entropy(tensor({1, 1, 1, 1}, {0.5}), label).item() ==
          doctest::Approx(std::numbers::ln2).epsilon(1e-12));
  CHECK_THROWS_AS(binary_cross_entropy(tensor({1, 1, 1, 1}, {0.5}), 1.5), std::out_of_range);

  const std::vector<unsigned char> mask{1};
  auto pred = tensor({1, 4, 1, 1}, {0.5, -1, 2, 0});
  CHECK(smooth_l1(pred, std::span<const double>(values(pred)), std::span<const unsigned char>(mask), 1.0).item() ==
        0.0);
  // Residual 2 in a single coordinate: |d| - 0.5.
  const std::vector<double> target{2.5, -1, 2, 0};
  CHECK(smooth_l1(pred, std::span<const double>(target), std::span<const unsigned char>(mask), 1.0).item() ==
        doctest::Approx(1.5).epsilon(1e-12));

  const std::vector<int> labels{3};
  CHECK_THROWS_AS(softmax_cross_entropy(tensor({1, 3, 1, 1}, {0, 0, 0}), std::span<const int>(labels),
                                        std::span<const double>{}, 1.0),
                  std::out_of_range);
}

TEST_CASE("backward accumulates over shared uses") {
  auto x = tensor({1, 1, 1, 2}, {1.5, -2}, true);
  backward(sum_all(add(x, x)));
  CHECK(grads(x) == std::vector<double>{2, 2});
}

TEST_CASE("sgd_step") {
  ParamStore<double> store;
  auto& p = store.create("w", {1, 1, 1, 2});
  std::vector<Parameter<double>*> ps{&p};
  p.tensor.mutable_data()[0] = 1.0;
  p.tensor.mutable_data()[1] = -1.0;

  SUBCASE("vanilla step") {
    p.tensor.mutable_grad()[0] = 0.5;
    p.tensor.mutable_grad()[1] = -2.0;
    sgd_step<double>(ps, 0.1, 0.0, 0.0);
    CHECK(p.tensor.data()[0] == 1.0 - 0.1 * 0.5);
    CHECK(p.tensor.data()[1] == -1.0 - 0.1 * -2.0);
  }
  SUBCASE("zero gradient leaves weights") {
    p.tensor.mutable_grad();
    sgd_step<double>(ps, 0.1, 0.0, 0.0);
    CHECK(values(p.tensor) == std::vector<double>{1.0, -1.0});
  }
  SUBCASE("two momentum steps on a constant gradient move 2.9 g") {
    const double g = 0.25;
    for (int i = 0; i < 2; ++i) {
      p.tensor.mutable_grad()[0] = g;
      p.tensor.mutable_grad()[1] = g;
      sgd_step<double>(ps, 1.0, 0.9, 0.0);
    }
    CHECK(p.tensor.data()[0] == doctest::Approx(1.0 - 2.9 * g).epsilon(1e-12));
  }
  SUBCASE("missing gradient names the parameter") {
    try {
      sgd_step<double>(ps, 0.1, 0.0, 0.0);
      FAIL("expected an error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("'w'") != std::string::npos);
    }
  }
}
