#include <doctest.h>

#include <cmath>
#include <random>

#include "cdiffdet/errors.hpp"
#include "cdiffdet/gradcheck.hpp"
#include "cdiffdet/tensor.hpp"

using namespace cdiffdet;

namespace {

void check_values(const Tensor& t, const std::vector<double>& want, double tol = 0.0) {
  REQUIRE(t.numel() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(t[i] - want[i]) <= tol);
}

}  // namespace

TEST_CASE("matmul examples") {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor a({2, 2}, {3.5, -1, 2, 7});
  check_values(matmul(eye, a), a.values());
  check_values(matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 1}, {0, 1})), {2, 4});
  check_values(matmul(Tensor::zeros({2, 3}), Tensor({3, 2}, {1, 2, 3, 4, 5, 6})), {0, 0, 0, 0});
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("matmul broadcasts batch dims against a shared right operand") {
  std::mt19937_64 rng(1);
  const Tensor a = Tensor::randn({3, 2, 4}, rng), b = Tensor::randn({4, 5}, rng);
  const Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{3, 2, 5});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a[(n * 2 + i) * 4 + k] * b[k * 5 + j];
        CHECK(c[(n * 2 + i) * 5 + j] == doctest::Approx(s).epsilon(1e-14));
      }
}

TEST_CASE("softmax examples and row sums") {
  check_values(softmax(Tensor({3}, {0, 0, 0}), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
  check_values(softmax(Tensor({1}, {42}), 0), {1.0});
  check_values(softmax(Tensor({2}, {std::log(2.0), 0.0}), 0), {2.0 / 3, 1.0 / 3}, 1e-15);
  std::mt19937_64 rng(2);
  const Tensor x = Tensor::randn({4, 5, 6}, rng, 10.0);
  for (int axis : {0, 1, 2}) {
    const Tensor s = softmax(x, axis);
    const Shape& sh = x.shape();
    const std::size_t ax = static_cast<std::size_t>(axis);
    std::size_t inner = 1;
    for (std::size_t k = ax + 1; k < 3; ++k) inner *= sh[k];
    const std::size_t outer = x.numel() / (inner * sh[ax]);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double total = 0;
        for (std::size_t k = 0; k < sh[ax]; ++k) {
          const double v = s[(o * sh[ax] + k) * inner + i];
          CHECK(v >= 0.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
      }
  }
}

TEST_CASE("layer_norm examples") {
  const Tensor ones({4}, {1, 1, 1, 1}), zeros4({4}, {0, 0, 0, 0});
  check_values(layer_norm(Tensor({4}, {3, 3, 3, 3}), ones, zeros4), {0, 0, 0, 0});
  const Tensor r = layer_norm(Tensor({2}, {1, -1}), Tensor({2}, {1, 1}), Tensor({2}, {0, 0}));
  // eps = 1e-5 against unit variance.
  check_values(r, {1 / std::sqrt(1 + 1e-5), -1 / std::sqrt(1 + 1e-5)}, 1e-15);
  check_values(layer_norm(Tensor({2}, {0, 0}), Tensor({2}, {1, 1}), Tensor({2}, {5, 5})), {5, 5});
}

TEST_CASE("conv2d examples") {
  std::mt19937_64 rng(3);
  const Tensor x = Tensor::randn({1, 2, 4, 4}, rng);
  const Tensor id({2, 2, 1, 1}, {1, 0, 0, 1});
  check_values(conv2d(x, id, std::nullopt, 1, 0), x.values());
  check_values(conv2d(x, Tensor::zeros({3, 2, 3, 3}), std::nullopt, 1, 1), std::vector<double>(48, 0.0));

  // 3x3 box filter over 1..16 with zero padding, hand-summed.
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[static_cast<std::size_t>(i)] = i + 1;
  const Tensor img({1, 1, 4, 4}, v);
  const Tensor avg = conv2d(img, Tensor::full({1, 1, 3, 3}, 1.0 / 9.0), std::nullopt, 1, 1);
  const std::vector<double> sums = {14, 24, 30, 22, 33, 54, 63, 45, 57, 90, 99, 69, 46, 72, 78, 54};
  for (std::size_t i = 0; i < 16; ++i) CHECK(avg[i] == doctest::Approx(sums[i] / 9.0).epsilon(1e-14));

  const Tensor s2 = conv2d(Tensor::zeros({1, 1, 7, 5}), Tensor::zeros({1, 1, 3, 3}), std::nullopt, 2, 1);
  CHECK(s2.shape() == Shape{1, 1, 4, 3});
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), std::nullopt, 1, 0), ShapeError);
}

TEST_CASE("global_avg_pool examples") {
  check_values(global_avg_pool(Tensor::full({1, 1, 3, 3}, 2.5)), {2.5});
  check_values(global_avg_pool(Tensor({1, 1, 2, 2}, {1, 2, 3, 4})), {2.5});
  check_values(global_avg_pool(Tensor({1, 2, 1, 1}, {7, -3})), {7, -3});
}

TEST_CASE("backward examples") {
  {
    GradTape tape;
    const Tensor x = tape.watch(Tensor({3}, {1, 2, 3}));
    tape.backward(sum(x));
    check_values(tape.grad(x), {1, 1, 1});
  }
  {
    GradTape tape;
    const Tensor x = tape.watch(Tensor({2}, {1, 2}));
    tape.backward(sum(mul(x, x)));
    check_values(tape.grad(x), {2, 4});
  }
  {
    GradTape tape;
    const Tensor x = tape.watch(Tensor({2}, {1, 2}));
    const Tensor unused = tape.watch(Tensor({3}, {1, 2, 3}));
    tape.backward(sum(x));
    check_values(tape.grad(unused), {0, 0, 0});
  }
  {
    GradTape tape;
    const Tensor x = tape.watch(Tensor({2}, {1, 2}));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
  }
}

TEST_CASE("non-finite forward results raise") {
  CHECK_THROWS_AS(exp(Tensor({1}, {1000.0})), NumericError);
}

TEST_CASE("finite-difference check examples") {
  ScalarFn quad = [](GradTape&, std::span<const Tensor> p) { return sum(mul(p[0], p[0])); };
  const auto r = finite_difference_check(quad, {Tensor({1}, {3.0})});
  CHECK(r.max_rel_error < 1e-9);

  std::mt19937_64 rng(4);
  const Tensor g = Tensor::randn({4}, rng), b = Tensor::randn({4}, rng), proj = Tensor::randn({4}, rng);
  ScalarFn composite = [&](GradTape&, std::span<const Tensor> p) {
    return sum(mul(softmax(layer_norm(p[0], g, b), 0), proj));
  };
  CHECK(finite_difference_check(composite, {Tensor::randn({4}, rng)}).max_rel_error < 1e-4);

  ScalarFn dead = [](GradTape&, std::span<const Tensor> p) { return sum(p[0]); };
  const auto d = finite_difference_check(dead, {Tensor({2}, {1, 2}), Tensor({2}, {5, 6})});
  CHECK(d.max_rel_error < 1e-9);

  int calls = 0;
  ScalarFn flaky = [&](GradTape&, std::span<const Tensor> p) { return add_scalar(sum(p[0]), 1e-3 * (++calls)); };
  CHECK_THROWS_AS(finite_difference_check(flaky, {Tensor({1}, {1.0})}), OracleError);
}

TEST_CASE("random composites pass the finite-difference check over many seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor w = Tensor::randn({3, 4}, rng), gamma = Tensor::randn({4}, rng), beta = Tensor::randn({4}, rng);
    const Tensor proj = Tensor::randn({2, 4}, rng);
    ScalarFn f = [&](GradTape&, std::span<const Tensor> p) {
      const Tensor h = layer_norm(matmul(p[0], w), gamma, beta);
      return sum(mul(add(softmax(h, -1), sigmoid(mul(h, p[1]))), proj));
    };
    const auto r = finite_difference_check(f, {Tensor::randn({2, 3}, rng), Tensor::randn({4}, rng)});
    INFO("seed " << seed);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("ops are deterministic") {
  std::mt19937_64 r1(9), r2(9);
  const Tensor a = Tensor::randn({2, 3, 8, 8}, r1), b = Tensor::randn({2, 3, 8, 8}, r2);
  std::mt19937_64 r3(10);
  const Tensor w = Tensor::randn({4, 3, 3, 3}, r3);
  const Tensor ya = conv2d(a, w, std::nullopt, 2, 1), yb = conv2d(b, w, std::nullopt, 2, 1);
  CHECK(ya.values() == yb.values());
}
