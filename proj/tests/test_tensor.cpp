#include "doctest.h"

#include <cmath>
#include <thread>

#include "vig/ops.hpp"
#include "vig/tape.hpp"

using namespace vig;

namespace {

// Phi(1) via Simpson quadrature of the standard normal pdf, independent of
// the erf path used by the implementation.
double normal_cdf_quadrature(double x) {
  const int steps = 20000;
  const double h = x / steps;
  auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI); };
  double acc = pdf(0.0) + pdf(x);
  for (int i = 1; i < steps; ++i) acc += pdf(i * h) * (i % 2 ? 4.0 : 2.0);
  return 0.5 + acc * h / 3.0;
}

}  // namespace

TEST_CASE("matmul identity is exact") {
  Rng rng(1);
  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(Tensor::identity(2), a);
  for (int i = 0; i < 4; ++i) CHECK(c.at(i) == a.at(i));

  Tensor b = Tensor::randn({5, 7}, rng);
  Tensor ib = matmul(Tensor::identity(5), b);
  for (int64_t i = 0; i < b.numel(); ++i) CHECK(ib.at(i) == b.at(i));
}

TEST_CASE("matmul hand-computed case") {
  Tensor a = Tensor::from_values({1, 2}, {1, 2});
  Tensor b = Tensor::from_values({2, 1}, {3, 4});
  Tensor c = matmul(a, b);
  CHECK(c.dim(0) == 1);
  CHECK(c.dim(1) == 1);
  CHECK(c.at(0) == doctest::Approx(11.0));  // 1*3 + 2*4
}

TEST_CASE("matmul shape mismatch raises a dimension error") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("gelu fixed points") {
  Tensor x = Tensor::from_values({3}, {0.0, 10.0, 1.0}, DType::Float64);
  Tensor y = gelu(x);
  CHECK(y.at(0) == 0.0);
  CHECK(y.at(1) == doctest::Approx(10.0).epsilon(1e-7));
  // quadrature oracle for x * Phi(x) at x = 1
  CHECK(y.at(2) == doctest::Approx(1.0 * normal_cdf_quadrature(1.0)).epsilon(1e-9));
}

TEST_CASE("batch_norm train mode") {
  Tensor gamma = Tensor::ones({2}, DType::Float64);
  Tensor beta = Tensor::zeros({2}, DType::Float64);

  SUBCASE("constant column maps to zero") {
    auto st = BnState::fresh(2, DType::Float64);
    Tensor x = Tensor::from_values({3, 2}, {5, 1, 5, 2, 5, 3}, DType::Float64);
    Tensor y = batch_norm(x, gamma, beta, st, true);
    CHECK(y.at2(0, 0) == doctest::Approx(0.0));
    CHECK(y.at2(1, 0) == doctest::Approx(0.0));
    CHECK(y.at2(2, 0) == doctest::Approx(0.0));
  }

  SUBCASE("unit-variance column passes through up to epsilon") {
    auto st = BnState::fresh(1, DType::Float64);
    Tensor x = Tensor::from_values({2, 1}, {-1, 1}, DType::Float64);
    Tensor y = batch_norm(x, Tensor::ones({1}, DType::Float64),
                          Tensor::zeros({1}, DType::Float64), st, true);
    CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-4));
  }

  SUBCASE("degenerate batch is rejected") {
    auto st = BnState::fresh(2, DType::Float64);
    Tensor x = Tensor::zeros({1, 2}, DType::Float64);
    CHECK_THROWS_AS(batch_norm(x, gamma, beta, st, true), ContractError);
  }

  SUBCASE("output column means equal shift for random batches") {
    Rng rng(7);
    for (int trial = 0; trial < 4; ++trial) {
      auto st = BnState::fresh(3, DType::Float64);
      Tensor shift = Tensor::from_values({3}, {0.5, -1.0, 2.0}, DType::Float64);
      Tensor x = Tensor::randn({4 + trial * 5, 3}, rng, 2.0, DType::Float64);
      Tensor y = batch_norm(x, Tensor::ones({3}, DType::Float64), shift, st, true);
      for (int j = 0; j < 3; ++j) {
        double mean = 0;
        for (int64_t i = 0; i < y.dim(0); ++i) mean += y.at2(i, j) / double(y.dim(0));
        CHECK(mean == doctest::Approx(shift.at(j)).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("batch_norm eval mode with unit running stats is the identity") {
  auto st = BnState::fresh(2, DType::Float64);
  Tensor x = Tensor::from_values({2, 2}, {1, 2, 3, 4}, DType::Float64);
  Tensor y = batch_norm(x, Tensor::ones({2}, DType::Float64),
                        Tensor::zeros({2}, DType::Float64), st, false);
  for (int i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)).epsilon(1e-5));
}

TEST_CASE("reduce_max_rows") {
  SUBCASE("single row returns that row") {
    Tensor x = Tensor::from_values({1, 3}, {4, -2, 0});
    Tensor y = reduce_max_rows(x);
    CHECK(y.at(0) == 4);
    CHECK(y.at(1) == -2);
    CHECK(y.at(2) == 0);
  }
  SUBCASE("columnwise maximum") {
    Tensor x = Tensor::from_values({2, 2}, {1, 5, 3, 2});
    Tensor y = reduce_max_rows(x);
    CHECK(y.at(0) == 3);
    CHECK(y.at(1) == 5);
  }
  SUBCASE("gradient routes to the argmax row per column") {
    GradTape tape;
    Tensor x = tape.watch("x", Tensor::from_values({2, 2}, {1, 5, 3, 2}, DType::Float64));
    Tensor loss = sum_all(reduce_max_rows(x));
    auto grads = tape.backward(loss);
    const Tensor& g = grads.at("x");
    CHECK(g.at2(0, 0) == 0);
    CHECK(g.at2(0, 1) == 1);
    CHECK(g.at2(1, 0) == 1);
    CHECK(g.at2(1, 1) == 0);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum of squares") {
    GradTape tape;
    Tensor x = tape.watch("x", Tensor::from_values({2}, {1, 2}, DType::Float64));
    Tensor loss = sum_all(mul(x, x));
    auto grads = tape.backward(loss);
    CHECK(grads.at("x").at(0) == doctest::Approx(2.0));
    CHECK(grads.at("x").at(1) == doctest::Approx(4.0));
  }

  SUBCASE("sum(gelu(xW)) matches finite differences") {
    Rng rng(3);
    Tensor x0 = Tensor::randn({3, 4}, rng, 1.0, DType::Float64);
    Tensor w = Tensor::randn({4, 5}, rng, 0.5, DType::Float64);
    const double err = grad_check(
        [&](const Tensor& x) { return sum_all(gelu(matmul(x, w))); }, x0, 1e-5);
    CHECK(err <= 1e-6);
  }

  SUBCASE("unused parameter gets an exact zero gradient") {
    GradTape tape;
    Tensor x = tape.watch("x", Tensor::from_values({2}, {1, 2}, DType::Float64));
    Tensor unused = tape.watch("unused", Tensor::ones({3, 3}, DType::Float64));
    Tensor loss = sum_all(x);
    auto grads = tape.backward(loss);
    for (int64_t i = 0; i < 9; ++i) CHECK(grads.at("unused").at(i) == 0.0);
  }

  SUBCASE("non-scalar loss is a contract violation") {
    GradTape tape;
    Tensor x = tape.watch("x", Tensor::ones({2, 2}, DType::Float64));
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }

  SUBCASE("backward twice without re-forward is a lifecycle error") {
    GradTape tape;
    Tensor x = tape.watch("x", Tensor::ones({2}, DType::Float64));
    Tensor loss = sum_all(x);
    (void)tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), LifecycleError);
    CHECK_THROWS_AS(tape.watch("y", Tensor::ones({2}, DType::Float64)), LifecycleError);
  }
}

TEST_CASE("backward is linear: doubling the loss doubles every gradient exactly") {
  Rng rng(11);
  Tensor x0 = Tensor::randn({4, 3}, rng, 1.0, DType::Float64);
  Tensor w = Tensor::randn({3, 3}, rng, 0.7, DType::Float64);

  auto run = [&](double s) {
    GradTape tape;
    Tensor x = tape.watch("x", x0);
    Tensor wt = tape.watch("w", w);
    Tensor loss = scale(sum_all(gelu(matmul(x, wt))), s);
    return tape.backward(loss);
  };
  auto g1 = run(1.0), g2 = run(2.0);
  for (const auto& name : {"x", "w"}) {
    const Tensor&a = g1.at(name), &b = g2.at(name);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(b.at(i) == 2.0 * a.at(i));
  }
}

TEST_CASE("grad_check op") {
  Rng rng(5);
  SUBCASE("constant-gradient function") {
    Tensor x = Tensor::randn({6}, rng, 1.0, DType::Float64);
    CHECK(grad_check([](const Tensor& t) { return sum_all(t); }, x) <= 1e-10);
  }
  SUBCASE("tie point of reduce_max is a documented exclusion") {
    // At an exact tie the subgradient choice (first row) differs from the
    // two-sided numeric slope, so the mismatch is expected and large.
    Tensor x = Tensor::from_values({2, 1}, {1.0, 1.0}, DType::Float64);
    const double err =
        grad_check([](const Tensor& t) { return sum_all(reduce_max_rows(t)); }, x);
    CHECK(err > 1e-2);
  }
}

TEST_CASE("per-op gradient checks at random non-degenerate points") {
  Rng rng(29);
  SUBCASE("batch_norm, train mode") {
    Tensor x0 = Tensor::randn({8, 3}, rng, 1.5, DType::Float64);
    Tensor gamma = Tensor::rand_uniform({3}, rng, 0.5, 1.5, DType::Float64);
    Tensor beta = Tensor::randn({3}, rng, 0.3, DType::Float64);
    auto f = [&](const Tensor& x) {
      auto st = BnState::fresh(3, DType::Float64);
      Tensor y = batch_norm(x, gamma, beta, st, true);
      return sum_all(mul(y, y));
    };
    CHECK(grad_check(f, x0) <= 1e-6);
  }
  SUBCASE("gelu") {
    Tensor x0 = Tensor::randn({10}, rng, 1.0, DType::Float64);
    CHECK(grad_check([](const Tensor& x) { return sum_all(mul(gelu(x), gelu(x))); }, x0) <=
          1e-6);
  }
  SUBCASE("matmul both sides") {
    Tensor a0 = Tensor::randn({4, 5}, rng, 1.0, DType::Float64);
    Tensor b = Tensor::randn({5, 3}, rng, 1.0, DType::Float64);
    CHECK(grad_check([&](const Tensor& a) { return sum_all(mul(matmul(a, b), matmul(a, b))); },
                     a0) <= 1e-6);
    CHECK(grad_check([&](const Tensor& bb) { return sum_all(mul(matmul(a0, bb), matmul(a0, bb))); },
                     b) <= 1e-6);
  }
}

TEST_CASE("distinct tapes run in parallel threads") {
  auto work = [](uint64_t seed) {
    Rng rng(seed);
    Tensor x0 = Tensor::randn({6, 6}, rng, 1.0, DType::Float64);
    Tensor w = Tensor::randn({6, 6}, rng, 0.5, DType::Float64);
    GradTape tape;
    Tensor x = tape.watch("x", x0);
    Tensor loss = sum_all(gelu(matmul(x, tape.watch("w", w))));
    return tape.backward(loss).at("w").at(0);
  };
  const double a = work(5), b = work(6);
  double ta = 0, tb = 0;
  std::thread t1([&] { ta = work(5); });
  std::thread t2([&] { tb = work(6); });
  t1.join();
  t2.join();
  CHECK(ta == a);
  CHECK(tb == b);
}

TEST_CASE("finite invariant: non-finite op outputs are rejected") {
  set_finite_checks(true);
  Tensor big = Tensor::full({2, 2}, 1e300, DType::Float64);
  CHECK_THROWS_AS(mul(big, big), NumericError);  // overflows to inf
}

TEST_CASE("tensors from two tapes cannot mix") {
  GradTape t1, t2;
  Tensor a = t1.watch("a", Tensor::ones({2}, DType::Float64));
  Tensor b = t2.watch("b", Tensor::ones({2}, DType::Float64));
  CHECK_THROWS_AS(add(a, b), ContractError);
}
