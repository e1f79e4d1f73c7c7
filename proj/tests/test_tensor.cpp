#include <doctest.h>

#include <cmath>

#include "mmrisk/gradcheck.hpp"
#include "mmrisk/rng.hpp"
#include "mmrisk/tensor.hpp"
#include "oracles.hpp"

using namespace mmrisk;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("conv3d all-ones fixture") {
  Tensor input = Tensor::full({1, 1, 3, 3, 3}, 1.0);
  Tensor kernel = Tensor::full({1, 1, 2, 2, 2}, 1.0);
  Tensor out = conv3d(input, kernel, {1, 1, 1}, {0, 0, 0});
  CHECK(out.shape() == Shape{1, 1, 2, 2, 2});
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(8.0));
}

TEST_CASE("conv3d zero kernel gives zero output") {
  Rng rng(3);
  Tensor input = random_tensor({2, 3, 5, 4, 6}, rng);
  Tensor kernel = Tensor::zeros({2, 3, 3, 3, 3});
  Tensor out = conv3d(input, kernel, {1, 1, 1}, {1, 1, 1});
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);
}

TEST_CASE("conv3d matches the nested-loop reference") {
  Rng rng(7);
  Tensor input = random_tensor({1, 2, 4, 4, 4}, rng);
  Tensor kernel = random_tensor({3, 2, 2, 2, 2}, rng);
  for (auto [stride, pad] : {std::pair<std::array<int, 3>, std::array<int, 3>>{{1, 1, 1}, {0, 0, 0}},
                             {{2, 2, 2}, {1, 1, 1}},
                             {{1, 2, 1}, {1, 0, 1}}}) {
    Tensor got = conv3d(input, kernel, stride, pad);
    Tensor want = oracle::conv3d_reference(input, kernel, stride, pad);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(got[i] - want[i]) < 1e-12);
  }
}

TEST_CASE("conv3d channel mismatch reports both shapes") {
  Tensor input = Tensor::zeros({1, 2, 4, 4, 4});
  Tensor kernel = Tensor::zeros({1, 3, 2, 2, 2});
  try {
    conv3d(input, kernel, {1, 1, 1}, {0, 0, 0});
    FAIL("expected dimension error");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[1,2,4,4,4]") != std::string::npos);
    CHECK(msg.find("[1,3,2,2,2]") != std::string::npos);
  }
}

TEST_CASE("softmax fixtures and shift invariance") {
  Tensor x({2}, {0.0, 0.0});
  Tensor y = softmax(x, 0);
  CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(0.5).epsilon(1e-12));

  Tensor z = softmax(Tensor({2}, {std::log(2.0), 0.0}), 0);
  CHECK(z[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(z[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Rng rng(11);
  Tensor a = random_tensor({4, 7}, rng, -3.0, 3.0);
  Tensor shifted = add_scalar(a, 17.25);
  Tensor sa = softmax(a, 1), sb = softmax(shifted, 1);
  for (std::size_t i = 0; i < sa.size(); ++i) CHECK(std::abs(sa[i] - sb[i]) < 1e-12);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(13);
  Tensor a = random_tensor({5, 9}, rng, -4.0, 4.0);
  Tensor s = softmax(a, 1);
  for (int r = 0; r < 5; ++r) {
    double total = 0.0;
    for (int c = 0; c < 9; ++c) total += s[static_cast<std::size_t>(r) * 9 + c];
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("l2_normalize fixtures") {
  Tensor v = l2_normalize(Tensor({2}, {3.0, 4.0}), 0);
  CHECK(v[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(v[1] == doctest::Approx(0.8).epsilon(1e-12));

  Tensor u = l2_normalize(Tensor({2}, {0.6, 0.8}), 0);
  CHECK(u[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(u[1] == doctest::Approx(0.8).epsilon(1e-12));

  Tensor z = l2_normalize(Tensor({2}, {0.0, 0.0}), 0, 1e-12);
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
}

TEST_CASE("l2_normalize rows have unit norm") {
  Rng rng(17);
  Tensor a = random_tensor({6, 8}, rng);
  Tensor n = l2_normalize(a, 1);
  for (int r = 0; r < 6; ++r) {
    double sq = 0.0;
    for (int c = 0; c < 8; ++c) {
      double x = n[static_cast<std::size_t>(r) * 8 + c];
      sq += x * x;
    }
    CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-10);
  }
}

TEST_CASE("backward of sum of squares") {
  Tape tape;
  Tensor x = tape.leaf(Tensor({3}, {1.0, 2.0, 3.0}));
  Tensor y = sum_all(mul(x, x));
  tape.backward(y);
  Tensor g = tape.grad(x);
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
  CHECK(g[2] == doctest::Approx(6.0));
}

TEST_CASE("backward with no tracked path leaves leaf grads zero") {
  Tape tape;
  Tensor x = tape.leaf(Tensor({2}, {1.0, 2.0}));
  Tensor constant = tape.leaf(Tensor::scalar(5.0));
  Tensor y = scale(constant, 2.0);  // x never participates
  tape.backward(y);
  Tensor g = tape.grad(x);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
}

TEST_CASE("backward requires a scalar tracked root") {
  Tape tape;
  Tensor x = tape.leaf(Tensor({2}, {1.0, 2.0}));
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("tape is consumed by backward") {
  Tape tape;
  Tensor x = tape.leaf(Tensor({2}, {1.0, 2.0}));
  Tensor y = sum_all(x);
  tape.backward(y);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(y), std::logic_error);
  CHECK_THROWS_AS((void)sum_all(x), std::logic_error);
  tape.reset();
  CHECK_FALSE(tape.consumed());
}

TEST_CASE("shared leaves accumulate gradients") {
  Tape tape;
  Tensor raw({2}, {1.0, 2.0});
  Tensor a = tape.leaf(raw);
  Tensor b = tape.leaf(raw);  // same buffer, same node
  CHECK(a.node() == b.node());
  Tensor y = sum_all(add(a, b));
  tape.backward(y);
  Tensor g = tape.leaf_grad(raw);
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(2.0));
}

TEST_CASE("relu and matmul fixtures") {
  Tensor r = relu(Tensor({3}, {-1.0, 0.0, 2.0}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);

  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(5);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor out = matmul(eye, a);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(out[i] == doctest::Approx(a[i]).epsilon(1e-15));
}

TEST_CASE("broadcast incompatibility raises a dimension error") {
  CHECK_THROWS_AS((void)add(Tensor::zeros({3, 4}), Tensor::zeros({2, 4})), std::invalid_argument);
  CHECK_THROWS_AS((void)mul(Tensor::zeros({2, 3}), Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("primitive backward passes match finite differences over 100 random cases") {
  auto suite = primitive_gradient_suite(2024, 100);
  double worst = 0.0;
  for (const auto& c : suite) {
    INFO(c.name, " max rel err ", c.max_rel_err);
    CHECK(c.max_rel_err < 1e-4);
    CHECK(c.cases == 100);
    worst = std::max(worst, c.max_rel_err);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("identical inputs and tape order give bit-identical outputs and gradients") {
  auto run = [] {
    Rng rng(99);
    Tape tape;
    Tensor x = tape.leaf(random_tensor({4, 6}, rng));
    Tensor w = tape.leaf(random_tensor({6, 3}, rng));
    Tensor out = softmax(matmul(gelu(x), w), 1);
    Tensor loss = mean_all(mul(out, out));
    tape.backward(loss);
    std::vector<double> record;
    record.push_back(loss.item());
    Tensor gx = tape.leaf_grad(x.detached());
    Tensor gw = tape.leaf_grad(w.detached());
    for (std::size_t i = 0; i < gx.size(); ++i) record.push_back(gx[i]);
    for (std::size_t i = 0; i < gw.size(); ++i) record.push_back(gw[i]);
    return record;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("mixing tensors from two live tapes is an error") {
  Tape t1, t2;
  Tensor a = t1.leaf(Tensor({2}, {1.0, 2.0}));
  Tensor b = t2.leaf(Tensor({2}, {3.0, 4.0}));
  CHECK_THROWS_AS((void)add(a, b), std::logic_error);
}

TEST_CASE("pooling forward semantics") {
  // 1x1x2x2x2 block with known max and mean
  Tensor x({1, 1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor mx = maxpool3d(x, {2, 2, 2}, {2, 2, 2});
  CHECK(mx.size() == 1);
  CHECK(mx[0] == 8.0);
  Tensor av = avgpool3d(x, {2, 2, 2}, {2, 2, 2});
  CHECK(av[0] == doctest::Approx(4.5));
}

TEST_CASE("bce_with_logits is numerically stable at extremes") {
  Tensor logits({2}, {700.0, -700.0});
  Tensor targets({2}, {1.0, 0.0});
  Tensor out = bce_with_logits(logits, targets);
  CHECK(std::isfinite(out[0]));
  CHECK(std::isfinite(out[1]));
  CHECK(out[0] == doctest::Approx(0.0));
  CHECK(out[1] == doctest::Approx(0.0));
}
