#include <doctest.h>

#include <cmath>

#include "mmrisk/gradcheck.hpp"
#include "mmrisk/nn.hpp"

using namespace mmrisk;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

Tensor identity_matrix(int n) {
  std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i) * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}

void zero_linear(Linear& l) {
  l.weight.value = Tensor::zeros(l.weight.value.shape());
  l.bias.value = Tensor::zeros(l.bias.value.shape());
}

}  // namespace

TEST_CASE("attention with identity projections passes the value token through") {
  Rng rng(1);
  MultiHeadAttention mha("mha", 4, 1, rng);
  mha.q_proj.weight.value = identity_matrix(4);
  mha.k_proj.weight.value = identity_matrix(4);
  mha.v_proj.weight.value = identity_matrix(4);
  mha.out_proj.weight.value = identity_matrix(4);
  for (Param* p : {&mha.q_proj.bias, &mha.k_proj.bias, &mha.v_proj.bias, &mha.out_proj.bias})
    p->value = Tensor::zeros({4});
  Tensor token({1, 1, 4}, {0.3, -1.2, 2.0, 0.7});
  Tensor out = mha.forward(nullptr, token, token);
  for (std::size_t i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(token[i]).epsilon(1e-12));
}

TEST_CASE("two identical keys split attention evenly") {
  Rng rng(2);
  MultiHeadAttention mha("mha", 6, 2, rng);
  Tensor q = random_tensor({2, 3, 6}, rng);
  Tensor kv_row = random_tensor({1, 1, 6}, rng);
  // duplicate the single kv token along the sequence
  std::vector<double> kv(2 * 2 * 6);
  for (int n = 0; n < 2; ++n)
    for (int l = 0; l < 2; ++l)
      for (int d = 0; d < 6; ++d) kv[(n * 2 + l) * 6 + d] = kv_row[d];
  Tensor attn;
  mha.forward(nullptr, q, Tensor({2, 2, 6}, std::move(kv)), &attn);
  for (std::size_t i = 0; i < attn.size(); ++i) CHECK(attn[i] == doctest::Approx(0.5).epsilon(1e-10));
}

TEST_CASE("attention matches the per-head formula oracle") {
  Rng rng(3);
  const int d = 8, h = 2, dh = d / h;
  MultiHeadAttention mha("mha", d, h, rng);
  Tensor q_seq = random_tensor({1, 2, d}, rng);
  Tensor kv_seq = random_tensor({1, 2, d}, rng);
  Tensor got = mha.forward(nullptr, q_seq, kv_seq);

  // direct evaluation: per-token projections, per-head scaled dot-product
  auto apply_linear = [](const Linear& lin, const std::vector<double>& x) {
    std::vector<double> y(lin.out_dim(), 0.0);
    for (int o = 0; o < lin.out_dim(); ++o) {
      double acc = lin.bias.value[o];
      for (int i = 0; i < lin.in_dim(); ++i)
        acc += lin.weight.value[static_cast<std::size_t>(o) * lin.in_dim() + i] * x[i];
      y[o] = acc;
    }
    return y;
  };
  auto token = [&](const Tensor& t, int l) {
    return std::vector<double>(t.data() + static_cast<std::size_t>(l) * d,
                               t.data() + static_cast<std::size_t>(l + 1) * d);
  };
  std::vector<std::vector<double>> Q, K, V;
  for (int l = 0; l < 2; ++l) {
    Q.push_back(apply_linear(mha.q_proj, token(q_seq, l)));
    K.push_back(apply_linear(mha.k_proj, token(kv_seq, l)));
    V.push_back(apply_linear(mha.v_proj, token(kv_seq, l)));
  }
  for (int lq = 0; lq < 2; ++lq) {
    std::vector<double> merged(d, 0.0);
    for (int head = 0; head < h; ++head) {
      double s0 = 0.0, s1 = 0.0;
      for (int k = 0; k < dh; ++k) {
        s0 += Q[lq][head * dh + k] * K[0][head * dh + k];
        s1 += Q[lq][head * dh + k] * K[1][head * dh + k];
      }
      s0 /= std::sqrt(static_cast<double>(dh));
      s1 /= std::sqrt(static_cast<double>(dh));
      double m = std::max(s0, s1);
      double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
      double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
      for (int k = 0; k < dh; ++k)
        merged[head * dh + k] = a0 * V[0][head * dh + k] + a1 * V[1][head * dh + k];
    }
    std::vector<double> want = apply_linear(mha.out_proj, merged);
    for (int k = 0; k < d; ++k)
      CHECK(std::abs(got[static_cast<std::size_t>(lq) * d + k] - want[k]) < 1e-10);
  }
}

TEST_CASE("attention weights are a distribution per query") {
  Rng rng(4);
  MultiHeadAttention mha("mha", 8, 4, rng);
  Tensor q = random_tensor({3, 2, 8}, rng);
  Tensor kv = random_tensor({3, 5, 8}, rng);
  Tensor attn;
  mha.forward(nullptr, q, kv, &attn);
  // attn: [3, 4, 2, 5]
  for (int n = 0; n < 3; ++n)
    for (int head = 0; head < 4; ++head)
      for (int lq = 0; lq < 2; ++lq) {
        double total = 0.0;
        for (int lk = 0; lk < 5; ++lk) {
          double a = attn[((static_cast<std::size_t>(n) * 4 + head) * 2 + lq) * 5 + lk];
          CHECK(a >= 0.0);
          total += a;
        }
        CHECK(std::abs(total - 1.0) < 1e-10);
      }
}

TEST_CASE("d_model must divide evenly into heads") {
  Rng rng(5);
  CHECK_THROWS_AS(MultiHeadAttention("bad", 6, 4, rng), std::invalid_argument);
}

TEST_CASE("transformer layer with zero sublayer weights is repeated normalization") {
  Rng rng(6);
  TransformerLayer layer("tl", 4, 2, 8, rng);
  zero_linear(layer.self_attn.q_proj);
  zero_linear(layer.self_attn.k_proj);
  zero_linear(layer.self_attn.v_proj);
  zero_linear(layer.self_attn.out_proj);
  zero_linear(layer.cross_attn.q_proj);
  zero_linear(layer.cross_attn.k_proj);
  zero_linear(layer.cross_attn.v_proj);
  zero_linear(layer.cross_attn.out_proj);
  zero_linear(layer.ff1);
  zero_linear(layer.ff2);

  Tensor q = random_tensor({2, 3, 4}, rng);
  Tensor kv = random_tensor({2, 1, 4}, rng);
  Tensor got = layer.forward(nullptr, q, kv);

  Tensor ones = Tensor::full({4}, 1.0);
  Tensor zeros = Tensor::zeros({4});
  Tensor want = layer_norm(layer_norm(layer_norm(q, ones, zeros), ones, zeros), ones, zeros);
  REQUIRE(got.shape() == want.shape());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("transformer layer is batch permutation equivariant") {
  Rng rng(7);
  TransformerLayer layer("tl", 6, 2, 12, rng);
  Tensor q = random_tensor({3, 2, 6}, rng);
  Tensor kv = random_tensor({3, 2, 6}, rng);
  Tensor base = layer.forward(nullptr, q, kv);
  // swap subjects 0 and 2
  auto swap_batch = [](const Tensor& t) {
    std::vector<double> v(t.values());
    std::size_t per = t.size() / 3;
    for (std::size_t i = 0; i < per; ++i) std::swap(v[i], v[2 * per + i]);
    return Tensor(t.shape(), std::move(v));
  };
  Tensor swapped = layer.forward(nullptr, swap_batch(q), swap_batch(kv));
  Tensor expect = swap_batch(base);
  for (std::size_t i = 0; i < swapped.size(); ++i) CHECK(swapped[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("transformer layer equals the composition of its verified sublayers") {
  Rng rng(8);
  TransformerLayer layer("tl", 6, 3, 10, rng);
  Tensor q = random_tensor({2, 2, 6}, rng);
  Tensor kv = random_tensor({2, 3, 6}, rng);
  Tensor got = layer.forward(nullptr, q, kv);

  Tensor x = layer.norm_self.forward(nullptr, add(q, layer.self_attn.forward(nullptr, q, q)));
  x = layer.norm_cross.forward(nullptr, add(x, layer.cross_attn.forward(nullptr, x, kv)));
  Tensor ff = layer.ff2.forward(nullptr, gelu(layer.ff1.forward(nullptr, x)));
  Tensor want = layer.norm_ff.forward(nullptr, add(x, ff));
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-10);
}

TEST_CASE("parameter init is deterministic with zero biases") {
  Rng r1(42), r2(42);
  Linear a("a", 16, 8, r1), b("a", 16, 8, r2);
  REQUIRE(a.weight.value.size() == b.weight.value.size());
  for (std::size_t i = 0; i < a.weight.value.size(); ++i)
    CHECK(a.weight.value[i] == b.weight.value[i]);
  for (std::size_t i = 0; i < a.bias.value.size(); ++i) CHECK(a.bias.value[i] == 0.0);
}

TEST_CASE("fan-in scaled init has the expected spread") {
  Rng rng(43);
  Tensor w = uniform_fanin_init({1000, 1000}, 1000, rng);
  double mean = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) mean += w[i];
  mean /= static_cast<double>(w.size());
  double var = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) var += (w[i] - mean) * (w[i] - mean);
  var /= static_cast<double>(w.size());
  double target = 1.0 / std::sqrt(3.0 * 1000.0);  // std of U(-b, b) with b = 1/sqrt(fan_in)
  CHECK(std::sqrt(var) == doctest::Approx(target).epsilon(0.05));
}

TEST_CASE("layer norm output is standardized before the affine") {
  Rng rng(44);
  Tensor x = random_tensor({7, 16}, rng, -4.0, 3.0);
  Tensor y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}));
  for (int r = 0; r < 7; ++r) {
    double mean = 0.0;
    for (int c = 0; c < 16; ++c) mean += y[static_cast<std::size_t>(r) * 16 + c];
    mean /= 16.0;
    double var = 0.0;
    for (int c = 0; c < 16; ++c) {
      double d = y[static_cast<std::size_t>(r) * 16 + c] - mean;
      var += d * d;
    }
    var /= 16.0;
    CHECK(std::abs(mean) < 1e-8);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("residual block halves spatial dims at stride 2") {
  Rng rng(45);
  ResidualBlock3D block("rb", 2, 5, 2, rng);
  Tensor x = random_tensor({1, 2, 8, 8, 8}, rng);
  Tensor y = block.forward(nullptr, x);
  CHECK(y.shape() == Shape{1, 5, 4, 4, 4});
  ResidualBlock3D same("rb2", 3, 3, 1, rng);
  Tensor x2 = random_tensor({2, 3, 5, 6, 7}, rng);
  CHECK(same.forward(nullptr, x2).shape() == Shape{2, 3, 5, 6, 7});
}

TEST_CASE("finite differences pass through a stacked block") {
  Rng rng(46);
  TransformerLayer layer("tl", 4, 2, 6, rng);
  ResidualBlock3D block("rb", 1, 2, 2, rng);
  auto loss_fn = [&](Tape* tape, const std::vector<Tensor>& in) {
    Tensor seq = layer.forward(tape, in[0], in[1]);
    Tensor vol = block.forward(tape, in[2]);
    return add(mean_all(mul(seq, seq)), mean_all(vol));
  };
  std::vector<Tensor> inputs{random_tensor({1, 2, 4}, rng), random_tensor({1, 2, 4}, rng),
                             random_tensor({1, 1, 6, 6, 6}, rng)};
  CHECK(fd_max_rel_error(loss_fn, inputs) < 1e-4);
}

TEST_CASE("dropout mask scales by keep probability") {
  Rng rng(47);
  Tensor m = dropout_mask({10000}, 0.3, rng);
  double mean = 0.0;
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] == 0.0) ++zeros;
    else CHECK(m[i] == doctest::Approx(1.0 / 0.7));
    mean += m[i];
  }
  mean /= static_cast<double>(m.size());
  CHECK(static_cast<double>(zeros) / m.size() == doctest::Approx(0.3).epsilon(0.05));
  CHECK(mean == doctest::Approx(1.0).epsilon(0.02));
  Tensor all_ones = dropout_mask({8}, 0.0, rng);
  for (std::size_t i = 0; i < all_ones.size(); ++i) CHECK(all_ones[i] == 1.0);
}
