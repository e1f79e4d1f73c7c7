#include <doctest.h>

#include <cmath>
#include <map>

#include "mmrisk/objectives.hpp"

using namespace mmrisk;

namespace {

Tensor unit_rows(Shape shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal();
  Tensor t(shape, std::move(v));
  return l2_normalize(t, 1);
}

const Tensor kOrthoPair({2, 2}, {1.0, 0.0, 0.0, 1.0});

}  // namespace

TEST_CASE("clip loss on the orthogonal two-pair fixture") {
  ClipConfig cfg;
  cfg.temperature = 1.0;
  cfg.lambda = 0.5;

  SUBCASE("standard denominator keeps the positive term") {
    ClipResult r = clip_loss(kOrthoPair, kOrthoPair, cfg);
    CHECK(r.loss.item() == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
    CHECK(r.loss.item() == doctest::Approx(0.31326).epsilon(1e-4));
  }
  SUBCASE("literal denominator is unbounded below") {
    cfg.denominator = ClipDenominator::Literal;
    ClipResult r = clip_loss(kOrthoPair, kOrthoPair, cfg);
    CHECK(r.loss.item() == doctest::Approx(-1.0).epsilon(1e-9));
  }
}

TEST_CASE("clip loss at lambda one half is symmetric under modality swap") {
  Rng rng(5);
  Tensor zi = unit_rows({5, 8}, rng);
  Tensor zt = unit_rows({5, 8}, rng);
  ClipConfig cfg;  // lambda 0.5
  double a = clip_loss(zi, zt, cfg).loss.item();
  double b = clip_loss(zt, zi, cfg).loss.item();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("clip loss is invariant under joint batch permutation") {
  Rng rng(6);
  Tensor zi = unit_rows({6, 8}, rng);
  Tensor zt = unit_rows({6, 8}, rng);
  ClipConfig cfg;
  double base = clip_loss(zi, zt, cfg).loss.item();
  std::vector<int> perm{3, 1, 5, 0, 4, 2};
  auto permute_rows = [&](const Tensor& t) {
    std::vector<double> v(t.size());
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 8; ++c)
        v[static_cast<std::size_t>(r) * 8 + c] = t[static_cast<std::size_t>(perm[r]) * 8 + c];
    return Tensor({6, 8}, std::move(v));
  };
  double permuted = clip_loss(permute_rows(zi), permute_rows(zt), cfg).loss.item();
  CHECK(base == doctest::Approx(permuted).epsilon(1e-12));
}

TEST_CASE("one gradient step pulls matched pairs together") {
  Rng rng(7);
  // raw (pre-normalization) parameters for a 2-pair batch
  Tensor xi({2, 4}, {0.9, 0.2, -0.4, 0.1, -0.3, 0.8, 0.5, -0.2});
  Tensor xt({2, 4}, {0.1, -0.7, 0.3, 0.6, 0.7, 0.1, -0.6, 0.4});
  ClipConfig cfg;
  cfg.temperature = 0.5;

  auto similarities = [&](const Tensor& a, const Tensor& b) {
    Tensor s = matmul(l2_normalize(a, 1), transpose_last(l2_normalize(b, 1)));
    return s;
  };
  Tensor s0 = similarities(xi, xt);

  Tape tape;
  Tensor ti = tape.leaf(xi), tt = tape.leaf(xt);
  ClipResult r = clip_loss(l2_normalize(ti, 1), l2_normalize(tt, 1), cfg);
  tape.backward(r.loss);
  Tensor gi = tape.leaf_grad(xi), gt = tape.leaf_grad(xt);
  const double lr = 1e-3;
  std::vector<double> vi(xi.values()), vt(xt.values());
  for (std::size_t k = 0; k < vi.size(); ++k) vi[k] -= lr * gi[k];
  for (std::size_t k = 0; k < vt.size(); ++k) vt[k] -= lr * gt[k];
  Tensor s1 = similarities(Tensor({2, 4}, std::move(vi)), Tensor({2, 4}, std::move(vt)));

  CHECK(s1[0] > s0[0]);  // matched pairs move together
  CHECK(s1[3] > s0[3]);
  CHECK(s1[1] < s0[1]);  // unmatched pairs move apart
  CHECK(s1[2] < s0[2]);
}

TEST_CASE("clip loss stays finite on unit inputs in standard mode") {
  Rng rng(8);
  for (double tau : {0.01, 0.1, 1.0}) {
    ClipConfig cfg;
    cfg.temperature = tau;
    Tensor zi = unit_rows({4, 6}, rng);
    Tensor zt = unit_rows({4, 6}, rng);
    CHECK(std::isfinite(clip_loss(zi, zt, cfg).loss.item()));
  }
}

TEST_CASE("clip loss contract errors") {
  ClipConfig cfg;
  CHECK_THROWS_AS((void)clip_loss(Tensor({1, 4}, {1, 0, 0, 0}), Tensor({1, 4}, {1, 0, 0, 0}), cfg),
                  std::invalid_argument);
  cfg.temperature = 0.0;
  CHECK_THROWS_AS((void)clip_loss(kOrthoPair, kOrthoPair, cfg), std::invalid_argument);
}

TEST_CASE("ntxent two-sample case matches the expanded formula") {
  Rng rng(9);
  Tensor z1 = unit_rows({2, 5}, rng);
  Tensor z2 = unit_rows({2, 5}, rng);
  const double tau = 0.37;
  double got = ntxent_loss(z1, z2, tau).item();

  // direct expansion over the four anchors
  auto row = [&](const Tensor& t, int r) {
    return std::vector<double>(t.data() + static_cast<std::size_t>(r) * 5,
                               t.data() + static_cast<std::size_t>(r + 1) * 5);
  };
  std::vector<std::vector<double>> z{row(z1, 0), row(z1, 1), row(z2, 0), row(z2, 1)};
  auto sim = [&](int a, int b) {
    double acc = 0.0;
    for (int k = 0; k < 5; ++k) acc += z[a][k] * z[b][k];
    return acc / tau;
  };
  double want = 0.0;
  for (int a = 0; a < 4; ++a) {
    int pos = (a + 2) % 4;
    double denom = 0.0;
    for (int b = 0; b < 4; ++b)
      if (b != a) denom += std::exp(sim(a, b));
    want += -(sim(a, pos) - std::log(denom));
  }
  want /= 4.0;
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("ntxent is invariant under batch permutation") {
  Rng rng(10);
  Tensor z1 = unit_rows({5, 6}, rng);
  Tensor z2 = unit_rows({5, 6}, rng);
  double base = ntxent_loss(z1, z2, 0.2).item();
  std::vector<int> perm{4, 2, 0, 3, 1};
  auto permute_rows = [&](const Tensor& t) {
    std::vector<double> v(t.size());
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 6; ++c)
        v[static_cast<std::size_t>(r) * 6 + c] = t[static_cast<std::size_t>(perm[r]) * 6 + c];
    return Tensor({5, 6}, std::move(v));
  };
  CHECK(ntxent_loss(permute_rows(z1), permute_rows(z2), 0.2).item() ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("ntxent decreases as matched views align") {
  // pair 0's second view rotates toward its first view in a plane orthogonal
  // to everything else, leaving all other similarities unchanged
  auto make = [](double theta) {
    Tensor z1({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
    Tensor z2({2, 4},
              {std::cos(theta), 0, std::sin(theta), 0, 0, 1, 0, 0});
    return ntxent_loss(z1, z2, 0.3).item();
  };
  CHECK(make(0.2) < make(0.8));
  CHECK(make(0.8) < make(1.4));
}

TEST_CASE("hard negative mining on a two-subject batch picks the only candidate") {
  Rng rng(11);
  Tensor s({2, 2}, {0.9, 0.1, 0.2, 0.8});
  for (int k = 0; k < 50; ++k) {
    MinedNegatives m = mine_hard_negatives(s, 0.1, rng);
    CHECK(m.tab_for_image[0] == 1);
    CHECK(m.tab_for_image[1] == 0);
    CHECK(m.img_for_tab[0] == 1);
    CHECK(m.img_for_tab[1] == 0);
  }
}

TEST_CASE("mining frequencies follow the softmax weights") {
  // anchor 0 sees candidates with similarities 0.9 and 0.1 at tau 0.1
  std::vector<double> s{0.0, 0.9, 0.1, 0.5, 0.0, -0.2, 0.3, 0.1, 0.0};
  Tensor sim({3, 3}, std::move(s));
  Rng rng(12);
  const int draws = 100000;
  int first = 0;
  for (int k = 0; k < draws; ++k) {
    MinedNegatives m = mine_hard_negatives(sim, 0.1, rng);
    CHECK(m.tab_for_image[0] != 0);
    if (m.tab_for_image[0] == 1) ++first;
  }
  double expected = std::exp(8.0) / (std::exp(8.0) + 1.0);
  CHECK(std::abs(static_cast<double>(first) / draws - expected) < 0.002);
}

TEST_CASE("mining is uniform when similarities are uniform") {
  const int n = 11;  // 10 candidates per anchor
  Tensor sim = Tensor::full({n, n}, 0.42);
  Rng rng(13);
  const int draws = 10000;
  std::vector<int> counts(n, 0);
  for (int k = 0; k < draws; ++k) {
    MinedNegatives m = mine_hard_negatives(sim, 0.1, rng);
    counts[m.tab_for_image[0]]++;
  }
  CHECK(counts[0] == 0);
  double expected = draws / 10.0;
  double chi2 = 0.0;
  for (int k = 1; k < n; ++k) {
    double d = counts[k] - expected;
    chi2 += d * d / expected;
  }
  // chi-square 0.99 quantile at 9 degrees of freedom
  CHECK(chi2 < 21.666);
}

TEST_CASE("mining determinism under a fixed seed") {
  Tensor sim({4, 4}, {0, .5, .1, .2, .3, 0, .9, .4, .2, .1, 0, .6, .8, .2, .3, 0});
  Rng r1(99), r2(99);
  MinedNegatives a = mine_hard_negatives(sim, 0.1, r1);
  MinedNegatives b = mine_hard_negatives(sim, 0.1, r2);
  CHECK(a.tab_for_image == b.tab_for_image);
  CHECK(a.img_for_tab == b.img_for_tab);
}

TEST_CASE("itm loss fixtures") {
  Tensor zeros = Tensor::zeros({4});
  CHECK(itm_loss(zeros, zeros).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor pos = Tensor::full({4}, 20.0);
  Tensor neg = Tensor::full({4}, -20.0);
  CHECK(itm_loss(pos, neg).item() < 1e-8);

  Rng rng(14);
  std::vector<double> lp(5), ln(5);
  for (double& v : lp) v = rng.uniform(-3.0, 3.0);
  for (double& v : ln) v = rng.uniform(-3.0, 3.0);
  double want = 0.0;
  for (double v : lp) want += -std::log(1.0 / (1.0 + std::exp(-v)));
  for (double v : ln) want += -std::log(1.0 - 1.0 / (1.0 + std::exp(-v)));
  want /= 10.0;
  double got = itm_loss(Tensor({5}, std::vector<double>(lp)), Tensor({5}, std::vector<double>(ln)))
                   .item();
  CHECK(got == doctest::Approx(want).epsilon(1e-12));

  CHECK_THROWS_AS((void)itm_loss(Tensor::zeros({3}), Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("total loss is the arithmetic mean") {
  CHECK(total_loss(Tensor::scalar(0.0), Tensor::scalar(0.0)).item() == 0.0);
  CHECK(total_loss(Tensor::scalar(0.4), Tensor::scalar(0.6)).item() == doctest::Approx(0.5));
  Rng rng(15);
  for (int k = 0; k < 20; ++k) {
    double a = rng.uniform(-2.0, 5.0), b = rng.uniform(-2.0, 5.0);
    CHECK(total_loss(Tensor::scalar(a), Tensor::scalar(b)).item() == (a + b) * 0.5);
  }
}
