#include "mmrisk/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace mmrisk {

namespace {

constexpr double kNegInf = -1e30;

void check_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape() != b.shape())
    throw std::invalid_argument(std::string(what) + ": expected matching [N,P] inputs, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(0) < 2)
    throw std::invalid_argument(std::string(what) +
                                ": needs at least 2 subjects (no negatives otherwise)");
}

// Constant matrix with kNegInf on the diagonal, used to mask self terms
// out of a log-sum-exp denominator.
Tensor diag_mask(int n) {
  std::vector<double> m(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) m[static_cast<std::size_t>(i) * n + i] = kNegInf;
  return Tensor({n, n}, std::move(m));
}

Tensor reduce(const Tensor& per_anchor, LossReduction reduction) {
  return reduction == LossReduction::Mean ? mean_all(per_anchor) : sum_all(per_anchor);
}

// Per-anchor -log(exp(diag)/denominator) terms for the rows of a scaled
// similarity matrix.
Tensor anchor_terms(const Tensor& logits, ClipDenominator denom) {
  Tensor den = denom == ClipDenominator::Literal
                   ? logsumexp(add(logits, diag_mask(logits.dim(0))), 1)
                   : logsumexp(logits, 1);
  return sub(den, diagonal2d(logits));
}

}  // namespace

ClipResult clip_loss(const Tensor& z_img, const Tensor& z_tab, const ClipConfig& cfg) {
  check_pair(z_img, z_tab, "clip_loss");
  if (cfg.temperature <= 0.0) throw std::invalid_argument("clip_loss: temperature must be > 0");
  if (cfg.lambda < 0.0 || cfg.lambda > 1.0)
    throw std::invalid_argument("clip_loss: lambda must be in [0,1]");
  // rows are unit-norm, so the Gram matrix holds cosines
  Tensor sim = matmul(z_img, transpose_last(z_tab));
  Tensor logits = scale(sim, 1.0 / cfg.temperature);
  Tensor image_terms = anchor_terms(logits, cfg.denominator);                  // anchors: images
  Tensor tabular_terms = anchor_terms(transpose_last(logits), cfg.denominator); // anchors: tabular
  Tensor loss = add(scale(reduce(image_terms, cfg.reduction), cfg.lambda),
                    scale(reduce(tabular_terms, cfg.reduction), 1.0 - cfg.lambda));
  return ClipResult{loss, sim.detached()};
}

Tensor ntxent_loss(const Tensor& z_view1, const Tensor& z_view2, double temperature) {
  check_pair(z_view1, z_view2, "ntxent_loss");
  if (temperature <= 0.0) throw std::invalid_argument("ntxent_loss: temperature must be > 0");
  int n = z_view1.dim(0);
  Tensor z = concat({z_view1, z_view2}, 0);  // [2N, P]
  Tensor logits = scale(matmul(z, transpose_last(z)), 1.0 / temperature);
  Tensor masked = add(logits, diag_mask(2 * n));  // self-similarity excluded
  Tensor den = logsumexp(masked, 1);
  // positive of anchor a is (a + n) mod 2n; select via a constant 0/1 matrix
  std::vector<double> sel(static_cast<std::size_t>(2 * n) * (2 * n), 0.0);
  for (int a = 0; a < 2 * n; ++a)
    sel[static_cast<std::size_t>(a) * (2 * n) + ((a + n) % (2 * n))] = 1.0;
  Tensor pos = sum_axis(mul(logits, Tensor({2 * n, 2 * n}, std::move(sel))), 1);
  return mean_all(sub(den, pos));
}

MinedNegatives mine_hard_negatives(const Tensor& similarity, double temperature, Rng& rng) {
  if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1))
    throw std::invalid_argument("mine_hard_negatives: similarity must be square, got " +
                                shape_str(similarity.shape()));
  int n = similarity.dim(0);
  if (n < 2) throw std::invalid_argument("mine_hard_negatives: needs at least 2 subjects");
  if (temperature <= 0.0)
    throw std::invalid_argument("mine_hard_negatives: temperature must be > 0");

  // draws a candidate index != skip with probability softmax(scores / tau)
  auto draw = [&](int skip, auto score_at) {
    std::vector<double> w(static_cast<std::size_t>(n - 1));
    double m = -1e300;
    for (int k = 0, c = 0; k < n; ++k) {
      if (k == skip) continue;
      w[c++] = score_at(k) / temperature;
    }
    for (double v : w) m = std::max(m, v);
    double total = 0.0;
    for (double& v : w) {
      v = std::exp(v - m);
      total += v;
    }
    double u = rng.uniform() * total;
    double acc = 0.0;
    int chosen = n - 2;
    for (int c = 0; c < n - 1; ++c) {
      acc += w[c];
      if (u < acc) {
        chosen = c;
        break;
      }
    }
    return chosen >= skip ? chosen + 1 : chosen;
  };

  MinedNegatives out;
  out.tab_for_image.resize(n);
  out.img_for_tab.resize(n);
  const double* s = similarity.data();
  for (int j = 0; j < n; ++j) {
    out.tab_for_image[j] = draw(j, [&](int k) { return s[static_cast<std::size_t>(j) * n + k]; });
    out.img_for_tab[j] = draw(j, [&](int k) { return s[static_cast<std::size_t>(k) * n + j]; });
  }
  return out;
}

Tensor itm_loss(const Tensor& cls_logits_pos, const Tensor& cls_logits_neg) {
  if (cls_logits_pos.size() != cls_logits_neg.size())
    throw std::invalid_argument("itm_loss: positive and mined counts differ: " +
                                std::to_string(cls_logits_pos.size()) + " vs " +
                                std::to_string(cls_logits_neg.size()));
  int n = static_cast<int>(cls_logits_pos.size());
  Tensor pos = reshape(cls_logits_pos, {n});
  Tensor neg = reshape(cls_logits_neg, {n});
  Tensor logits = concat({pos, neg}, 0);
  std::vector<double> targets(static_cast<std::size_t>(2 * n), 0.0);
  for (int i = 0; i < n; ++i) targets[i] = 1.0;
  return mean_all(bce_with_logits(logits, Tensor({2 * n}, std::move(targets))));
}

Tensor total_loss(const Tensor& clip, const Tensor& itm) {
  if (!std::isfinite(clip.item()) || !std::isfinite(itm.item()))
    throw std::invalid_argument("total_loss: components must be finite");
  return scale(add(clip, itm), 0.5);
}

}  // namespace mmrisk
