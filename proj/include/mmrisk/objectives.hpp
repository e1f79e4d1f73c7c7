#pragma once

#include <utility>
#include <vector>

#include "mmrisk/rng.hpp"
#include "mmrisk/tensor.hpp"

namespace mmrisk {

// Denominator of the per-anchor contrastive term: Standard keeps the
// matched pair in the denominator (bounded loss); Literal sums over
// non-matching candidates only, which is unbounded below.
enum class ClipDenominator { Standard, Literal };
enum class LossReduction { Mean, Sum };

struct ClipConfig {
  double temperature = 0.1;
  double lambda = 0.5;  // weight of the image-anchored direction
  ClipDenominator denominator = ClipDenominator::Standard;
  LossReduction reduction = LossReduction::Mean;
};

struct ClipResult {
  Tensor loss;        // scalar, on the inputs' tape
  Tensor similarity;  // detached N x N cosine matrix, S[j,k] = cos(z_img_j, z_tab_k)
};

// Bidirectional temperature-scaled contrastive loss between matched
// image/tabular projections. Rows must be unit-norm; N >= 2.
ClipResult clip_loss(const Tensor& z_img, const Tensor& z_tab, const ClipConfig& cfg);

// InfoNCE over 2N concatenated views with in-batch negatives; the positive
// of anchor j is its other view, self-similarity is excluded.
Tensor ntxent_loss(const Tensor& z_view1, const Tensor& z_view2, double temperature);

struct MinedNegatives {
  std::vector<int> tab_for_image;  // per image anchor j: unmatched tabular index
  std::vector<int> img_for_tab;    // per tabular anchor j: unmatched image index
};

// Samples one non-matching partner per anchor with probability proportional
// to exp(S/temperature) over the off-diagonal candidates.
MinedNegatives mine_hard_negatives(const Tensor& similarity, double temperature, Rng& rng);

// Mean binary cross-entropy over matched (target 1) and mined (target 0)
// pairs; counts must agree.
Tensor itm_loss(const Tensor& cls_logits_pos, const Tensor& cls_logits_neg);

// (L_clip + L_itm) / 2
Tensor total_loss(const Tensor& clip, const Tensor& itm);

}  // namespace mmrisk
