// Independent reference implementations used only by tests. Everything here
// is written directly from the defining formulas and stays decoupled from
// the production code paths it checks.
#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "mmrisk/tensor.hpp"

namespace oracle {

// Direct six-nested-loop 3D convolution.
inline mmrisk::Tensor conv3d_reference(const mmrisk::Tensor& input, const mmrisk::Tensor& kernel,
                                       const std::array<int, 3>& stride,
                                       const std::array<int, 3>& pad) {
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  int N = is[0], C = is[1], D = is[2], H = is[3], W = is[4];
  int F = ks[0], kd = ks[2], kh = ks[3], kw = ks[4];
  int OD = (D + 2 * pad[0] - kd) / stride[0] + 1;
  int OH = (H + 2 * pad[1] - kh) / stride[1] + 1;
  int OW = (W + 2 * pad[2] - kw) / stride[2] + 1;
  std::vector<double> out(static_cast<std::size_t>(N) * F * OD * OH * OW, 0.0);
  auto in_at = [&](int n, int c, int d, int h, int w) -> double {
    if (d < 0 || d >= D || h < 0 || h >= H || w < 0 || w >= W) return 0.0;
    return input[(((static_cast<std::size_t>(n) * C + c) * D + d) * H + h) * W + w];
  };
  std::size_t oi = 0;
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int od = 0; od < OD; ++od)
        for (int oh = 0; oh < OH; ++oh)
          for (int ow = 0; ow < OW; ++ow, ++oi) {
            double acc = 0.0;
            for (int c = 0; c < C; ++c)
              for (int zd = 0; zd < kd; ++zd)
                for (int zh = 0; zh < kh; ++zh)
                  for (int zw = 0; zw < kw; ++zw)
                    acc += in_at(n, c, od * stride[0] - pad[0] + zd, oh * stride[1] - pad[1] + zh,
                                 ow * stride[2] - pad[2] + zw) *
                           kernel[(((static_cast<std::size_t>(f) * C + c) * kd + zd) * kh + zh) *
                                      kw + zw];
            out[oi] = acc;
          }
  return mmrisk::Tensor({N, F, OD, OH, OW}, std::move(out));
}

// AUC by brute-force pair counting, ties worth one half.
inline double auc_pair_counting(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  long long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// Youden threshold by scanning every candidate threshold exhaustively.
inline double youden_exhaustive(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> cands = scores;
  cands.push_back(std::numeric_limits<double>::infinity());
  double best_j = -2.0, best_thr = 0.0;
  for (double thr : cands) {
    long long tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      bool pred = scores[i] >= thr;
      if (labels[i] == 1) (pred ? tp : fn) += 1;
      else (pred ? fp : tn) += 1;
    }
    double j = static_cast<double>(tp) / (tp + fn) + static_cast<double>(tn) / (tn + fp) - 1.0;
    if (j > best_j || (j == best_j && thr < best_thr)) {
      best_j = j;
      best_thr = thr;
    }
  }
  return best_thr;
}

}  // namespace oracle
