#pragma once

#include <string>
#include <vector>

#include "mmrisk/tensor.hpp"

namespace mmrisk {

struct RocPoint {
  double threshold;  // predict positive when score >= threshold
  double fpr, tpr;
};

// Points ordered from (0,0) at +inf down to (1,1); fpr/tpr non-decreasing.
struct RocCurve {
  std::vector<RocPoint> points;
};

struct RocResult {
  double auc;
  RocCurve curve;
};

// AUC as the probability a random positive outranks a random negative,
// ties counted 1/2 (Mann-Whitney). Errors when only one class is present.
RocResult roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Trapezoidal integral of a curve; equals the rank statistic.
double curve_auc(const RocCurve& curve);

// Threshold maximizing J = tpr - fpr; ties resolved to the lowest
// threshold (favoring sensitivity).
double youden_point(const RocCurve& curve);

struct EvalReport {
  double auc = 0.0;
  double threshold = 0.0;
  double balanced_accuracy = 0.0;
  double f1 = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  long long tp = 0, fp = 0, tn = 0, fn = 0;
};

EvalReport classification_metrics(const std::vector<double>& scores,
                                  const std::vector<int>& labels, double threshold);

// snake_case JSON with the six metrics and the confusion counts
std::string eval_report_json(const EvalReport& report);

struct AlignmentReport {
  double matched_mean_cos = 0.0;
  double unmatched_mean_cos = 0.0;
  double gap = 0.0;
  double modality_probe_accuracy = 0.0;  // 5-fold linear probe image-vs-tabular
};

// Cross-modal embedding diagnostics over paired projection matrices [N,P].
AlignmentReport alignment_report(const Tensor& z_img, const Tensor& z_tab);

std::string alignment_report_json(const AlignmentReport& report);

}  // namespace mmrisk
