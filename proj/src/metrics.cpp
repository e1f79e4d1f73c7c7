#include "mmrisk/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace mmrisk {

namespace {

void check_binary(const std::vector<double>& scores, const std::vector<int>& labels,
                  const char* what) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument(std::string(what) + ": scores and labels must align and be non-empty");
  bool has_pos = false, has_neg = false;
  for (int l : labels) {
    if (l == 1) has_pos = true;
    else if (l == 0) has_neg = true;
    else throw std::invalid_argument(std::string(what) + ": labels must be 0 or 1");
  }
  if (!has_pos || !has_neg)
    throw std::invalid_argument(std::string(what) + ": both classes must be present");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

RocResult roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_binary(scores, labels, "roc_auc");
  const std::size_t n = scores.size();

  // Mann-Whitney via midranks
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos = 0, neg = 0, rank_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (labels[k] == 1) {
      pos += 1;
      rank_sum += rank[k];
    } else {
      neg += 1;
    }
  }
  double auc = (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);

  // curve over unique thresholds, descending; predict positive at >= thr
  RocCurve curve;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  double tp = 0, fp = 0;
  for (std::size_t k = n; k-- > 0;) {  // descending scores
    std::size_t idx = order[k];
    double thr = scores[idx];
    // absorb the whole tie group at this threshold
    while (true) {
      if (labels[order[k]] == 1) tp += 1;
      else fp += 1;
      if (k == 0 || scores[order[k - 1]] != thr) break;
      --k;
    }
    curve.points.push_back({thr, fp / neg, tp / pos});
  }
  return RocResult{auc, std::move(curve)};
}

double curve_auc(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const RocPoint& a = curve.points[i - 1];
    const RocPoint& b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
  }
  return area;
}

double youden_point(const RocCurve& curve) {
  if (curve.points.empty()) throw std::invalid_argument("youden_point: empty curve");
  double best_j = -std::numeric_limits<double>::infinity();
  double best_thr = 0.0;
  for (const RocPoint& p : curve.points) {
    double j = p.tpr - p.fpr;
    if (j > best_j || (j == best_j && p.threshold < best_thr)) {
      best_j = j;
      best_thr = p.threshold;
    }
  }
  return best_thr;
}

EvalReport classification_metrics(const std::vector<double>& scores,
                                  const std::vector<int>& labels, double threshold) {
  check_binary(scores, labels, "classification_metrics");
  EvalReport r;
  r.threshold = threshold;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool pred = scores[i] >= threshold;
    if (labels[i] == 1) {
      if (pred) r.tp += 1;
      else r.fn += 1;
    } else {
      if (pred) r.fp += 1;
      else r.tn += 1;
    }
  }
  r.sensitivity = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
  r.specificity = static_cast<double>(r.tn) / static_cast<double>(r.tn + r.fp);
  r.balanced_accuracy = (r.sensitivity + r.specificity) / 2.0;
  double precision = r.tp + r.fp > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp) : 0.0;
  double recall = r.sensitivity;
  r.f1 = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  return r;
}

std::string eval_report_json(const EvalReport& r) {
  std::string s = "{\n";
  s += "  \"auc\": " + format_double(r.auc) + ",\n";
  s += "  \"threshold\": " + format_double(r.threshold) + ",\n";
  s += "  \"balanced_accuracy\": " + format_double(r.balanced_accuracy) + ",\n";
  s += "  \"f1\": " + format_double(r.f1) + ",\n";
  s += "  \"sensitivity\": " + format_double(r.sensitivity) + ",\n";
  s += "  \"specificity\": " + format_double(r.specificity) + ",\n";
  s += "  \"tp\": " + std::to_string(r.tp) + ",\n";
  s += "  \"fp\": " + std::to_string(r.fp) + ",\n";
  s += "  \"tn\": " + std::to_string(r.tn) + ",\n";
  s += "  \"fn\": " + std::to_string(r.fn) + "\n";
  s += "}\n";
  return s;
}

namespace {

// Least-squares linear classifier on +/-1 targets; returns held-out accuracy.
double probe_fold_accuracy(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                           const std::vector<std::size_t>& train, const std::vector<std::size_t>& test) {
  const std::size_t p = x[0].size() + 1;  // bias
  std::vector<std::vector<double>> ata(p, std::vector<double>(p, 0.0));
  std::vector<double> atb(p, 0.0);
  for (std::size_t i : train) {
    std::vector<double> row(p);
    row[0] = 1.0;
    for (std::size_t k = 0; k + 1 < p; ++k) row[k + 1] = x[i][k];
    double target = y[i] == 1 ? 1.0 : -1.0;
    for (std::size_t a = 0; a < p; ++a) {
      atb[a] += row[a] * target;
      for (std::size_t b = a; b < p; ++b) ata[a][b] += row[a] * row[b];
    }
  }
  for (std::size_t a = 0; a < p; ++a) {
    for (std::size_t b = 0; b < a; ++b) ata[a][b] = ata[b][a];
    ata[a][a] += 1e-8;
  }
  // gaussian elimination
  std::vector<double> w(p);
  {
    auto A = ata;
    auto b = atb;
    const int np = static_cast<int>(p);
    for (int col = 0; col < np; ++col) {
      int pivot = col;
      for (int r2 = col + 1; r2 < np; ++r2)
        if (std::abs(A[r2][col]) > std::abs(A[pivot][col])) pivot = r2;
      std::swap(A[col], A[pivot]);
      std::swap(b[col], b[pivot]);
      double diag = A[col][col];
      if (std::abs(diag) < 1e-300) diag = 1e-300;
      for (int r2 = col + 1; r2 < np; ++r2) {
        double factor = A[r2][col] / diag;
        if (factor == 0.0) continue;
        for (int cc = col; cc < np; ++cc) A[r2][cc] -= factor * A[col][cc];
        b[r2] -= factor * b[col];
      }
    }
    for (int r2 = np - 1; r2 >= 0; --r2) {
      double acc = b[r2];
      for (int cc = r2 + 1; cc < np; ++cc) acc -= A[r2][cc] * w[cc];
      double diag = A[r2][r2];
      if (std::abs(diag) < 1e-300) diag = 1e-300;
      w[r2] = acc / diag;
    }
  }
  std::size_t correct = 0;
  for (std::size_t i : test) {
    double score = w[0];
    for (std::size_t k = 0; k + 1 < p; ++k) score += w[k + 1] * x[i][k];
    int pred = score > 0.0 ? 1 : 0;
    if (pred == y[i]) ++correct;
  }
  return test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace

AlignmentReport alignment_report(const Tensor& z_img, const Tensor& z_tab) {
  if (z_img.rank() != 2 || z_tab.rank() != 2 || z_img.shape() != z_tab.shape())
    throw std::invalid_argument("alignment_report: expected matching [N,P] matrices");
  const int n = z_img.dim(0), p = z_img.dim(1);
  if (n < 2) throw std::invalid_argument("alignment_report: needs at least 2 subjects");

  auto cos_at = [&](int i, int j) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int k = 0; k < p; ++k) {
      double a = z_img[static_cast<std::size_t>(i) * p + k];
      double b = z_tab[static_cast<std::size_t>(j) * p + k];
      dot += a * b;
      na += a * a;
      nb += b * b;
    }
    double denom = std::sqrt(na) * std::sqrt(nb);
    return denom > 0 ? dot / denom : 0.0;
  };

  AlignmentReport r;
  double matched = 0.0, unmatched = 0.0;
  for (int i = 0; i < n; ++i) {
    matched += cos_at(i, i);
    for (int j = 0; j < n; ++j)
      if (j != i) unmatched += cos_at(i, j);
  }
  r.matched_mean_cos = matched / n;
  r.unmatched_mean_cos = unmatched / (static_cast<double>(n) * (n - 1));
  r.gap = r.matched_mean_cos - r.unmatched_mean_cos;

  // modality probe: both embedding sets stacked, subject-level 5-fold
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  x.reserve(2 * static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    x.emplace_back(z_img.data() + static_cast<std::size_t>(i) * p,
                   z_img.data() + static_cast<std::size_t>(i + 1) * p);
    y.push_back(0);
    x.emplace_back(z_tab.data() + static_cast<std::size_t>(i) * p,
                   z_tab.data() + static_cast<std::size_t>(i + 1) * p);
    y.push_back(1);
  }
  const int folds = 5;
  double acc = 0.0;
  int used = 0;
  for (int f = 0; f < folds; ++f) {
    std::vector<std::size_t> train, test;
    for (int i = 0; i < n; ++i) {
      if (i % folds == f) {
        test.push_back(2 * i);
        test.push_back(2 * i + 1);
      } else {
        train.push_back(2 * i);
        train.push_back(2 * i + 1);
      }
    }
    if (train.empty() || test.empty()) continue;
    acc += probe_fold_accuracy(x, y, train, test);
    ++used;
  }
  r.modality_probe_accuracy = used > 0 ? acc / used : 0.0;
  return r;
}

std::string alignment_report_json(const AlignmentReport& r) {
  std::string s = "{\n";
  s += "  \"matched_mean_cos\": " + format_double(r.matched_mean_cos) + ",\n";
  s += "  \"unmatched_mean_cos\": " + format_double(r.unmatched_mean_cos) + ",\n";
  s += "  \"gap\": " + format_double(r.gap) + ",\n";
  s += "  \"modality_probe_accuracy\": " + format_double(r.modality_probe_accuracy) + "\n";
  s += "}\n";
  return s;
}

}  // namespace mmrisk
