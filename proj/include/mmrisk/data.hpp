#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmrisk/rng.hpp"
#include "mmrisk/tensor.hpp"

namespace mmrisk {

enum class FeatureKind { Continuous, Categorical };
enum class FeatureGroup { Clinical, BrainIdp, LesionIdp };

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::Continuous;
  int levels = 0;  // categorical only
  FeatureGroup group = FeatureGroup::Clinical;
};

struct TabularSchema {
  std::vector<FeatureSpec> features;

  int width() const { return static_cast<int>(features.size()); }
  int one_hot_width() const;
  int index_of(const std::string& name) const;  // -1 when absent

  // clinical features, brain IDPs and lesion IDPs of the synthetic cohort
  static TabularSchema default_synthetic();
};

bool is_missing(double v);
double missing_value();

// Planted lesion geometry, kept with generated cohorts for verification.
struct BlobInfo {
  std::array<double, 3> center;
  std::array<double, 3> radii;
  double intensity = 0.0;

  bool contains(int d, int h, int w) const;
};

struct Cohort {
  TabularSchema schema;
  std::array<int, 3> volume_dim{0, 0, 0};
  std::vector<std::string> ids;
  std::vector<std::vector<double>> tabular;  // raw rows, NaN = missing
  std::vector<int> labels;
  std::vector<Tensor> volumes;  // each [D,H,W], float32-quantized values
  std::vector<BlobInfo> blobs;  // in-memory generation metadata, not persisted

  std::size_t size() const { return ids.size(); }
};

struct SyntheticConfig {
  int subjects = 100;
  std::array<int, 3> volume_dim{24, 24, 24};
  int latent_dim = 6;
  int image_latents = 4;  // latent coordinates rendered into the volume
  double missing_rate = 0.1;
  double basis_amplitude = 1.0;
  double image_noise = 0.5;
  double tabular_noise = 0.4;
  // per-latent visibility of the tabular mixing matrix; empty = all ones
  std::vector<double> tabular_latent_scale;
  double blob_radius_min = 2.5;
  double blob_radius_max = 4.5;
  double blob_intensity_gain = 2.0;
  double blob_center_jitter = 2.0;
  std::vector<double> label_weights;  // empty = built-in default
  std::uint64_t seed = 0;
};

// Latent-factor cohort: volumes mix smooth basis fields plus a central
// lesion blob scaling with the risk coordinate; tabular rows mix the same
// latents; labels are Bernoulli(sigmoid(w . latent)).
Cohort generate_synthetic(const SyntheticConfig& cfg);

// ---- tabular preprocessing ---------------------------------------------------

struct ZScoreStats {
  std::vector<double> mean, stddev;  // per feature; categorical slots unused
};

// Stats over recorded (non-missing) values only, population standard
// deviation. Fit on the training split.
ZScoreStats fit_zscore(const std::vector<std::vector<double>>& rows, const TabularSchema& schema);
std::vector<std::vector<double>> apply_zscore(const std::vector<std::vector<double>>& rows,
                                              const TabularSchema& schema, const ZScoreStats& stats);

// Chained-equations imputer. fit() runs the iterative procedure on the
// training matrix and keeps the final per-column regressions; apply()
// fills other matrices with those frozen regressions. Categorical columns
// are mode-filled before the loop. Recorded entries are never modified.
class MiceImputer {
 public:
  int max_rounds = 10;
  double tol = 1e-6;

  void fit(const std::vector<std::vector<double>>& rows, const TabularSchema& schema);
  std::vector<std::vector<double>> apply(const std::vector<std::vector<double>>& rows) const;

 private:
  std::vector<double> col_mean_;
  std::vector<double> col_mode_;
  std::vector<std::vector<double>> coef_;  // per column: [intercept, others...]
  std::vector<FeatureKind> kinds_;
};

// One-call variant: fit and apply on the same matrix.
std::vector<std::vector<double>> mice_impute(const std::vector<std::vector<double>>& rows,
                                             const TabularSchema& schema, int max_rounds = 10,
                                             double tol = 1e-6);

// Complete rows -> [N, one_hot_width] design matrix.
Tensor one_hot(const std::vector<std::vector<double>>& rows, const TabularSchema& schema);

// Empirical training distribution per feature, drawn from for corruption.
struct Marginals {
  std::vector<std::vector<double>> values;  // per feature, observed training values
};
Marginals fit_marginals(const std::vector<std::vector<double>>& rows);
std::vector<double> corrupt_tabular(const std::vector<double>& row, const Marginals& marginals,
                                    double rate, Rng& rng);

// ---- image augmentation --------------------------------------------------------

struct AugmentationConfig {
  double image_augment_rate = 0.95;
  double corruption_rate = 0.3;
  double crop_min_fraction = 0.75;
  double max_rotation_deg = 10.0;
  double max_translation_fraction = 0.1;
  std::array<bool, 3> flip_axes{true, true, true};
};

// Random crop-and-resize, flips, small rotation and translation in one
// trilinear resampling pass; identity with probability 1 - rate.
// volume: [D,H,W], dims preserved.
Tensor augment_image(const Tensor& volume, const AugmentationConfig& cfg, Rng& rng);

// ---- splits and batches ----------------------------------------------------------

struct SplitConfig {
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  std::vector<std::string> stratify_features;  // label is always a stratum key
  int quantile_bins = 3;                       // binning for continuous strata
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<int> train, val, test;
};

// Per-stratum largest-remainder allocation; disjoint and exhaustive.
SplitIndices stratified_split(const Cohort& cohort, const SplitConfig& cfg);

// Every batch holds batch_size/2 positives and negatives; the minority
// class is resampled with replacement once exhausted, and every majority
// subject appears at least once per epoch.
std::vector<std::vector<int>> balanced_batches(const std::vector<int>& indices,
                                               const std::vector<int>& labels, int batch_size,
                                               Rng& rng);

// Shuffled fixed-size batches; a trailing partial batch is dropped.
std::vector<std::vector<int>> shuffled_batches(const std::vector<int>& indices, int batch_size,
                                               Rng& rng);

// ---- persistence -----------------------------------------------------------------

// tabular.csv + labels.csv + volumes.vol ("VOL1" container).
void save_cohort(const Cohort& cohort, const std::string& dir);
Cohort load_cohort(const std::string& dir, const TabularSchema& schema);

// Stacks cohort volumes into a [N,1,D,H,W] batch tensor.
Tensor stack_volumes(const Cohort& cohort, const std::vector<int>& indices);

}  // namespace mmrisk
