#include "mmrisk/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mmrisk {

namespace fs = std::filesystem;

// ---- schema -----------------------------------------------------------------

int TabularSchema::one_hot_width() const {
  int w = 0;
  for (const auto& f : features) w += f.kind == FeatureKind::Continuous ? 1 : f.levels;
  return w;
}

int TabularSchema::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < features.size(); ++i)
    if (features[i].name == name) return static_cast<int>(i);
  return -1;
}

TabularSchema TabularSchema::default_synthetic() {
  using K = FeatureKind;
  using G = FeatureGroup;
  TabularSchema s;
  s.features = {
      {"age", K::Continuous, 0, G::Clinical},
      {"sex", K::Categorical, 2, G::Clinical},
      {"smoking", K::Categorical, 3, G::Clinical},
      {"bmi", K::Continuous, 0, G::Clinical},
      {"systolic_bp", K::Continuous, 0, G::Clinical},
      {"cholesterol", K::Continuous, 0, G::Clinical},
      {"diabetes", K::Categorical, 2, G::Clinical},
      {"antihypertensive", K::Categorical, 2, G::Clinical},
      {"gm_volume", K::Continuous, 0, G::BrainIdp},
      {"wm_volume", K::Continuous, 0, G::BrainIdp},
      {"csf_volume", K::Continuous, 0, G::BrainIdp},
      {"wmh_volume", K::Continuous, 0, G::BrainIdp},
      {"lesion_volume", K::Continuous, 0, G::LesionIdp},
      {"lesion_area", K::Continuous, 0, G::LesionIdp},
      {"lesion_elongation", K::Continuous, 0, G::LesionIdp},
      {"lesion_sphericity", K::Continuous, 0, G::LesionIdp},
  };
  return s;
}

bool is_missing(double v) { return std::isnan(v); }
double missing_value() { return std::numeric_limits<double>::quiet_NaN(); }

bool BlobInfo::contains(int d, int h, int w) const {
  double rd = (d - center[0]) / radii[0];
  double rh = (h - center[1]) / radii[1];
  double rw = (w - center[2]) / radii[2];
  return rd * rd + rh * rh + rw * rw <= 1.0;
}

// ---- synthetic generation -----------------------------------------------------

namespace {

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.70710678118654752440); }

// Even, centered cosine product; flips about the volume center are exact
// symmetries so augmentation does not destroy the latent information.
double basis_field(int l, double zd, double zh, double zw) {
  static const int freq[12][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0},
                                  {0, 1, 1}, {1, 0, 1}, {2, 0, 0}, {0, 2, 0},
                                  {0, 0, 2}, {1, 1, 1}, {2, 1, 0}, {0, 2, 1}};
  const int* f = freq[l % 12];
  constexpr double pi = 3.14159265358979323846;
  return std::cos(pi * f[0] * zd) * std::cos(pi * f[1] * zh) * std::cos(pi * f[2] * zw);
}

}  // namespace

Cohort generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.subjects < 1) throw std::invalid_argument("generate_synthetic: subjects must be >= 1");
  for (int d : cfg.volume_dim)
    if (d < 8) throw std::invalid_argument("generate_synthetic: volume dims must be >= 8");
  if (cfg.missing_rate < 0.0 || cfg.missing_rate >= 1.0)
    throw std::invalid_argument("generate_synthetic: missing_rate must be in [0,1)");
  if (cfg.latent_dim < 1 || cfg.image_latents < 1 || cfg.image_latents > cfg.latent_dim)
    throw std::invalid_argument("generate_synthetic: invalid latent configuration");

  const int L = cfg.latent_dim;
  std::vector<double> w = cfg.label_weights;
  if (w.empty()) {
    w.assign(L, 0.9);
    w[0] = 1.2;
    if (L > 1) w[1] = 1.0;
  }
  if (static_cast<int>(w.size()) != L)
    throw std::invalid_argument("generate_synthetic: label_weights length != latent_dim");
  std::vector<double> lat_scale = cfg.tabular_latent_scale;
  if (lat_scale.empty()) lat_scale.assign(L, 1.0);
  if (static_cast<int>(lat_scale.size()) != L)
    throw std::invalid_argument("generate_synthetic: tabular_latent_scale length != latent_dim");

  Cohort c;
  c.schema = TabularSchema::default_synthetic();
  c.volume_dim = cfg.volume_dim;
  const int K = c.schema.width();
  const int D = cfg.volume_dim[0], H = cfg.volume_dim[1], W = cfg.volume_dim[2];

  // independent streams so a change in one draw category cannot shift another
  Rng rng_mix(mix_seed(cfg.seed, 1));
  Rng rng_latent(mix_seed(cfg.seed, 2));
  Rng rng_image(mix_seed(cfg.seed, 3));
  Rng rng_blob(mix_seed(cfg.seed, 4));
  Rng rng_tab(mix_seed(cfg.seed, 5));
  Rng rng_label(mix_seed(cfg.seed, 6));
  Rng rng_missing(mix_seed(cfg.seed, 7));

  // fixed mixing matrix: feature rows over latent coordinates
  std::vector<std::vector<double>> A(K, std::vector<double>(L));
  for (int f = 0; f < K; ++f)
    for (int l = 0; l < L; ++l) A[f][l] = rng_mix.normal() * lat_scale[l];

  const double cd = (D - 1) / 2.0, ch = (H - 1) / 2.0, cw = (W - 1) / 2.0;
  const int sex_idx = c.schema.index_of("sex");

  // the basis fields are shared by every subject; render them once
  const std::size_t n_vox = static_cast<std::size_t>(D) * H * W;
  std::vector<std::vector<double>> basis(cfg.image_latents, std::vector<double>(n_vox));
  {
    std::size_t vi = 0;
    for (int d = 0; d < D; ++d) {
      double zd = (d - cd) / (cd > 0 ? cd : 1.0);
      for (int h = 0; h < H; ++h) {
        double zh = (h - ch) / (ch > 0 ? ch : 1.0);
        for (int ww = 0; ww < W; ++ww, ++vi) {
          double zw = (ww - cw) / (cw > 0 ? cw : 1.0);
          for (int l = 0; l < cfg.image_latents; ++l)
            basis[l][vi] = basis_field(l, zd, zh, zw);
        }
      }
    }
  }

  for (int s = 0; s < cfg.subjects; ++s) {
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "subj-%06d", s);
    c.ids.emplace_back(idbuf);

    std::vector<double> zeta(L);
    for (double& z : zeta) z = rng_latent.normal();

    // volume: latent basis mix + noise + lesion blob near the center
    std::vector<double> vox(n_vox);
    for (std::size_t vi = 0; vi < n_vox; ++vi) {
      double v = 0.0;
      for (int l = 0; l < cfg.image_latents; ++l) v += zeta[l] * basis[l][vi];
      vox[vi] = cfg.basis_amplitude * v + cfg.image_noise * rng_image.normal();
    }
    BlobInfo blob;
    blob.center = {cd + cfg.blob_center_jitter * rng_blob.uniform(-1.0, 1.0),
                   ch + cfg.blob_center_jitter * rng_blob.uniform(-1.0, 1.0),
                   cw + cfg.blob_center_jitter * rng_blob.uniform(-1.0, 1.0)};
    blob.radii = {rng_blob.uniform(cfg.blob_radius_min, cfg.blob_radius_max),
                  rng_blob.uniform(cfg.blob_radius_min, cfg.blob_radius_max),
                  rng_blob.uniform(cfg.blob_radius_min, cfg.blob_radius_max)};
    blob.intensity = cfg.blob_intensity_gain * std::max(zeta[0], 0.0);
    std::size_t vi = 0;
    for (int d = 0; d < D; ++d)
      for (int h = 0; h < H; ++h)
        for (int ww = 0; ww < W; ++ww, ++vi) {
          double rd = (d - blob.center[0]) / blob.radii[0];
          double rh = (h - blob.center[1]) / blob.radii[1];
          double rw = (ww - blob.center[2]) / blob.radii[2];
          double rho2 = rd * rd + rh * rh + rw * rw;
          if (rho2 < 1.0) vox[vi] += blob.intensity * (1.0 - rho2);
        }
    // quantize to float32 so in-memory and persisted cohorts agree exactly
    for (double& v : vox) v = static_cast<double>(static_cast<float>(v));
    c.volumes.emplace_back(Shape{D, H, W}, std::move(vox));
    c.blobs.push_back(blob);

    // tabular row: mixed latents with per-feature affine placement
    std::vector<double> row(K);
    for (int f = 0; f < K; ++f) {
      const FeatureSpec& spec = c.schema.features[f];
      double g = 0.0, var = 0.0;
      for (int l = 0; l < L; ++l) {
        g += A[f][l] * zeta[l];
        var += A[f][l] * A[f][l];
      }
      double noise = cfg.tabular_noise * rng_tab.normal();
      if (spec.kind == FeatureKind::Continuous) {
        row[f] = 5.0 * f + (1.0 + 0.25 * f) * (g + noise);
      } else if (f == sex_idx) {
        row[f] = rng_tab.bernoulli(0.5) ? 1.0 : 0.0;  // pure demographic, no signal
      } else {
        double sd = std::sqrt(var + cfg.tabular_noise * cfg.tabular_noise);
        double u = std_normal_cdf((g + noise) / (sd > 0 ? sd : 1.0));
        row[f] = std::min<double>(spec.levels - 1, std::floor(u * spec.levels));
      }
    }
    c.tabular.push_back(std::move(row));

    double logit = 0.0;
    for (int l = 0; l < L; ++l) logit += w[l] * zeta[l];
    double p = 1.0 / (1.0 + std::exp(-logit));
    c.labels.push_back(rng_label.bernoulli(p) ? 1 : 0);
  }

  if (cfg.missing_rate > 0.0) {
    for (auto& row : c.tabular)
      for (double& v : row)
        if (rng_missing.bernoulli(cfg.missing_rate)) v = missing_value();
  }
  return c;
}

// ---- z-score ------------------------------------------------------------------

ZScoreStats fit_zscore(const std::vector<std::vector<double>>& rows, const TabularSchema& schema) {
  const int K = schema.width();
  ZScoreStats st;
  st.mean.assign(K, 0.0);
  st.stddev.assign(K, 0.0);
  for (int f = 0; f < K; ++f) {
    if (schema.features[f].kind != FeatureKind::Continuous) continue;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (!is_missing(r[f])) {
        sum += r[f];
        ++n;
      }
    if (n == 0)
      throw std::invalid_argument("fit_zscore: feature '" + schema.features[f].name +
                                  "' has no recorded values");
    double mu = sum / static_cast<double>(n);
    double sq = 0.0;
    for (const auto& r : rows)
      if (!is_missing(r[f])) sq += (r[f] - mu) * (r[f] - mu);
    st.mean[f] = mu;
    st.stddev[f] = std::sqrt(sq / static_cast<double>(n));  // population
  }
  return st;
}

std::vector<std::vector<double>> apply_zscore(const std::vector<std::vector<double>>& rows,
                                              const TabularSchema& schema,
                                              const ZScoreStats& stats) {
  if (stats.mean.size() != static_cast<std::size_t>(schema.width()))
    throw std::invalid_argument("apply_zscore: stats width mismatch");
  std::vector<std::vector<double>> out = rows;
  for (auto& r : out) {
    if (r.size() != stats.mean.size())
      throw std::invalid_argument("apply_zscore: row width mismatch");
    for (std::size_t f = 0; f < r.size(); ++f) {
      if (schema.features[f].kind != FeatureKind::Continuous || is_missing(r[f])) continue;
      // degenerate features map to zero
      r[f] = stats.stddev[f] < 1e-12 ? 0.0 : (r[f] - stats.mean[f]) / stats.stddev[f];
    }
  }
  return out;
}

// ---- MICE ------------------------------------------------------------------------

namespace {

// Gaussian elimination with partial pivoting; A is small and dense.
std::vector<double> solve_linear(std::vector<std::vector<double>> A, std::vector<double> b) {
  const int n = static_cast<int>(b.size());
  for (int col = 0; col < n; ++col) {
    int pivot = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(A[r][col]) > std::abs(A[pivot][col])) pivot = r;
    std::swap(A[col], A[pivot]);
    std::swap(b[col], b[pivot]);
    double diag = A[col][col];
    if (std::abs(diag) < 1e-300) diag = diag >= 0 ? 1e-300 : -1e-300;
    for (int r = col + 1; r < n; ++r) {
      double factor = A[r][col] / diag;
      if (factor == 0.0) continue;
      for (int cc = col; cc < n; ++cc) A[r][cc] -= factor * A[col][cc];
      b[r] -= factor * b[col];
    }
  }
  std::vector<double> x(n);
  for (int r = n - 1; r >= 0; --r) {
    double acc = b[r];
    for (int cc = r + 1; cc < n; ++cc) acc -= A[r][cc] * x[cc];
    double diag = A[r][r];
    if (std::abs(diag) < 1e-300) diag = diag >= 0 ? 1e-300 : -1e-300;
    x[r] = acc / diag;
  }
  return x;
}

// Least squares of y on X (with intercept prepended), tiny ridge for
// degenerate designs.
std::vector<double> least_squares(const std::vector<std::vector<double>>& X,
                                  const std::vector<double>& y) {
  const int p = static_cast<int>(X.empty() ? 0 : X[0].size());
  std::vector<std::vector<double>> ata(p, std::vector<double>(p, 0.0));
  std::vector<double> atb(p, 0.0);
  for (std::size_t i = 0; i < X.size(); ++i) {
    for (int a = 0; a < p; ++a) {
      atb[a] += X[i][a] * y[i];
      for (int b2 = a; b2 < p; ++b2) ata[a][b2] += X[i][a] * X[i][b2];
    }
  }
  for (int a = 0; a < p; ++a) {
    for (int b2 = 0; b2 < a; ++b2) ata[a][b2] = ata[b2][a];
    ata[a][a] += 1e-9;
  }
  return solve_linear(std::move(ata), std::move(atb));
}

}  // namespace

void MiceImputer::fit(const std::vector<std::vector<double>>& rows, const TabularSchema& schema) {
  const int K = schema.width();
  kinds_.resize(K);
  for (int f = 0; f < K; ++f) kinds_[f] = schema.features[f].kind;
  col_mean_.assign(K, 0.0);
  col_mode_.assign(K, 0.0);
  coef_.assign(K, {});

  for (int f = 0; f < K; ++f) {
    std::size_t rec = 0;
    for (const auto& r : rows)
      if (!is_missing(r[f])) ++rec;
    if (rec == 0)
      throw std::invalid_argument("mice: column '" + schema.features[f].name +
                                  "' has all values missing");
    if (rec < 2)
      throw std::invalid_argument("mice: column '" + schema.features[f].name +
                                  "' needs at least 2 recorded values");
    if (kinds_[f] == FeatureKind::Continuous) {
      double sum = 0.0;
      for (const auto& r : rows)
        if (!is_missing(r[f])) sum += r[f];
      col_mean_[f] = sum / static_cast<double>(rec);
    } else {
      std::map<double, int> counts;
      for (const auto& r : rows)
        if (!is_missing(r[f])) counts[r[f]]++;
      int best = -1;
      double mode = 0.0;
      for (const auto& [val, cnt] : counts)
        if (cnt > best) {
          best = cnt;
          mode = val;
        }
      col_mode_[f] = mode;
    }
  }

  // working copy: categorical mode fill, continuous mean init
  std::vector<std::vector<double>> work = rows;
  std::vector<std::vector<char>> missing(rows.size(), std::vector<char>(K, 0));
  for (std::size_t i = 0; i < work.size(); ++i)
    for (int f = 0; f < K; ++f)
      if (is_missing(work[i][f])) {
        missing[i][f] = 1;
        work[i][f] = kinds_[f] == FeatureKind::Continuous ? col_mean_[f] : col_mode_[f];
      }

  for (int round = 0; round < max_rounds; ++round) {
    double max_change = 0.0;
    for (int f = 0; f < K; ++f) {
      if (kinds_[f] != FeatureKind::Continuous) continue;
      // regress column f on all others over rows where f is recorded
      std::vector<std::vector<double>> X;
      std::vector<double> y;
      for (std::size_t i = 0; i < work.size(); ++i) {
        if (missing[i][f]) continue;
        std::vector<double> xr;
        xr.reserve(K);
        xr.push_back(1.0);
        for (int k = 0; k < K; ++k)
          if (k != f) xr.push_back(work[i][k]);
        X.push_back(std::move(xr));
        y.push_back(work[i][f]);
      }
      coef_[f] = least_squares(X, y);
      for (std::size_t i = 0; i < work.size(); ++i) {
        if (!missing[i][f]) continue;
        double pred = coef_[f][0];
        int pos = 1;
        for (int k = 0; k < K; ++k)
          if (k != f) pred += coef_[f][pos++] * work[i][k];
        max_change = std::max(max_change, std::abs(pred - work[i][f]));
        work[i][f] = pred;
      }
    }
    if (max_change < tol) break;
  }
}

std::vector<std::vector<double>> MiceImputer::apply(
    const std::vector<std::vector<double>>& rows) const {
  const int K = static_cast<int>(kinds_.size());
  if (K == 0) throw std::logic_error("mice: apply() before fit()");
  std::vector<std::vector<double>> work = rows;
  std::vector<std::vector<char>> missing(rows.size(), std::vector<char>(K, 0));
  bool any_cont_missing = false;
  for (std::size_t i = 0; i < work.size(); ++i) {
    if (static_cast<int>(work[i].size()) != K)
      throw std::invalid_argument("mice: row width mismatch");
    for (int f = 0; f < K; ++f)
      if (is_missing(work[i][f])) {
        missing[i][f] = 1;
        if (kinds_[f] == FeatureKind::Continuous) {
          work[i][f] = col_mean_[f];
          any_cont_missing = true;
        } else {
          work[i][f] = col_mode_[f];
        }
      }
  }
  if (!any_cont_missing) return work;
  for (int round = 0; round < max_rounds; ++round) {
    double max_change = 0.0;
    for (int f = 0; f < K; ++f) {
      if (kinds_[f] != FeatureKind::Continuous || coef_[f].empty()) continue;
      for (std::size_t i = 0; i < work.size(); ++i) {
        if (!missing[i][f]) continue;
        double pred = coef_[f][0];
        int pos = 1;
        for (int k = 0; k < K; ++k)
          if (k != f) pred += coef_[f][pos++] * work[i][k];
        max_change = std::max(max_change, std::abs(pred - work[i][f]));
        work[i][f] = pred;
      }
    }
    if (max_change < tol) break;
  }
  return work;
}

std::vector<std::vector<double>> mice_impute(const std::vector<std::vector<double>>& rows,
                                             const TabularSchema& schema, int max_rounds,
                                             double tol) {
  MiceImputer imp;
  imp.max_rounds = max_rounds;
  imp.tol = tol;
  imp.fit(rows, schema);
  return imp.apply(rows);
}

// ---- one-hot ------------------------------------------------------------------------

Tensor one_hot(const std::vector<std::vector<double>>& rows, const TabularSchema& schema) {
  const int K = schema.width();
  const int width = schema.one_hot_width();
  const int n = static_cast<int>(rows.size());
  std::vector<double> out(static_cast<std::size_t>(n) * width, 0.0);
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(rows[i].size()) != K)
      throw std::invalid_argument("one_hot: row width mismatch");
    int col = 0;
    for (int f = 0; f < K; ++f) {
      const FeatureSpec& spec = schema.features[f];
      double v = rows[i][f];
      if (is_missing(v))
        throw std::invalid_argument("one_hot: missing value in feature '" + spec.name +
                                    "' (impute first)");
      if (spec.kind == FeatureKind::Continuous) {
        out[static_cast<std::size_t>(i) * width + col] = v;
        col += 1;
      } else {
        int level = static_cast<int>(std::llround(v));
        if (level < 0 || level >= spec.levels)
          throw std::invalid_argument("one_hot: level " + std::to_string(v) +
                                      " out of range for feature '" + spec.name + "'");
        out[static_cast<std::size_t>(i) * width + col + level] = 1.0;
        col += spec.levels;
      }
    }
  }
  return Tensor({n, width}, std::move(out));
}

// ---- marginals / corruption -------------------------------------------------------

Marginals fit_marginals(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw std::invalid_argument("fit_marginals: empty matrix");
  Marginals m;
  m.values.resize(rows[0].size());
  for (const auto& r : rows)
    for (std::size_t f = 0; f < r.size(); ++f)
      if (!is_missing(r[f])) m.values[f].push_back(r[f]);
  for (std::size_t f = 0; f < m.values.size(); ++f)
    if (m.values[f].empty())
      throw std::invalid_argument("fit_marginals: feature " + std::to_string(f) +
                                  " has no recorded values");
  return m;
}

std::vector<double> corrupt_tabular(const std::vector<double>& row, const Marginals& marginals,
                                    double rate, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("corrupt_tabular: rate must be in [0,1]");
  if (row.size() != marginals.values.size())
    throw std::invalid_argument("corrupt_tabular: row width != marginals width");
  std::vector<double> out = row;
  for (std::size_t f = 0; f < out.size(); ++f) {
    bool corrupt = rng.bernoulli(rate);
    if (!corrupt) continue;
    const auto& pool = marginals.values[f];
    out[f] = pool[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
  }
  return out;
}

// ---- augmentation -----------------------------------------------------------------

namespace {

double trilinear_at(const double* v, int D, int H, int W, double d, double h, double w) {
  int d0 = static_cast<int>(std::floor(d));
  int h0 = static_cast<int>(std::floor(h));
  int w0 = static_cast<int>(std::floor(w));
  double fd = d - d0, fh = h - h0, fw = w - w0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        int di = d0 + dz, hi = h0 + dy, wi = w0 + dx;
        if (di < 0 || di >= D || hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
        double weight = (dz ? fd : 1.0 - fd) * (dy ? fh : 1.0 - fh) * (dx ? fw : 1.0 - fw);
        if (weight == 0.0) continue;
        acc += weight * v[(static_cast<std::size_t>(di) * H + hi) * W + wi];
      }
  return acc;
}

}  // namespace

Tensor augment_image(const Tensor& volume, const AugmentationConfig& cfg, Rng& rng) {
  if (volume.rank() != 3)
    throw std::invalid_argument("augment_image expects [D,H,W], got " + shape_str(volume.shape()));
  if (!rng.bernoulli(cfg.image_augment_rate)) return volume;

  const int D = volume.dim(0), H = volume.dim(1), W = volume.dim(2);
  const double dims[3] = {static_cast<double>(D), static_cast<double>(H), static_cast<double>(W)};
  const double c[3] = {(D - 1) / 2.0, (H - 1) / 2.0, (W - 1) / 2.0};

  // fixed draw order keeps the stream reproducible
  double s = rng.uniform(cfg.crop_min_fraction, 1.0);
  double crop_off[3];
  for (int a = 0; a < 3; ++a) crop_off[a] = rng.uniform(-1.0, 1.0) * (1.0 - s) * c[a];
  int rot_axis = rng.uniform_int(3);
  constexpr double pi = 3.14159265358979323846;
  double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * pi / 180.0;
  double trans[3];
  for (int a = 0; a < 3; ++a)
    trans[a] = rng.uniform(-1.0, 1.0) * cfg.max_translation_fraction * dims[a];
  double flip[3] = {1.0, 1.0, 1.0};
  for (int a = 0; a < 3; ++a)
    if (cfg.flip_axes[a] && rng.bernoulli(0.5)) flip[a] = -1.0;

  double R[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  {
    int u = (rot_axis + 1) % 3, v = (rot_axis + 2) % 3;
    double cs = std::cos(angle), sn = std::sin(angle);
    R[u][u] = cs;
    R[u][v] = -sn;
    R[v][u] = sn;
    R[v][v] = cs;
  }

  std::vector<double> out(volume.size());
  const double* src = volume.data();
  std::size_t oi = 0;
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w, ++oi) {
        double oc[3] = {flip[0] * (d - c[0]), flip[1] * (h - c[1]), flip[2] * (w - c[2])};
        double rc[3];
        for (int a = 0; a < 3; ++a)
          rc[a] = R[a][0] * oc[0] + R[a][1] * oc[1] + R[a][2] * oc[2];
        double in[3];
        for (int a = 0; a < 3; ++a) in[a] = s * rc[a] + c[a] + crop_off[a] + trans[a];
        out[oi] = trilinear_at(src, D, H, W, in[0], in[1], in[2]);
      }
  return Tensor(volume.shape(), std::move(out));
}

// ---- splits / batches ---------------------------------------------------------------

SplitIndices stratified_split(const Cohort& cohort, const SplitConfig& cfg) {
  double rsum = cfg.ratios[0] + cfg.ratios[1] + cfg.ratios[2];
  if (std::abs(rsum - 1.0) > 1e-9)
    throw std::invalid_argument("stratified_split: ratios must sum to 1");
  const int n = static_cast<int>(cohort.size());

  // per-feature binning rules
  struct BinRule {
    int feature;
    std::vector<double> thresholds;  // empty for categorical
  };
  std::vector<BinRule> rules;
  for (const auto& name : cfg.stratify_features) {
    if (name == "label") continue;  // always included
    int f = cohort.schema.index_of(name);
    if (f < 0) throw std::invalid_argument("stratified_split: unknown feature '" + name + "'");
    BinRule rule{f, {}};
    if (cohort.schema.features[f].kind == FeatureKind::Continuous) {
      std::vector<double> vals;
      for (const auto& r : cohort.tabular)
        if (!is_missing(r[f])) vals.push_back(r[f]);
      std::sort(vals.begin(), vals.end());
      for (int b = 1; b < cfg.quantile_bins; ++b) {
        std::size_t at = static_cast<std::size_t>(b) * vals.size() / cfg.quantile_bins;
        if (at < vals.size()) rule.thresholds.push_back(vals[at]);
      }
    }
    rules.push_back(std::move(rule));
  }

  auto stratum_key = [&](int i) {
    std::vector<int> key{cohort.labels[i]};
    for (const auto& rule : rules) {
      double v = cohort.tabular[i][rule.feature];
      if (is_missing(v)) {
        key.push_back(-1);
      } else if (rule.thresholds.empty()) {
        key.push_back(static_cast<int>(std::llround(v)));
      } else {
        int bin = 0;
        for (double t : rule.thresholds)
          if (v >= t) ++bin;
        key.push_back(bin);
      }
    }
    return key;
  };

  std::map<std::vector<int>, std::vector<int>> strata;
  for (int i = 0; i < n; ++i) strata[stratum_key(i)].push_back(i);

  Rng rng(mix_seed(cfg.seed, 0x73706c6974ULL));
  SplitIndices out;
  std::vector<int>* dest[3] = {&out.train, &out.val, &out.test};
  for (auto& [key, members] : strata) {
    for (int i = static_cast<int>(members.size()) - 1; i > 0; --i)
      std::swap(members[i], members[rng.uniform_int(i + 1)]);
    const int m = static_cast<int>(members.size());
    int base[3];
    double frac[3];
    int assigned = 0;
    for (int k = 0; k < 3; ++k) {
      double target = cfg.ratios[k] * m;
      base[k] = static_cast<int>(std::floor(target));
      frac[k] = target - base[k];
      assigned += base[k];
    }
    for (int r = assigned; r < m; ++r) {  // largest remainder, ties to lower index
      int pick = 0;
      for (int k = 1; k < 3; ++k)
        if (frac[k] > frac[pick]) pick = k;
      base[pick] += 1;
      frac[pick] = -1.0;
    }
    int at = 0;
    for (int k = 0; k < 3; ++k)
      for (int j = 0; j < base[k]; ++j) dest[k]->push_back(members[at++]);
  }
  for (auto* d : dest) std::sort(d->begin(), d->end());
  return out;
}

std::vector<std::vector<int>> balanced_batches(const std::vector<int>& indices,
                                               const std::vector<int>& labels, int batch_size,
                                               Rng& rng) {
  if (batch_size < 2 || batch_size % 2 != 0)
    throw std::invalid_argument("balanced_batches: batch size must be even and >= 2");
  std::vector<int> pos, neg;
  for (int i : indices) (labels[i] == 1 ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty())
    throw std::invalid_argument("balanced_batches: both classes must be present");
  auto shuffle = [&rng](std::vector<int>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
      std::swap(v[i], v[rng.uniform_int(i + 1)]);
  };
  shuffle(pos);
  shuffle(neg);
  const int half = batch_size / 2;
  const std::size_t majority = std::max(pos.size(), neg.size());
  const std::size_t n_batches = (majority + half - 1) / half;
  std::size_t pi = 0, ni = 0;
  std::vector<std::vector<int>> batches;
  for (std::size_t b = 0; b < n_batches; ++b) {
    std::vector<int> batch;
    batch.reserve(batch_size);
    for (int k = 0; k < half; ++k)
      batch.push_back(pi < pos.size() ? pos[pi++]
                                      : pos[rng.uniform_int(static_cast<int>(pos.size()))]);
    for (int k = 0; k < half; ++k)
      batch.push_back(ni < neg.size() ? neg[ni++]
                                      : neg[rng.uniform_int(static_cast<int>(neg.size()))]);
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<std::vector<int>> shuffled_batches(const std::vector<int>& indices, int batch_size,
                                               Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("shuffled_batches: batch size must be >= 1");
  std::vector<int> order = indices;
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
    std::swap(order[i], order[rng.uniform_int(i + 1)]);
  std::vector<std::vector<int>> batches;
  for (std::size_t at = 0; at + batch_size <= order.size(); at += batch_size)
    batches.emplace_back(order.begin() + at, order.begin() + at + batch_size);
  return batches;
}

// ---- persistence -------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_u32le(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

std::uint32_t read_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("volume container truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void save_cohort(const Cohort& cohort, const std::string& dir) {
  fs::create_directories(dir);
  {
    std::ofstream f(fs::path(dir) / "tabular.csv");
    if (!f) throw std::runtime_error("cannot write " + dir + "/tabular.csv");
    for (std::size_t i = 0; i < cohort.schema.features.size(); ++i)
      f << (i ? "," : "") << cohort.schema.features[i].name;
    f << "\n";
    for (const auto& row : cohort.tabular) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (i) f << ",";
        if (!is_missing(row[i])) f << format_double(row[i]);
      }
      f << "\n";
    }
  }
  {
    std::ofstream f(fs::path(dir) / "labels.csv");
    if (!f) throw std::runtime_error("cannot write " + dir + "/labels.csv");
    f << "subject_id,label\n";
    for (std::size_t i = 0; i < cohort.ids.size(); ++i)
      f << cohort.ids[i] << "," << cohort.labels[i] << "\n";
  }
  {
    std::ofstream f(fs::path(dir) / "volumes.vol", std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + dir + "/volumes.vol");
    f.write("VOL1", 4);
    for (std::size_t i = 0; i < cohort.volumes.size(); ++i) {
      const std::string& id = cohort.ids[i];
      write_u32le(f, static_cast<std::uint32_t>(id.size()));
      f.write(id.data(), static_cast<std::streamsize>(id.size()));
      const Tensor& vol = cohort.volumes[i];
      for (int a = 0; a < 3; ++a) write_u32le(f, static_cast<std::uint32_t>(vol.dim(a)));
      for (std::size_t j = 0; j < vol.size(); ++j) {
        float fv = static_cast<float>(vol[j]);
        std::uint32_t bits;
        std::memcpy(&bits, &fv, 4);
        write_u32le(f, bits);
      }
    }
  }
}

Cohort load_cohort(const std::string& dir, const TabularSchema& schema) {
  Cohort c;
  c.schema = schema;
  {
    std::ifstream f(fs::path(dir) / "tabular.csv");
    if (!f) throw std::runtime_error("cannot read " + dir + "/tabular.csv");
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("tabular.csv is empty");
    auto header = split_csv_line(line);
    if (static_cast<int>(header.size()) != schema.width())
      throw std::runtime_error("tabular.csv header width " + std::to_string(header.size()) +
                               " != schema width " + std::to_string(schema.width()));
    for (int i = 0; i < schema.width(); ++i)
      if (header[i] != schema.features[i].name)
        throw std::runtime_error("tabular.csv header mismatch at column " + std::to_string(i) +
                                 ": '" + header[i] + "' vs '" + schema.features[i].name + "'");
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      auto cells = split_csv_line(line);
      if (static_cast<int>(cells.size()) != schema.width())
        throw std::runtime_error("tabular.csv row width mismatch");
      std::vector<double> row(schema.width());
      for (int i = 0; i < schema.width(); ++i)
        row[i] = cells[i].empty() ? missing_value() : std::strtod(cells[i].c_str(), nullptr);
      c.tabular.push_back(std::move(row));
    }
  }
  {
    std::ifstream f(fs::path(dir) / "labels.csv");
    if (!f) throw std::runtime_error("cannot read " + dir + "/labels.csv");
    std::string line;
    if (!std::getline(f, line) || split_csv_line(line) != std::vector<std::string>{"subject_id", "label"})
      throw std::runtime_error("labels.csv header must be 'subject_id,label'");
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      auto cells = split_csv_line(line);
      if (cells.size() != 2) throw std::runtime_error("labels.csv row must have 2 columns");
      c.ids.push_back(cells[0]);
      c.labels.push_back(std::stoi(cells[1]));
    }
  }
  {
    std::ifstream f(fs::path(dir) / "volumes.vol", std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + dir + "/volumes.vol");
    char magic[4];
    f.read(magic, 4);
    if (!f || std::strncmp(magic, "VOL1", 4) != 0)
      throw std::runtime_error("volumes.vol: bad magic (expected VOL1)");
    while (true) {
      int peek = f.peek();
      if (peek == EOF) break;
      std::uint32_t id_len = read_u32le(f);
      std::string id(id_len, '\0');
      f.read(id.data(), id_len);
      std::uint32_t d = read_u32le(f), h = read_u32le(f), w = read_u32le(f);
      std::size_t n = static_cast<std::size_t>(d) * h * w;
      std::vector<double> vox(n);
      for (std::size_t j = 0; j < n; ++j) {
        std::uint32_t bits = read_u32le(f);
        float fv;
        std::memcpy(&fv, &bits, 4);
        vox[j] = static_cast<double>(fv);
      }
      std::size_t at = c.volumes.size();
      if (at >= c.ids.size() || c.ids[at] != id)
        throw std::runtime_error("volumes.vol: subject id '" + id + "' does not match labels.csv");
      c.volumes.emplace_back(Shape{static_cast<int>(d), static_cast<int>(h), static_cast<int>(w)},
                             std::move(vox));
      c.volume_dim = {static_cast<int>(d), static_cast<int>(h), static_cast<int>(w)};
    }
  }
  if (c.tabular.size() != c.ids.size() || c.volumes.size() != c.ids.size())
    throw std::runtime_error("cohort files disagree on subject count");
  return c;
}

Tensor stack_volumes(const Cohort& cohort, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_volumes: empty index list");
  const Tensor& first = cohort.volumes[indices[0]];
  const int D = first.dim(0), H = first.dim(1), W = first.dim(2);
  const std::size_t per = first.size();
  std::vector<double> out(indices.size() * per);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& v = cohort.volumes[indices[i]];
    if (v.size() != per) throw std::invalid_argument("stack_volumes: inconsistent volume dims");
    std::copy(v.data(), v.data() + per, out.data() + i * per);
  }
  return Tensor({static_cast<int>(indices.size()), 1, D, H, W}, std::move(out));
}

}  // namespace mmrisk
