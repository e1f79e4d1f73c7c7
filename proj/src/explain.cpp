#include "mmrisk/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace mmrisk {

namespace fs = std::filesystem;

HeatmapVolume gradcam(const DownstreamModel& model, const Cohort& cohort,
                      const std::vector<std::vector<double>>& processed_rows, int subject,
                      int target_stage) {
  if (model.head_kind == HeadKind::TabularOnly)
    throw std::invalid_argument("gradcam: the model has no image path");
  int stages = model.image_encoder.stages();
  if (target_stage < 0) target_stage = stages - 1;
  if (target_stage >= stages)
    throw std::invalid_argument("gradcam: stage " + std::to_string(target_stage) +
                                " out of range (trunk has " + std::to_string(stages) + ")");

  const Tensor& vol = cohort.volumes[subject];
  const int D = vol.dim(0), H = vol.dim(1), W = vol.dim(2);

  Tape tape;
  Tensor batch = tape.leaf(Tensor({1, 1, D, H, W}, vol.values()));
  Tensor record;
  if (model.head_kind != HeadKind::ImageOnly)
    record = one_hot({processed_rows[subject]}, cohort.schema);
  Tensor stage_act;
  Tensor logit =
      model.forward_with_stage(&tape, batch, record, target_stage, &stage_act, nullptr);
  tape.backward(sum_all(logit));
  Tensor grad = tape.grad(stage_act);  // [1, C, d, h, w]

  const int C = stage_act.dim(1);
  const int sd = stage_act.dim(2), sh = stage_act.dim(3), sw = stage_act.dim(4);
  const std::size_t plane = static_cast<std::size_t>(sd) * sh * sw;

  // channel weights: spatial mean of the gradient
  std::vector<double> weights(C, 0.0);
  for (int c = 0; c < C; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += grad[static_cast<std::size_t>(c) * plane + i];
    weights[c] = acc / static_cast<double>(plane);
  }
  std::vector<double> map(plane, 0.0);
  for (int c = 0; c < C; ++c) {
    double w = weights[c];
    if (w == 0.0) continue;
    for (std::size_t i = 0; i < plane; ++i)
      map[i] += w * stage_act[static_cast<std::size_t>(c) * plane + i];
  }
  double mx = -std::numeric_limits<double>::infinity();
  double mn = std::numeric_limits<double>::infinity();
  for (double& v : map) {
    v = std::max(v, 0.0);
    mx = std::max(mx, v);
    mn = std::min(mn, v);
  }
  if (mx > mn) {
    for (double& v : map) v = (v - mn) / (mx - mn);
  } else {
    std::fill(map.begin(), map.end(), 0.0);  // flat maps carry no salience
  }

  HeatmapVolume out;
  out.source_stage = target_stage;
  out.logit = logit.item();
  out.predicted_class = out.logit >= 0.0 ? 1 : 0;
  out.values = trilinear_resize(Tensor({sd, sh, sw}, std::move(map)), {D, H, W});
  return out;
}

int most_informative_slice(const Tensor& heatmap, Plane plane) {
  if (heatmap.rank() != 3)
    throw std::invalid_argument("most_informative_slice expects [D,H,W]");
  int axis = plane == Plane::Axial ? 0 : plane == Plane::Coronal ? 1 : 2;
  const int D = heatmap.dim(0), H = heatmap.dim(1), W = heatmap.dim(2);
  int n = heatmap.dim(axis);
  std::vector<double> sums(n, 0.0);
  std::size_t i = 0;
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w, ++i)
        sums[axis == 0 ? d : axis == 1 ? h : w] += heatmap[i];
  int best = 0;
  for (int k = 1; k < n; ++k)
    if (sums[k] > sums[best]) best = k;  // ties keep the lowest index
  return best;
}

Tensor trilinear_resize(const Tensor& volume, const std::array<int, 3>& out_dim) {
  if (volume.rank() != 3) throw std::invalid_argument("trilinear_resize expects [D,H,W]");
  const int D = volume.dim(0), H = volume.dim(1), W = volume.dim(2);
  const int OD = out_dim[0], OH = out_dim[1], OW = out_dim[2];
  if (OD < 1 || OH < 1 || OW < 1)
    throw std::invalid_argument("trilinear_resize: output dims must be >= 1");
  auto src_coord = [](int out, int n_out, int n_in) {
    if (n_out == 1) return (n_in - 1) / 2.0;
    return static_cast<double>(out) * (n_in - 1) / static_cast<double>(n_out - 1);
  };
  std::vector<double> out(static_cast<std::size_t>(OD) * OH * OW);
  const double* src = volume.data();
  std::size_t oi = 0;
  for (int od = 0; od < OD; ++od) {
    double fd = src_coord(od, OD, D);
    int d0 = std::min(D - 1, static_cast<int>(std::floor(fd)));
    int d1 = std::min(D - 1, d0 + 1);
    double wd = fd - d0;
    for (int oh = 0; oh < OH; ++oh) {
      double fh = src_coord(oh, OH, H);
      int h0 = std::min(H - 1, static_cast<int>(std::floor(fh)));
      int h1 = std::min(H - 1, h0 + 1);
      double wh = fh - h0;
      for (int ow = 0; ow < OW; ++ow, ++oi) {
        double fw = src_coord(ow, OW, W);
        int w0 = std::min(W - 1, static_cast<int>(std::floor(fw)));
        int w1 = std::min(W - 1, w0 + 1);
        double ww = fw - w0;
        auto at = [&](int d, int h, int w) {
          return src[(static_cast<std::size_t>(d) * H + h) * W + w];
        };
        double c00 = at(d0, h0, w0) * (1 - ww) + at(d0, h0, w1) * ww;
        double c01 = at(d0, h1, w0) * (1 - ww) + at(d0, h1, w1) * ww;
        double c10 = at(d1, h0, w0) * (1 - ww) + at(d1, h0, w1) * ww;
        double c11 = at(d1, h1, w0) * (1 - ww) + at(d1, h1, w1) * ww;
        double c0 = c00 * (1 - wh) + c01 * wh;
        double c1 = c10 * (1 - wh) + c11 * wh;
        out[oi] = c0 * (1 - wd) + c1 * wd;
      }
    }
  }
  return Tensor({OD, OH, OW}, std::move(out));
}

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
               int height) {
  if (static_cast<std::size_t>(width) * height != pixels.size())
    throw std::invalid_argument("write_pgm: pixel count mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int& width, int& height) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string magic;
  int maxval = 0;
  f >> magic >> width >> height >> maxval;
  if (magic != "P5" || maxval != 255)
    throw std::runtime_error(path + ": expected binary PGM with maxval 255");
  f.get();  // single whitespace after the header
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height);
  f.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!f) throw std::runtime_error(path + ": truncated pixel data");
  return pixels;
}

namespace {

std::uint8_t quantize(double v) {
  double q = std::llround(std::min(1.0, std::max(0.0, v)) * 255.0);
  return static_cast<std::uint8_t>(q);
}

// extracts the 2D slice at `index` along `axis` of a [D,H,W] field
std::vector<std::uint8_t> slice_pixels(const Tensor& vol, int axis, int index, bool normalize,
                                       int& width, int& height) {
  const int D = vol.dim(0), H = vol.dim(1), W = vol.dim(2);
  double mn = 0.0, mx = 1.0;
  if (normalize) {
    mn = std::numeric_limits<double>::infinity();
    mx = -mn;
    for (std::size_t i = 0; i < vol.size(); ++i) {
      mn = std::min(mn, vol[i]);
      mx = std::max(mx, vol[i]);
    }
    if (mx <= mn) mx = mn + 1.0;
  }
  auto at = [&](int d, int h, int w) {
    double v = vol[(static_cast<std::size_t>(d) * H + h) * W + w];
    return normalize ? (v - mn) / (mx - mn) : v;
  };
  std::vector<std::uint8_t> px;
  if (axis == 0) {
    height = H;
    width = W;
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) px.push_back(quantize(at(index, h, w)));
  } else if (axis == 1) {
    height = D;
    width = W;
    for (int d = 0; d < D; ++d)
      for (int w = 0; w < W; ++w) px.push_back(quantize(at(d, index, w)));
  } else {
    height = D;
    width = H;
    for (int d = 0; d < D; ++d)
      for (int h = 0; h < H; ++h) px.push_back(quantize(at(d, h, index)));
  }
  return px;
}

}  // namespace

void export_heatmap(const HeatmapVolume& heatmap, const Tensor& volume,
                    const std::string& out_dir) {
  if (heatmap.values.shape() != volume.shape())
    throw std::invalid_argument("export_heatmap: heatmap and volume dims differ");
  fs::create_directories(out_dir);
  struct PlaneSpec {
    const char* name;
    Plane plane;
    int axis;
  };
  const PlaneSpec planes[3] = {{"axial", Plane::Axial, 0},
                               {"coronal", Plane::Coronal, 1},
                               {"sagittal", Plane::Sagittal, 2}};
  int slices[3];
  for (int p = 0; p < 3; ++p) {
    slices[p] = most_informative_slice(heatmap.values, planes[p].plane);
    int w = 0, h = 0;
    auto underlay = slice_pixels(volume, planes[p].axis, slices[p], true, w, h);
    write_pgm((fs::path(out_dir) / (std::string(planes[p].name) + "_underlay.pgm")).string(),
              underlay, w, h);
    auto heat = slice_pixels(heatmap.values, planes[p].axis, slices[p], false, w, h);
    write_pgm((fs::path(out_dir) / (std::string(planes[p].name) + "_heatmap.pgm")).string(), heat,
              w, h);
  }
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "{\n  \"axial_slice\": %d,\n  \"coronal_slice\": %d,\n  \"sagittal_slice\": %d,\n"
                "  \"logit\": %.17g,\n  \"predicted_class\": %d,\n  \"source_stage\": %d\n}\n",
                slices[0], slices[1], slices[2], heatmap.logit, heatmap.predicted_class,
                heatmap.source_stage);
  std::ofstream f(fs::path(out_dir) / "gradcam.json");
  if (!f) throw std::runtime_error("cannot write gradcam.json");
  f << buf;
}

void export_embeddings_csv(const std::vector<std::string>& ids, const Tensor& img_embeddings,
                           const Tensor& tab_embeddings, const std::string& path) {
  if (img_embeddings.rank() != 2 || tab_embeddings.rank() != 2)
    throw std::invalid_argument("export_embeddings_csv: expected [N,E] matrices");
  if (img_embeddings.shape() != tab_embeddings.shape())
    throw std::invalid_argument("export_embeddings_csv: modality dims differ: " +
                                shape_str(img_embeddings.shape()) + " vs " +
                                shape_str(tab_embeddings.shape()));
  if (static_cast<std::size_t>(img_embeddings.dim(0)) != ids.size())
    throw std::invalid_argument("export_embeddings_csv: id count mismatch");
  const int n = img_embeddings.dim(0), e = img_embeddings.dim(1);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "subject_id,modality";
  for (int k = 0; k < e; ++k) f << ",e" << k;
  f << "\n";
  char buf[48];
  auto write_rows = [&](const Tensor& m, const char* tag) {
    for (int i = 0; i < n; ++i) {
      f << ids[i] << "," << tag;
      for (int k = 0; k < e; ++k) {
        std::snprintf(buf, sizeof(buf), "%.17g", m[static_cast<std::size_t>(i) * e + k]);
        f << "," << buf;
      }
      f << "\n";
    }
  };
  write_rows(img_embeddings, "image");
  write_rows(tab_embeddings, "tabular");
}

}  // namespace mmrisk
