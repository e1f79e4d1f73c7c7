#pragma once

#include <array>
#include <string>
#include <vector>

#include "mmrisk/train.hpp"

namespace mmrisk {

struct HeatmapVolume {
  Tensor values;  // [D,H,W], range [0,1], input resolution
  int source_stage = -1;
  int predicted_class = 0;
  double logit = 0.0;
};

// Channel-weighted rectified activation map of an image-trunk stage,
// min-max normalized then trilinearly upsampled to the input grid.
// Gradients are taken with respect to the positive-class logit.
HeatmapVolume gradcam(const DownstreamModel& model, const Cohort& cohort,
                      const std::vector<std::vector<double>>& processed_rows, int subject,
                      int target_stage = -1);

enum class Plane { Axial, Coronal, Sagittal };

// argmax of summed activation over slices; ties resolve to the lowest index
int most_informative_slice(const Tensor& heatmap, Plane plane);

// align-corners trilinear resize; exact on constant fields
Tensor trilinear_resize(const Tensor& volume, const std::array<int, 3>& out_dim);

// Per plane the selected slice as an 8-bit PGM pair (underlay, heatmap),
// plus a JSON sidecar with slice indices, logit and class.
void export_heatmap(const HeatmapVolume& heatmap, const Tensor& volume,
                    const std::string& out_dir);

// subject_id, modality, e0..e{D-1}; image rows first, then tabular rows.
void export_embeddings_csv(const std::vector<std::string>& ids, const Tensor& img_embeddings,
                           const Tensor& tab_embeddings, const std::string& path);

// P5 grayscale helpers (maxval 255)
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels, int width,
               int height);
std::vector<std::uint8_t> read_pgm(const std::string& path, int& width, int& height);

}  // namespace mmrisk
