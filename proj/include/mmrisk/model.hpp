#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmrisk/nn.hpp"

namespace mmrisk {

struct ModelConfig {
  // imaging trunk: one residual stage per entry
  std::vector<int> trunk_widths{8, 16, 32, 64};
  std::vector<int> trunk_strides{2, 2, 2, 1};
  int image_embed_dim = 128;    // E_img (paper scale 2048)
  // tabular encoder
  int tabular_input_dim = 0;    // one-hot schema width
  std::vector<int> tabular_hidden{128, 128};
  int tabular_embed_dim = 128;  // E_tab
  // projection heads
  int projection_dim = 128;     // P
  int projection_hidden = 128;
  // interaction module
  int interaction_dim = 256;
  int interaction_heads = 4;
  int interaction_layers = 2;
  int interaction_ff_dim = 256;
  double dropout = 0.0;         // encoder-MLP dropout
};

// Residual 3D trunk with global average pooling and a linear embedding head.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ModelConfig& cfg, Rng& rng);

  // volumes: [N, 1, D, H, W] -> [N, E_img]
  Tensor forward(Tape* tape, const Tensor& volumes) const;
  // also exposes the requested stage activation (for activation maps)
  Tensor forward_with_stage(Tape* tape, const Tensor& volumes, int stage_index,
                            Tensor* stage_out) const;
  void collect(ParamRefs& out);
  int stages() const { return static_cast<int>(blocks_.size()); }

 private:
  std::vector<ResidualBlock3D> blocks_;
  Linear head_;
};

// MLP over the one-hot tabular row.
class TabularEncoder {
 public:
  TabularEncoder() = default;
  TabularEncoder(const ModelConfig& cfg, Rng& rng);

  // records: [N, K] -> [N, E_tab]; dropout masks drawn from rng when training
  Tensor forward(Tape* tape, const Tensor& records, Rng* dropout_rng = nullptr) const;
  void collect(ParamRefs& out);

 private:
  std::vector<Linear> layers_;
  double dropout_ = 0.0;
};

// Two-layer MLP into the shared space, L2-normalized onto the unit sphere.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(std::string name, int in_dim, int hidden, int out_dim, Rng& rng);

  Tensor forward(Tape* tape, const Tensor& embedding) const;
  void collect(ParamRefs& out);

 private:
  Linear fc1_, fc2_;
};

// Cross-modal transformer over [CLS, tabular-token] attending to the image
// token; returns the CLS embedding.
class InteractionModule {
 public:
  InteractionModule() = default;
  InteractionModule(const ModelConfig& cfg, Rng& rng);

  // z_img, z_tab: [N, P] -> [N, interaction_dim]
  Tensor forward(Tape* tape, const Tensor& z_img, const Tensor& z_tab) const;
  void collect(ParamRefs& out);
  int dim() const { return dim_; }

 private:
  Param cls_token_;  // [1, 1, dim]
  Linear img_adapter_, tab_adapter_;
  std::vector<TransformerLayer> layers_;
  int dim_ = 0;
};

// Linear head over [image embedding | tabular embedding | CLS embedding].
class EnsembleClassifier {
 public:
  EnsembleClassifier() = default;
  EnsembleClassifier(std::string name, int img_dim, int tab_dim, int cls_dim, Rng& rng);

  // -> logits [N, 1]
  Tensor forward(Tape* tape, const Tensor& img_emb, const Tensor& tab_emb,
                 const Tensor& cls_emb) const;
  void collect(ParamRefs& out);

 private:
  Linear fc_;
};

// The full pretraining architecture: both encoders, both projection heads,
// the interaction module and the ITM predictor.
struct PretrainModel {
  ModelConfig cfg;
  ImageEncoder image_encoder;
  TabularEncoder tabular_encoder;
  ProjectionHead img_proj, tab_proj;
  InteractionModule interaction;
  Linear itm_head;  // [interaction_dim] -> 1 logit

  PretrainModel() = default;
  PretrainModel(const ModelConfig& cfg, std::uint64_t seed);
  ParamRefs parameters();
};

// Downstream classifier heads; which parts participate depends on the mode.
// Ensemble keeps the pretrained projection heads to feed the interaction
// module, while the classifier itself reads the pre-projection embeddings.
enum class HeadKind { Ensemble, FusedConcat, ImageOnly, TabularOnly };

struct DownstreamModel {
  ModelConfig cfg;
  HeadKind head_kind = HeadKind::Ensemble;
  ImageEncoder image_encoder;
  TabularEncoder tabular_encoder;
  ProjectionHead img_proj, tab_proj;  // ensemble head only
  InteractionModule interaction;      // ensemble head only
  EnsembleClassifier ensemble_head;
  Linear linear_head;                 // fused/unimodal heads

  DownstreamModel() = default;
  DownstreamModel(const ModelConfig& cfg, HeadKind kind, std::uint64_t seed);

  // logits [N,1]; unimodal heads ignore the missing modality (pass an
  // undefined Tensor for it)
  Tensor forward(Tape* tape, const Tensor& volumes, const Tensor& records,
                 Rng* dropout_rng = nullptr) const;
  // same forward but exposing an image-trunk stage activation
  Tensor forward_with_stage(Tape* tape, const Tensor& volumes, const Tensor& records,
                            int stage_index, Tensor* stage_out, Rng* dropout_rng = nullptr) const;
  ParamRefs parameters();
  ParamRefs encoder_parameters();  // everything except the classifier head(s)
};

}  // namespace mmrisk
