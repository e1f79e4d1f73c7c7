#include "mmrisk/model.hpp"

#include <stdexcept>

namespace mmrisk {

// ---- ImageEncoder -----------------------------------------------------------

ImageEncoder::ImageEncoder(const ModelConfig& cfg, Rng& rng) {
  if (cfg.trunk_widths.empty() || cfg.trunk_widths.size() != cfg.trunk_strides.size())
    throw std::invalid_argument("trunk_widths and trunk_strides must be non-empty and equal length");
  int in_ch = 1;
  for (std::size_t i = 0; i < cfg.trunk_widths.size(); ++i) {
    blocks_.emplace_back("image_encoder.stage" + std::to_string(i), in_ch, cfg.trunk_widths[i],
                         cfg.trunk_strides[i], rng);
    in_ch = cfg.trunk_widths[i];
  }
  head_ = Linear("image_encoder.head", in_ch, cfg.image_embed_dim, rng);
}

Tensor ImageEncoder::forward(Tape* tape, const Tensor& volumes) const {
  return forward_with_stage(tape, volumes, -1, nullptr);
}

Tensor ImageEncoder::forward_with_stage(Tape* tape, const Tensor& volumes, int stage_index,
                                        Tensor* stage_out) const {
  if (volumes.rank() != 5 || volumes.dim(1) != 1)
    throw std::invalid_argument("image encoder expects [N,1,D,H,W], got " +
                                shape_str(volumes.shape()));
  Tensor h = volumes;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = blocks_[i].forward(tape, h);
    if (stage_out && static_cast<int>(i) == stage_index) *stage_out = h;
  }
  // global average pool over the remaining spatial grid
  Tensor pooled = avgpool3d(h, {h.dim(2), h.dim(3), h.dim(4)}, {1, 1, 1});
  Tensor flat = reshape(pooled, {h.dim(0), h.dim(1)});
  return head_.forward(tape, flat);
}

void ImageEncoder::collect(ParamRefs& out) {
  for (auto& b : blocks_) b.collect(out);
  head_.collect(out);
}

// ---- TabularEncoder ---------------------------------------------------------

TabularEncoder::TabularEncoder(const ModelConfig& cfg, Rng& rng) : dropout_(cfg.dropout) {
  if (cfg.tabular_input_dim <= 0)
    throw std::invalid_argument("tabular_input_dim must be set before building the encoder");
  int in_dim = cfg.tabular_input_dim;
  int idx = 0;
  for (int hidden : cfg.tabular_hidden) {
    layers_.emplace_back("tabular_encoder.fc" + std::to_string(idx++), in_dim, hidden, rng);
    in_dim = hidden;
  }
  layers_.emplace_back("tabular_encoder.fc" + std::to_string(idx), in_dim, cfg.tabular_embed_dim,
                       rng);
}

Tensor TabularEncoder::forward(Tape* tape, const Tensor& records, Rng* dropout_rng) const {
  Tensor h = records;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    h = relu(layers_[i].forward(tape, h));
    if (dropout_ > 0.0 && dropout_rng) h = mul(h, dropout_mask(h.shape(), dropout_, *dropout_rng));
  }
  return layers_.back().forward(tape, h);
}

void TabularEncoder::collect(ParamRefs& out) {
  for (auto& l : layers_) l.collect(out);
}

// ---- ProjectionHead ---------------------------------------------------------

ProjectionHead::ProjectionHead(std::string name, int in_dim, int hidden, int out_dim, Rng& rng)
    : fc1_(name + ".fc1", in_dim, hidden, rng), fc2_(name + ".fc2", hidden, out_dim, rng) {}

Tensor ProjectionHead::forward(Tape* tape, const Tensor& embedding) const {
  Tensor h = fc2_.forward(tape, relu(fc1_.forward(tape, embedding)));
  return l2_normalize(h, -1);
}

void ProjectionHead::collect(ParamRefs& out) {
  fc1_.collect(out);
  fc2_.collect(out);
}

// ---- InteractionModule ----------------------------------------------------------

InteractionModule::InteractionModule(const ModelConfig& cfg, Rng& rng)
    : dim_(cfg.interaction_dim) {
  cls_token_ = Param{"interaction.cls",
                     uniform_fanin_init({1, 1, cfg.interaction_dim}, cfg.interaction_dim, rng)};
  img_adapter_ = Linear("interaction.img_adapter", cfg.projection_dim, cfg.interaction_dim, rng);
  tab_adapter_ = Linear("interaction.tab_adapter", cfg.projection_dim, cfg.interaction_dim, rng);
  for (int i = 0; i < cfg.interaction_layers; ++i)
    layers_.emplace_back("interaction.layer" + std::to_string(i), cfg.interaction_dim,
                         cfg.interaction_heads, cfg.interaction_ff_dim, rng);
}

Tensor InteractionModule::forward(Tape* tape, const Tensor& z_img, const Tensor& z_tab) const {
  if (z_img.rank() != 2 || z_tab.rank() != 2)
    throw std::invalid_argument("interaction expects [N,P] projections");
  if (z_img.dim(0) != z_tab.dim(0))
    throw std::invalid_argument("interaction batch mismatch: " + shape_str(z_img.shape()) +
                                " vs " + shape_str(z_tab.shape()));
  int n = z_img.dim(0);
  Tensor img_tok = reshape(img_adapter_.forward(tape, z_img), {n, 1, dim_});
  Tensor tab_tok = reshape(tab_adapter_.forward(tape, z_tab), {n, 1, dim_});
  // broadcast the learned CLS token over the batch
  Tensor cls = add(Tensor::zeros({n, 1, dim_}), cls_token_.use(tape));
  Tensor query = concat({cls, tab_tok}, 1);  // [N, 2, dim]
  for (const auto& layer : layers_) query = layer.forward(tape, query, img_tok);
  return reshape(slice(query, 1, 0, 1), {n, dim_});
}

void InteractionModule::collect(ParamRefs& out) {
  out.push_back(&cls_token_);
  img_adapter_.collect(out);
  tab_adapter_.collect(out);
  for (auto& l : layers_) l.collect(out);
}

// ---- EnsembleClassifier ----------------------------------------------------------

EnsembleClassifier::EnsembleClassifier(std::string name, int img_dim, int tab_dim, int cls_dim,
                                       Rng& rng)
    : fc_(name + ".fc", img_dim + tab_dim + cls_dim, 1, rng) {}

Tensor EnsembleClassifier::forward(Tape* tape, const Tensor& img_emb, const Tensor& tab_emb,
                                   const Tensor& cls_emb) const {
  return fc_.forward(tape, concat({img_emb, tab_emb, cls_emb}, 1));
}

void EnsembleClassifier::collect(ParamRefs& out) { fc_.collect(out); }

// ---- PretrainModel ----------------------------------------------------------------

PretrainModel::PretrainModel(const ModelConfig& config, std::uint64_t seed) : cfg(config) {
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));
  image_encoder = ImageEncoder(cfg, rng);
  tabular_encoder = TabularEncoder(cfg, rng);
  img_proj = ProjectionHead("img_proj", cfg.image_embed_dim, cfg.projection_hidden,
                            cfg.projection_dim, rng);
  tab_proj = ProjectionHead("tab_proj", cfg.tabular_embed_dim, cfg.projection_hidden,
                            cfg.projection_dim, rng);
  interaction = InteractionModule(cfg, rng);
  itm_head = Linear("itm_head", cfg.interaction_dim, 1, rng);
}

ParamRefs PretrainModel::parameters() {
  ParamRefs out;
  image_encoder.collect(out);
  tabular_encoder.collect(out);
  img_proj.collect(out);
  tab_proj.collect(out);
  interaction.collect(out);
  itm_head.collect(out);
  return out;
}

// ---- DownstreamModel ----------------------------------------------------------------

DownstreamModel::DownstreamModel(const ModelConfig& config, HeadKind kind, std::uint64_t seed)
    : cfg(config), head_kind(kind) {
  Rng rng(mix_seed(seed, 0x646f776eULL));
  if (kind != HeadKind::TabularOnly) image_encoder = ImageEncoder(cfg, rng);
  if (kind != HeadKind::ImageOnly) tabular_encoder = TabularEncoder(cfg, rng);
  switch (kind) {
    case HeadKind::Ensemble:
      img_proj = ProjectionHead("img_proj", cfg.image_embed_dim, cfg.projection_hidden,
                                cfg.projection_dim, rng);
      tab_proj = ProjectionHead("tab_proj", cfg.tabular_embed_dim, cfg.projection_hidden,
                                cfg.projection_dim, rng);
      interaction = InteractionModule(cfg, rng);
      ensemble_head = EnsembleClassifier("classifier", cfg.image_embed_dim, cfg.tabular_embed_dim,
                                         cfg.interaction_dim, rng);
      break;
    case HeadKind::FusedConcat:
      linear_head =
          Linear("classifier.fc", cfg.image_embed_dim + cfg.tabular_embed_dim, 1, rng);
      break;
    case HeadKind::ImageOnly:
      linear_head = Linear("classifier.fc", cfg.image_embed_dim, 1, rng);
      break;
    case HeadKind::TabularOnly:
      linear_head = Linear("classifier.fc", cfg.tabular_embed_dim, 1, rng);
      break;
  }
}

Tensor DownstreamModel::forward(Tape* tape, const Tensor& volumes, const Tensor& records,
                                Rng* dropout_rng) const {
  return forward_with_stage(tape, volumes, records, -1, nullptr, dropout_rng);
}

Tensor DownstreamModel::forward_with_stage(Tape* tape, const Tensor& volumes,
                                           const Tensor& records, int stage_index,
                                           Tensor* stage_out, Rng* dropout_rng) const {
  Tensor img_emb, tab_emb;
  if (head_kind != HeadKind::TabularOnly)
    img_emb = image_encoder.forward_with_stage(tape, volumes, stage_index, stage_out);
  if (head_kind != HeadKind::ImageOnly)
    tab_emb = tabular_encoder.forward(tape, records, dropout_rng);
  switch (head_kind) {
    case HeadKind::Ensemble: {
      Tensor cls = interaction.forward(tape, img_proj.forward(tape, img_emb),
                                       tab_proj.forward(tape, tab_emb));
      return ensemble_head.forward(tape, img_emb, tab_emb, cls);
    }
    case HeadKind::FusedConcat:
      return linear_head.forward(tape, concat({img_emb, tab_emb}, 1));
    case HeadKind::ImageOnly:
      return linear_head.forward(tape, img_emb);
    case HeadKind::TabularOnly:
      return linear_head.forward(tape, tab_emb);
  }
  throw std::logic_error("unknown head kind");
}

ParamRefs DownstreamModel::parameters() {
  ParamRefs out = encoder_parameters();
  switch (head_kind) {
    case HeadKind::Ensemble:
      ensemble_head.collect(out);
      break;
    default:
      linear_head.collect(out);
      break;
  }
  return out;
}

ParamRefs DownstreamModel::encoder_parameters() {
  ParamRefs out;
  if (head_kind != HeadKind::TabularOnly) image_encoder.collect(out);
  if (head_kind != HeadKind::ImageOnly) tabular_encoder.collect(out);
  if (head_kind == HeadKind::Ensemble) {
    img_proj.collect(out);
    tab_proj.collect(out);
    interaction.collect(out);
  }
  return out;
}

}  // namespace mmrisk
