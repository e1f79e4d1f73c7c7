#include "mmrisk/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mmrisk {

Tensor uniform_fanin_init(Shape shape, int fan_in, Rng& rng) {
  if (fan_in <= 0) throw std::invalid_argument("fan_in must be positive");
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> vals(numel(shape));
  for (double& v : vals) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(vals));
}

Tensor dropout_mask(const Shape& shape, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0,1)");
  if (rate == 0.0) return Tensor::full(shape, 1.0);
  double keep = 1.0 - rate;
  std::vector<double> vals(numel(shape));
  for (double& v : vals) v = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  return Tensor(Shape(shape), std::move(vals));
}

// ---- Linear -----------------------------------------------------------------

Linear::Linear(std::string name, int in_dim, int out_dim, Rng& rng) : in_(in_dim), out_(out_dim) {
  weight = Param{name + ".weight", uniform_fanin_init({out_dim, in_dim}, in_dim, rng)};
  bias = Param{name + ".bias", Tensor::zeros({out_dim})};
}

Tensor Linear::forward(Tape* tape, const Tensor& x) const {
  if (x.dim(-1) != in_)
    throw std::invalid_argument(weight.name + ": input width " + std::to_string(x.dim(-1)) +
                                " != " + std::to_string(in_));
  Tensor w = weight.use(tape);
  Tensor b = bias.use(tape);
  return add(matmul(x, transpose_last(w)), b);
}

void Linear::collect(ParamRefs& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

// ---- LayerNorm --------------------------------------------------------------

LayerNorm::LayerNorm(std::string name, int dim) {
  gamma = Param{name + ".gamma", Tensor::full({dim}, 1.0)};
  beta = Param{name + ".beta", Tensor::zeros({dim})};
}

Tensor LayerNorm::forward(Tape* tape, const Tensor& x) const {
  return layer_norm(x, gamma.use(tape), beta.use(tape), eps);
}

Tensor LayerNorm::forward_channels(Tape* tape, const Tensor& x) const {
  return channel_layer_norm(x, gamma.use(tape), beta.use(tape), eps);
}

void LayerNorm::collect(ParamRefs& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

// ---- Conv3dLayer ------------------------------------------------------------

Conv3dLayer::Conv3dLayer(std::string name, int in_channels, int out_channels, int k, int stride_,
                         int padding_, Rng& rng)
    : stride(stride_), padding(padding_) {
  int fan_in = in_channels * k * k * k;
  kernel = Param{name + ".kernel",
                 uniform_fanin_init({out_channels, in_channels, k, k, k}, fan_in, rng)};
}

Tensor Conv3dLayer::forward(Tape* tape, const Tensor& x) const {
  return conv3d(x, kernel.use(tape), {stride, stride, stride}, {padding, padding, padding});
}

void Conv3dLayer::collect(ParamRefs& out) { out.push_back(&kernel); }

// ---- ResidualBlock3D ----------------------------------------------------------

ResidualBlock3D::ResidualBlock3D(std::string name, int in_channels, int out_channels, int stride,
                                 Rng& rng)
    : conv1(name + ".conv1", in_channels, out_channels, 3, stride, 1, rng),
      conv2(name + ".conv2", out_channels, out_channels, 3, 1, 1, rng),
      norm1(name + ".norm1", out_channels),
      norm2(name + ".norm2", out_channels) {
  projected = stride != 1 || in_channels != out_channels;
  if (projected) skip_proj = Conv3dLayer(name + ".skip", in_channels, out_channels, 1, stride, 0, rng);
}

Tensor ResidualBlock3D::forward(Tape* tape, const Tensor& x) const {
  Tensor h = relu(norm1.forward_channels(tape, conv1.forward(tape, x)));
  h = norm2.forward_channels(tape, conv2.forward(tape, h));
  Tensor shortcut = projected ? skip_proj.forward(tape, x) : x;
  return relu(add(h, shortcut));
}

void ResidualBlock3D::collect(ParamRefs& out) {
  conv1.collect(out);
  norm1.collect(out);
  conv2.collect(out);
  norm2.collect(out);
  if (projected) skip_proj.collect(out);
}

// ---- MultiHeadAttention ---------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(std::string name, int d_model_, int heads_, Rng& rng)
    : heads(heads_), d_model(d_model_) {
  if (d_model % heads != 0)
    throw std::invalid_argument(name + ": d_model " + std::to_string(d_model) +
                                " not divisible by heads " + std::to_string(heads));
  q_proj = Linear(name + ".q", d_model, d_model, rng);
  k_proj = Linear(name + ".k", d_model, d_model, rng);
  v_proj = Linear(name + ".v", d_model, d_model, rng);
  out_proj = Linear(name + ".out", d_model, d_model, rng);
}

Tensor MultiHeadAttention::forward(Tape* tape, const Tensor& query_seq, const Tensor& kv_seq,
                                   Tensor* attn_out) const {
  if (query_seq.rank() != 3 || kv_seq.rank() != 3)
    throw std::invalid_argument("attention expects [N,L,d] sequences");
  if (query_seq.dim(2) != d_model || kv_seq.dim(2) != d_model)
    throw std::invalid_argument("attention input dim != d_model");
  if (query_seq.dim(0) != kv_seq.dim(0))
    throw std::invalid_argument("attention batch mismatch");
  int n = query_seq.dim(0), lq = query_seq.dim(1), lk = kv_seq.dim(1);
  int dh = d_model / heads;

  auto split_heads = [&](const Tensor& x, int len) {
    // [N, L, d] -> [N, h, L, dh]
    return permute(reshape(x, {n, len, heads, dh}), {0, 2, 1, 3});
  };
  Tensor q = split_heads(q_proj.forward(tape, query_seq), lq);
  Tensor k = split_heads(k_proj.forward(tape, kv_seq), lk);
  Tensor v = split_heads(v_proj.forward(tape, kv_seq), lk);

  Tensor scores = scale(matmul(q, transpose_last(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax(scores, 3);  // [N, h, Lq, Lk]
  if (attn_out) *attn_out = attn.detached();
  Tensor ctx = matmul(attn, v);                              // [N, h, Lq, dh]
  Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {n, lq, d_model});
  return out_proj.forward(tape, merged);
}

void MultiHeadAttention::collect(ParamRefs& out) {
  q_proj.collect(out);
  k_proj.collect(out);
  v_proj.collect(out);
  out_proj.collect(out);
}

// ---- TransformerLayer ------------------------------------------------------------

TransformerLayer::TransformerLayer(std::string name, int d_model, int heads, int ff_dim, Rng& rng)
    : self_attn(name + ".self", d_model, heads, rng),
      cross_attn(name + ".cross", d_model, heads, rng),
      ff1(name + ".ff1", d_model, ff_dim, rng),
      ff2(name + ".ff2", ff_dim, d_model, rng),
      norm_self(name + ".norm_self", d_model),
      norm_cross(name + ".norm_cross", d_model),
      norm_ff(name + ".norm_ff", d_model) {}

Tensor TransformerLayer::forward(Tape* tape, const Tensor& query_seq, const Tensor& kv_seq) const {
  Tensor x = norm_self.forward(tape, add(query_seq, self_attn.forward(tape, query_seq, query_seq)));
  x = norm_cross.forward(tape, add(x, cross_attn.forward(tape, x, kv_seq)));
  Tensor ff = ff2.forward(tape, gelu(ff1.forward(tape, x)));
  return norm_ff.forward(tape, add(x, ff));
}

void TransformerLayer::collect(ParamRefs& out) {
  self_attn.collect(out);
  cross_attn.collect(out);
  ff1.collect(out);
  ff2.collect(out);
  norm_self.collect(out);
  norm_cross.collect(out);
  norm_ff.collect(out);
}

}  // namespace mmrisk
