#pragma once

#include <string>
#include <vector>

#include "mmrisk/rng.hpp"
#include "mmrisk/tensor.hpp"

namespace mmrisk {

// A named trainable tensor. Blocks own their parameters; the optimizer
// walks collected Param pointers. Frozen parameters keep their gradients
// but are skipped by updates.
struct Param {
  std::string name;
  Tensor value;
  bool trainable = true;

  Tensor use(Tape* tape) const { return tape ? tape->leaf(value) : value; }
};

using ParamRefs = std::vector<Param*>;

// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor uniform_fanin_init(Shape shape, int fan_in, Rng& rng);

// Bernoulli keep-mask scaled by 1/keep for inverted dropout. rate 0 gives
// an all-ones mask.
Tensor dropout_mask(const Shape& shape, double rate, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in_dim, int out_dim, Rng& rng);

  // x: [..., in] -> [..., out]
  Tensor forward(Tape* tape, const Tensor& x) const;
  void collect(ParamRefs& out);

  int in_dim() const { return in_; }
  int out_dim() const { return out_; }

  Param weight;  // [out, in]
  Param bias;    // [out]

 private:
  int in_ = 0, out_ = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, int dim);

  Tensor forward(Tape* tape, const Tensor& x) const;          // last axis
  Tensor forward_channels(Tape* tape, const Tensor& x) const; // axis 1 of 5D
  void collect(ParamRefs& out);

  Param gamma, beta;
  double eps = 1e-5;
};

class Conv3dLayer {
 public:
  Conv3dLayer() = default;
  Conv3dLayer(std::string name, int in_channels, int out_channels, int kernel, int stride,
              int padding, Rng& rng);

  Tensor forward(Tape* tape, const Tensor& x) const;
  void collect(ParamRefs& out);

  Param kernel;  // [F, C, k, k, k]
  int stride = 1, padding = 0;
};

// conv -> norm -> relu -> conv -> norm, plus identity or 1x1x1-projected
// skip, relu after the add. Spatial dims shrink by the declared stride.
class ResidualBlock3D {
 public:
  ResidualBlock3D() = default;
  ResidualBlock3D(std::string name, int in_channels, int out_channels, int stride, Rng& rng);

  Tensor forward(Tape* tape, const Tensor& x) const;
  void collect(ParamRefs& out);

  Conv3dLayer conv1, conv2;
  LayerNorm norm1, norm2;
  Conv3dLayer skip_proj;  // only when shape changes
  bool projected = false;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::string name, int d_model, int heads, Rng& rng);

  // query_seq: [N, Lq, d], kv_seq: [N, Lk, d] -> [N, Lq, d].
  // attn_out, when given, receives the detached weights [N, h, Lq, Lk].
  Tensor forward(Tape* tape, const Tensor& query_seq, const Tensor& kv_seq,
                 Tensor* attn_out = nullptr) const;
  void collect(ParamRefs& out);

  Linear q_proj, k_proj, v_proj, out_proj;
  int heads = 1, d_model = 0;
};

// Post-norm transformer layer: self-attention, cross-attention to the
// kv sequence, then a feed-forward MLP; each wrapped as LN(x + Sublayer(x)).
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(std::string name, int d_model, int heads, int ff_dim, Rng& rng);

  Tensor forward(Tape* tape, const Tensor& query_seq, const Tensor& kv_seq) const;
  void collect(ParamRefs& out);

  MultiHeadAttention self_attn, cross_attn;
  Linear ff1, ff2;
  LayerNorm norm_self, norm_cross, norm_ff;
};

}  // namespace mmrisk
