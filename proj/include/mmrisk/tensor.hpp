#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmrisk {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t numel(const Shape& s);

class Tape;

// Dense row-major tensor of 64-bit floats. Copies share the underlying
// buffer; library operations never mutate their inputs. A tensor is
// gradient-tracked when it carries a tape node handle.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  const double* data() const { return data_->data(); }
  const std::vector<double>& values() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;

  // Direct buffer access for construction and in-place parameter updates.
  // Must not be used on tensors that currently live on a tape.
  double* raw() { return data_->data(); }

  bool tracked() const { return node_ >= 0; }
  int node() const { return node_; }
  Tape* tape() const { return tape_; }

  Tensor detached() const;  // same buffer, off the tape
  Tensor clone() const;     // deep copy, off the tape

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;

  friend class Tape;
};

// Reverse-mode gradient tape. One training step builds and consumes one
// tape: operations on tracked tensors append nodes in topological order,
// backward() sweeps them exactly once in reverse. Single-threaded.
class Tape {
 public:
  using PullFn = std::function<void(Tape&, const std::vector<double>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf tensor. Repeated calls with the same buffer return
  // the same node, so gradients of shared parameters accumulate.
  Tensor leaf(const Tensor& t);

  // Accumulates gradients for the scalar root into every tracked leaf.
  // The tape is consumed afterwards; gradients stay readable until reset().
  void backward(const Tensor& root);

  // Gradient of a tracked tensor. Zeros when no gradient reached it.
  Tensor grad(const Tensor& t) const;

  // Gradient of a leaf looked up by its buffer; usable after backward().
  // Zeros when the leaf never joined this tape's graph.
  Tensor leaf_grad(const Tensor& t) const;

  bool consumed() const { return consumed_; }
  void reset();
  std::size_t node_count() const { return nodes_.size(); }

  // Recording interface used by the operator implementations.
  int record(const Shape& shape, std::vector<int> parents, PullFn pull, Tensor& out);
  std::vector<double>& grad_buffer(int node);

 private:
  struct Node {
    Shape shape;
    std::vector<int> parents;
    PullFn pull;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const void*, int> leaves_;
  bool consumed_ = false;
};

// ---- primitive operations -------------------------------------------------
// Every op has a forward and a backward; results are recorded on the tape
// of their tracked inputs (inputs on different tapes are an error).

// elementwise
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

// binary with numpy-style broadcasting
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// linear algebra; a: [..., m, k], b: [..., k, n]. Batch dims must match,
// or either operand may be rank-2 and is shared across the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last(const Tensor& x);             // swap the last two axes
Tensor permute(const Tensor& x, const std::vector<int>& axes);

// shape
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);

// reductions
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);
Tensor logsumexp(const Tensor& x, int axis);
Tensor diagonal2d(const Tensor& x);

// neural-net primitives
Tensor softmax(const Tensor& x, int axis);
Tensor l2_normalize(const Tensor& x, int axis, double eps = 1e-12);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
// layer normalization across channels (axis 1) of a [N,C,D,H,W] tensor
Tensor channel_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          double eps = 1e-5);
Tensor conv3d(const Tensor& input, const Tensor& kernel,
              const std::array<int, 3>& stride, const std::array<int, 3>& padding);
Tensor maxpool3d(const Tensor& x, const std::array<int, 3>& window,
                 const std::array<int, 3>& stride);
Tensor avgpool3d(const Tensor& x, const std::array<int, 3>& window,
                 const std::array<int, 3>& stride);
// elementwise binary cross-entropy on logits, numerically stable
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

}  // namespace mmrisk
