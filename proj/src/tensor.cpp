#include "mmrisk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace mmrisk {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

namespace {

std::vector<std::size_t> row_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * static_cast<std::size_t>(s[i + 1]);
  return st;
}

[[noreturn]] void dim_error(const std::string& what, const Shape& a, const Shape& b) {
  throw std::invalid_argument(what + ": shapes " + shape_str(a) + " and " + shape_str(b));
}

int norm_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank)
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for rank " +
                                std::to_string(rank));
  return axis;
}

// Common tape of the tracked inputs; nullptr when all are untracked.
Tape* tape_of(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (tape && t->tape() != tape) throw std::logic_error("operands recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

std::vector<int> parent_nodes(std::initializer_list<const Tensor*> ts) {
  std::vector<int> p;
  for (const Tensor* t : ts)
    if (t->tracked()) p.push_back(t->node());
  return p;
}

// Splits a shape around `axis` into [outer, lane, inner]; lanes are the
// slices every axis-wise op works on.
struct LaneView {
  std::size_t outer, lane, inner;
};

LaneView lanes(const Shape& s, int axis) {
  LaneView v{1, static_cast<std::size_t>(s[axis]), 1};
  for (int i = 0; i < axis; ++i) v.outer *= static_cast<std::size_t>(s[i]);
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i)
    v.inner *= static_cast<std::size_t>(s[i]);
  return v;
}

int ceil_div(int a, int b) {  // b > 0
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(values))) {
  if (numel(shape_) != data_->size())
    throw std::invalid_argument("tensor data length " + std::to_string(data_->size()) +
                                " does not match shape " + shape_str(shape_));
}

Tensor Tensor::zeros(Shape shape) {
  std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
  std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

int Tensor::dim(int axis) const {
  return shape_[static_cast<std::size_t>(norm_axis(axis, rank()))];
}

double Tensor::item() const {
  if (size() != 1)
    throw std::invalid_argument("item() requires a single-element tensor, got " +
                                shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = std::make_shared<std::vector<double>>(*data_);
  return t;
}

// ---- Tape ------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& t) {
  if (consumed_) throw std::logic_error("tape already consumed; reset() before reuse");
  if (!t.defined()) throw std::invalid_argument("cannot track an empty tensor");
  if (t.tracked()) {
    if (t.tape() != this) throw std::logic_error("tensor already tracked on another tape");
    return t;
  }
  const void* key = static_cast<const void*>(t.data_->data());
  auto it = leaves_.find(key);
  Tensor out = t;
  if (it != leaves_.end()) {
    out.tape_ = this;
    out.node_ = it->second;
    return out;
  }
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{t.shape(), {}, nullptr});
  grads_.emplace_back();
  leaves_.emplace(key, id);
  out.tape_ = this;
  out.node_ = id;
  return out;
}

int Tape::record(const Shape& shape, std::vector<int> parents, PullFn pull, Tensor& out) {
  if (consumed_) throw std::logic_error("tape already consumed; reset() before reuse");
  int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{shape, std::move(parents), std::move(pull)});
  grads_.emplace_back();
  out.tape_ = this;
  out.node_ = id;
  return id;
}

std::vector<double>& Tape::grad_buffer(int node) {
  auto& g = grads_[static_cast<std::size_t>(node)];
  if (g.empty()) g.assign(numel(nodes_[static_cast<std::size_t>(node)].shape), 0.0);
  return g;
}

void Tape::backward(const Tensor& root) {
  if (consumed_) throw std::logic_error("tape already consumed");
  if (!root.tracked() || root.tape() != this)
    throw std::invalid_argument("backward root is not tracked on this tape");
  if (root.size() != 1)
    throw std::invalid_argument("backward root must be scalar, got " + shape_str(root.shape()));
  grad_buffer(root.node()).assign(1, 1.0);
  for (int k = root.node(); k >= 0; --k) {
    const Node& node = nodes_[static_cast<std::size_t>(k)];
    if (!node.pull) continue;
    const auto& g = grads_[static_cast<std::size_t>(k)];
    if (g.empty()) continue;
    node.pull(*this, g);
  }
  consumed_ = true;
}

Tensor Tape::grad(const Tensor& t) const {
  if (!t.tracked() || t.tape() != this)
    throw std::invalid_argument("grad() of a tensor that is not tracked on this tape");
  const auto& g = grads_[static_cast<std::size_t>(t.node())];
  if (g.empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), g);
}

Tensor Tape::leaf_grad(const Tensor& t) const {
  if (!t.defined()) throw std::invalid_argument("leaf_grad of an empty tensor");
  auto it = leaves_.find(static_cast<const void*>(t.data_->data()));
  if (it == leaves_.end()) return Tensor::zeros(t.shape());
  const auto& g = grads_[static_cast<std::size_t>(it->second)];
  if (g.empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), g);
}

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
  leaves_.clear();
  consumed_ = false;
}

// ---- elementwise -----------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, Fwd f, Bwd dfdx) {
  std::vector<double> out(x.size());
  const double* xp = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xp[i]);
  Tensor r(x.shape(), std::move(out));
  if (Tape* tape = tape_of({&x})) {
    Tensor xin = x;
    tape->record(r.shape(), {x.node()},
                 [xin, dfdx](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(xin.node());
                   const double* xp = xin.data();
                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += dfdx(xp[i]) * g[i];
                 },
                 r);
  }
  return r;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double sigmoid_value(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

}  // namespace

Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v) {
        double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(x, &sigmoid_value, [](double v) {
    double s = sigmoid_value(v);
    return s * (1.0 - s);
  });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      x, [c](double v) { return c * v; }, [c](double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

// ---- broadcasting binary ops -----------------------------------------------

namespace {

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // zero on broadcast axes
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* what) {
  int rank = static_cast<int>(std::max(a.size(), b.size()));
  BroadcastPlan p;
  p.out.resize(rank);
  p.stride_a.assign(rank, 0);
  p.stride_b.assign(rank, 0);
  auto sa = row_strides(a), sb = row_strides(b);
  for (int i = 0; i < rank; ++i) {
    int ia = static_cast<int>(a.size()) - rank + i;
    int ib = static_cast<int>(b.size()) - rank + i;
    int da = ia >= 0 ? a[ia] : 1;
    int db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1)
      dim_error(std::string(what) + ": incompatible broadcast", a, b);
    p.out[i] = std::max(da, db);
    if (ia >= 0 && da != 1) p.stride_a[i] = sa[ia];
    if (ib >= 0 && db != 1) p.stride_b[i] = sb[ib];
  }
  return p;
}

// Walks output elements of a broadcast plan, tracking both input offsets.
template <class Fn>
void broadcast_walk(const BroadcastPlan& p, Fn fn) {
  int rank = static_cast<int>(p.out.size());
  std::size_t n = numel(p.out);
  std::vector<int> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t lin = 0; lin < n; ++lin) {
    fn(lin, ia, ib);
    for (int ax = rank - 1; ax >= 0; --ax) {
      ++idx[ax];
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (idx[ax] < p.out[ax]) break;
      idx[ax] = 0;
      ia -= p.stride_a[ax] * static_cast<std::size_t>(p.out[ax]);
      ib -= p.stride_b[ax] * static_cast<std::size_t>(p.out[ax]);
    }
  }
}

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* what) {
  BroadcastPlan p = plan_broadcast(a.shape(), b.shape(), what);
  std::vector<double> out(numel(p.out));
  const double* ap = a.data();
  const double* bp = b.data();
  switch (kind) {
    case BinKind::Add:
      broadcast_walk(p, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
        out[lin] = ap[ia] + bp[ib];
      });
      break;
    case BinKind::Sub:
      broadcast_walk(p, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
        out[lin] = ap[ia] - bp[ib];
      });
      break;
    case BinKind::Mul:
      broadcast_walk(p, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
        out[lin] = ap[ia] * bp[ib];
      });
      break;
  }
  Tensor r(p.out, std::move(out));
  Tape* tape = tape_of({&a, &b});
  if (!tape) return r;
  Tensor ta = a, tb = b;
  tape->record(r.shape(), parent_nodes({&a, &b}),
               [ta, tb, p, kind](Tape& t, const std::vector<double>& g) {
                 std::vector<double>* ga = ta.tracked() ? &t.grad_buffer(ta.node()) : nullptr;
                 std::vector<double>* gb = tb.tracked() ? &t.grad_buffer(tb.node()) : nullptr;
                 const double* ap = ta.data();
                 const double* bp = tb.data();
                 broadcast_walk(p, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
                   double gv = g[lin];
                   switch (kind) {
                     case BinKind::Add:
                       if (ga) (*ga)[ia] += gv;
                       if (gb) (*gb)[ib] += gv;
                       break;
                     case BinKind::Sub:
                       if (ga) (*ga)[ia] += gv;
                       if (gb) (*gb)[ib] -= gv;
                       break;
                     case BinKind::Mul:
                       if (ga) (*ga)[ia] += bp[ib] * gv;
                       if (gb) (*gb)[ib] += ap[ia] * gv;
                       break;
                   }
                 });
               },
               r);
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }

// ---- matmul ----------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]
void mm_accum(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::size_t>(i) * k;
    double* crow = C + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B^T where B is [n,k]
void mm_accum_bt(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::size_t>(i) * k;
    double* crow = C + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = B + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k,n] += A^T * B where A is [m,k], B is [m,n]
void mm_accum_at(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = A + static_cast<std::size_t>(i) * k;
    const double* brow = B + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      double* crow = C + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct MatmulDims {
  int m, k, n, batch;
  bool a_batched, b_batched;
  Shape out;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2)
    throw std::invalid_argument("matmul operands must have rank >= 2: " + shape_str(a) + " x " +
                                shape_str(b));
  MatmulDims d;
  d.m = a[a.size() - 2];
  d.k = a[a.size() - 1];
  int bk = b[b.size() - 2];
  d.n = b[b.size() - 1];
  if (d.k != bk) dim_error("matmul: inner dimensions differ", a, b);
  Shape batch_a(a.begin(), a.end() - 2), batch_b(b.begin(), b.end() - 2);
  if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b)
    dim_error("matmul: batch dimensions differ", a, b);
  const Shape& batch = batch_a.empty() ? batch_b : batch_a;
  d.batch = static_cast<int>(numel(batch));
  d.a_batched = !batch_a.empty();
  d.b_batched = !batch_b.empty();
  d.out = batch;
  d.out.push_back(d.m);
  d.out.push_back(d.n);
  return d;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MatmulDims d = matmul_dims(a.shape(), b.shape());
  std::vector<double> out(numel(d.out), 0.0);
  const std::size_t asz = static_cast<std::size_t>(d.m) * d.k;
  const std::size_t bsz = static_cast<std::size_t>(d.k) * d.n;
  const std::size_t osz = static_cast<std::size_t>(d.m) * d.n;
  for (int bi = 0; bi < d.batch; ++bi) {
    const double* ap = a.data() + (d.a_batched ? bi * asz : 0);
    const double* bp = b.data() + (d.b_batched ? bi * bsz : 0);
    mm_accum(ap, bp, out.data() + bi * osz, d.m, d.k, d.n);
  }
  Tensor r(d.out, std::move(out));
  Tape* tape = tape_of({&a, &b});
  if (!tape) return r;
  Tensor ta = a, tb = b;
  tape->record(r.shape(), parent_nodes({&a, &b}),
               [ta, tb, d](Tape& t, const std::vector<double>& g) {
                 const std::size_t asz = static_cast<std::size_t>(d.m) * d.k;
                 const std::size_t bsz = static_cast<std::size_t>(d.k) * d.n;
                 const std::size_t osz = static_cast<std::size_t>(d.m) * d.n;
                 if (ta.tracked()) {
                   auto& ga = t.grad_buffer(ta.node());
                   for (int bi = 0; bi < d.batch; ++bi) {
                     const double* bp = tb.data() + (d.b_batched ? bi * bsz : 0);
                     double* gap = ga.data() + (d.a_batched ? bi * asz : 0);
                     mm_accum_bt(g.data() + bi * osz, bp, gap, d.m, d.n, d.k);
                   }
                 }
                 if (tb.tracked()) {
                   auto& gb = t.grad_buffer(tb.node());
                   for (int bi = 0; bi < d.batch; ++bi) {
                     const double* ap = ta.data() + (d.a_batched ? bi * asz : 0);
                     double* gbp = gb.data() + (d.b_batched ? bi * bsz : 0);
                     mm_accum_at(ap, g.data() + bi * osz, gbp, d.m, d.k, d.n);
                   }
                 }
               },
               r);
  return r;
}

Tensor transpose_last(const Tensor& x) {
  int r = x.rank();
  if (r < 2)
    throw std::invalid_argument("transpose_last requires rank >= 2, got " + shape_str(x.shape()));
  std::vector<int> axes(r);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[r - 2], axes[r - 1]);
  return permute(x, axes);
}

Tensor permute(const Tensor& x, const std::vector<int>& axes_in) {
  int r = x.rank();
  if (static_cast<int>(axes_in.size()) != r)
    throw std::invalid_argument("permute axes count != tensor rank");
  std::vector<int> axes(r);
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) {
    axes[i] = norm_axis(axes_in[i], r);
    if (seen[axes[i]]) throw std::invalid_argument("permute axes repeat");
    seen[axes[i]] = true;
    out_shape[i] = x.shape()[axes[i]];
  }
  std::vector<std::size_t> in_str = row_strides(x.shape());
  std::vector<double> out(x.size());
  {
    std::vector<int> idx(r, 0);
    for (std::size_t lin = 0; lin < out.size(); ++lin) {
      std::size_t pos = 0;
      for (int i = 0; i < r; ++i) pos += in_str[axes[i]] * static_cast<std::size_t>(idx[i]);
      out[lin] = x.data()[pos];
      for (int ax = r - 1; ax >= 0; --ax) {
        if (++idx[ax] < out_shape[ax]) break;
        idx[ax] = 0;
      }
    }
  }
  Tensor res(out_shape, std::move(out));
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x;
    tape->record(res.shape(), {x.node()},
                 [tx, out_shape, in_str, axes, r](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   std::vector<int> idx(r, 0);
                   for (std::size_t lin = 0; lin < g.size(); ++lin) {
                     std::size_t pos = 0;
                     for (int i = 0; i < r; ++i)
                       pos += in_str[axes[i]] * static_cast<std::size_t>(idx[i]);
                     gx[pos] += g[lin];
                     for (int ax = r - 1; ax >= 0; --ax) {
                       if (++idx[ax] < out_shape[ax]) break;
                       idx[ax] = 0;
                     }
                   }
                 },
                 res);
  }
  return res;
}

// ---- shape ops ---------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    dim_error("reshape: element count mismatch", x.shape(), shape);
  Tensor r(shape, x.values());
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x;
    tape->record(r.shape(), {x.node()},
                 [tx](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                 },
                 r);
  }
  return r;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  int r = parts[0].rank();
  axis = norm_axis(axis, r);
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r) dim_error("concat: rank mismatch", parts[0].shape(), p.shape());
    for (int i = 0; i < r; ++i)
      if (i != axis && p.shape()[i] != out_shape[i])
        dim_error("concat: dimension mismatch", parts[0].shape(), p.shape());
    total += p.shape()[axis];
  }
  out_shape[axis] = total;
  LaneView v = lanes(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::size_t plane = static_cast<std::size_t>(p.shape()[axis]) * v.inner;
    const double* src = p.data();
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy(src + o * plane, src + (o + 1) * plane,
                out.data() + o * v.lane * v.inner + off);
    off += plane;
  }
  Tensor res(out_shape, std::move(out));
  Tape* tape = nullptr;
  for (const Tensor& p : parts)
    if (p.tracked()) {
      if (tape && p.tape() != tape) throw std::logic_error("operands recorded on different tapes");
      tape = p.tape();
    }
  if (tape) {
    std::vector<int> parents;
    for (const Tensor& p : parts)
      if (p.tracked()) parents.push_back(p.node());
    std::vector<Tensor> held = parts;
    tape->record(res.shape(), parents,
                 [held, v, axis](Tape& t, const std::vector<double>& g) {
                   std::size_t off = 0;
                   for (const Tensor& p : held) {
                     std::size_t plane = static_cast<std::size_t>(p.shape()[axis]) * v.inner;
                     if (p.tracked()) {
                       auto& gp = t.grad_buffer(p.node());
                       for (std::size_t o = 0; o < v.outer; ++o) {
                         const double* gsrc = g.data() + o * v.lane * v.inner + off;
                         double* gdst = gp.data() + o * plane;
                         for (std::size_t i = 0; i < plane; ++i) gdst[i] += gsrc[i];
                       }
                     }
                     off += plane;
                   }
                 },
                 res);
  }
  return res;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  int r = x.rank();
  axis = norm_axis(axis, r);
  if (start < 0 || len < 1 || start + len > x.shape()[axis])
    throw std::invalid_argument("slice [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of range for axis size " +
                                std::to_string(x.shape()[axis]));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  LaneView v = lanes(x.shape(), axis);
  std::vector<double> out(numel(out_shape));
  std::size_t seg = static_cast<std::size_t>(len) * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    const double* src = x.data() + o * v.lane * v.inner + static_cast<std::size_t>(start) * v.inner;
    std::copy(src, src + seg, out.data() + o * seg);
  }
  Tensor res(out_shape, std::move(out));
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x;
    tape->record(res.shape(), {x.node()},
                 [tx, v, start, seg](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   for (std::size_t o = 0; o < v.outer; ++o) {
                     double* dst =
                         gx.data() + o * v.lane * v.inner + static_cast<std::size_t>(start) * v.inner;
                     const double* src = g.data() + o * seg;
                     for (std::size_t i = 0; i < seg; ++i) dst[i] += src[i];
                   }
                 },
                 res);
  }
  return res;
}

// ---- reductions --------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  Tensor r = Tensor::scalar(s);
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x;
    tape->record(r.shape(), {x.node()},
                 [tx](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   for (double& v : gx) v += g[0];
                 },
                 r);
  }
  return r;
}

Tensor mean_all(const Tensor& x) {
  if (x.size() == 0) throw std::invalid_argument("mean_all of empty tensor");
  double inv = 1.0 / static_cast<double>(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  Tensor r = Tensor::scalar(s * inv);
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x;
    tape->record(r.shape(), {x.node()},
                 [tx, inv](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   for (double& v : gx) v += g[0] * inv;
                 },
                 r);
  }
  return r;
}

namespace {

Shape drop_axis(const Shape& s, int axis) {
  Shape out;
  for (int i = 0; i < static_cast<int>(s.size()); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

}  // namespace

Tensor sum_axis(const Tensor& x, int axis) {
  axis = norm_axis(axis, x.rank());
  LaneView v = lanes(x.shape(), axis);
  Shape out_shape = drop_axis(x.shape(), axis);
  std::vector<double> out(v.outer * v.inner, 0.0);
  const double* xp = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.lane; ++j)
      for (std::size_t i = 0; i < v.inner; ++i)
        out[o * v.inner + i] += xp[(o * v.lane + j) * v.inner + i];
  Tensor r(out_shape, std::move(out));
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x;
    tape->record(r.shape(), {x.node()},
                 [tx, v](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   for (std::size_t o = 0; o < v.outer; ++o)
                     for (std::size_t j = 0; j < v.lane; ++j)
                       for (std::size_t i = 0; i < v.inner; ++i)
                         gx[(o * v.lane + j) * v.inner + i] += g[o * v.inner + i];
                 },
                 r);
  }
  return r;
}

Tensor logsumexp(const Tensor& x, int axis) {
  axis = norm_axis(axis, x.rank());
  LaneView v = lanes(x.shape(), axis);
  Shape out_shape = drop_axis(x.shape(), axis);
  std::vector<double> out(v.outer * v.inner);
  const double* xp = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.lane; ++j)
        m = std::max(m, xp[(o * v.lane + j) * v.inner + i]);
      double s = 0.0;
      for (std::size_t j = 0; j < v.lane; ++j)
        s += std::exp(xp[(o * v.lane + j) * v.inner + i] - m);
      out[o * v.inner + i] = m + std::log(s);
    }
  Tensor r(out_shape, std::move(out));
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x, tout = r.detached();
    tape->record(r.shape(), {x.node()},
                 [tx, tout, v](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   const double* xp = tx.data();
                   const double* op = tout.data();
                   for (std::size_t o = 0; o < v.outer; ++o)
                     for (std::size_t i = 0; i < v.inner; ++i) {
                       double gv = g[o * v.inner + i];
                       double lse = op[o * v.inner + i];
                       for (std::size_t j = 0; j < v.lane; ++j) {
                         std::size_t p = (o * v.lane + j) * v.inner + i;
                         gx[p] += std::exp(xp[p] - lse) * gv;
                       }
                     }
                 },
                 r);
  }
  return r;
}

Tensor diagonal2d(const Tensor& x) {
  if (x.rank() != 2 || x.shape()[0] != x.shape()[1])
    throw std::invalid_argument("diagonal2d requires a square matrix, got " + shape_str(x.shape()));
  int n = x.shape()[0];
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = x[static_cast<std::size_t>(i) * n + i];
  Tensor r(Shape{n}, std::move(out));
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x;
    tape->record(r.shape(), {x.node()},
                 [tx, n](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   for (int i = 0; i < n; ++i) gx[static_cast<std::size_t>(i) * n + i] += g[i];
                 },
                 r);
  }
  return r;
}

// ---- neural-net primitives -----------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  axis = norm_axis(axis, x.rank());
  LaneView v = lanes(x.shape(), axis);
  std::vector<double> out(x.size());
  const double* xp = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.lane; ++j)
        m = std::max(m, xp[(o * v.lane + j) * v.inner + i]);
      double s = 0.0;
      for (std::size_t j = 0; j < v.lane; ++j) {
        std::size_t p = (o * v.lane + j) * v.inner + i;
        out[p] = std::exp(xp[p] - m);
        s += out[p];
      }
      for (std::size_t j = 0; j < v.lane; ++j) out[(o * v.lane + j) * v.inner + i] /= s;
    }
  Tensor r(x.shape(), std::move(out));
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x, ty = r.detached();
    tape->record(r.shape(), {x.node()},
                 [tx, ty, v](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   const double* yp = ty.data();
                   for (std::size_t o = 0; o < v.outer; ++o)
                     for (std::size_t i = 0; i < v.inner; ++i) {
                       double dot = 0.0;
                       for (std::size_t j = 0; j < v.lane; ++j) {
                         std::size_t p = (o * v.lane + j) * v.inner + i;
                         dot += g[p] * yp[p];
                       }
                       for (std::size_t j = 0; j < v.lane; ++j) {
                         std::size_t p = (o * v.lane + j) * v.inner + i;
                         gx[p] += yp[p] * (g[p] - dot);
                       }
                     }
                 },
                 r);
  }
  return r;
}

Tensor l2_normalize(const Tensor& x, int axis, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("l2_normalize eps must be positive");
  axis = norm_axis(axis, x.rank());
  LaneView v = lanes(x.shape(), axis);
  std::vector<double> out(x.size());
  std::vector<double> norms(v.outer * v.inner);
  const double* xp = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      double sq = 0.0;
      for (std::size_t j = 0; j < v.lane; ++j) {
        double xv = xp[(o * v.lane + j) * v.inner + i];
        sq += xv * xv;
      }
      double n = std::sqrt(sq);
      norms[o * v.inner + i] = n;
      double div = std::max(n, eps);
      for (std::size_t j = 0; j < v.lane; ++j) {
        std::size_t p = (o * v.lane + j) * v.inner + i;
        out[p] = xp[p] / div;
      }
    }
  Tensor r(x.shape(), std::move(out));
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x, ty = r.detached();
    tape->record(r.shape(), {x.node()},
                 [tx, ty, v, norms, eps](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   const double* yp = ty.data();
                   for (std::size_t o = 0; o < v.outer; ++o)
                     for (std::size_t i = 0; i < v.inner; ++i) {
                       double n = norms[o * v.inner + i];
                       if (n < eps) {
                         for (std::size_t j = 0; j < v.lane; ++j) {
                           std::size_t p = (o * v.lane + j) * v.inner + i;
                           gx[p] += g[p] / eps;
                         }
                         continue;
                       }
                       double dot = 0.0;
                       for (std::size_t j = 0; j < v.lane; ++j) {
                         std::size_t p = (o * v.lane + j) * v.inner + i;
                         dot += g[p] * yp[p];
                       }
                       for (std::size_t j = 0; j < v.lane; ++j) {
                         std::size_t p = (o * v.lane + j) * v.inner + i;
                         gx[p] += (g[p] - yp[p] * dot) / n;
                       }
                     }
                 },
                 r);
  }
  return r;
}

namespace {

// Shared layer-norm kernel over lanes defined by (outer, lane, inner).
// gamma/beta index follows the lane position.
Tensor layer_norm_impl(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                       const LaneView& v, const char* what) {
  if (gamma.size() != v.lane || beta.size() != v.lane)
    throw std::invalid_argument(std::string(what) + ": gamma/beta size " +
                                std::to_string(gamma.size()) + "/" + std::to_string(beta.size()) +
                                " != normalized size " + std::to_string(v.lane));
  std::size_t n_lanes = v.outer * v.inner;
  std::vector<double> out(x.size());
  std::vector<double> mus(n_lanes), invs(n_lanes);
  const double* xp = x.data();
  const double* gp = gamma.data();
  const double* bp = beta.data();
  double lane_inv = 1.0 / static_cast<double>(v.lane);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < v.lane; ++j) mu += xp[(o * v.lane + j) * v.inner + i];
      mu *= lane_inv;
      double var = 0.0;
      for (std::size_t j = 0; j < v.lane; ++j) {
        double d = xp[(o * v.lane + j) * v.inner + i] - mu;
        var += d * d;
      }
      var *= lane_inv;
      double inv = 1.0 / std::sqrt(var + eps);
      mus[o * v.inner + i] = mu;
      invs[o * v.inner + i] = inv;
      for (std::size_t j = 0; j < v.lane; ++j) {
        std::size_t p = (o * v.lane + j) * v.inner + i;
        out[p] = (xp[p] - mu) * inv * gp[j] + bp[j];
      }
    }
  Tensor r(x.shape(), std::move(out));
  Tape* tape = tape_of({&x, &gamma, &beta});
  if (!tape) return r;
  Tensor tx = x, tg = gamma, tb = beta;
  tape->record(
      r.shape(), parent_nodes({&x, &gamma, &beta}),
      [tx, tg, tb, v, mus, invs, lane_inv](Tape& t, const std::vector<double>& g) {
        const double* xp = tx.data();
        const double* gp = tg.data();
        std::vector<double>* gx = tx.tracked() ? &t.grad_buffer(tx.node()) : nullptr;
        std::vector<double>* gg = tg.tracked() ? &t.grad_buffer(tg.node()) : nullptr;
        std::vector<double>* gb = tb.tracked() ? &t.grad_buffer(tb.node()) : nullptr;
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t i = 0; i < v.inner; ++i) {
            double mu = mus[o * v.inner + i];
            double inv = invs[o * v.inner + i];
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < v.lane; ++j) {
              std::size_t p = (o * v.lane + j) * v.inner + i;
              double xhat = (xp[p] - mu) * inv;
              double dxhat = g[p] * gp[j];
              mean_dxhat += dxhat;
              mean_dxhat_xhat += dxhat * xhat;
              if (gg) (*gg)[j] += g[p] * xhat;
              if (gb) (*gb)[j] += g[p];
            }
            mean_dxhat *= lane_inv;
            mean_dxhat_xhat *= lane_inv;
            if (gx)
              for (std::size_t j = 0; j < v.lane; ++j) {
                std::size_t p = (o * v.lane + j) * v.inner + i;
                double xhat = (xp[p] - mu) * inv;
                double dxhat = g[p] * gp[j];
                (*gx)[p] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
              }
          }
      },
      r);
  return r;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm requires rank >= 1");
  LaneView v = lanes(x.shape(), x.rank() - 1);
  return layer_norm_impl(x, gamma, beta, eps, v, "layer_norm");
}

Tensor channel_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 5)
    throw std::invalid_argument("channel_layer_norm expects [N,C,D,H,W], got " +
                                shape_str(x.shape()));
  LaneView v = lanes(x.shape(), 1);
  return layer_norm_impl(x, gamma, beta, eps, v, "channel_layer_norm");
}

// ---- convolution and pooling ----------------------------------------------------

namespace {

struct Conv3dDims {
  int N, C, D, H, W;
  int F, kd, kh, kw;
  int sd, sh, sw, pd, ph, pw;
  int OD, OH, OW;
};

Conv3dDims conv3d_dims(const Shape& in, const Shape& kernel, const std::array<int, 3>& stride,
                       const std::array<int, 3>& padding) {
  if (in.size() != 5 || kernel.size() != 5)
    dim_error("conv3d: expected input [N,C,D,H,W] and kernel [F,C,kd,kh,kw]", in, kernel);
  Conv3dDims d;
  d.N = in[0]; d.C = in[1]; d.D = in[2]; d.H = in[3]; d.W = in[4];
  d.F = kernel[0];
  d.kd = kernel[2]; d.kh = kernel[3]; d.kw = kernel[4];
  if (kernel[1] != d.C) dim_error("conv3d: input channels do not match kernel channels", in, kernel);
  d.sd = stride[0]; d.sh = stride[1]; d.sw = stride[2];
  d.pd = padding[0]; d.ph = padding[1]; d.pw = padding[2];
  if (d.sd < 1 || d.sh < 1 || d.sw < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
  if (d.pd < 0 || d.ph < 0 || d.pw < 0) throw std::invalid_argument("conv3d: padding must be >= 0");
  if (d.kd > d.D + 2 * d.pd || d.kh > d.H + 2 * d.ph || d.kw > d.W + 2 * d.pw)
    dim_error("conv3d: kernel larger than padded input", in, kernel);
  d.OD = (d.D + 2 * d.pd - d.kd) / d.sd + 1;
  d.OH = (d.H + 2 * d.ph - d.kh) / d.sh + 1;
  d.OW = (d.W + 2 * d.pw - d.kw) / d.sw + 1;
  return d;
}

struct KernelRange {
  int lo, hi;  // inclusive output range with in-bounds input
};

KernelRange out_range(int pad, int koff, int stride, int in_dim, int out_dim) {
  KernelRange r;
  r.lo = std::max(0, ceil_div(pad - koff, stride));
  r.hi = std::min(out_dim - 1, (in_dim - 1 + pad - koff) / stride);
  return r;
}

void conv3d_forward(const Conv3dDims& d, const double* in, const double* ker, double* out) {
  const std::size_t in_c = static_cast<std::size_t>(d.D) * d.H * d.W;
  const std::size_t out_f = static_cast<std::size_t>(d.OD) * d.OH * d.OW;
  for (int n = 0; n < d.N; ++n)
    for (int f = 0; f < d.F; ++f) {
      double* ob = out + (static_cast<std::size_t>(n) * d.F + f) * out_f;
      for (int c = 0; c < d.C; ++c) {
        const double* ib = in + (static_cast<std::size_t>(n) * d.C + c) * in_c;
        for (int zd = 0; zd < d.kd; ++zd) {
          KernelRange rd = out_range(d.pd, zd, d.sd, d.D, d.OD);
          for (int zh = 0; zh < d.kh; ++zh) {
            KernelRange rh = out_range(d.ph, zh, d.sh, d.H, d.OH);
            for (int zw = 0; zw < d.kw; ++zw) {
              KernelRange rw = out_range(d.pw, zw, d.sw, d.W, d.OW);
              double wv = ker[(((static_cast<std::size_t>(f) * d.C + c) * d.kd + zd) * d.kh + zh) *
                                  d.kw + zw];
              if (wv == 0.0) continue;
              for (int od = rd.lo; od <= rd.hi; ++od) {
                int id = od * d.sd - d.pd + zd;
                for (int oh = rh.lo; oh <= rh.hi; ++oh) {
                  int ih = oh * d.sh - d.ph + zh;
                  const double* irow = ib + (static_cast<std::size_t>(id) * d.H + ih) * d.W;
                  double* orow = ob + (static_cast<std::size_t>(od) * d.OH + oh) * d.OW;
                  if (d.sw == 1) {
                    int off = zw - d.pw;
                    for (int ow = rw.lo; ow <= rw.hi; ++ow) orow[ow] += wv * irow[ow + off];
                  } else {
                    for (int ow = rw.lo; ow <= rw.hi; ++ow)
                      orow[ow] += wv * irow[ow * d.sw - d.pw + zw];
                  }
                }
              }
            }
          }
        }
      }
    }
}

void conv3d_backward_input(const Conv3dDims& d, const double* ker, const double* gout,
                           double* gin) {
  const std::size_t in_c = static_cast<std::size_t>(d.D) * d.H * d.W;
  const std::size_t out_f = static_cast<std::size_t>(d.OD) * d.OH * d.OW;
  for (int n = 0; n < d.N; ++n)
    for (int f = 0; f < d.F; ++f) {
      const double* gb = gout + (static_cast<std::size_t>(n) * d.F + f) * out_f;
      for (int c = 0; c < d.C; ++c) {
        double* gib = gin + (static_cast<std::size_t>(n) * d.C + c) * in_c;
        for (int zd = 0; zd < d.kd; ++zd) {
          KernelRange rd = out_range(d.pd, zd, d.sd, d.D, d.OD);
          for (int zh = 0; zh < d.kh; ++zh) {
            KernelRange rh = out_range(d.ph, zh, d.sh, d.H, d.OH);
            for (int zw = 0; zw < d.kw; ++zw) {
              KernelRange rw = out_range(d.pw, zw, d.sw, d.W, d.OW);
              double wv = ker[(((static_cast<std::size_t>(f) * d.C + c) * d.kd + zd) * d.kh + zh) *
                                  d.kw + zw];
              if (wv == 0.0) continue;
              for (int od = rd.lo; od <= rd.hi; ++od) {
                int id = od * d.sd - d.pd + zd;
                for (int oh = rh.lo; oh <= rh.hi; ++oh) {
                  int ih = oh * d.sh - d.ph + zh;
                  double* girow = gib + (static_cast<std::size_t>(id) * d.H + ih) * d.W;
                  const double* grow = gb + (static_cast<std::size_t>(od) * d.OH + oh) * d.OW;
                  if (d.sw == 1) {
                    int off = zw - d.pw;
                    for (int ow = rw.lo; ow <= rw.hi; ++ow) girow[ow + off] += wv * grow[ow];
                  } else {
                    for (int ow = rw.lo; ow <= rw.hi; ++ow)
                      girow[ow * d.sw - d.pw + zw] += wv * grow[ow];
                  }
                }
              }
            }
          }
        }
      }
    }
}

void conv3d_backward_kernel(const Conv3dDims& d, const double* in, const double* gout,
                            double* gker) {
  const std::size_t in_c = static_cast<std::size_t>(d.D) * d.H * d.W;
  const std::size_t out_f = static_cast<std::size_t>(d.OD) * d.OH * d.OW;
  for (int n = 0; n < d.N; ++n)
    for (int f = 0; f < d.F; ++f) {
      const double* gb = gout + (static_cast<std::size_t>(n) * d.F + f) * out_f;
      for (int c = 0; c < d.C; ++c) {
        const double* ib = in + (static_cast<std::size_t>(n) * d.C + c) * in_c;
        for (int zd = 0; zd < d.kd; ++zd) {
          KernelRange rd = out_range(d.pd, zd, d.sd, d.D, d.OD);
          for (int zh = 0; zh < d.kh; ++zh) {
            KernelRange rh = out_range(d.ph, zh, d.sh, d.H, d.OH);
            for (int zw = 0; zw < d.kw; ++zw) {
              KernelRange rw = out_range(d.pw, zw, d.sw, d.W, d.OW);
              double acc = 0.0;
              for (int od = rd.lo; od <= rd.hi; ++od) {
                int id = od * d.sd - d.pd + zd;
                for (int oh = rh.lo; oh <= rh.hi; ++oh) {
                  int ih = oh * d.sh - d.ph + zh;
                  const double* irow = ib + (static_cast<std::size_t>(id) * d.H + ih) * d.W;
                  const double* grow = gb + (static_cast<std::size_t>(od) * d.OH + oh) * d.OW;
                  if (d.sw == 1) {
                    int off = zw - d.pw;
                    for (int ow = rw.lo; ow <= rw.hi; ++ow) acc += irow[ow + off] * grow[ow];
                  } else {
                    for (int ow = rw.lo; ow <= rw.hi; ++ow)
                      acc += irow[ow * d.sw - d.pw + zw] * grow[ow];
                  }
                }
              }
              gker[(((static_cast<std::size_t>(f) * d.C + c) * d.kd + zd) * d.kh + zh) * d.kw +
                   zw] += acc;
            }
          }
        }
      }
    }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& kernel, const std::array<int, 3>& stride,
              const std::array<int, 3>& padding) {
  Conv3dDims d = conv3d_dims(input.shape(), kernel.shape(), stride, padding);
  Shape out_shape{d.N, d.F, d.OD, d.OH, d.OW};
  std::vector<double> out(numel(out_shape), 0.0);
  conv3d_forward(d, input.data(), kernel.data(), out.data());
  Tensor r(out_shape, std::move(out));
  Tape* tape = tape_of({&input, &kernel});
  if (!tape) return r;
  Tensor tin = input, tker = kernel;
  tape->record(r.shape(), parent_nodes({&input, &kernel}),
               [tin, tker, d](Tape& t, const std::vector<double>& g) {
                 if (tin.tracked())
                   conv3d_backward_input(d, tker.data(), g.data(),
                                         t.grad_buffer(tin.node()).data());
                 if (tker.tracked())
                   conv3d_backward_kernel(d, tin.data(), g.data(),
                                          t.grad_buffer(tker.node()).data());
               },
               r);
  return r;
}

namespace {

struct Pool3dDims {
  int N, C, D, H, W;
  int wd, wh, ww, sd, sh, sw;
  int OD, OH, OW;
};

Pool3dDims pool3d_dims(const Shape& in, const std::array<int, 3>& window,
                       const std::array<int, 3>& stride, const char* what) {
  if (in.size() != 5)
    throw std::invalid_argument(std::string(what) + ": expected [N,C,D,H,W], got " + shape_str(in));
  Pool3dDims d;
  d.N = in[0]; d.C = in[1]; d.D = in[2]; d.H = in[3]; d.W = in[4];
  d.wd = window[0]; d.wh = window[1]; d.ww = window[2];
  d.sd = stride[0]; d.sh = stride[1]; d.sw = stride[2];
  if (d.wd < 1 || d.wh < 1 || d.ww < 1 || d.sd < 1 || d.sh < 1 || d.sw < 1)
    throw std::invalid_argument(std::string(what) + ": window and stride must be >= 1");
  if (d.wd > d.D || d.wh > d.H || d.ww > d.W)
    throw std::invalid_argument(std::string(what) + ": window larger than input " + shape_str(in));
  d.OD = (d.D - d.wd) / d.sd + 1;
  d.OH = (d.H - d.wh) / d.sh + 1;
  d.OW = (d.W - d.ww) / d.sw + 1;
  return d;
}

}  // namespace

Tensor maxpool3d(const Tensor& x, const std::array<int, 3>& window,
                 const std::array<int, 3>& stride) {
  Pool3dDims d = pool3d_dims(x.shape(), window, stride, "maxpool3d");
  Shape out_shape{d.N, d.C, d.OD, d.OH, d.OW};
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> argmax(out.size());
  const double* xp = x.data();
  const std::size_t plane = static_cast<std::size_t>(d.D) * d.H * d.W;
  std::size_t oi = 0;
  for (int nc = 0; nc < d.N * d.C; ++nc) {
    const double* base = xp + nc * plane;
    for (int od = 0; od < d.OD; ++od)
      for (int oh = 0; oh < d.OH; ++oh)
        for (int ow = 0; ow < d.OW; ++ow, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_at = 0;
          for (int zd = 0; zd < d.wd; ++zd)
            for (int zh = 0; zh < d.wh; ++zh)
              for (int zw = 0; zw < d.ww; ++zw) {
                std::size_t p = (static_cast<std::size_t>(od * d.sd + zd) * d.H +
                                 (oh * d.sh + zh)) * d.W + (ow * d.sw + zw);
                if (base[p] > best) {
                  best = base[p];
                  best_at = nc * plane + p;
                }
              }
          out[oi] = best;
          argmax[oi] = best_at;
        }
  }
  Tensor r(out_shape, std::move(out));
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x;
    tape->record(r.shape(), {x.node()},
                 [tx, argmax](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                 },
                 r);
  }
  return r;
}

Tensor avgpool3d(const Tensor& x, const std::array<int, 3>& window,
                 const std::array<int, 3>& stride) {
  Pool3dDims d = pool3d_dims(x.shape(), window, stride, "avgpool3d");
  Shape out_shape{d.N, d.C, d.OD, d.OH, d.OW};
  std::vector<double> out(numel(out_shape));
  const double inv = 1.0 / (static_cast<double>(d.wd) * d.wh * d.ww);
  const double* xp = x.data();
  const std::size_t plane = static_cast<std::size_t>(d.D) * d.H * d.W;
  std::size_t oi = 0;
  for (int nc = 0; nc < d.N * d.C; ++nc) {
    const double* base = xp + nc * plane;
    for (int od = 0; od < d.OD; ++od)
      for (int oh = 0; oh < d.OH; ++oh)
        for (int ow = 0; ow < d.OW; ++ow, ++oi) {
          double s = 0.0;
          for (int zd = 0; zd < d.wd; ++zd)
            for (int zh = 0; zh < d.wh; ++zh)
              for (int zw = 0; zw < d.ww; ++zw)
                s += base[(static_cast<std::size_t>(od * d.sd + zd) * d.H + (oh * d.sh + zh)) *
                              d.W + (ow * d.sw + zw)];
          out[oi] = s * inv;
        }
  }
  Tensor r(out_shape, std::move(out));
  if (Tape* tape = tape_of({&x})) {
    Tensor tx = x;
    tape->record(r.shape(), {x.node()},
                 [tx, d, inv, plane](Tape& t, const std::vector<double>& g) {
                   auto& gx = t.grad_buffer(tx.node());
                   std::size_t oi = 0;
                   for (int nc = 0; nc < d.N * d.C; ++nc) {
                     double* base = gx.data() + nc * plane;
                     for (int od = 0; od < d.OD; ++od)
                       for (int oh = 0; oh < d.OH; ++oh)
                         for (int ow = 0; ow < d.OW; ++ow, ++oi) {
                           double gv = g[oi] * inv;
                           for (int zd = 0; zd < d.wd; ++zd)
                             for (int zh = 0; zh < d.wh; ++zh)
                               for (int zw = 0; zw < d.ww; ++zw)
                                 base[(static_cast<std::size_t>(od * d.sd + zd) * d.H +
                                       (oh * d.sh + zh)) * d.W + (ow * d.sw + zw)] += gv;
                         }
                   }
                 },
                 r);
  }
  return r;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape())
    dim_error("bce_with_logits: shape mismatch", logits.shape(), targets.shape());
  std::vector<double> out(logits.size());
  const double* xp = logits.data();
  const double* tp = targets.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = xp[i];
    out[i] = std::max(x, 0.0) - x * tp[i] + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor r(logits.shape(), std::move(out));
  Tape* tape = tape_of({&logits, &targets});
  if (!tape) return r;
  Tensor tl = logits, tt = targets;
  tape->record(r.shape(), parent_nodes({&logits, &targets}),
               [tl, tt](Tape& t, const std::vector<double>& g) {
                 const double* xp = tl.data();
                 const double* tp = tt.data();
                 if (tl.tracked()) {
                   auto& gl = t.grad_buffer(tl.node());
                   for (std::size_t i = 0; i < g.size(); ++i)
                     gl[i] += (sigmoid_value(xp[i]) - tp[i]) * g[i];
                 }
                 if (tt.tracked()) {
                   auto& gt = t.grad_buffer(tt.node());
                   for (std::size_t i = 0; i < g.size(); ++i) gt[i] += -xp[i] * g[i];
                 }
               },
               r);
  return r;
}

}  // namespace mmrisk
