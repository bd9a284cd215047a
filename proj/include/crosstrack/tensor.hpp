#pragma once

// Dense tensors with reverse-mode differentiation on an explicit tape.
// The op set is exactly what the tracking head needs; no general
// broadcasting beyond scalar-tensor. Eigen backs all array math.

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <utility>

#include "crosstrack/common.hpp"

namespace crosstrack {

template <typename S>
using FlatArray = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
class Tape;
template <typename S>
struct OpResult;

// ---------------------------------------------------------------------------
// Tensor: shape + immutable flat data, optionally recorded on a tape.
// Copies are cheap (shared storage); data never mutates after creation.
// ---------------------------------------------------------------------------
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  Tensor(Shape shape, FlatArray<S> data) : shape_(std::move(shape)) {
    if (numel(shape_) != data.size())
      fail<ShapeError>("tensor data length ", data.size(), " does not match shape ",
                       shape_str(shape_));
    data_ = std::make_shared<const FlatArray<S>>(std::move(data));
  }

  static Tensor constant(const Shape& shape, S value) {
    return Tensor(shape, FlatArray<S>::Constant(numel(shape), value));
  }
  static Tensor zeros(const Shape& shape) { return constant(shape, S(0)); }
  static Tensor scalar(S value) { return constant(Shape{}, value); }
  static Tensor from(const Shape& shape, const std::vector<S>& v) {
    FlatArray<S> d(long(v.size()));
    for (size_t i = 0; i < v.size(); ++i) d[long(i)] = v[i];
    return Tensor(shape, std::move(d));
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  long size() const { return data_ ? data_->size() : 0; }
  int rank() const { return int(shape_.size()); }
  int extent(int axis) const {
    if (axis < 0 || axis >= rank()) fail<ShapeError>("axis ", axis, " out of range");
    return shape_[size_t(axis)];
  }

  const FlatArray<S>& values() const {
    if (!data_) fail<ContractError>("use of undefined tensor");
    return *data_;
  }
  S value(long i) const { return values()[i]; }
  S item() const {
    if (size() != 1) fail<ContractError>("item() requires a scalar tensor, got shape ",
                                         shape_str(shape_));
    return values()[0];
  }

  bool on_tape() const { return tape_ != nullptr; }
  Tape<S>* tape() const { return tape_; }
  int node() const { return node_; }
  bool requires_grad() const { return requires_grad_; }

  bool has_grad() const;
  const FlatArray<S>& grad() const;

 private:
  friend class Tape<S>;
  friend struct OpResult<S>;
  Shape shape_;
  std::shared_ptr<const FlatArray<S>> data_;
  Tape<S>* tape_ = nullptr;
  int node_ = -1;
  bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// Tape: ordered op records. Nodes are appended in execution order, so the
// list is topologically sorted by construction; backward() walks it once in
// reverse. One tape per thread of execution.
// ---------------------------------------------------------------------------
template <typename S>
class Tape {
 public:
  Tensor<S> leaf(const Tensor<S>& value, bool requires_grad) {
    if (value.on_tape()) fail<ContractError>("leaf: tensor is already on a tape");
    Tensor<S> t = value;
    t.tape_ = this;
    t.node_ = new_node("leaf", value.size());
    t.requires_grad_ = requires_grad;
    return t;
  }

  int new_node(const char* op, long size) {
    nodes_.push_back(NodeRec{op, size, nullptr});
    return int(nodes_.size()) - 1;
  }

  void set_backward(int id, std::function<void(Tape&)> fn) {
    nodes_[size_t(id)].backward = std::move(fn);
  }

  int num_nodes() const { return int(nodes_.size()); }

  void backward(const Tensor<S>& loss) {
    if (loss.tape() != this) fail<ContractError>("backward: loss is not on this tape");
    if (loss.size() != 1)
      fail<ContractError>("backward: loss must be scalar, got shape ",
                          shape_str(loss.shape()));
    if (backward_done_)
      fail<ContractError>("backward: already run on this tape; call reset() first");
    grads_.resize(nodes_.size());
    for (size_t i = 0; i < nodes_.size(); ++i)
      grads_[i] = FlatArray<S>::Zero(nodes_[i].size);
    grads_[size_t(loss.node())][0] = S(1);
    for (int i = loss.node(); i >= 0; --i)
      if (nodes_[size_t(i)].backward) nodes_[size_t(i)].backward(*this);
    backward_done_ = true;
  }

  void reset() {
    grads_.clear();
    backward_done_ = false;
  }

  bool backward_done() const { return backward_done_; }

  FlatArray<S>& grad_at(int id) { return grads_[size_t(id)]; }
  const FlatArray<S>& grad_at(int id) const { return grads_[size_t(id)]; }

  // Smallest observed distance to a non-differentiable point (relu/min/max/
  // clamp ties) during forward evaluation; finite-difference checks use this
  // to reject points where the twice-differentiable precondition fails.
  void note_kink(double margin) {
    if (margin < min_kink_margin_) min_kink_margin_ = margin;
  }
  double min_kink_margin() const { return min_kink_margin_; }

 private:
  struct NodeRec {
    const char* op;
    long size;
    std::function<void(Tape&)> backward;
  };
  std::vector<NodeRec> nodes_;
  std::vector<FlatArray<S>> grads_;
  bool backward_done_ = false;
  double min_kink_margin_ = std::numeric_limits<double>::infinity();
};

template <typename S>
bool Tensor<S>::has_grad() const {
  return tape_ && tape_->backward_done();
}

template <typename S>
const FlatArray<S>& Tensor<S>::grad() const {
  if (!tape_) fail<ContractError>("grad: tensor is not on a tape");
  if (!tape_->backward_done()) fail<ContractError>("grad: backward has not run");
  return tape_->grad_at(node_);
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------
namespace detail {

template <typename S>
Tape<S>* joint_tape(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.on_tape() && b.on_tape() && a.tape() != b.tape())
    fail<ContractError>("operands recorded on different tapes");
  return a.on_tape() ? a.tape() : b.tape();
}

}  // namespace detail

// Result construction needs friend access; implement as a maker class.
template <typename S>
struct OpResult {
  static Tensor<S> make(Shape shape, FlatArray<S> data, Tape<S>* tape, int node,
                        bool requires_grad) {
    Tensor<S> t(std::move(shape), std::move(data));
    t.tape_ = tape;
    t.node_ = node;
    t.requires_grad_ = requires_grad;
    return t;
  }
  static std::shared_ptr<const FlatArray<S>> storage(const Tensor<S>& t) {
    return t.data_;
  }
};

namespace detail {

// Replicates a size-1 tensor to `shape` (the only supported broadcast).
template <typename S>
Tensor<S> broadcast_scalar(const Tensor<S>& t, const Shape& shape) {
  const long n = numel(shape);
  FlatArray<S> out = FlatArray<S>::Constant(n, t.values()[0]);
  Tape<S>* tp = t.tape();
  if (!tp) return Tensor<S>(shape, std::move(out));
  int id = tp->new_node("broadcast", n);
  const int src = t.node();
  tp->set_backward(id, [id, src](Tape<S>& T) {
    T.grad_at(src)[0] += T.grad_at(id).sum();
  });
  return OpResult<S>::make(shape, std::move(out), tp, id, t.requires_grad());
}

// fwd(a,b)->FlatArray; ga/gb(g, a, b, out)->grad contribution
template <typename S, typename F, typename GA, typename GB>
Tensor<S> ew_binary(const char* op, Tensor<S> a, Tensor<S> b, F fwd, GA ga, GB gb) {
  if (!same_shape(a.shape(), b.shape())) {
    if (a.size() == 1)
      a = broadcast_scalar(a, b.shape());
    else if (b.size() == 1)
      b = broadcast_scalar(b, a.shape());
    else
      fail<ShapeError>(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                       shape_str(b.shape()));
  }
  FlatArray<S> out = fwd(a.values(), b.values());
  Tape<S>* tp = joint_tape(a, b);
  if (!tp) return Tensor<S>(a.shape(), std::move(out));
  Tensor<S> res;
  {
    int id = tp->new_node(op, out.size());
    res = OpResult<S>::make(a.shape(), std::move(out), tp, id,
                            a.requires_grad() || b.requires_grad());
    auto pa = OpResult<S>::storage(a);
    auto pb = OpResult<S>::storage(b);
    auto po = OpResult<S>::storage(res);
    const int ia = a.on_tape() ? a.node() : -1;
    const int ib = b.on_tape() ? b.node() : -1;
    tp->set_backward(id, [id, ia, ib, pa, pb, po, ga, gb](Tape<S>& T) {
      const FlatArray<S>& g = T.grad_at(id);
      if (ia >= 0) T.grad_at(ia) += ga(g, *pa, *pb, *po);
      if (ib >= 0) T.grad_at(ib) += gb(g, *pa, *pb, *po);
    });
  }
  return res;
}

// fwd(a)->FlatArray; gr(g, a, out)->grad contribution
template <typename S, typename F, typename G>
Tensor<S> ew_unary(const char* op, const Tensor<S>& a, F fwd, G gr) {
  FlatArray<S> out = fwd(a.values());
  Tape<S>* tp = a.tape();
  if (!tp) return Tensor<S>(a.shape(), std::move(out));
  int id = tp->new_node(op, out.size());
  Tensor<S> res =
      OpResult<S>::make(a.shape(), std::move(out), tp, id, a.requires_grad());
  auto pa = OpResult<S>::storage(a);
  auto po = OpResult<S>::storage(res);
  const int ia = a.node();
  tp->set_backward(id, [id, ia, pa, po, gr](Tape<S>& T) {
    T.grad_at(ia) += gr(T.grad_at(id), *pa, *po);
  });
  return res;
}

template <typename S>
void check_positive(const char* op, const FlatArray<S>& a) {
  for (long i = 0; i < a.size(); ++i)
    if (!(a[i] > S(0)))
      fail<DomainError>(op, ": non-positive value ", double(a[i]), " at index ", i);
}

template <typename S>
void check_finite(const char* op, const FlatArray<S>& a) {
  if (!a.allFinite()) {
    for (long i = 0; i < a.size(); ++i)
      if (!std::isfinite(double(a[i])))
        fail<DomainError>(op, ": non-finite result at index ", i);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::ew_binary<S>(
      "add", a, b, [](const auto& x, const auto& y) -> FlatArray<S> { return x + y; },
      [](const auto& g, const auto&, const auto&, const auto&) -> FlatArray<S> { return g; },
      [](const auto& g, const auto&, const auto&, const auto&) -> FlatArray<S> { return g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::ew_binary<S>(
      "sub", a, b, [](const auto& x, const auto& y) -> FlatArray<S> { return x - y; },
      [](const auto& g, const auto&, const auto&, const auto&) -> FlatArray<S> { return g; },
      [](const auto& g, const auto&, const auto&, const auto&) -> FlatArray<S> { return -g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::ew_binary<S>(
      "mul", a, b, [](const auto& x, const auto& y) -> FlatArray<S> { return x * y; },
      [](const auto& g, const auto&, const auto& y, const auto&) -> FlatArray<S> { return g * y; },
      [](const auto& g, const auto& x, const auto&, const auto&) -> FlatArray<S> { return g * x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  {
    const FlatArray<S>& d = b.values();
    for (long i = 0; i < d.size(); ++i)
      if (d[i] == S(0)) fail<DomainError>("div: zero denominator at index ", i);
  }
  return detail::ew_binary<S>(
      "div", a, b, [](const auto& x, const auto& y) -> FlatArray<S> { return x / y; },
      [](const auto& g, const auto&, const auto& y, const auto&) -> FlatArray<S> { return g / y; },
      [](const auto& g, const auto&, const auto& y, const auto& o) -> FlatArray<S> {
        return -(g * o / y);
      });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return detail::ew_unary<S>(
      "neg", a, [](const auto& x) -> FlatArray<S> { return -x; },
      [](const auto& g, const auto&, const auto&) -> FlatArray<S> { return -g; });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return detail::ew_unary<S>(
      "exp", a,
      [](const auto& x) -> FlatArray<S> {
        FlatArray<S> o = x.exp();
        detail::check_finite<S>("exp", o);
        return o;
      },
      [](const auto& g, const auto&, const auto& o) -> FlatArray<S> { return g * o; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  detail::check_positive<S>("log", a.values());
  return detail::ew_unary<S>(
      "log", a, [](const auto& x) -> FlatArray<S> { return x.log(); },
      [](const auto& g, const auto& x, const auto&) -> FlatArray<S> { return g / x; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return detail::ew_unary<S>(
      "sigmoid", a,
      [](const auto& x) -> FlatArray<S> {
        FlatArray<S> e = (-x.abs()).exp();
        return (x >= S(0)).select(S(1) / (S(1) + e), e / (S(1) + e));
      },
      [](const auto& g, const auto&, const auto& o) -> FlatArray<S> {
        return g * o * (S(1) - o);
      });
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& a) {
  return detail::ew_unary<S>(
      "softplus", a,
      [](const auto& x) -> FlatArray<S> {
        return x.cwiseMax(S(0)) + (-x.abs()).exp().log1p();
      },
      [](const auto& g, const auto& x, const auto&) -> FlatArray<S> {
        FlatArray<S> e = (-x.abs()).exp();
        FlatArray<S> sig = (x >= S(0)).select(S(1) / (S(1) + e), e / (S(1) + e));
        return g * sig;
      });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  if (a.tape() && a.size() > 0)
    a.tape()->note_kink(double(a.values().abs().minCoeff()));
  return detail::ew_unary<S>(
      "relu", a, [](const auto& x) -> FlatArray<S> { return x.cwiseMax(S(0)); },
      [](const auto& g, const auto& x, const auto&) -> FlatArray<S> {
        return g * (x > S(0)).template cast<S>();
      });
}

// pow with constant exponent; base must be strictly positive
template <typename S>
Tensor<S> pow(const Tensor<S>& a, S e) {
  detail::check_positive<S>("pow", a.values());
  return detail::ew_unary<S>(
      "pow", a, [e](const auto& x) -> FlatArray<S> { return x.pow(e); },
      [e](const auto& g, const auto& x, const auto&) -> FlatArray<S> {
        return g * e * x.pow(e - S(1));
      });
}

// Ties take the left operand's subgradient.
template <typename S>
Tensor<S> minimum(const Tensor<S>& a, const Tensor<S>& b) {
  Tape<S>* tp = detail::joint_tape(a, b);
  if (tp && a.size() == b.size() && a.size() > 0)
    tp->note_kink(double((a.values() - b.values()).abs().minCoeff()));
  return detail::ew_binary<S>(
      "min", a, b,
      [](const auto& x, const auto& y) -> FlatArray<S> { return x.cwiseMin(y); },
      [](const auto& g, const auto& x, const auto& y, const auto&) -> FlatArray<S> {
        return g * (x <= y).template cast<S>();
      },
      [](const auto& g, const auto& x, const auto& y, const auto&) -> FlatArray<S> {
        return g * (x > y).template cast<S>();
      });
}

template <typename S>
Tensor<S> maximum(const Tensor<S>& a, const Tensor<S>& b) {
  Tape<S>* tp = detail::joint_tape(a, b);
  if (tp && a.size() == b.size() && a.size() > 0)
    tp->note_kink(double((a.values() - b.values()).abs().minCoeff()));
  return detail::ew_binary<S>(
      "max", a, b,
      [](const auto& x, const auto& y) -> FlatArray<S> { return x.cwiseMax(y); },
      [](const auto& g, const auto& x, const auto& y, const auto&) -> FlatArray<S> {
        return g * (x >= y).template cast<S>();
      },
      [](const auto& g, const auto& x, const auto& y, const auto&) -> FlatArray<S> {
        return g * (x < y).template cast<S>();
      });
}

// Gradient passes only strictly inside (lo, hi).
template <typename S>
Tensor<S> clamp(const Tensor<S>& a, S lo, S hi) {
  if (!(lo <= hi)) fail<ContractError>("clamp: lo must be <= hi");
  if (a.tape() && a.size() > 0) {
    double m = std::numeric_limits<double>::infinity();
    const auto& x = a.values();
    for (long i = 0; i < x.size(); ++i) {
      if (std::isfinite(double(lo))) m = std::min(m, std::abs(double(x[i] - lo)));
      if (std::isfinite(double(hi))) m = std::min(m, std::abs(double(x[i] - hi)));
    }
    a.tape()->note_kink(m);
  }
  return detail::ew_unary<S>(
      "clamp", a,
      [lo, hi](const auto& x) -> FlatArray<S> { return x.cwiseMax(lo).cwiseMin(hi); },
      [lo, hi](const auto& g, const auto& x, const auto&) -> FlatArray<S> {
        return g * ((x > lo) && (x < hi)).template cast<S>();
      });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return detail::ew_unary<S>(
      "add_scalar", a, [c](const auto& x) -> FlatArray<S> { return x + c; },
      [](const auto& g, const auto&, const auto&) -> FlatArray<S> { return g; });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  return detail::ew_unary<S>(
      "mul_scalar", a, [c](const auto& x) -> FlatArray<S> { return x * c; },
      [c](const auto& g, const auto&, const auto&) -> FlatArray<S> { return g * c; });
}

template <typename S>
Tensor<S> div_scalar(const Tensor<S>& a, S c) {
  if (c == S(0)) fail<DomainError>("div_scalar: zero denominator");
  return detail::ew_unary<S>(
      "div_scalar", a, [c](const auto& x) -> FlatArray<S> { return x / c; },
      [c](const auto& g, const auto&, const auto&) -> FlatArray<S> { return g / c; });
}

template <typename S>
Tensor<S> sub_from_scalar(S c, const Tensor<S>& a) {
  return detail::ew_unary<S>(
      "sub_from_scalar", a, [c](const auto& x) -> FlatArray<S> { return c - x; },
      [](const auto& g, const auto&, const auto&) -> FlatArray<S> { return -g; });
}

// Stop-gradient: shares storage, records no tape edge.
template <typename S>
Tensor<S> detach(const Tensor<S>& a) {
  return Tensor<S>(a.shape(), FlatArray<S>(a.values()));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, const Shape& shape) {
  if (numel(shape) != a.size())
    fail<ShapeError>("reshape: cannot view ", shape_str(a.shape()), " as ",
                     shape_str(shape));
  FlatArray<S> out = a.values();
  Tape<S>* tp = a.tape();
  if (!tp) return Tensor<S>(shape, std::move(out));
  int id = tp->new_node("reshape", out.size());
  Tensor<S> res = OpResult<S>::make(shape, std::move(out), tp, id, a.requires_grad());
  const int ia = a.node();
  tp->set_backward(id, [id, ia](Tape<S>& T) { T.grad_at(ia) += T.grad_at(id); });
  return res;
}

// [C,H,W] -> [H,W] view of channel c
template <typename S>
Tensor<S> slice_channel(const Tensor<S>& a, int c) {
  if (a.rank() != 3) fail<ShapeError>("slice_channel: expected rank-3, got ",
                                      shape_str(a.shape()));
  const int C = a.extent(0), H = a.extent(1), W = a.extent(2);
  if (c < 0 || c >= C) fail<ShapeError>("slice_channel: channel ", c, " out of [0,", C, ")");
  const long plane = long(H) * W;
  FlatArray<S> out = a.values().segment(long(c) * plane, plane);
  Tape<S>* tp = a.tape();
  if (!tp) return Tensor<S>(Shape{H, W}, std::move(out));
  int id = tp->new_node("slice_channel", plane);
  Tensor<S> res =
      OpResult<S>::make(Shape{H, W}, std::move(out), tp, id, a.requires_grad());
  const int ia = a.node();
  tp->set_backward(id, [id, ia, c, plane](Tape<S>& T) {
    T.grad_at(ia).segment(long(c) * plane, plane) += T.grad_at(id);
  });
  return res;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

// Maps each input flat index to the flat index of the reduced output.
struct ReducePlan {
  Shape out_shape;
  std::vector<long> out_index;  // per input element
  long out_size = 1;
};

inline ReducePlan reduce_plan(const Shape& in, const std::vector<int>& axes) {
  const int r = int(in.size());
  std::vector<bool> reduced(size_t(r), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= r) fail<ShapeError>("reduce: axis ", ax, " out of range for rank ", r);
    if (reduced[size_t(ax)]) fail<ShapeError>("reduce: duplicate axis ", ax);
    reduced[size_t(ax)] = true;
  }
  ReducePlan plan;
  for (int d = 0; d < r; ++d)
    if (!reduced[size_t(d)]) plan.out_shape.push_back(in[size_t(d)]);
  plan.out_size = numel(plan.out_shape);
  const long n = numel(in);
  plan.out_index.resize(size_t(n));
  std::vector<long> idx(size_t(r), 0);
  for (long flat = 0; flat < n; ++flat) {
    long rem = flat;
    for (int d = r - 1; d >= 0; --d) {
      idx[size_t(d)] = rem % in[size_t(d)];
      rem /= in[size_t(d)];
    }
    long o = 0;
    for (int d = 0; d < r; ++d)
      if (!reduced[size_t(d)]) o = o * in[size_t(d)] + idx[size_t(d)];
    plan.out_index[size_t(flat)] = o;
  }
  return plan;
}

template <typename S>
Tensor<S> reduce_sum_impl(const Tensor<S>& a, const std::vector<int>& axes, bool take_mean) {
  if (a.size() == 0) fail<ContractError>("reduce: empty input");
  const char* op = take_mean ? "mean" : "sum";
  Shape out_shape;
  FlatArray<S> out;
  long count = 1;
  std::shared_ptr<const std::vector<long>> map;  // null for full reduction
  if (axes.empty() || long(axes.size()) == long(a.rank())) {
    // full reduction when no axes given or all axes listed
    bool full = axes.empty();
    if (!full) {
      auto plan = reduce_plan(a.shape(), axes);
      full = plan.out_size == 1;
      if (!full) fail<ShapeError>("reduce: inconsistent axes");
    }
    out_shape = Shape{};
    out = FlatArray<S>::Constant(1, a.values().sum());
    count = a.size();
  } else {
    auto plan = reduce_plan(a.shape(), axes);
    out_shape = plan.out_shape;
    out = FlatArray<S>::Zero(plan.out_size);
    const auto& x = a.values();
    for (long i = 0; i < x.size(); ++i) out[plan.out_index[size_t(i)]] += x[i];
    count = a.size() / std::max<long>(1, plan.out_size);
    map = std::make_shared<const std::vector<long>>(std::move(plan.out_index));
  }
  if (take_mean) out /= S(count);
  Tape<S>* tp = a.tape();
  if (!tp) return Tensor<S>(out_shape, std::move(out));
  int id = tp->new_node(op, out.size());
  Tensor<S> res =
      OpResult<S>::make(out_shape, std::move(out), tp, id, a.requires_grad());
  const int ia = a.node();
  const S scale = take_mean ? S(1) / S(count) : S(1);
  tp->set_backward(id, [id, ia, map, scale](Tape<S>& T) {
    const FlatArray<S>& g = T.grad_at(id);
    FlatArray<S>& ga = T.grad_at(ia);
    if (!map) {
      ga += g[0] * scale;
    } else {
      const auto& m = *map;
      for (long i = 0; i < ga.size(); ++i) ga[i] += g[m[size_t(i)]] * scale;
    }
  });
  return res;
}

}  // namespace detail

template <typename S>
Tensor<S> sum(const Tensor<S>& a, const std::vector<int>& axes = {}) {
  return detail::reduce_sum_impl(a, axes, false);
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a, const std::vector<int>& axes = {}) {
  return detail::reduce_sum_impl(a, axes, true);
}

// Full reduction; ties resolve to the lowest flat index.
template <typename S>
std::pair<Tensor<S>, long> max_with_argmax(const Tensor<S>& a) {
  if (a.size() == 0) fail<ContractError>("max_with_argmax: empty input");
  const auto& x = a.values();
  long best = 0;
  for (long i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = i;
  if (a.tape() && a.size() > 1) {
    // margin to the runner-up decides differentiability of the selection
    S second = -std::numeric_limits<S>::infinity();
    for (long i = 0; i < x.size(); ++i)
      if (i != best && x[i] > second) second = x[i];
    a.tape()->note_kink(double(x[best] - second));
  }
  FlatArray<S> out = FlatArray<S>::Constant(1, x[best]);
  Tape<S>* tp = a.tape();
  if (!tp) return {Tensor<S>(Shape{}, std::move(out)), best};
  int id = tp->new_node("max", 1);
  Tensor<S> res = OpResult<S>::make(Shape{}, std::move(out), tp, id, a.requires_grad());
  const int ia = a.node();
  tp->set_backward(id, [id, ia, best](Tape<S>& T) {
    T.grad_at(ia)[best] += T.grad_at(id)[0];
  });
  return {res, best};
}

// ---------------------------------------------------------------------------
// conv2d: input [Cin,H,W] * kernel [Cout,Cin,k,k] (+bias [Cout]) -> [Cout,H',W']
// H' = floor((H + 2*pad - k)/stride) + 1. im2col + GEMM on both passes.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel,
                 const std::optional<Tensor<S>>& bias, int stride, int pad) {
  if (input.rank() != 3)
    fail<ShapeError>("conv2d: input must be [C,H,W], got ", shape_str(input.shape()));
  if (kernel.rank() != 4)
    fail<ShapeError>("conv2d: kernel must be [Cout,Cin,k,k], got ",
                     shape_str(kernel.shape()));
  const int Cin = input.extent(0), H = input.extent(1), W = input.extent(2);
  const int Cout = kernel.extent(0), k = kernel.extent(2);
  if (kernel.extent(1) != Cin)
    fail<ShapeError>("conv2d: kernel input-channel axis ", kernel.extent(1),
                     " does not match input channel axis ", Cin);
  if (kernel.extent(3) != k)
    fail<ShapeError>("conv2d: kernel must be square, got ", shape_str(kernel.shape()));
  if (k % 2 == 0) fail<ShapeError>("conv2d: kernel size ", k, " must be odd");
  if (stride < 1) fail<ContractError>("conv2d: stride must be >= 1");
  if (pad < 0) fail<ContractError>("conv2d: pad must be >= 0");
  if (H + 2 * pad < k || W + 2 * pad < k)
    fail<ShapeError>("conv2d: padded input ", H + 2 * pad, "x", W + 2 * pad,
                     " smaller than kernel ", k);
  if (bias) {
    if (bias->rank() != 1 || bias->extent(0) != Cout)
      fail<ShapeError>("conv2d: bias must be [Cout]=", Cout, ", got ",
                       shape_str(bias->shape()));
  }
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  const long rows = long(Cin) * k * k;
  const long cols_n = long(Ho) * Wo;

  auto im2col = std::make_shared<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>>(rows, cols_n);
  {
    auto& M = *im2col;
    const auto& x = input.values();
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        const long col = long(oy) * Wo + ox;
        long row = 0;
        for (int ci = 0; ci < Cin; ++ci) {
          const long base = long(ci) * H * W;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride + ky - pad;
            for (int kx = 0; kx < k; ++kx, ++row) {
              const int ix = ox * stride + kx - pad;
              M(row, col) = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                ? x[base + long(iy) * W + ix]
                                : S(0);
            }
          }
        }
      }
  }

  FlatArray<S> out(long(Cout) * cols_n);
  {
    Eigen::Map<MatrixRM<S>> O(out.data(), Cout, cols_n);
    Eigen::Map<const MatrixRM<S>> K(kernel.values().data(), Cout, rows);
    O.noalias() = K * (*im2col);
    if (bias) {
      const auto& bv = bias->values();
      for (int co = 0; co < Cout; ++co) O.row(co).array() += bv[co];
    }
  }

  Tape<S>* tp = input.tape();
  for (const Tensor<S>* t : {&kernel, bias ? &*bias : nullptr}) {
    if (t && t->on_tape()) {
      if (tp && t->tape() != tp) fail<ContractError>("conv2d: operands on different tapes");
      tp = t->tape();
    }
  }
  Shape out_shape{Cout, Ho, Wo};
  if (!tp) return Tensor<S>(out_shape, std::move(out));

  int id = tp->new_node("conv2d", out.size());
  bool rg = input.requires_grad() || kernel.requires_grad() ||
            (bias && bias->requires_grad());
  Tensor<S> res = OpResult<S>::make(out_shape, std::move(out), tp, id, rg);
  auto pk = OpResult<S>::storage(kernel);
  const int ii = input.on_tape() ? input.node() : -1;
  const int ik = kernel.on_tape() ? kernel.node() : -1;
  const int ib = (bias && bias->on_tape()) ? bias->node() : -1;
  tp->set_backward(id, [id, ii, ik, ib, pk, im2col, Cin, H, W, Cout, k, Ho, Wo, stride,
                        pad, rows, cols_n](Tape<S>& T) {
    Eigen::Map<const MatrixRM<S>> G(T.grad_at(id).data(), Cout, cols_n);
    if (ik >= 0) {
      Eigen::Map<MatrixRM<S>> dK(T.grad_at(ik).data(), Cout, rows);
      dK.noalias() += G * im2col->transpose();
    }
    if (ib >= 0) {
      FlatArray<S>& db = T.grad_at(ib);
      for (int co = 0; co < Cout; ++co) db[co] += G.row(co).sum();
    }
    if (ii >= 0) {
      Eigen::Map<const MatrixRM<S>> K(pk->data(), Cout, rows);
      Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> dCols = K.transpose() * G;
      FlatArray<S>& dx = T.grad_at(ii);
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const long col = long(oy) * Wo + ox;
          long row = 0;
          for (int ci = 0; ci < Cin; ++ci) {
            const long base = long(ci) * H * W;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride + ky - pad;
              for (int kx = 0; kx < k; ++kx, ++row) {
                const int ix = ox * stride + kx - pad;
                if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                  dx[base + long(iy) * W + ix] += dCols(row, col);
              }
            }
          }
        }
    }
  });
  return res;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel, int stride, int pad) {
  return conv2d(input, kernel, std::optional<Tensor<S>>{}, stride, pad);
}

// ---------------------------------------------------------------------------
// depthwise_xcorr: search [C,Hs,Ws] x template [C,Ht,Wt] -> [C,Hs-Ht+1,Ws-Wt+1]
// Each channel correlated independently, no kernel flip.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> depthwise_xcorr(const Tensor<S>& search, const Tensor<S>& templ) {
  if (search.rank() != 3 || templ.rank() != 3)
    fail<ShapeError>("depthwise_xcorr: inputs must be [C,H,W], got ",
                     shape_str(search.shape()), " and ", shape_str(templ.shape()));
  const int C = search.extent(0), Hs = search.extent(1), Ws = search.extent(2);
  const int Ht = templ.extent(1), Wt = templ.extent(2);
  if (templ.extent(0) != C)
    fail<ShapeError>("depthwise_xcorr: channel axes differ, ", C, " vs ",
                     templ.extent(0));
  if (Ht > Hs || Wt > Ws)
    fail<ShapeError>("depthwise_xcorr: template ", Ht, "x", Wt,
                     " larger than search ", Hs, "x", Ws);
  const int Ho = Hs - Ht + 1, Wo = Ws - Wt + 1;
  FlatArray<S> out(long(C) * Ho * Wo);
  {
    const auto& sv = search.values();
    const auto& tv = templ.values();
    for (int c = 0; c < C; ++c) {
      const long sb = long(c) * Hs * Ws, tb = long(c) * Ht * Wt,
                 ob = long(c) * Ho * Wo;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          S acc = S(0);
          for (int u = 0; u < Ht; ++u)
            for (int v = 0; v < Wt; ++v)
              acc += sv[sb + long(oy + u) * Ws + (ox + v)] * tv[tb + long(u) * Wt + v];
          out[ob + long(oy) * Wo + ox] = acc;
        }
    }
  }
  Tape<S>* tp = detail::joint_tape(search, templ);
  Shape out_shape{C, Ho, Wo};
  if (!tp) return Tensor<S>(out_shape, std::move(out));
  int id = tp->new_node("depthwise_xcorr", out.size());
  Tensor<S> res = OpResult<S>::make(out_shape, std::move(out), tp, id,
                                    search.requires_grad() || templ.requires_grad());
  auto ps = OpResult<S>::storage(search);
  auto pt = OpResult<S>::storage(templ);
  const int is = search.on_tape() ? search.node() : -1;
  const int it = templ.on_tape() ? templ.node() : -1;
  tp->set_backward(id, [id, is, it, ps, pt, C, Hs, Ws, Ht, Wt, Ho, Wo](Tape<S>& T) {
    const FlatArray<S>& g = T.grad_at(id);
    for (int c = 0; c < C; ++c) {
      const long sb = long(c) * Hs * Ws, tb = long(c) * Ht * Wt, ob = long(c) * Ho * Wo;
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const S go = g[ob + long(oy) * Wo + ox];
          if (go == S(0)) continue;
          for (int u = 0; u < Ht; ++u)
            for (int v = 0; v < Wt; ++v) {
              if (is >= 0)
                T.grad_at(is)[sb + long(oy + u) * Ws + (ox + v)] +=
                    go * (*pt)[tb + long(u) * Wt + v];
              if (it >= 0)
                T.grad_at(it)[tb + long(u) * Wt + v] +=
                    go * (*ps)[sb + long(oy + u) * Ws + (ox + v)];
            }
        }
    }
  });
  return res;
}

// ---------------------------------------------------------------------------
// Operators (elementwise; scalar operands broadcast)
// ---------------------------------------------------------------------------

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S> Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }
template <typename S> Tensor<S> operator+(const Tensor<S>& a, S c) { return add_scalar(a, c); }
template <typename S> Tensor<S> operator+(S c, const Tensor<S>& a) { return add_scalar(a, c); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, S c) { return add_scalar(a, -c); }
template <typename S> Tensor<S> operator-(S c, const Tensor<S>& a) { return sub_from_scalar(c, a); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, S c) { return mul_scalar(a, c); }
template <typename S> Tensor<S> operator*(S c, const Tensor<S>& a) { return mul_scalar(a, c); }
template <typename S> Tensor<S> operator/(const Tensor<S>& a, S c) { return div_scalar(a, c); }

// ---------------------------------------------------------------------------
// Misc helpers
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> random_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  FlatArray<S> d(numel(shape));
  for (long i = 0; i < d.size(); ++i) d[i] = S(rng.uniform(lo, hi));
  return Tensor<S>(shape, std::move(d));
}

template <typename S>
bool allclose(const Tensor<S>& a, const Tensor<S>& b, double tol) {
  if (!same_shape(a.shape(), b.shape())) return false;
  return double((a.values() - b.values()).abs().maxCoeff()) <= tol;
}

using Tensor64 = Tensor<double>;
using Tensor32 = Tensor<float>;
using Tape64 = Tape<double>;
using Tape32 = Tape<float>;

}  // namespace crosstrack
