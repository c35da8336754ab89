#ifndef ANCHOR_TENSOR_HPP_
#define ANCHOR_TENSOR_HPP_

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// Dense n-d tensors over a flat row-major buffer, with reverse-mode
// autodiff recorded on an explicit tape. Eigen supplies all the math;
// everything is templated on the scalar so the same graph runs in
// float (training) or double (gradient checking).

namespace anchor {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using ArrX = Eigen::Array<S, Eigen::Dynamic, 1>;

class TensorError : public std::runtime_error {
 public:
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline Index numel_of(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

[[noreturn]] inline void fail_shapes(const char* op, const Shape& a, const Shape& b) {
  throw TensorError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                    " and " + shape_str(b));
}

template <typename S>
struct TensorNode {
  Shape shape;
  ArrX<S> value;
  ArrX<S> grad;  // empty until first accumulation
  bool requires_grad = false;
};

template <typename S>
class Tensor {
 public:
  using Node = TensorNode<S>;
  using NodePtr = std::shared_ptr<Node>;
  using Storage = ArrX<S>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = Storage::Zero(numel_of(n->shape));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S v) {
    Tensor t = zeros(std::move(shape));
    t.values().setConstant(v);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<S> data) {
    if (numel_of(shape) != static_cast<Index>(data.size()))
      throw TensorError("from_data: shape " + shape_str(shape) + " does not hold " +
                        std::to_string(data.size()) + " values");
    Tensor t = zeros(std::move(shape));
    for (Index i = 0; i < t.numel(); ++i) t.values()[i] = data[static_cast<size_t>(i)];
    return t;
  }

  static Tensor scalar(S v) { return full({}, v); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index ndim() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index i) const { return node_->shape[static_cast<size_t>(i)]; }
  Index numel() const { return node_->value.size(); }

  Storage& values() { return node_->value; }
  const Storage& values() const { return node_->value; }
  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  // Gradient accumulator; allocated (zero-filled) on first access.
  Storage& grad() {
    if (node_->grad.size() == 0) node_->grad = Storage::Zero(numel());
    return node_->grad;
  }
  const Storage& grad() const { return const_cast<Tensor*>(this)->grad(); }
  bool grad_allocated() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0); }

  S item() const {
    if (numel() != 1) throw TensorError("item: tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }

  // Row-major matrix view of the flat buffer.
  Eigen::Map<MatX<S>> mat(Index rows, Index cols) {
    check_view(rows, cols);
    return Eigen::Map<MatX<S>>(data(), rows, cols);
  }
  Eigen::Map<const MatX<S>> mat(Index rows, Index cols) const {
    check_view(rows, cols);
    return Eigen::Map<const MatX<S>>(data(), rows, cols);
  }

  const NodePtr& node() const { return node_; }

 private:
  void check_view(Index rows, Index cols) const {
    if (rows * cols != numel())
      throw TensorError("mat: view " + std::to_string(rows) + "x" + std::to_string(cols) +
                        " does not cover " + shape_str(shape()));
  }
  NodePtr node_;
};

// Ordered record of executed differentiable ops. Constructing a tape makes
// it the active tape for the current thread (RAII); ops record themselves
// onto the active tape whenever an input requires grad. Replaying in
// reverse execution order is a reverse topological traversal, so each
// record runs exactly once per backward pass.
template <typename S>
class GradTape {
 public:
  struct Record {
    const char* op;
    std::vector<typename Tensor<S>::NodePtr> inputs;
    typename Tensor<S>::NodePtr output;
    std::function<void()> backward;
  };

  GradTape() { stack().push_back(this); }
  ~GradTape() { stack().pop_back(); }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* current() { return stack().empty() ? nullptr : stack().back(); }
  static void push_inactive() { stack().push_back(nullptr); }
  static void pop_inactive() { stack().pop_back(); }

  void record(const char* op, std::vector<typename Tensor<S>::NodePtr> inputs,
              typename Tensor<S>::NodePtr output, std::function<void()> fn) {
    records_.push_back(Record{op, std::move(inputs), std::move(output), std::move(fn)});
  }

  size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // requires_grad tensor reachable from `loss`. May be called more than
  // once; gradients are additive.
  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw TensorError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    Tensor<S> l = loss;
    l.grad()[0] += S(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.size() == 0) continue;  // nothing flowed here
      it->backward();
    }
  }

 private:
  static std::vector<GradTape*>& stack() {
    thread_local std::vector<GradTape*> s;
    return s;
  }
  std::vector<Record> records_;
};

// Scoped suppression of recording (used by inference / finite differencing).
template <typename S>
class NoGrad {
 public:
  NoGrad() { GradTape<S>::push_inactive(); }
  ~NoGrad() { GradTape<S>::pop_inactive(); }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

// Convenience form of GradTape::backward against the active tape.
template <typename S>
void backward(const Tensor<S>& loss) {
  auto* tape = GradTape<S>::current();
  if (tape == nullptr) throw TensorError("backward: no active gradient tape");
  tape->backward(loss);
}

namespace detail {

template <typename S>
typename Tensor<S>::Storage& acc(const typename Tensor<S>::NodePtr& n) {
  if (n->grad.size() == 0) n->grad = ArrX<S>::Zero(n->value.size());
  return n->grad;
}

template <typename S, typename F>
void tape_record(const char* op, std::initializer_list<Tensor<S>> inputs, Tensor<S>& out,
                 F&& fn) {
  auto* tape = GradTape<S>::current();
  if (tape == nullptr) return;
  bool needed = false;
  std::vector<typename Tensor<S>::NodePtr> in_nodes;
  in_nodes.reserve(inputs.size());
  for (const auto& t : inputs) {
    needed = needed || t.requires_grad();
    in_nodes.push_back(t.node());
  }
  if (!needed) return;
  out.set_requires_grad(true);
  tape->record(op, std::move(in_nodes), out.node(), std::function<void()>(std::forward<F>(fn)));
}

inline Index outer_extent(const Shape& s, Index axis) {
  Index n = 1;
  for (Index i = 0; i < axis; ++i) n *= s[static_cast<size_t>(i)];
  return n;
}
inline Index inner_extent(const Shape& s, Index axis) {
  Index n = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and linear ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) fail_shapes("add", a.shape(), b.shape());
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.values() = a.values() + b.values();
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::tape_record<S>("add", {a, b}, out, [an, bn, on] {
    if (an->requires_grad) detail::acc<S>(an) += on->grad;
    if (bn->requires_grad) detail::acc<S>(bn) += on->grad;
  });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) fail_shapes("sub", a.shape(), b.shape());
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.values() = a.values() - b.values();
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::tape_record<S>("sub", {a, b}, out, [an, bn, on] {
    if (an->requires_grad) detail::acc<S>(an) += on->grad;
    if (bn->requires_grad) detail::acc<S>(bn) -= on->grad;
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) fail_shapes("mul", a.shape(), b.shape());
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  out.values() = a.values() * b.values();
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::tape_record<S>("mul", {a, b}, out, [an, bn, on] {
    if (an->requires_grad) detail::acc<S>(an) += on->grad * bn->value;
    if (bn->requires_grad) detail::acc<S>(bn) += on->grad * an->value;
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.values() = x.values() * c;
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("scale", {x}, out, [xn, on, c] {
    detail::acc<S>(xn) += on->grad * c;
  });
  return out;
}

// b broadcasts over the leading axes of a; b.shape must be a suffix of a.shape.
template <typename S>
Tensor<S> add_broadcast(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() ||
      !std::equal(bs.begin(), bs.end(), as.end() - static_cast<ptrdiff_t>(bs.size())))
    fail_shapes("add_broadcast", as, bs);
  const Index chunk = numel_of(bs);
  const Index reps = a.numel() / chunk;
  Tensor<S> out = Tensor<S>::zeros(as);
  for (Index r = 0; r < reps; ++r)
    out.values().segment(r * chunk, chunk) =
        a.values().segment(r * chunk, chunk) + b.values();
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::tape_record<S>("add_broadcast", {a, b}, out, [an, bn, on, reps, chunk] {
    if (an->requires_grad) detail::acc<S>(an) += on->grad;
    if (bn->requires_grad) {
      auto& gb = detail::acc<S>(bn);
      for (Index r = 0; r < reps; ++r) gb += on->grad.segment(r * chunk, chunk);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  if (numel_of(new_shape) != x.numel()) fail_shapes("reshape", x.shape(), new_shape);
  Tensor<S> out = Tensor<S>::zeros(std::move(new_shape));
  out.values() = x.values();
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("reshape", {x}, out, [xn, on] {
    detail::acc<S>(xn) += on->grad;
  });
  return out;
}

namespace detail {

// dst[perm-index] = src[index]; `axes[j]` names the source axis that becomes
// output axis j. With accumulate=true the copy adds instead of assigns
// (used for the inverse pass).
template <typename S>
void permute_loop(const S* src, S* dst, const Shape& in_shape, const std::vector<Index>& axes,
                  bool accumulate) {
  const size_t nd = in_shape.size();
  Shape out_shape(nd);
  for (size_t j = 0; j < nd; ++j) out_shape[j] = in_shape[static_cast<size_t>(axes[j])];
  std::vector<Index> in_strides(nd, 1), out_strides(nd, 1);
  for (size_t j = nd; j-- > 1;) in_strides[j - 1] = in_strides[j] * in_shape[j];
  for (size_t j = nd; j-- > 1;) out_strides[j - 1] = out_strides[j] * out_shape[j];
  const Index total = numel_of(in_shape);
  std::vector<Index> idx(nd, 0);  // multi-index in output space
  for (Index o = 0; o < total; ++o) {
    Index in_linear = 0;
    for (size_t j = 0; j < nd; ++j)
      in_linear += idx[j] * in_strides[static_cast<size_t>(axes[j])];
    if (accumulate)
      dst[in_linear] += src[o];
    else
      dst[o] = src[in_linear];
    for (size_t j = nd; j-- > 0;) {
      if (++idx[j] < out_shape[j]) break;
      idx[j] = 0;
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> permute(const Tensor<S>& x, std::vector<Index> axes) {
  const size_t nd = x.shape().size();
  if (axes.size() != nd) throw TensorError("permute: axes rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(nd, false);
  Shape out_shape(nd);
  for (size_t j = 0; j < nd; ++j) {
    if (axes[j] < 0 || axes[j] >= static_cast<Index>(nd) || seen[static_cast<size_t>(axes[j])])
      throw TensorError("permute: invalid axis list");
    seen[static_cast<size_t>(axes[j])] = true;
    out_shape[j] = x.dim(axes[j]);
  }
  Tensor<S> out = Tensor<S>::zeros(std::move(out_shape));
  detail::permute_loop<S>(x.data(), out.data(), x.shape(), axes, false);
  auto xn = x.node(), on = out.node();
  Shape in_shape = x.shape();
  detail::tape_record<S>("permute", {x}, out, [xn, on, in_shape, axes] {
    auto& gx = detail::acc<S>(xn);
    detail::permute_loop<S>(on->grad.data(), gx.data(), in_shape, axes, true);
  });
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.ndim() != 2) throw TensorError("transpose: expected 2-d tensor, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
  if (x.ndim() != 3) throw TensorError("transpose_last2: expected 3-d tensor, got " + shape_str(x.shape()));
  return permute(x, {0, 2, 1});
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis) {
  if (parts.empty()) throw TensorError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis < 0 || axis >= static_cast<Index>(ref.size()))
    throw TensorError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[static_cast<size_t>(axis)] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != ref.size()) fail_shapes("concat", ref, s);
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<Index>(i) != axis && s[i] != ref[i]) fail_shapes("concat", ref, s);
    out_shape[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
  }
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const Index outer = detail::outer_extent(ref, axis);
  const Index inner = detail::inner_extent(ref, axis);
  const Index out_axis = out_shape[static_cast<size_t>(axis)];
  Index offset = 0;
  for (const auto& p : parts) {
    const Index ax = p.dim(axis);
    for (Index o = 0; o < outer; ++o)
      out.values().segment((o * out_axis + offset) * inner, ax * inner) =
          p.values().segment(o * ax * inner, ax * inner);
    offset += ax;
  }
  bool any_rg = false;
  for (const auto& p : parts) any_rg = any_rg || p.requires_grad();
  auto* tape = GradTape<S>::current();
  if (tape && any_rg) {
    std::vector<typename Tensor<S>::NodePtr> in_nodes;
    for (const auto& p : parts) in_nodes.push_back(p.node());
    auto on = out.node();
    out.set_requires_grad(true);
    tape->record("concat", in_nodes, on, [in_nodes, on, outer, inner, out_axis] {
      Index off = 0;
      for (const auto& n : in_nodes) {
        const Index ax = n->value.size() / (outer * inner);
        if (n->requires_grad) {
          auto& g = detail::acc<S>(n);
          for (Index o = 0; o < outer; ++o)
            g.segment(o * ax * inner, ax * inner) +=
                on->grad.segment((o * out_axis + off) * inner, ax * inner);
        }
        off += ax;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, Index axis, Index start, Index len) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= x.ndim() || start < 0 || len < 0 || start + len > x.dim(axis))
    throw TensorError("slice: range [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") invalid for axis " +
                      std::to_string(axis) + " of " + shape_str(s));
  Shape out_shape = s;
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const Index outer = detail::outer_extent(s, axis);
  const Index inner = detail::inner_extent(s, axis);
  const Index in_axis = x.dim(axis);
  for (Index o = 0; o < outer; ++o)
    out.values().segment(o * len * inner, len * inner) =
        x.values().segment((o * in_axis + start) * inner, len * inner);
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("slice", {x}, out, [xn, on, outer, inner, in_axis, start, len] {
    auto& gx = detail::acc<S>(xn);
    for (Index o = 0; o < outer; ++o)
      gx.segment((o * in_axis + start) * inner, len * inner) +=
          on->grad.segment(o * len * inner, len * inner);
  });
  return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    fail_shapes("matmul", a.shape(), b.shape());
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  out.mat(m, n).noalias() = a.mat(m, k) * b.mat(k, n);
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::tape_record<S>("matmul", {a, b}, out, [an, bn, on, m, k, n] {
    Eigen::Map<const MatX<S>> g(on->grad.data(), m, n);
    Eigen::Map<const MatX<S>> av(an->value.data(), m, k);
    Eigen::Map<const MatX<S>> bv(bn->value.data(), k, n);
    if (an->requires_grad) {
      auto& ga = detail::acc<S>(an);
      Eigen::Map<MatX<S>>(ga.data(), m, k).noalias() += g * bv.transpose();
    }
    if (bn->requires_grad) {
      auto& gb = detail::acc<S>(bn);
      Eigen::Map<MatX<S>>(gb.data(), k, n).noalias() += av.transpose() * g;
    }
  });
  return out;
}

template <typename S>
Tensor<S> matmul_batched(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    fail_shapes("matmul_batched", a.shape(), b.shape());
  const Index nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<S> out = Tensor<S>::zeros({nb, m, n});
  for (Index i = 0; i < nb; ++i) {
    Eigen::Map<const MatX<S>> ai(a.data() + i * m * k, m, k);
    Eigen::Map<const MatX<S>> bi(b.data() + i * k * n, k, n);
    Eigen::Map<MatX<S>>(out.data() + i * m * n, m, n).noalias() = ai * bi;
  }
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::tape_record<S>("matmul_batched", {a, b}, out, [an, bn, on, nb, m, k, n] {
    for (Index i = 0; i < nb; ++i) {
      Eigen::Map<const MatX<S>> g(on->grad.data() + i * m * n, m, n);
      Eigen::Map<const MatX<S>> ai(an->value.data() + i * m * k, m, k);
      Eigen::Map<const MatX<S>> bi(bn->value.data() + i * k * n, k, n);
      if (an->requires_grad) {
        auto& ga = detail::acc<S>(an);
        Eigen::Map<MatX<S>>(ga.data() + i * m * k, m, k).noalias() += g * bi.transpose();
      }
      if (bn->requires_grad) {
        auto& gb = detail::acc<S>(bn);
        Eigen::Map<MatX<S>>(gb.data() + i * k * n, k, n).noalias() += ai.transpose() * g;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// gathers
// ---------------------------------------------------------------------------

// Embedding lookup: out.row(i) = table.row(ids[i]).
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, std::span<const int32_t> ids) {
  if (table.ndim() != 2) throw TensorError("gather_rows: table must be 2-d, got " + shape_str(table.shape()));
  const Index v = table.dim(0), d = table.dim(1);
  const Index n = static_cast<Index>(ids.size());
  for (int32_t id : ids)
    if (id < 0 || id >= v)
      throw TensorError("gather_rows: id " + std::to_string(id) + " outside table " +
                        shape_str(table.shape()));
  Tensor<S> out = Tensor<S>::zeros({n, d});
  for (Index i = 0; i < n; ++i)
    out.values().segment(i * d, d) = table.values().segment(Index(ids[static_cast<size_t>(i)]) * d, d);
  std::vector<int32_t> ids_copy(ids.begin(), ids.end());
  auto tn = table.node(), on = out.node();
  detail::tape_record<S>("gather_rows", {table}, out, [tn, on, ids_copy, d] {
    auto& gt = detail::acc<S>(tn);
    for (size_t i = 0; i < ids_copy.size(); ++i)
      gt.segment(Index(ids_copy[i]) * d, d) += on->grad.segment(Index(i) * d, d);
  });
  return out;
}

// Per-sequence pooling: out.row(b) = x[b, steps[b], :].
template <typename S>
Tensor<S> take_timestep(const Tensor<S>& x, std::span<const Index> steps) {
  if (x.ndim() != 3 || static_cast<Index>(steps.size()) != x.dim(0))
    throw TensorError("take_timestep: need [B,T,D] and B indices, got " + shape_str(x.shape()));
  const Index bsz = x.dim(0), t = x.dim(1), d = x.dim(2);
  for (Index s : steps)
    if (s < 0 || s >= t) throw TensorError("take_timestep: step index out of range");
  Tensor<S> out = Tensor<S>::zeros({bsz, d});
  for (Index b = 0; b < bsz; ++b)
    out.values().segment(b * d, d) =
        x.values().segment((b * t + steps[static_cast<size_t>(b)]) * d, d);
  std::vector<Index> steps_copy(steps.begin(), steps.end());
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("take_timestep", {x}, out, [xn, on, steps_copy, t, d] {
    auto& gx = detail::acc<S>(xn);
    for (size_t b = 0; b < steps_copy.size(); ++b)
      gx.segment((Index(b) * t + steps_copy[b]) * d, d) += on->grad.segment(Index(b) * d, d);
  });
  return out;
}

// out[b] = x[b, cols[b]].
template <typename S>
Tensor<S> gather_cols(const Tensor<S>& x, std::span<const Index> cols) {
  if (x.ndim() != 2 || static_cast<Index>(cols.size()) != x.dim(0))
    throw TensorError("gather_cols: need [B,N] and B indices, got " + shape_str(x.shape()));
  const Index bsz = x.dim(0), n = x.dim(1);
  for (Index c : cols)
    if (c < 0 || c >= n) throw TensorError("gather_cols: column index out of range");
  Tensor<S> out = Tensor<S>::zeros({bsz});
  for (Index b = 0; b < bsz; ++b) out.values()[b] = x.values()[b * n + cols[static_cast<size_t>(b)]];
  std::vector<Index> cols_copy(cols.begin(), cols.end());
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("gather_cols", {x}, out, [xn, on, cols_copy, n] {
    auto& gx = detail::acc<S>(xn);
    for (size_t b = 0; b < cols_copy.size(); ++b)
      gx[Index(b) * n + cols_copy[b]] += on->grad[Index(b)];
  });
  return out;
}

// ---------------------------------------------------------------------------
// nonlinearities and reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  if (x.ndim() < 1) throw TensorError("softmax_lastdim: scalar input");
  const Index n = x.dim(x.ndim() - 1);
  const Index rows = x.numel() / n;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (Index r = 0; r < rows; ++r) {
    auto xi = x.values().segment(r * n, n);
    const S m = xi.maxCoeff();
    ArrX<S> e = (xi - m).exp();
    out.values().segment(r * n, n) = e / e.sum();
  }
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("softmax_lastdim", {x}, out, [xn, on, rows, n] {
    auto& gx = detail::acc<S>(xn);
    for (Index r = 0; r < rows; ++r) {
      auto y = on->value.segment(r * n, n);
      auto g = on->grad.segment(r * n, n);
      const S dot = (g * y).sum();
      gx.segment(r * n, n) += y * (g - dot);
    }
  });
  return out;
}

// Reduces the last axis; a 1-d input yields a rank-0 scalar.
template <typename S>
Tensor<S> logsumexp_lastdim(const Tensor<S>& x) {
  if (x.ndim() < 1) throw TensorError("logsumexp_lastdim: scalar input");
  const Index n = x.dim(x.ndim() - 1);
  const Index rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  for (Index r = 0; r < rows; ++r) {
    auto xi = x.values().segment(r * n, n);
    const S m = xi.maxCoeff();
    out.values()[r] = m + std::log((xi - m).exp().sum());
  }
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("logsumexp_lastdim", {x}, out, [xn, on, rows, n] {
    auto& gx = detail::acc<S>(xn);
    for (Index r = 0; r < rows; ++r) {
      auto xi = xn->value.segment(r * n, n);
      gx.segment(r * n, n) += on->grad[r] * (xi - on->value[r]).exp();
    }
  });
  return out;
}

template <typename S>
Tensor<S> rmsnorm(const Tensor<S>& x, const Tensor<S>& gain, S eps) {
  if (x.ndim() < 1 || gain.ndim() != 1 || gain.dim(0) != x.dim(x.ndim() - 1))
    fail_shapes("rmsnorm", x.shape(), gain.shape());
  const Index d = gain.dim(0);
  const Index rows = x.numel() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (Index r = 0; r < rows; ++r) {
    auto xi = x.values().segment(r * d, d);
    const S rms = std::sqrt(xi.square().mean() + eps);
    out.values().segment(r * d, d) = gain.values() * xi / rms;
  }
  auto xn = x.node(), gn = gain.node(), on = out.node();
  detail::tape_record<S>("rmsnorm", {x, gain}, out, [xn, gn, on, rows, d, eps] {
    for (Index r = 0; r < rows; ++r) {
      auto xi = xn->value.segment(r * d, d);
      auto g = on->grad.segment(r * d, d);
      const S rms = std::sqrt(xi.square().mean() + eps);
      if (xn->requires_grad) {
        auto& gx = detail::acc<S>(xn);
        const S dot = (g * gn->value * xi).sum();
        gx.segment(r * d, d) +=
            g * gn->value / rms - xi * (dot / (S(d) * rms * rms * rms));
      }
      if (gn->requires_grad) detail::acc<S>(gn) += g * xi / rms;
    }
  });
  return out;
}

// Exact (erf) GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  auto cdf = [inv_sqrt2](S v) { return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)); };
  out.values() = x.values() * x.values().unaryExpr(cdf);
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("gelu", {x}, out, [xn, on, cdf] {
    const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(EIGEN_PI));
    auto& gx = detail::acc<S>(xn);
    const auto& xv = xn->value;
    gx += on->grad * (xv.unaryExpr(cdf) +
                      xv * inv_sqrt2pi * (-xv.square() * S(0.5)).exp());
  });
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::scalar(x.values().sum());
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("sum", {x}, out, [xn, on] {
    detail::acc<S>(xn) += on->grad[0];
  });
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const S n = S(x.numel());
  Tensor<S> out = Tensor<S>::scalar(x.values().sum() / n);
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("mean", {x}, out, [xn, on, n] {
    detail::acc<S>(xn) += on->grad[0] / n;
  });
  return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean negative log-softmax probability over unmasked positions. Accepts
// [T,V] with T targets, or [B,T,V] with B*T targets; in the batched form
// each sequence is averaged over its own unmasked positions first, then
// sequences are averaged, so the loss scale is independent of both padding
// and sequence length.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int32_t> targets,
                        std::span<const uint8_t> mask) {
  if (logits.ndim() != 2 && logits.ndim() != 3)
    throw TensorError("cross_entropy: logits must be [T,V] or [B,T,V], got " +
                      shape_str(logits.shape()));
  const Index v = logits.dim(logits.ndim() - 1);
  const Index bsz = logits.ndim() == 3 ? logits.dim(0) : 1;
  const Index t = logits.ndim() == 3 ? logits.dim(1) : logits.dim(0);
  if (static_cast<Index>(targets.size()) != bsz * t || mask.size() != targets.size())
    throw TensorError("cross_entropy: expected " + std::to_string(bsz * t) +
                      " targets/mask entries, got " + std::to_string(targets.size()));

  // Per-position weights: mask / (B * unmasked-in-sequence).
  std::vector<S> weights(static_cast<size_t>(bsz * t), S(0));
  for (Index b = 0; b < bsz; ++b) {
    Index live = 0;
    for (Index i = 0; i < t; ++i) live += mask[static_cast<size_t>(b * t + i)] ? 1 : 0;
    if (live == 0) throw TensorError("cross_entropy: empty loss support");
    for (Index i = 0; i < t; ++i)
      if (mask[static_cast<size_t>(b * t + i)])
        weights[static_cast<size_t>(b * t + i)] = S(1) / (S(bsz) * S(live));
  }
  S total = S(0);
  for (Index r = 0; r < bsz * t; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    const int32_t tgt = targets[static_cast<size_t>(r)];
    if (tgt < 0 || tgt >= v)
      throw TensorError("cross_entropy: target id " + std::to_string(tgt) +
                        " outside vocab " + std::to_string(v));
    auto row = logits.values().segment(r * v, v);
    const S m = row.maxCoeff();
    const S lse = m + std::log((row - m).exp().sum());
    total += weights[static_cast<size_t>(r)] * (lse - row[tgt]);
  }
  Tensor<S> out = Tensor<S>::scalar(total);
  std::vector<int32_t> tgt_copy(targets.begin(), targets.end());
  auto ln = logits.node(), on = out.node();
  detail::tape_record<S>("cross_entropy", {logits}, out, [ln, on, tgt_copy, weights, v] {
    auto& gl = detail::acc<S>(ln);
    const S g = on->grad[0];
    const Index rows = ln->value.size() / v;
    for (Index r = 0; r < rows; ++r) {
      const S w = weights[static_cast<size_t>(r)];
      if (w == S(0)) continue;
      auto row = ln->value.segment(r * v, v);
      const S m = row.maxCoeff();
      ArrX<S> p = (row - m).exp();
      p /= p.sum();
      p[tgt_copy[static_cast<size_t>(r)]] -= S(1);
      gl.segment(r * v, v) += g * w * p;
    }
  });
  return out;
}

template <typename S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 1 || b.ndim() != 1 || a.dim(0) != b.dim(0))
    fail_shapes("cosine_similarity", a.shape(), b.shape());
  const S na = std::sqrt(a.values().square().sum());
  const S nb = std::sqrt(b.values().square().sum());
  if (na == S(0) || nb == S(0))
    throw TensorError("cosine_similarity: degenerate embedding norm");
  const S c = (a.values() * b.values()).sum() / (na * nb);
  Tensor<S> out = Tensor<S>::scalar(c);
  auto an = a.node(), bn = b.node(), on = out.node();
  detail::tape_record<S>("cosine_similarity", {a, b}, out, [an, bn, on, na, nb, c] {
    const S g = on->grad[0];
    if (an->requires_grad)
      detail::acc<S>(an) += g * (bn->value / (na * nb) - an->value * (c / (na * na)));
    if (bn->requires_grad)
      detail::acc<S>(bn) += g * (an->value / (na * nb) - bn->value * (c / (nb * nb)));
  });
  return out;
}

template <typename S>
Tensor<S> l2_normalize_rows(const Tensor<S>& x) {
  if (x.ndim() != 2) throw TensorError("l2_normalize_rows: expected [N,D], got " + shape_str(x.shape()));
  const Index n = x.dim(0), d = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> norms(static_cast<size_t>(n));
  for (Index r = 0; r < n; ++r) {
    auto xi = x.values().segment(r * d, d);
    const S nr = std::sqrt(xi.square().sum());
    if (nr == S(0)) throw TensorError("l2_normalize_rows: degenerate embedding norm");
    norms[static_cast<size_t>(r)] = nr;
    out.values().segment(r * d, d) = xi / nr;
  }
  auto xn = x.node(), on = out.node();
  detail::tape_record<S>("l2_normalize_rows", {x}, out, [xn, on, norms, d] {
    auto& gx = detail::acc<S>(xn);
    const Index n2 = static_cast<Index>(norms.size());
    for (Index r = 0; r < n2; ++r) {
      auto y = on->value.segment(r * d, d);
      auto g = on->grad.segment(r * d, d);
      const S dot = (g * y).sum();
      gx.segment(r * d, d) += (g - y * dot) / norms[static_cast<size_t>(r)];
    }
  });
  return out;
}

}  // namespace anchor

#endif  // ANCHOR_TENSOR_HPP_
