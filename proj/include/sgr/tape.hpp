// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>

#include "sgr/tensor.hpp"

namespace sgr {

class UnsupportedOrderError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Closed op set. The *Grad / *Hvp / *Vjp / *Curv kinds are the adjoints the
// engine records when differentiating with create_graph; user code builds
// graphs from the public functions below only.
enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  BiasAdd,
  SumRows,
  BroadcastRows,
  Relu,
  ReluMask,
  Add,
  Scale,
  Mul,
  SumAll,
  BroadcastScalar,
  ScaleBy,
  SoftmaxCE,
  SoftmaxCEGrad,
  SoftmaxCEHvp,
  RowNormalize,
  RowNormalizeVjp,
  RowNormalizeCurv,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::BiasAdd: return "bias_add";
    case Op::SumRows: return "sum_rows";
    case Op::BroadcastRows: return "broadcast_rows";
    case Op::Relu: return "relu";
    case Op::ReluMask: return "relu_mask";
    case Op::Add: return "add";
    case Op::Scale: return "scale";
    case Op::Mul: return "mul";
    case Op::SumAll: return "sum_all";
    case Op::BroadcastScalar: return "broadcast_scalar";
    case Op::ScaleBy: return "scale_by";
    case Op::SoftmaxCE: return "softmax_cross_entropy";
    case Op::SoftmaxCEGrad: return "softmax_cross_entropy_grad";
    case Op::SoftmaxCEHvp: return "softmax_cross_entropy_hvp";
    case Op::RowNormalize: return "l2_normalize_rows";
    case Op::RowNormalizeVjp: return "l2_normalize_rows_vjp";
    case Op::RowNormalizeCurv: return "l2_normalize_rows_curv";
  }
  return "?";
}

using Labels = std::shared_ptr<const std::vector<std::size_t>>;

struct Node {
  Op op = Op::Leaf;
  std::array<std::size_t, 3> in{};
  std::uint8_t arity = 0;
  bool trans_a = false;
  bool trans_b = false;
  bool requires_grad = false;
  double scalar = 0.0;  // Scale factor or normalization eps
  Shape target;         // output shape of broadcasts
  Labels labels;
  std::optional<Tensor> saved;  // ReluMask mask
  Tensor value;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  bool requires_grad() const;
};

namespace detail {

inline Tensor eval_node(const Node& n, const std::vector<Node>& nodes) {
  auto in = [&](int k) -> const Tensor& { return nodes[n.in[k]].value; };
  switch (n.op) {
    case Op::Leaf:
      return n.value;
    case Op::MatMul:
      return matmul(in(0), in(1), n.trans_a, n.trans_b);
    case Op::BiasAdd:
      return bias_add(in(0), in(1));
    case Op::SumRows: {
      const Tensor& x = in(0);
      require_matrix(x, "sum_rows");
      Tensor s(Shape{x.cols()});
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) s[j] += row[j];
      }
      return s;
    }
    case Op::BroadcastRows: {
      const Tensor& v = in(0);
      if (v.rank() != 1) throw DimensionError("broadcast_rows expects a vector");
      Tensor y(n.target);
      for (std::size_t r = 0; r < y.rows(); ++r) std::copy_n(v.data(), v.size(), y.data() + r * v.size());
      return y;
    }
    case Op::Relu:
      return relu(in(0));
    case Op::ReluMask:
      return hadamard(in(0), *n.saved);
    case Op::Add:
      return add(in(0), in(1));
    case Op::Scale:
      return scale(in(0), n.scalar);
    case Op::Mul:
      return hadamard(in(0), in(1));
    case Op::SumAll:
      return Tensor::scalar(sum(in(0)));
    case Op::BroadcastScalar:
      return Tensor(n.target, in(0).item());
    case Op::ScaleBy:
      return scale(in(0), in(1).item());
    case Op::SoftmaxCE:
      return Tensor::scalar(softmax_cross_entropy(in(0), *n.labels));
    case Op::SoftmaxCEGrad: {
      const Tensor& z = in(0);
      check_labels(z, *n.labels);
      Tensor p = softmax_rows(z);
      const double inv_b = 1.0 / static_cast<double>(z.rows());
      for (std::size_t b = 0; b < z.rows(); ++b) p.at(b, (*n.labels)[b]) -= 1.0;
      for (double& v : p.values()) v *= inv_b;
      return p;
    }
    case Op::SoftmaxCEHvp: {
      // Row b: (p ⊙ G − p (p·G)) / B, the Hessian of mean CE applied to G.
      const Tensor& z = in(0);
      const Tensor& G = in(1);
      require_same_shape(z, G, "softmax_cross_entropy_hvp");
      Tensor p = softmax_rows(z);
      const double inv_b = 1.0 / static_cast<double>(z.rows());
      for (std::size_t b = 0; b < z.rows(); ++b) {
        auto pr = p.row(b);
        auto gr = G.row(b);
        double pg = 0.0;
        for (std::size_t j = 0; j < pr.size(); ++j) pg += pr[j] * gr[j];
        for (std::size_t j = 0; j < pr.size(); ++j) pr[j] = pr[j] * (gr[j] - pg) * inv_b;
      }
      return p;
    }
    case Op::RowNormalize:
      require_matrix(in(0), "l2_normalize_rows");
      return l2_normalize_rows(in(0), n.scalar);
    case Op::RowNormalizeVjp: {
      // Row b: g/s − x (x·g)/s³ with s = sqrt(‖x‖² + eps).
      const Tensor& x = in(0);
      const Tensor& g = in(1);
      require_same_shape(x, g, "l2_normalize_rows_vjp");
      Tensor out(x.shape());
      for (std::size_t b = 0; b < x.rows(); ++b) {
        auto xr = x.row(b);
        auto gr = g.row(b);
        auto o = out.row(b);
        double xx = 0.0, xg = 0.0;
        for (std::size_t j = 0; j < xr.size(); ++j) {
          xx += xr[j] * xr[j];
          xg += xr[j] * gr[j];
        }
        const double s = std::sqrt(xx + n.scalar);
        const double s3 = s * s * s;
        for (std::size_t j = 0; j < xr.size(); ++j) o[j] = gr[j] / s - xr[j] * xg / s3;
      }
      return out;
    }
    case Op::RowNormalizeCurv: {
      // x-adjoint of the row-normalize VJP: with c = x·g,
      // −(G·g) x/s³ − c G/s³ − (G·x) g/s³ + 3c (G·x) x/s⁵.
      const Tensor& x = in(0);
      const Tensor& g = in(1);
      const Tensor& G = in(2);
      require_same_shape(x, g, "l2_normalize_rows_curv");
      require_same_shape(x, G, "l2_normalize_rows_curv");
      Tensor out(x.shape());
      for (std::size_t b = 0; b < x.rows(); ++b) {
        auto xr = x.row(b);
        auto gr = g.row(b);
        auto Gr = G.row(b);
        auto o = out.row(b);
        double xx = 0.0, c = 0.0, Gg = 0.0, Gx = 0.0;
        for (std::size_t j = 0; j < xr.size(); ++j) {
          xx += xr[j] * xr[j];
          c += xr[j] * gr[j];
          Gg += Gr[j] * gr[j];
          Gx += Gr[j] * xr[j];
        }
        const double s = std::sqrt(xx + n.scalar);
        const double s3 = s * s * s;
        const double s5 = s3 * s * s;
        for (std::size_t j = 0; j < xr.size(); ++j)
          o[j] = -Gg * xr[j] / s3 - c * Gr[j] / s3 - Gx * gr[j] / s3 + 3.0 * c * Gx * xr[j] / s5;
      }
      return out;
    }
  }
  throw std::logic_error("unknown op");
}

}  // namespace detail

class Tape {
 public:
  Var variable(Tensor v) { return leaf(std::move(v), true); }
  Var constant(Tensor v) { return leaf(std::move(v), false); }

  Var leaf(Tensor v, bool requires_grad) {
    require_finite(v, "leaf");
    Node n;
    n.op = Op::Leaf;
    n.requires_grad = requires_grad;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

  void truncate(std::size_t n) {
    if (n < nodes_.size()) nodes_.resize(n);
  }

  // Appends an op node; inputs must already be on this tape.
  Var push(Node n) {
    for (std::uint8_t k = 0; k < n.arity; ++k) {
      if (n.in[k] >= nodes_.size()) throw std::out_of_range("op input is not on this tape");
      n.requires_grad = n.requires_grad || nodes_[n.in[k]].requires_grad;
    }
    n.value = detail::eval_node(n, nodes_);
    require_finite(n.value, op_name(n.op));
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  // Gradients of scalar `loss` w.r.t. `wrt`, as detached tensors. The tape is
  // returned to its pre-call length.
  std::vector<Tensor> grad(Var loss, std::span<const Var> wrt) {
    const std::size_t mark = nodes_.size();
    std::vector<Var> g = backward(loss, wrt);
    std::vector<Tensor> out;
    out.reserve(g.size());
    for (const Var& v : g) out.push_back(nodes_[v.id].value);
    truncate(mark);
    return out;
  }

  std::vector<Tensor> grad(Var loss, std::initializer_list<Var> wrt) {
    return grad(loss, std::span<const Var>(wrt.begin(), wrt.size()));
  }

  // Gradients recorded as tape nodes so they can be differentiated again.
  std::vector<Var> grad_graph(Var loss, std::span<const Var> wrt) { return backward(loss, wrt); }

  std::vector<Var> grad_graph(Var loss, std::initializer_list<Var> wrt) {
    return backward(loss, std::span<const Var>(wrt.begin(), wrt.size()));
  }

  // Recomputes every op node from its recorded inputs and compares bit patterns.
  bool replay_matches() const {
    for (const Node& n : nodes_) {
      if (n.op == Op::Leaf) continue;
      Tensor v = detail::eval_node(n, nodes_);
      if (!v.same_shape(n.value) ||
          std::memcmp(v.data(), n.value.data(), v.size() * sizeof(double)) != 0)
        return false;
    }
    return true;
  }

 private:
  std::vector<Var> backward(Var loss, std::span<const Var> wrt);
  void vjp(std::size_t id, Var g, std::vector<std::optional<Var>>& grads, const std::vector<char>& reach);

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->node(id).requires_grad; }

namespace detail {

inline Tape* same_tape(std::initializer_list<Var> vs) {
  Tape* t = vs.begin()->tape;
  if (t == nullptr) throw std::invalid_argument("Var is not attached to a tape");
  for (const Var& v : vs)
    if (v.tape != t) throw std::invalid_argument("operands live on different tapes");
  return t;
}

inline Var make(Op op, std::initializer_list<Var> inputs) {
  Tape* t = same_tape(inputs);
  Node n;
  n.op = op;
  for (const Var& v : inputs) n.in[n.arity++] = v.id;
  return t->push(std::move(n));
}

}  // namespace detail

inline Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
  Tape* t = detail::same_tape({a, b});
  Node n;
  n.op = Op::MatMul;
  n.in = {a.id, b.id, 0};
  n.arity = 2;
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  return t->push(std::move(n));
}

inline Var bias_add(Var x, Var b) { return detail::make(Op::BiasAdd, {x, b}); }
inline Var sum_rows(Var x) { return detail::make(Op::SumRows, {x}); }

inline Var broadcast_rows(Var v, std::size_t rows) {
  Node n;
  n.op = Op::BroadcastRows;
  n.in[0] = v.id;
  n.arity = 1;
  n.target = Shape{rows, v.value().size()};
  return v.tape->push(std::move(n));
}

inline Var relu(Var x) { return detail::make(Op::Relu, {x}); }

inline Var relu_mask_apply(Var g, Tensor mask) {
  Node n;
  n.op = Op::ReluMask;
  n.in[0] = g.id;
  n.arity = 1;
  n.saved = std::move(mask);
  return g.tape->push(std::move(n));
}

inline Var add(Var a, Var b) { return detail::make(Op::Add, {a, b}); }

inline Var scale(Var x, double c) {
  Node n;
  n.op = Op::Scale;
  n.in[0] = x.id;
  n.arity = 1;
  n.scalar = c;
  return x.tape->push(std::move(n));
}

inline Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }
inline Var mul(Var a, Var b) { return detail::make(Op::Mul, {a, b}); }
inline Var sum_all(Var x) { return detail::make(Op::SumAll, {x}); }

inline Var broadcast_scalar(Var s, Shape shape) {
  Node n;
  n.op = Op::BroadcastScalar;
  n.in[0] = s.id;
  n.arity = 1;
  n.target = std::move(shape);
  if (s.value().size() != 1) throw DimensionError("broadcast_scalar expects a scalar");
  return s.tape->push(std::move(n));
}

inline Var scale_by(Var x, Var s) {
  if (s.value().size() != 1) throw DimensionError("scale_by expects a scalar factor");
  return detail::make(Op::ScaleBy, {x, s});
}

namespace detail {

inline Var labelled(Op op, std::initializer_list<Var> inputs, Labels labels) {
  Tape* t = same_tape(inputs);
  Node n;
  n.op = op;
  for (const Var& v : inputs) n.in[n.arity++] = v.id;
  n.labels = std::move(labels);
  return t->push(std::move(n));
}

inline Var with_eps(Op op, std::initializer_list<Var> inputs, double eps) {
  Tape* t = same_tape(inputs);
  Node n;
  n.op = op;
  for (const Var& v : inputs) n.in[n.arity++] = v.id;
  n.scalar = eps;
  return t->push(std::move(n));
}

}  // namespace detail

inline Var softmax_cross_entropy(Var z, std::span<const std::size_t> labels) {
  return detail::labelled(Op::SoftmaxCE, {z},
                          std::make_shared<const std::vector<std::size_t>>(labels.begin(), labels.end()));
}

inline Var softmax_cross_entropy(Var z, const std::vector<std::size_t>& labels) {
  return softmax_cross_entropy(z, std::span<const std::size_t>(labels));
}

inline Var mse(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mse");
  Var d = sub(a, b);
  return scale(sum_all(mul(d, d)), 1.0 / static_cast<double>(a.value().size()));
}

inline Var l2_normalize_rows(Var x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("l2_normalize_rows requires eps > 0");
  return detail::with_eps(Op::RowNormalize, {x}, eps);
}

inline std::vector<Var> Tape::backward(Var loss, std::span<const Var> wrt) {
  if (loss.tape != this) throw std::invalid_argument("loss is not on this tape");
  if (loss.id >= nodes_.size()) throw std::out_of_range("loss node is not on this tape");
  if (nodes_[loss.id].value.size() != 1)
    throw DimensionError("backward needs a scalar loss, got " + shape_string(nodes_[loss.id].value.shape()));
  for (const Var& w : wrt)
    if (w.tape != this || w.id >= nodes_.size()) throw std::out_of_range("wrt node is not on this tape");

  const std::size_t top = loss.id;
  std::vector<char> reach(top + 1, 0);
  for (const Var& w : wrt)
    if (w.id <= top) reach[w.id] = 1;
  for (std::size_t i = 0; i <= top; ++i) {
    if (reach[i]) continue;
    const Node& n = nodes_[i];
    for (std::uint8_t k = 0; k < n.arity; ++k)
      if (reach[n.in[k]]) {
        reach[i] = 1;
        break;
      }
  }

  std::vector<std::optional<Var>> grads(top + 1);
  if (reach[top]) grads[top] = constant(Tensor(nodes_[top].value.shape(), 1.0));
  for (std::size_t i = top + 1; i-- > 0;) {
    if (!grads[i] || nodes_[i].op == Op::Leaf) continue;
    vjp(i, *grads[i], grads, reach);
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id <= top && grads[w.id])
      out.push_back(*grads[w.id]);
    else
      out.push_back(constant(Tensor(nodes_[w.id].value.shape(), 0.0)));
  }
  return out;
}

inline void Tape::vjp(std::size_t id, Var g, std::vector<std::optional<Var>>& grads, const std::vector<char>& reach) {
  // Copy what is needed: pushing new nodes may reallocate nodes_.
  const Op op = nodes_[id].op;
  const auto in = nodes_[id].in;
  const bool ta = nodes_[id].trans_a;
  const bool tb = nodes_[id].trans_b;
  const double scalar = nodes_[id].scalar;
  const Labels labels = nodes_[id].labels;

  auto want = [&](int k) { return reach[in[k]] != 0; };
  auto give = [&](int k, Var gk) {
    auto& slot = grads[in[k]];
    slot = slot ? add(*slot, gk) : gk;
  };
  auto var = [&](int k) { return Var{this, in[k]}; };

  switch (op) {
    case Op::Leaf:
      return;
    case Op::MatMul: {
      Var A = var(0), B = var(1);
      if (want(0)) {
        if (!ta && !tb) give(0, matmul(g, B, false, true));
        else if (!ta && tb) give(0, matmul(g, B, false, false));
        else if (ta && !tb) give(0, matmul(B, g, false, true));
        else give(0, matmul(B, g, true, true));
      }
      if (want(1)) {
        if (!ta && !tb) give(1, matmul(A, g, true, false));
        else if (!ta && tb) give(1, matmul(g, A, true, false));
        else if (ta && !tb) give(1, matmul(A, g, false, false));
        else give(1, matmul(g, A, true, true));
      }
      return;
    }
    case Op::BiasAdd:
      if (want(0)) give(0, g);
      if (want(1)) give(1, sum_rows(g));
      return;
    case Op::SumRows:
      if (want(0)) give(0, broadcast_rows(g, nodes_[in[0]].value.rows()));
      return;
    case Op::BroadcastRows:
      if (want(0)) give(0, sum_rows(g));
      return;
    case Op::Relu:
      if (want(0)) give(0, relu_mask_apply(g, relu_mask(nodes_[in[0]].value)));
      return;
    case Op::ReluMask:
      if (want(0)) {
        Tensor mask = *nodes_[id].saved;
        give(0, relu_mask_apply(g, std::move(mask)));
      }
      return;
    case Op::Add:
      if (want(0)) give(0, g);
      if (want(1)) give(1, g);
      return;
    case Op::Scale:
      if (want(0)) give(0, scale(g, scalar));
      return;
    case Op::Mul:
      if (want(0)) give(0, mul(g, var(1)));
      if (want(1)) give(1, mul(g, var(0)));
      return;
    case Op::SumAll:
      if (want(0)) give(0, broadcast_scalar(g, nodes_[in[0]].value.shape()));
      return;
    case Op::BroadcastScalar:
      if (want(0)) give(0, sum_all(g));
      return;
    case Op::ScaleBy:
      if (want(0)) give(0, scale_by(g, var(1)));
      if (want(1)) give(1, sum_all(mul(g, var(0))));
      return;
    case Op::SoftmaxCE:
      if (want(0)) give(0, scale_by(detail::labelled(Op::SoftmaxCEGrad, {var(0)}, labels), g));
      return;
    case Op::SoftmaxCEGrad:
      if (want(0)) give(0, detail::labelled(Op::SoftmaxCEHvp, {var(0), g}, labels));
      return;
    case Op::RowNormalize:
      if (want(0)) give(0, detail::with_eps(Op::RowNormalizeVjp, {var(0), g}, scalar));
      return;
    case Op::RowNormalizeVjp:
      if (want(0)) give(0, detail::with_eps(Op::RowNormalizeCurv, {var(0), var(1), g}, scalar));
      if (want(1)) give(1, detail::with_eps(Op::RowNormalizeVjp, {var(0), g}, scalar));
      return;
    case Op::SoftmaxCEHvp:
    case Op::RowNormalizeCurv:
      throw UnsupportedOrderError(std::string("differentiating ") + op_name(op) +
                                  " would need a third derivative, which this engine does not provide");
  }
}

// Row i of the result is the gradient of output component i w.r.t. x.
inline Tensor jacobian(const std::function<Var(Var)>& f, const Tensor& x) {
  Tape tape;
  Var xv = tape.variable(x);
  Var y = f(xv);
  const std::size_t m = y.value().size();
  Tensor J(Shape{m, x.size()});
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t mark = tape.size();
    Tensor e(y.value().shape());
    e[i] = 1.0;
    Var yi = sum_all(mul(y, tape.constant(std::move(e))));
    Tensor gi = tape.grad(yi, {xv})[0];
    std::copy_n(gi.data(), gi.size(), J.data() + i * x.size());
    tape.truncate(mark);
  }
  return J;
}

inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad requires h > 0");
  Tensor g(x.shape());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace sgr
