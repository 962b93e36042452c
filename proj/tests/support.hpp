// SPDX-License-Identifier: Apache-2.0
// Shared fixtures for the unit tests and the acceptance runner.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sgr/sgr.hpp"

namespace sgr::fixtures {

// A scalar function of one tensor, built on a tape, plus an optional
// ReLU-pattern probe for kink skipping.
struct OpCase {
  std::string name;
  Tensor x;
  std::function<Var(Tape&, Var)> build;
  std::function<std::vector<char>(const Tensor&)> kinks;
};

struct OpCheck {
  std::string name;
  double first = 0;   // rel-err of ∇F
  double second = 0;  // rel-err of ∇‖∇F‖²
  std::size_t checked = 0;
};

inline std::vector<char> sign_pattern(const Tensor& t) {
  std::vector<char> s(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) s[i] = t[i] > 0;
  return s;
}

// Nonlinear read-out so that every op contributes curvature downstream.
inline Var readout(Tape& tape, Var y, std::uint64_t seed) {
  auto rng = make_rng(seed, 0x0D7);
  const Tensor& v = y.value();
  Var q = sum_all(mul(mul(y, y), tape.constant(randn(v.shape(), rng, 0.3))));
  if (v.rank() == 2 && v.cols() >= 2) {
    std::vector<std::size_t> lab(v.rows());
    for (auto& l : lab) l = rng() % 3;
    Var z = matmul(y, tape.constant(randn(Shape{v.cols(), 3}, rng)));
    q = add(q, softmax_cross_entropy(z, lab));
  }
  return q;
}

inline std::vector<OpCase> op_cases(std::uint64_t seed) {
  auto rng = make_rng(seed, 0x0CA5);
  const std::size_t B = 3, d = 4, e = 5;
  const Tensor W = randn(Shape{d, e}, rng), Wt = randn(Shape{e, d}, rng), Bm = randn(Shape{B, e}, rng);
  const Tensor bias = randn(Shape{d}, rng), other = randn(Shape{B, d}, rng), mask = [&] {
    Tensor m(Shape{B, d});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (rng() & 1) ? 1.0 : 0.0;
    return m;
  }();
  const Tensor X = randn(Shape{B, d}, rng);
  const Tensor hb = randn(Shape{e}, rng), Wb = randn(Shape{d, B}, rng);
  const Tensor s = Tensor::scalar(0.7 + 0.5 * std::uniform_real_distribution<double>(0, 1)(rng));
  const Tensor row = randn(Shape{d}, rng);
  auto r = [seed](Tape& t, Var y) { return readout(t, y, seed); };

  std::vector<OpCase> c;
  c.push_back({"matmul", X, [=](Tape& t, Var x) { return r(t, matmul(x, t.constant(W))); }, {}});
  c.push_back({"matmul_rhs", W, [=](Tape& t, Var w) { return r(t, matmul(t.constant(X), w)); }, {}});
  c.push_back({"matmul_ta", X, [=](Tape& t, Var x) { return r(t, matmul(x, t.constant(Bm), true, false)); }, {}});
  c.push_back({"matmul_tb", X, [=](Tape& t, Var x) { return r(t, matmul(x, t.constant(Wt), false, true)); }, {}});
  c.push_back({"matmul_tab", Wb, [=](Tape& t, Var w) { return r(t, matmul(t.constant(Bm), w, true, true)); }, {}});
  c.push_back({"matmul_self", X, [=](Tape& t, Var x) { return r(t, matmul(x, x, false, true)); }, {}});
  c.push_back({"bias_add_x", X, [=](Tape& t, Var x) { return r(t, bias_add(x, t.constant(bias))); }, {}});
  c.push_back({"bias_add_b", bias, [=](Tape& t, Var b) { return r(t, bias_add(t.constant(X), b)); }, {}});
  c.push_back({"sum_rows", X, [=](Tape& t, Var x) { return r(t, sum_rows(x)); }, {}});
  c.push_back({"broadcast_rows", row, [=](Tape& t, Var v) { return r(t, broadcast_rows(v, B)); }, {}});
  c.push_back({"relu", X, [=](Tape& t, Var x) { return r(t, relu(x)); }, sign_pattern});
  c.push_back({"relu_mask", X, [=](Tape& t, Var x) { return r(t, relu_mask_apply(x, mask)); }, {}});
  c.push_back({"add", X, [=](Tape& t, Var x) { return r(t, add(x, t.constant(other))); }, {}});
  c.push_back({"scale", X, [=](Tape& t, Var x) { return r(t, scale(x, -1.3)); }, {}});
  c.push_back({"mul", X, [=](Tape& t, Var x) { return r(t, mul(x, t.constant(other))); }, {}});
  c.push_back({"mul_self", X, [=](Tape& t, Var x) { return r(t, mul(x, x)); }, {}});
  c.push_back({"sum_all", X, [=](Tape& t, Var x) { return r(t, sum_all(mul(x, t.constant(other)))); }, {}});
  c.push_back({"broadcast_scalar", s, [=](Tape& t, Var v) { return r(t, broadcast_scalar(v, Shape{B, d})); }, {}});
  c.push_back({"scale_by_x", X, [=](Tape& t, Var x) { return r(t, scale_by(x, t.constant(s))); }, {}});
  c.push_back({"scale_by_s", s, [=](Tape& t, Var v) { return r(t, scale_by(t.constant(X), v)); }, {}});
  c.push_back({"softmax_ce", X, [](Tape&, Var x) { return softmax_cross_entropy(x, std::vector<std::size_t>{0, 3, 1}); }, {}});
  c.push_back({"l2_normalize_rows", X, [=](Tape& t, Var x) { return r(t, l2_normalize_rows(x, 1e-12)); }, {}});
  c.push_back({"mse", X, [=](Tape& t, Var x) { return r(t, mse(x, t.constant(other))); }, {}});
  c.push_back({"mlp", X, [=](Tape& t, Var x) { return r(t, relu(bias_add(matmul(x, t.constant(W)), t.constant(hb)))); },
               [=](const Tensor& x) { return sign_pattern(bias_add(matmul(x, W), hb)); }});
  return c;
}

inline double eval_first(const OpCase& c, const Tensor& x) {
  Tape t;
  return c.build(t, t.variable(x)).value().item();
}

inline Tensor grad_first(const OpCase& c, const Tensor& x) {
  Tape t;
  Var xv = t.variable(x);
  return t.grad(c.build(t, xv), {xv})[0];
}

inline double eval_second(const OpCase& c, const Tensor& x) {
  const Tensor g = grad_first(c, x);
  return dot(g, g);
}

inline Tensor grad_second(const OpCase& c, const Tensor& x) {
  Tape t;
  Var xv = t.variable(x);
  Var g = t.grad_graph(c.build(t, xv), {xv})[0];
  return t.grad(sum_all(mul(g, g)), {xv})[0];
}

inline OpCheck check_op(const OpCase& c) {
  OpCheck out{c.name, 0, 0, 0};
  const GradCheck g1 = check_gradient([&](const Tensor& x) { return eval_first(c, x); }, c.x, grad_first(c, c.x), 1e-5,
                                      c.kinks);
  const GradCheck g2 = check_gradient([&](const Tensor& x) { return eval_second(c, x); }, c.x, grad_second(c, c.x),
                                      1e-5, c.kinks);
  out.first = g1.rel_err;
  out.second = g2.rel_err;
  out.checked = std::min(g1.checked, g2.checked);
  return out;
}

// Finite differences of module_local_step's total loss against its gradients,
// for every parameter tensor of a module whose predecessor delta is random.
struct StepCheck {
  double max_rel_err = 0;
  std::size_t checked = 0, skipped = 0;
};

inline StepCheck check_sgr_step(std::uint64_t seed, HeadMode head, bool normalize, double lambda = 1.0) {
  const std::size_t B = 4, din = 6, dout = 8, K = 4;
  auto rng = make_rng(seed, 0x57E9);
  LocalModule m;
  Layer l = init_layer(din, dout, Activation::Relu, rng);
  l.bias = randn(Shape{dout}, rng, 0.1);
  m.block.layers.push_back(std::move(l));
  if (head == HeadMode::BpFree) {
    m.head = make_etf(K, dout, seed);
  } else {
    MlpHead h{init_layer(dout, 7, Activation::Relu, rng), init_layer(7, K, Activation::Identity, rng)};
    h.hidden.bias = randn(Shape{7}, rng, 0.1);
    m.head = std::move(h);
  }
  const Tensor x = randn(Shape{B, din}, rng);
  const Tensor pre = randn(Shape{B, din}, rng, 0.2);
  std::vector<std::size_t> y(B);
  for (auto& v : y) v = rng() % K;
  StepOptions opt;
  opt.lambda = lambda;
  opt.normalize = normalize;

  const StepResult r = module_local_step(m, x, y, pre, opt);
  auto pattern = [&](const LocalModule& mm) {
    std::vector<char> s;
    const Layer& L0 = mm.block.layers[0];
    const Tensor z = bias_add(matmul(x, L0.weight, false, true), L0.bias);
    for (double v : z.values()) s.push_back(v > 0);
    if (const auto* h = std::get_if<MlpHead>(&mm.head)) {
      const Tensor zh = bias_add(matmul(relu(z), h->hidden.weight, false, true), h->hidden.bias);
      for (double v : zh.values()) s.push_back(v > 0);
    }
    return s;
  };
  StepCheck out;
  const auto n = parameters(m).size();
  for (std::size_t p = 0; p < n; ++p) {
    auto with = [&](const Tensor& value) {
      LocalModule c = m;
      *parameters(c)[p] = value;
      return c;
    };
    const Tensor base = *parameters(m)[p];
    const GradCheck g = check_gradient(
        [&](const Tensor& v) { return module_local_step(with(v), x, y, pre, opt).loss.total; }, base, r.grads[p], 1e-5,
        [&](const Tensor& v) { return pattern(with(v)); });
    out.max_rel_err = std::max(out.max_rel_err, g.rel_err);
    out.checked += g.checked;
    out.skipped += g.skipped;
  }
  return out;
}

// Standardized blobs split into train and test halves with shared means.
inline std::pair<Dataset, Dataset> blob_splits(std::size_t K, std::size_t d, std::size_t n_per_class, double r,
                                               double sigma, std::uint64_t seed) {
  auto [tr, te] = train_test_split(synth_blobs(K, d, 2 * n_per_class, r, sigma, seed), 0.5);
  standardize(tr, te);
  return {std::move(tr), std::move(te)};
}

}  // namespace sgr::fixtures
