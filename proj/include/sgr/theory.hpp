// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sgr/analysis.hpp"
#include "sgr/gradcheck.hpp"

namespace sgr {

class TestbedInvalidError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Two-layer linear model with least-squares losses
//   L1(θ1) = ½‖A1 θ1 x0 − b1‖²,  L2(θ1, θ2) = ½‖A2 θ2 θ1 x0 − b2‖².
// With shared_head, layer one is scored through the current second layer
// (A1 = A2 θ2, b1 = b2), so both layers see the same loss.
struct QuadraticTestbed {
  Tensor x0;      // d0×1
  Tensor A1, b1;  // p1×d1, p1×1
  Tensor A2, b2;  // p2×d2, p2×1
  Tensor theta1;  // d1×d0, initial point
  Tensor theta2;  // d2×d1, initial point
  bool shared_head = false;
};

struct TestbedSpec {
  std::size_t d0 = 3, d1 = 4, d2 = 3, p1 = 5, p2 = 4;
  bool shared_head = false;
};

namespace detail {

inline Tensor random_direction(Shape s, std::mt19937_64& rng, double length) {
  Tensor t = randn(std::move(s), rng);
  return scale(t, length / norm(t));
}

inline double spectral_norm_eig(const Tensor& a) {
  const SymmetricEigen e = symmetric_eigen(matmul(a, a, true, false));
  return std::sqrt(std::max(e.values.back(), 0.0));
}

}  // namespace detail

// Targets sit a fixed relative distance from the initial outputs, so the
// trajectory stays inside the certified region; b2 also gets a component
// outside range(A2), giving a nonzero optimum.
inline QuadraticTestbed make_testbed(const TestbedSpec& s, std::uint64_t seed) {
  if (s.p1 < s.d1 || s.p2 < s.d2) throw TestbedInvalidError("make_testbed needs p1 >= d1 and p2 >= d2");
  auto rng = make_rng(seed, 0x7E57);
  QuadraticTestbed tb;
  tb.x0 = randn(Shape{s.d0, 1}, rng);
  tb.theta1 = randn(Shape{s.d1, s.d0}, rng, 1.0 / std::sqrt(static_cast<double>(s.d0)));
  tb.theta2 = randn(Shape{s.d2, s.d1}, rng, 1.0 / std::sqrt(static_cast<double>(s.d1)));
  tb.A1 = randn(Shape{s.p1, s.d1}, rng, 1.0 / std::sqrt(static_cast<double>(s.p1)));
  tb.A2 = randn(Shape{s.p2, s.d2}, rng, 1.0 / std::sqrt(static_cast<double>(s.p2)));
  const Tensor x1 = matmul(tb.theta1, tb.x0);
  const Tensor z2 = matmul(tb.theta2, x1);
  tb.b1 = matmul(tb.A1, add(x1, detail::random_direction(Shape{s.d1, 1}, rng, 0.2 * norm(x1))));
  tb.b2 = matmul(tb.A2, add(z2, detail::random_direction(Shape{s.d2, 1}, rng, 0.3 * norm(z2))));
  if (s.p2 > s.d2) {
    // Residual of a random vector after projecting onto range(A2).
    const Tensor g = randn(Shape{s.p2, 1}, rng);
    const Tensor coef = spd_solve(matmul(tb.A2, tb.A2, true, false), matmul(tb.A2, g, true, false));
    const Tensor perp = sub(g, matmul(tb.A2, coef));
    axpy(0.2 * norm(tb.b2) / norm(perp), perp, tb.b2);
  }
  tb.shared_head = s.shared_head;
  return tb;
}

inline Tensor layer1_output(const QuadraticTestbed& tb, const Tensor& th1) { return matmul(th1, tb.x0); }

inline Tensor residual2(const QuadraticTestbed& tb, const Tensor& th1, const Tensor& th2) {
  return sub(matmul(tb.A2, matmul(th2, matmul(th1, tb.x0))), tb.b2);
}

inline double loss2(const QuadraticTestbed& tb, const Tensor& th1, const Tensor& th2) {
  const Tensor r = residual2(tb, th1, th2);
  return 0.5 * dot(r, r);
}

// ∇θ1 L2 = θ2ᵀA2ᵀ r x0ᵀ
inline Tensor grad1_loss2(const QuadraticTestbed& tb, const Tensor& th1, const Tensor& th2) {
  const Tensor u = matmul(th2, matmul(tb.A2, residual2(tb, th1, th2), true, false), true, false);
  return matmul(u, tb.x0, false, true);
}

// ∇θ2 L2 = A2ᵀ r (θ1 x0)ᵀ
inline Tensor grad2_loss2(const QuadraticTestbed& tb, const Tensor& th1, const Tensor& th2) {
  return matmul(matmul(tb.A2, residual2(tb, th1, th2), true, false), layer1_output(tb, th1), false, true);
}

// Layer one's own loss; θ2 only matters for the shared head.
inline double loss1(const QuadraticTestbed& tb, const Tensor& th1, const Tensor& th2) {
  if (tb.shared_head) return loss2(tb, th1, th2);
  const Tensor r = sub(matmul(tb.A1, layer1_output(tb, th1)), tb.b1);
  return 0.5 * dot(r, r);
}

inline Tensor grad1_loss1(const QuadraticTestbed& tb, const Tensor& th1, const Tensor& th2) {
  if (tb.shared_head) return grad1_loss2(tb, th1, th2);
  const Tensor r = sub(matmul(tb.A1, layer1_output(tb, th1)), tb.b1);
  return matmul(matmul(tb.A1, r, true, false), tb.x0, false, true);
}

// Constants of the theorem, certified on the region
//   R = {‖θ1 − θ1⁰‖_F ≤ rho1, ‖θ2 − θ2⁰‖_F ≤ rho2},
// where L2 is a polynomial with bounded Hessian.
struct TheoremConstants {
  double mu = 0, L1 = 0, L2 = 0, L = 0;
  double eta1 = 0, eta2 = 0, alpha = 0;
  double loss_star = 0;
  double rho1 = 0, rho2 = 0;

  double eta1_max() const {
    return std::min({(std::sqrt(L1 * L1 + 8 * L * L) - L1) / (4 * L * L), 2 / mu, 1 / (2 * L2)});
  }
  double eta2_lower() const { return std::max(0.0, (1 - std::sqrt(std::max(0.0, 1 - 2 * L2 * eta1))) / L2); }
  double eta2_upper() const { return (1 + std::sqrt(std::max(0.0, 1 - 2 * L2 * eta1))) / L2; }
  bool rates_valid() const {
    return eta1 > 0 && eta1 <= eta1_max() && eta2 > eta2_lower() && eta2 <= eta2_upper() &&
           std::abs(alpha - eta1 / 2) <= 1e-15 * eta1 && alpha * mu > 0 && alpha * mu < 1;
  }
};

inline double testbed_loss_star(const QuadraticTestbed& tb) {
  const Tensor coef = spd_solve(matmul(tb.A2, tb.A2, true, false), matmul(tb.A2, tb.b2, true, false));
  const Tensor r = sub(matmul(tb.A2, coef), tb.b2);
  return 0.5 * dot(r, r);
}

// rho1 keeps ‖x1‖ within [½, 3/2]·‖x1⁰‖. On R:
//   L2 = x1max²‖A2‖²                          (θ2-block Hessian x1x1ᵀ ⊗ A2ᵀA2)
//   L1 = ‖x0‖²(‖A2θ2⁰‖ + ‖A2‖ρ2)²             (θ1-block Hessian x0x0ᵀ ⊗ θ2ᵀA2ᵀA2θ2)
//   L  = L1 + L2 + ‖A2‖‖x0‖·rmax              (Gauss-Newton part plus residual cross term)
//   μ  = 2·x1min²·λmin(A2ᵀA2)                 (PL through the θ2 gradient alone)
inline TheoremConstants estimate_constants(const QuadraticTestbed& tb, double rho2_scale = 1.0) {
  auto rank_check = [](const Tensor& A, const char* name) {
    const SymmetricEigen e = symmetric_eigen(matmul(A, A, true, false));
    if (!(e.values.front() > 1e-10 * e.values.back()))
      throw TestbedInvalidError(std::string(name) + " is not full column rank");
    return e;
  };
  const SymmetricEigen e2 = rank_check(tb.A2, "A2");
  if (!tb.shared_head) rank_check(tb.A1, "A1");
  const double nx0 = norm(tb.x0);
  const double nx1 = norm(layer1_output(tb, tb.theta1));
  if (!(nx0 > 0 && nx1 > 0)) throw TestbedInvalidError("testbed needs nonzero x0 and x1");

  TheoremConstants c;
  c.loss_star = testbed_loss_star(tb);
  c.rho1 = 0.5 * nx1 / nx0;
  const double x1min = 0.5 * nx1, x1max = 1.5 * nx1;
  const double a2 = std::sqrt(e2.values.back());
  const double a2t2 = detail::spectral_norm_eig(matmul(tb.A2, tb.theta2));

  // Reach of θ2: distance needed to fit the optimum output from the worst x1.
  const Tensor coef = spd_solve(matmul(tb.A2, tb.A2, true, false), matmul(tb.A2, tb.b2, true, false));
  const double z_gap = norm(sub(coef, matmul(tb.theta2, layer1_output(tb, tb.theta1))));
  c.rho2 = rho2_scale * 2.0 * (z_gap + norm(tb.theta2) * 0.5 * nx1) / x1min;

  const double a2t2_max = a2t2 + a2 * c.rho2;
  c.L2 = x1max * x1max * a2 * a2;
  c.L1 = nx0 * nx0 * a2t2_max * a2t2_max;
  const double rmax = a2t2_max * x1max + norm(tb.b2);
  c.L = c.L1 + c.L2 + a2 * nx0 * rmax;
  c.mu = 2.0 * x1min * x1min * e2.values.front();
  c.eta1 = 0.9 * c.eta1_max();
  c.eta2 = 1.0 / c.L2;
  c.alpha = c.eta1 / 2;
  return c;
}

struct EpsTrace {
  std::vector<double> eps_norm;  // ‖ε^{(i)}‖, i = 0..n−1
  std::vector<double> loss;      // L2^{(i,i)}, i = 0..n
  double loss_star = 0;
  bool diverged = false;
  bool left_region = false;
};

inline bool in_region(const QuadraticTestbed& tb, const TheoremConstants& c, const Tensor& th1, const Tensor& th2) {
  return norm(sub(th1, tb.theta1)) <= c.rho1 && norm(sub(th2, tb.theta2)) <= c.rho2;
}

// θ1 ← θ1 − η1 ∇θ1 L1(θ1);  θ2 ← θ2 − η2 ∇θ2 L2(θ1_new, θ2).
inline EpsTrace run_two_layer_local(const QuadraticTestbed& tb, const TheoremConstants& c, std::size_t iters) {
  EpsTrace tr;
  tr.loss_star = c.loss_star;
  Tensor th1 = tb.theta1, th2 = tb.theta2;
  tr.loss.push_back(loss2(tb, th1, th2));
  for (std::size_t i = 0; i < iters; ++i) {
    const Tensor g1 = grad1_loss1(tb, th1, th2);
    tr.eps_norm.push_back(norm(sub(grad1_loss2(tb, th1, th2), g1)));
    Tensor n1 = sub(th1, scale(g1, c.eta1));
    Tensor n2 = sub(th2, scale(grad2_loss2(tb, n1, th2), c.eta2));
    const double l = loss2(tb, n1, n2);
    if (!n1.all_finite() || !n2.all_finite() || !std::isfinite(l)) {
      tr.diverged = true;
      tr.eps_norm.pop_back();
      break;
    }
    th1 = std::move(n1);
    th2 = std::move(n2);
    if (!in_region(tb, c, th1, th2)) tr.left_region = true;
    tr.loss.push_back(l);
  }
  return tr;
}

inline constexpr double kTheorySlack = 1e-10;

struct TheoremCheck {
  std::vector<double> margin_step;        // one-step bound minus observed gap
  std::vector<double> margin_cumulative;  // unrolled bound minus observed gap
  std::size_t step_violations = 0;
  std::size_t cumulative_violations = 0;

  bool ok() const { return step_violations == 0 && cumulative_violations == 0; }
  double min_step() const { return margin_step.empty() ? 0.0 : *std::min_element(margin_step.begin(), margin_step.end()); }
  double min_cumulative() const {
    return margin_cumulative.empty() ? 0.0 : *std::min_element(margin_cumulative.begin(), margin_cumulative.end());
  }
};

// Per iteration i:
//   step:       L^{i+1} − L* ≤ (1−αμ)(L^i − L*) + α‖ε^i‖²
//   cumulative: L^{i+1} − L* ≤ (1−αμ)^{i+1}(L^0 − L*) + α Σ_k (1−αμ)^{i−k}‖ε^k‖²
inline TheoremCheck check_theorem_bound(const EpsTrace& tr, const TheoremConstants& c, double slack = kTheorySlack) {
  TheoremCheck out;
  const double rho = 1.0 - c.alpha * c.mu;
  const double star = tr.loss_star;
  double bound = tr.loss.empty() ? 0.0 : tr.loss.front() - star;
  for (std::size_t i = 0; i < tr.eps_norm.size() && i + 1 < tr.loss.size(); ++i) {
    const double e2 = tr.eps_norm[i] * tr.eps_norm[i];
    const double gap = tr.loss[i + 1] - star;
    const double m1 = rho * (tr.loss[i] - star) + c.alpha * e2 - gap;
    bound = rho * bound + c.alpha * e2;
    const double m2 = bound - gap;
    out.margin_step.push_back(m1);
    out.margin_cumulative.push_back(m2);
    if (m1 < -slack) ++out.step_violations;
    if (m2 < -slack) ++out.cumulative_violations;
  }
  return out;
}

struct LemmaMargins {
  double descent = 0;   // observed decrease minus its lower bound
  double gradient = 0;  // gradient-norm upper bound minus observed left side
};

// Both descent lemmas at one iterate (θ1, θ2) with the configured rates.
inline LemmaMargins lemma_margins(const QuadraticTestbed& tb, const TheoremConstants& c, const Tensor& th1,
                                  const Tensor& th2) {
  const Tensor g1 = grad1_loss1(tb, th1, th2);
  const Tensor g12 = grad1_loss2(tb, th1, th2);
  const Tensor g22 = grad2_loss2(tb, th1, th2);
  const Tensor eps = sub(g12, g1);
  const Tensor n1 = sub(th1, scale(g1, c.eta1));
  const Tensor g2n = grad2_loss2(tb, n1, th2);
  const Tensor n2 = sub(th2, scale(g2n, c.eta2));

  const double g1sq = dot(g1, g1), g2sq = dot(g2n, g2n), cross = dot(g1, eps);
  const double decrease = loss2(tb, th1, th2) - loss2(tb, n1, n2);
  const double lower = c.eta2 * (1 - c.L2 * c.eta2 / 2) * g2sq + c.eta1 * cross + c.eta1 * (1 - c.L1 * c.eta1 / 2) * g1sq;
  const double lhs = dot(g12, g12) + dot(g22, g22) - dot(eps, eps);
  const double upper = (2 * (c.L * c.eta1) * (c.L * c.eta1) + 1) * g1sq + 2 * g2sq + 2 * cross;
  return {decrease - lower, upper - lhs};
}

struct LemmaReport {
  std::vector<LemmaMargins> margins;
  std::size_t violations = 0;
  std::size_t skipped = 0;  // samples whose step left the region

  double min_descent() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& x : margins) m = std::min(m, x.descent);
    return m;
  }
  double min_gradient() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& x : margins) m = std::min(m, x.gradient);
    return m;
  }
};

// Samples iterates uniformly by radius in the inner half of the region.
inline LemmaReport check_descent_lemmas(const QuadraticTestbed& tb, const TheoremConstants& c, std::size_t samples,
                                        std::uint64_t seed, double slack = kTheorySlack) {
  auto rng = make_rng(seed, 0x1E44);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  LemmaReport rep;
  while (rep.margins.size() < samples) {
    const Tensor th1 = add(tb.theta1, detail::random_direction(tb.theta1.shape(), rng, 0.5 * c.rho1 * u(rng)));
    const Tensor th2 = add(tb.theta2, detail::random_direction(tb.theta2.shape(), rng, 0.5 * c.rho2 * u(rng)));
    const Tensor n1 = sub(th1, scale(grad1_loss1(tb, th1, th2), c.eta1));
    const Tensor n2 = sub(th2, scale(grad2_loss2(tb, n1, th2), c.eta2));
    if (!in_region(tb, c, n1, n2)) {
      if (++rep.skipped > 100 * samples) throw std::runtime_error("check_descent_lemmas: steps keep leaving the region");
      continue;
    }
    const LemmaMargins m = lemma_margins(tb, c, th1, th2);
    if (m.descent < -slack || m.gradient < -slack) ++rep.violations;
    rep.margins.push_back(m);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Composed-head construction: module k's loss is the frozen downstream
// network plus the final classifier, so every local gradient is the global one.

struct ComposedHeadResult {
  std::size_t depth = 0;
  double max_rel_dev = 0;   // local vs global parameter gradients
  double max_sgr = 0;       // largest reconciliation loss between neighbours
  double control_dev = 0;   // same comparison with independent random heads
};

inline ComposedHeadResult check_composed_heads(const std::vector<std::size_t>& widths, std::uint64_t seed, bool relu = true,
                               std::size_t batch = 4, std::size_t classes = 3) {
  if (widths.size() < 3) throw std::invalid_argument("check_composed_heads needs at least two modules");
  const std::size_t L = widths.size() - 1;
  auto rng = make_rng(seed, 0x9201);
  const Activation act = relu ? Activation::Relu : Activation::Identity;
  std::vector<Block> blocks(L);
  for (std::size_t k = 0; k < L; ++k) {
    Layer l = init_layer(widths[k], widths[k + 1], act, rng);
    l.bias = randn(Shape{widths[k + 1]}, rng, 0.1);
    blocks[k].layers.push_back(std::move(l));
  }
  const Tensor C = randn(Shape{classes, widths[L]}, rng);
  const Tensor x0 = randn(Shape{batch, widths[0]}, rng);
  std::vector<std::size_t> y(batch);
  for (std::size_t b = 0; b < batch; ++b) y[b] = rng() % classes;

  // Global backpropagation.
  std::vector<std::vector<Tensor>> global(L);
  std::vector<Tensor> inputs(L);
  {
    Tape tape;
    std::vector<Var> params;
    Var h = tape.constant(x0);
    for (std::size_t k = 0; k < L; ++k) {
      inputs[k] = h.value();
      h = record_block(tape, blocks[k], h, true, params);
    }
    Var loss = softmax_cross_entropy(matmul(h, tape.constant(C), false, true), y);
    const std::vector<Tensor> g = tape.grad(loss, params);
    for (std::size_t k = 0; k < L; ++k) global[k] = {g[2 * k], g[2 * k + 1]};
  }

  ComposedHeadResult res;
  res.depth = L;
  std::vector<Tensor> delta_out(L);  // ∂L_k/∂x_k
  std::vector<Tensor> delta_in(L);   // ∂L_k/∂x_{k−1}
  for (std::size_t k = 0; k < L; ++k) {
    Tape tape;
    std::vector<Var> own, frozen;
    Var in = tape.variable(inputs[k]);
    Var out = record_block(tape, blocks[k], in, true, own);
    Var h = out;
    for (std::size_t j = k + 1; j < L; ++j) h = record_block(tape, blocks[j], h, false, frozen);
    Var loss = softmax_cross_entropy(matmul(h, tape.constant(C), false, true), y);
    const std::vector<Tensor> g = tape.grad(loss, {own[0], own[1], in, out});
    for (int p = 0; p < 2; ++p) res.max_rel_dev = std::max(res.max_rel_dev, relative_error(g[p], global[k][p]));
    delta_in[k] = g[2];
    delta_out[k] = g[3];
  }
  for (std::size_t k = 1; k < L; ++k)
    res.max_sgr = std::max(res.max_sgr, 0.5 * dot(sub(delta_in[k], delta_out[k - 1]), sub(delta_in[k], delta_out[k - 1])));

  for (std::size_t k = 0; k < L; ++k) {
    Tape tape;
    std::vector<Var> own;
    Var out = record_block(tape, blocks[k], tape.constant(inputs[k]), true, own);
    const Tensor Ck = randn(Shape{classes, widths[k + 1]}, rng);
    Var loss = softmax_cross_entropy(matmul(out, tape.constant(Ck), false, true), y);
    const std::vector<Tensor> g = tape.grad(loss, own);
    for (int p = 0; p < 2; ++p) res.control_dev = std::max(res.control_dev, relative_error(g[p], global[k][p]));
  }
  return res;
}

// ---------------------------------------------------------------------------
// One-step comparison on a two-layer linear model with ETF heads, single
// sample. Vectors are columns.

struct ReconSpec {
  std::size_t d0 = 6, d1 = 8, d2 = 8, classes = 4;
  double eta = 0.01;
  double threshold = 1e-3;  // admission bound on the reconciliation loss
  std::size_t precondition_steps = 200;
  std::size_t trials = 1500;
};

struct ReconTrial {
  Tensor x0, theta1, theta2;  // d0×1, d1×d0, d2×d1
  EtfClassifier M1, M2;
  std::size_t y = 0;
};

struct ReconOutcome {
  double loss_plain = 0;  // inference CE after the plain step
  double loss_sgr = 0;    // inference CE after the step with the SGR term
  double beta = 0;        // x̂′2 = x′2 − β·δx2
  double beta_residual = 0;
  double sgr = 0;
  double logit1 = 0, logit2 = 0;  // true-class logits of both layers
  bool admitted = false;
};

namespace detail {

inline double column_ce(const EtfClassifier& M, const Tensor& x, std::size_t y) {
  const Tensor z = matmul(M.M, x);
  const std::size_t lab[1] = {y};
  return softmax_cross_entropy(Tensor(Shape{1, z.size()}, z.values()), lab);
}

// Mᵀ(softmax(Mx) − e_y) as a column.
inline Tensor column_delta(const EtfClassifier& M, const Tensor& x, std::size_t y) {
  const Tensor z = matmul(M.M, x);
  const Tensor p = softmax_rows(Tensor(Shape{1, z.size()}, z.values()));
  const Tensor d = ce_delta(Tensor(Shape{z.size()}, p.values()), y, M);
  return Tensor(Shape{d.size(), 1}, d.values());
}

inline double sgr_value(const Tensor& theta2, const Tensor& v, const Tensor& a) {
  const Tensor r = sub(matmul(theta2, v, true, false), a);
  return 0.5 * dot(r, r);
}

}  // namespace detail

// Random trial; θ2 is first pulled towards small reconciliation loss with
// normalized steps θ2 += ½·v(a − θ2ᵀv)ᵀ/‖v‖².
inline ReconTrial make_recon_trial(const ReconSpec& s, std::mt19937_64& rng) {
  ReconTrial t;
  t.M1 = make_etf(s.classes, s.d1, rng());
  t.M2 = make_etf(s.classes, s.d2, rng());
  t.x0 = randn(Shape{s.d0, 1}, rng);
  t.y = rng() % s.classes;
  t.theta1 = randn(Shape{s.d1, s.d0}, rng, 1.0 / std::sqrt(static_cast<double>(s.d0)));
  t.theta2 = randn(Shape{s.d2, s.d1}, rng, 1.0 / std::sqrt(static_cast<double>(s.d1)));
  const Tensor x1 = matmul(t.theta1, t.x0);
  const Tensor a = detail::column_delta(t.M1, x1, t.y);
  for (std::size_t it = 0; it < s.precondition_steps; ++it) {
    const Tensor v = detail::column_delta(t.M2, matmul(t.theta2, x1), t.y);
    const double vv = std::max(dot(v, v), 1e-12);
    const Tensor r = sub(a, matmul(t.theta2, v, true, false));
    axpy(0.5 / vv, matmul(v, r, false, true), t.theta2);
  }
  return t;
}

// Plain step: θ1′ = θ1 − η δx1 x0ᵀ, then θ2′ = θ2 − η δx2(x1′) x1′ᵀ.
// SGR step adds −η ∇θ2 ½‖θ2ᵀδx2 − δx1‖² with δx2 detached (taken on the tape).
inline ReconOutcome recon_step(const ReconTrial& t, double eta, double threshold) {
  ReconOutcome o;
  const Tensor x1 = matmul(t.theta1, t.x0);
  const Tensor x2 = matmul(t.theta2, x1);
  const Tensor a = detail::column_delta(t.M1, x1, t.y);
  const Tensor v = detail::column_delta(t.M2, x2, t.y);
  o.sgr = detail::sgr_value(t.theta2, v, a);
  o.logit1 = matmul(t.M1.M, x1)[t.y];
  o.logit2 = matmul(t.M2.M, x2)[t.y];
  o.admitted = o.logit2 > o.logit1 && o.sgr < threshold;

  const Tensor th1n = sub(t.theta1, scale(matmul(a, t.x0, false, true), eta));
  const Tensor x1n = matmul(th1n, t.x0);
  const Tensor vn = detail::column_delta(t.M2, matmul(t.theta2, x1n), t.y);
  const Tensor th2n = sub(t.theta2, scale(matmul(vn, x1n, false, true), eta));

  Tensor sgr_grad;
  {
    Tape tape;
    Var th2 = tape.variable(t.theta2);
    Var r = sub(matmul(th2, tape.constant(v), true, false), tape.constant(a));
    sgr_grad = tape.grad(scale(sum_all(mul(r, r)), 0.5), {th2})[0];
  }
  const Tensor th2h = sub(th2n, scale(sgr_grad, eta));

  const Tensor x2n = matmul(th2n, x1n);
  const Tensor x2h = matmul(th2h, x1n);
  o.loss_plain = detail::column_ce(t.M2, x2n, t.y);
  o.loss_sgr = detail::column_ce(t.M2, x2h, t.y);
  const Tensor d = sub(x2h, x2n);
  const double vv = dot(v, v);
  o.beta = vv > 0 ? -dot(d, v) / vv : 0.0;
  o.beta_residual = norm(add(d, scale(v, o.beta)));
  return o;
}

struct ReconReport {
  std::size_t trials = 0, admitted = 0, improved = 0, negative_beta = 0;
  double min_beta = std::numeric_limits<double>::infinity();
  double fraction() const { return admitted ? static_cast<double>(improved) / static_cast<double>(admitted) : 0.0; }
};

inline ReconReport check_recon_step(const ReconSpec& s, std::uint64_t seed) {
  auto rng = make_rng(seed, 0x9202);
  ReconReport rep;
  for (std::size_t i = 0; i < s.trials; ++i) {
    const ReconTrial t = make_recon_trial(s, rng);
    const ReconOutcome o = recon_step(t, s.eta, s.threshold);
    ++rep.trials;
    if (!o.admitted) continue;
    ++rep.admitted;
    if (o.loss_sgr <= o.loss_plain) ++rep.improved;
    if (o.beta < 0) ++rep.negative_beta;
    rep.min_beta = std::min(rep.min_beta, o.beta);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// ETF step lemma: x − η·δx strictly lowers CE(Mx, y) for η ∈ (0, 1].

struct EtfLemmaReport {
  std::size_t draws = 0, strict = 0;
  double min_decrease = std::numeric_limits<double>::infinity();
};

inline EtfLemmaReport check_etf_lemma(std::size_t draws, std::uint64_t seed) {
  auto rng = make_rng(seed, 0xE7F1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  EtfLemmaReport rep;
  for (std::size_t i = 0; i < draws; ++i) {
    const std::size_t K = 2 + rng() % 9;
    const std::size_t d = K + rng() % 6;
    const EtfClassifier M = make_etf(K, d, rng());
    const Tensor x = randn(Shape{d, 1}, rng, 0.5 + 2.5 * u(rng));
    const std::size_t y = rng() % K;
    const double eta = 1.0 - u(rng);
    const Tensor dx = detail::column_delta(M, x, y);
    const double dec = detail::column_ce(M, x, y) - detail::column_ce(M, sub(x, scale(dx, eta)), y);
    ++rep.draws;
    if (dec > 0) ++rep.strict;
    rep.min_decrease = std::min(rep.min_decrease, dec);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Closed-form SGR gradient of one linear+relu block y = σ(Wx), W: m×n, with
// the upstream gradient ∂L/∂y and the target delta g held fixed:
//   A = ∂L/∂y ⊙ σ′(Wx)      (m multiplies)
//   B = WᵀA − g             ((2m−1)n + n)
//   ∇W = A·Bᵀ               (mn)

struct OpCounter {
  std::size_t mults = 0, adds = 0;
  std::size_t total() const { return mults + adds; }
};

// Returns ∇W; σ′(Wx) is the relu mask, supplied by the forward pass.
inline Tensor sgr_closed_form_grad(const Tensor& W, const Tensor& mask, const Tensor& upstream, const Tensor& g,
                                   OpCounter& ops) {
  const std::size_t m = W.rows(), n = W.cols();
  Tensor A(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    A[i] = upstream[i] * mask[i];
    ++ops.mults;
  }
  Tensor B(Shape{n});
  for (std::size_t j = 0; j < n; ++j) {
    double s = W.at(0, j) * A[0];
    ++ops.mults;
    for (std::size_t i = 1; i < m; ++i) {
      s += W.at(i, j) * A[i];
      ++ops.mults;
      ++ops.adds;
    }
    B[j] = s - g[j];
    ++ops.adds;
  }
  Tensor G(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      G.at(i, j) = A[i] * B[j];
      ++ops.mults;
    }
  return G;
}

struct FlopsReport {
  std::size_t m = 0, n = 0;
  std::size_t measured = 0;
  std::size_t expected = 0;  // 3mn + m
  double ad_max_diff = 0;    // closed form vs AD
};

inline FlopsReport check_flops_claim(std::size_t m, std::size_t n, std::uint64_t seed = 0) {
  auto rng = make_rng(seed, 0xF10F);
  const Tensor W = randn(Shape{m, n}, rng, 1.0 / std::sqrt(static_cast<double>(n)));
  const Tensor x = randn(Shape{1, n}, rng);
  const Tensor upstream = randn(Shape{1, m}, rng);
  const Tensor g = randn(Shape{1, n}, rng);

  FlopsReport rep{m, n, 0, 3 * m * n + m, 0.0};
  const Tensor mask = relu_mask(matmul(x, W, false, true));
  OpCounter ops;
  const Tensor closed = sgr_closed_form_grad(W, mask, upstream, g, ops);
  rep.measured = ops.total();

  Tape tape;
  Var w = tape.variable(W);
  Var xv = tape.variable(x);
  Var yv = relu(matmul(xv, w, false, true));
  Var now = tape.grad_graph(sum_all(mul(yv, tape.constant(upstream))), {xv})[0];
  Var r = sub(now, tape.constant(g));
  const Tensor ad = tape.grad(scale(sum_all(mul(r, r)), 0.5), {w})[0];
  rep.ad_max_diff = max_abs_diff(ad, closed);
  return rep;
}

// ---------------------------------------------------------------------------
// Whole suite, one row per check and seed.

struct VerificationRow {
  std::string check;
  std::uint64_t seed = 0;
  double margin = 0;
  bool pass = false;
};

struct TheorySuiteOptions {
  std::size_t theorem_seeds = 20, theorem_iters = 1000;
  std::size_t lemma_seeds = 10, lemma_samples = 200;
  std::size_t etf_draws = 1000;
  ReconSpec recon;
  double recon_fraction = 0.95;
  std::size_t recon_min_admitted = 500;
};

inline std::vector<VerificationRow> run_theory_suite(std::uint64_t seed, const TheorySuiteOptions& opt = {}) {
  std::vector<VerificationRow> rows;
  for (std::size_t s = 0; s < opt.theorem_seeds; ++s) {
    const std::uint64_t sd = seed * 1000 + s;
    const QuadraticTestbed tb = make_testbed({}, sd);
    const TheoremConstants c = estimate_constants(tb);
    const EpsTrace tr = run_two_layer_local(tb, c, opt.theorem_iters);
    const TheoremCheck chk = check_theorem_bound(tr, c);
    const bool valid = c.rates_valid() && !tr.diverged && !tr.left_region;
    rows.push_back({"theorem_step", sd, chk.min_step(), valid && chk.step_violations == 0});
    rows.push_back({"theorem_cumulative", sd, chk.min_cumulative(), valid && chk.cumulative_violations == 0});
  }
  for (std::size_t s = 0; s < opt.lemma_seeds; ++s) {
    const std::uint64_t sd = seed * 1000 + s;
    const QuadraticTestbed tb = make_testbed({}, sd);
    const TheoremConstants c = estimate_constants(tb);
    const LemmaReport rep = check_descent_lemmas(tb, c, opt.lemma_samples, sd);
    rows.push_back({"lemma_descent", sd, rep.min_descent(), rep.min_descent() >= -kTheorySlack});
    rows.push_back({"lemma_gradient", sd, rep.min_gradient(), rep.min_gradient() >= -kTheorySlack});
  }
  {
    const EtfLemmaReport rep = check_etf_lemma(opt.etf_draws, seed);
    rows.push_back({"etf_lemma", seed, rep.min_decrease, rep.strict == rep.draws});
  }
  for (std::size_t depth = 2; depth <= 4; ++depth) {
    std::vector<std::size_t> widths{6};
    for (std::size_t k = 0; k < depth; ++k) widths.push_back(5 + k);
    const ComposedHeadResult r = check_composed_heads(widths, seed + depth);
    rows.push_back({"composed_depth" + std::to_string(depth), seed + depth, 1e-8 - r.max_rel_dev, r.max_rel_dev <= 1e-8});
  }
  {
    const ReconReport r = check_recon_step(opt.recon, seed);
    rows.push_back({"recon_step", seed, r.fraction() - opt.recon_fraction,
                    r.admitted >= opt.recon_min_admitted && r.fraction() >= opt.recon_fraction});
  }
  for (const auto& [m, n] : {std::pair<std::size_t, std::size_t>{8, 4}, {32, 16}, {128, 64}}) {
    const FlopsReport r = check_flops_claim(m, n, seed);
    const std::string tag = std::to_string(m) + "x" + std::to_string(n);
    rows.push_back({"flops_" + tag, seed, static_cast<double>(r.expected) - static_cast<double>(r.measured),
                    r.measured == r.expected});
    rows.push_back({"closed_form_" + tag, seed, 1e-9 - r.ad_max_diff, r.ad_max_diff <= 1e-9});
  }
  return rows;
}

inline CsvTable verification_table(const std::vector<VerificationRow>& rows) {
  CsvTable t;
  t.header = {"check", "seed", "margin", "pass"};
  for (const auto& r : rows) t.rows.push_back({r.check, std::to_string(r.seed), format_double(r.margin), r.pass ? "1" : "0"});
  return t;
}

}  // namespace sgr
