// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sgr/linalg.hpp"
#include "sgr/tape.hpp"

namespace sgr {

class UnsupportedDimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Fixed simplex equiangular tight frame: K unit rows in R^d with pairwise
// inner product −1/(K−1).
struct EtfClassifier {
  Tensor M;  // K×d
  std::size_t classes() const { return M.rows(); }
  std::size_t dim() const { return M.cols(); }
};

inline EtfClassifier make_etf(std::size_t K, std::size_t d, std::uint64_t seed) {
  if (K < 2) throw std::invalid_argument("make_etf needs K >= 2");
  if (d < K)
    throw UnsupportedDimensionError("make_etf needs d >= K (got d=" + std::to_string(d) +
                                    ", K=" + std::to_string(K) + ")");
  auto rng = make_rng(seed, 0xE7F);
  Tensor U = orthonormal_columns(randn(Shape{d, K}, rng));
  const double c = std::sqrt(static_cast<double>(K) / static_cast<double>(K - 1));
  const double inv_k = 1.0 / static_cast<double>(K);
  // Row k = c · U (e_k − 1/K), i.e. c · (U_{:,k} − mean of U's columns).
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < K; ++j) mean[i] += U.at(i, j) * inv_k;
  Tensor M(Shape{K, d});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < d; ++i) M.at(k, i) = c * (U.at(i, k) - mean[i]);
  return {std::move(M)};
}

struct GramReport {
  bool ok = false;
  double max_deviation = 0.0;
};

inline GramReport gram_check(const Tensor& M, double tol) {
  require_matrix(M, "gram_check");
  const std::size_t K = M.rows();
  const Tensor G = matmul(M, M, false, true);
  const double off = K > 1 ? -1.0 / static_cast<double>(K - 1) : 0.0;
  double dev = 0.0;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) dev = std::max(dev, std::abs(G.at(i, j) - (i == j ? 1.0 : off)));
  return {dev <= tol, dev};
}

// Mᵀ(p − e_y): gradient of CE(M·x, y) w.r.t. x given p = softmax(M·x).
inline Tensor ce_delta(const Tensor& probs, std::size_t y, const EtfClassifier& head) {
  const std::size_t K = head.classes();
  if (probs.size() != K) throw DimensionError("ce_delta: probability vector length differs from K");
  if (y >= K) throw std::out_of_range("ce_delta: label out of range");
  double s = 0.0;
  for (double p : probs.values()) {
    if (!(p >= 0.0)) throw std::invalid_argument("ce_delta: negative probability");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("ce_delta: probabilities do not sum to 1");
  Tensor r(Shape{1, K}, probs.values());
  r[y] -= 1.0;
  Tensor d = matmul(r, head.M);
  return Tensor(Shape{head.dim()}, d.values());
}

// Logits x·Mᵀ for a batch of features on the tape.
inline Var etf_logits(Var x, const EtfClassifier& head) {
  return matmul(x, x.tape->constant(head.M), false, true);
}

}  // namespace sgr
