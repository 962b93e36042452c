// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sgr/tensor.hpp"

namespace sgr {

// Orthonormal basis of the column span of `a` (m×n, m ≥ n) by modified
// Gram-Schmidt with one re-orthogonalisation pass.
inline Tensor orthonormal_columns(const Tensor& a) {
  require_matrix(a, "orthonormal_columns");
  const std::size_t m = a.rows(), n = a.cols();
  if (m < n) throw DimensionError("orthonormal_columns needs rows >= cols");
  Tensor q = a;
  for (std::size_t j = 0; j < n; ++j) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t p = 0; p < j; ++p) {
        double r = 0.0;
        for (std::size_t i = 0; i < m; ++i) r += q.at(i, p) * q.at(i, j);
        for (std::size_t i = 0; i < m; ++i) q.at(i, j) -= r * q.at(i, p);
      }
    double nn = 0.0;
    for (std::size_t i = 0; i < m; ++i) nn += q.at(i, j) * q.at(i, j);
    nn = std::sqrt(nn);
    if (!(nn > 1e-12)) throw std::runtime_error("orthonormal_columns: rank-deficient input");
    for (std::size_t i = 0; i < m; ++i) q.at(i, j) /= nn;
  }
  return q;
}

struct SymmetricEigen {
  std::vector<double> values;  // ascending
  Tensor vectors;              // column j pairs with values[j]
};

// Cyclic Jacobi rotations for a symmetric matrix.
inline SymmetricEigen symmetric_eigen(const Tensor& s, double tol = 1e-15, int max_sweeps = 100) {
  require_matrix(s, "symmetric_eigen");
  const std::size_t n = s.rows();
  if (s.cols() != n) throw DimensionError("symmetric_eigen needs a square matrix");
  Tensor a = s;
  Tensor v = Tensor::identity(n);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += a.at(i, j) * a.at(i, j);
        if (i != j) off += a.at(i, j) * a.at(i, j);
      }
    if (off <= tol * tol * total || off == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (apq == 0.0) continue;
        const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - sn * akq;
          a.at(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - sn * aqk;
          a.at(q, k) = sn * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v.at(k, p), vkq = v.at(k, q);
          v.at(k, p) = c * vkp - sn * vkq;
          v.at(k, q) = sn * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a.at(i, i) < a.at(j, j); });
  SymmetricEigen out{std::vector<double>(n), Tensor(Shape{n, n})};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a.at(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) out.vectors.at(k, j) = v.at(k, order[j]);
  }
  return out;
}

// Largest singular value of `a` by power iteration on aᵀa.
inline double spectral_norm(const Tensor& a, int max_iters = 10000, double tol = 1e-15) {
  require_matrix(a, "spectral_norm");
  Tensor v(Shape{a.cols(), 1});
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i);
  v = scale(v, 1.0 / norm(v));
  double sigma2 = 0.0;
  for (int it = 0; it < max_iters; ++it) {
    Tensor w = matmul(a, matmul(a, v), true, false);
    const double nw = norm(w);
    if (nw == 0.0) return 0.0;
    const double next = dot(v, w);
    v = scale(w, 1.0 / nw);
    if (std::abs(next - sigma2) <= tol * std::max(1.0, next)) {
      sigma2 = next;
      break;
    }
    sigma2 = next;
  }
  return std::sqrt(std::max(sigma2, 0.0));
}

// Solves s·x = b for symmetric positive-definite s via its eigendecomposition.
inline Tensor spd_solve(const Tensor& s, const Tensor& b) {
  SymmetricEigen e = symmetric_eigen(s);
  if (!(e.values.front() > 0.0)) throw std::runtime_error("spd_solve: matrix is not positive definite");
  Tensor y = matmul(e.vectors, b, true, false);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y.at(i, j) /= e.values[i];
  return matmul(e.vectors, y);
}

}  // namespace sgr
