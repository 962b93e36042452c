// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgr {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major array of doubles. A scalar is shape {1}.
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor(Shape{rows, cols}, std::move(data));
  }

  static Tensor vector(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor(Shape{n}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_[0]; }
  // Row length: product of trailing extents (1 for rank-1 tensors).
  std::size_t cols() const { return shape_.size() < 2 ? 1 : data_.size() / shape_[0]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols(), cols()}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols(), cols()}; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double item() const {
    if (data_.size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_string(shape_));
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t checked_numel(const Shape& s) {
    if (s.empty()) throw DimensionError("tensor shape must have at least one extent");
    std::size_t n = 1;
    for (std::size_t e : s) {
      if (e == 0) throw DimensionError("tensor extents must be >= 1, got " + shape_string(s));
      n *= e;
    }
    return n;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NonFiniteError(std::string("non-finite value produced by ") + what);
}

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

// C = op(A)·op(B) where op transposes when the flag is set.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = trans_a ? a.shape()[1] : a.shape()[0];
  const std::size_t ka = trans_a ? a.shape()[0] : a.shape()[1];
  const std::size_t kb = trans_b ? b.shape()[1] : b.shape()[0];
  const std::size_t n = trans_b ? b.shape()[0] : b.shape()[1];
  if (ka != kb)
    throw DimensionError("matmul inner extents differ: " + shape_string(a.shape()) + (trans_a ? "^T" : "") + " * " +
                         shape_string(b.shape()) + (trans_b ? "^T" : ""));
  const std::size_t k = ka;
  Tensor c(Shape{m, n});
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
  const std::size_t lda = a.shape()[1];
  const std::size_t ldb = b.shape()[1];
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t t = 0; t < k; ++t) {
        const double av = A[i * lda + t];
        const double* br = B + t * ldb;
        double* cr = C + i * n;
        for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
      }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double* ar = A + i * lda;
        const double* br = B + j * ldb;
        double s = 0.0;
        for (std::size_t t = 0; t < k; ++t) s += ar[t] * br[t];
        C[i * n + j] = s;
      }
  } else if (trans_a && !trans_b) {
    for (std::size_t t = 0; t < k; ++t)
      for (std::size_t i = 0; i < m; ++i) {
        const double av = A[t * lda + i];
        const double* br = B + t * ldb;
        double* cr = C + i * n;
        for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
      }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t t = 0; t < k; ++t) s += A[t * lda + i] * B[j * ldb + t];
        C[i * n + j] = s;
      }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t(Shape{a.shape()[1], a.shape()[0]});
  for (std::size_t i = 0; i < a.shape()[0]; ++i)
    for (std::size_t j = 0; j < a.shape()[1]; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (double& v : c.values()) v *= s;
  return c;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

// y += s·x
inline void axpy(double s, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s;
}

inline double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) { return max_abs(sub(a, b)); }

// x[B×d] + b[d] broadcast over rows.
inline Tensor bias_add(const Tensor& x, const Tensor& b) {
  require_matrix(x, "bias_add");
  if (b.rank() != 1 || b.size() != x.cols())
    throw DimensionError("bias_add: bias " + shape_string(b.shape()) + " vs input " + shape_string(x.shape()));
  Tensor y = x;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double* row = y.data() + r * y.cols();
    for (std::size_t j = 0; j < b.size(); ++j) row[j] += b[j];
  }
  return y;
}

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

// 1 where x > 0, else 0 (subgradient at 0 is 0).
inline Tensor relu_mask(const Tensor& x) {
  Tensor m(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) m[i] = x[i] > 0.0 ? 1.0 : 0.0;
  return m;
}

inline Tensor softmax_rows(const Tensor& z) {
  require_matrix(z, "softmax");
  Tensor p(z.shape());
  const std::size_t k = z.cols();
  for (std::size_t b = 0; b < z.rows(); ++b) {
    auto zr = z.row(b);
    auto pr = p.row(b);
    const double mx = *std::max_element(zr.begin(), zr.end());
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (pr[j] = std::exp(zr[j] - mx));
    for (std::size_t j = 0; j < k; ++j) pr[j] /= s;
  }
  return p;
}

inline void check_labels(const Tensor& z, std::span<const std::size_t> labels) {
  require_matrix(z, "softmax_cross_entropy");
  if (z.cols() < 2) throw DimensionError("softmax_cross_entropy needs K >= 2 classes");
  if (labels.size() != z.rows())
    throw DimensionError("label count " + std::to_string(labels.size()) + " does not match batch " +
                         std::to_string(z.rows()));
  for (std::size_t y : labels)
    if (y >= z.cols())
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, " + std::to_string(z.cols()) + ")");
}

// Mean over the batch of −log softmax(z)_y, with max-subtraction.
inline double softmax_cross_entropy(const Tensor& z, std::span<const std::size_t> labels) {
  check_labels(z, labels);
  double total = 0.0;
  for (std::size_t b = 0; b < z.rows(); ++b) {
    auto zr = z.row(b);
    const double mx = *std::max_element(zr.begin(), zr.end());
    double s = 0.0;
    for (double v : zr) s += std::exp(v - mx);
    total += std::log(s) + mx - zr[labels[b]];
  }
  return total / static_cast<double>(z.rows());
}

inline double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

inline Tensor l2_normalize_rows(const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("l2_normalize_rows requires eps > 0");
  Tensor y = x;
  for (std::size_t b = 0; b < x.rows(); ++b) {
    auto r = y.row(b);
    double ss = 0.0;
    for (double v : r) ss += v * v;
    const double s = std::sqrt(ss + eps);
    for (double& v : r) v /= s;
  }
  return y;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& z) {
  std::vector<std::size_t> out(z.rows());
  for (std::size_t b = 0; b < z.rows(); ++b) {
    auto r = z.row(b);
    out[b] = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

// Rows of `x` selected by `idx`, in that order.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  Shape s = x.shape();
  s[0] = idx.size();
  Tensor out(s);
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(x.data() + idx[i] * c, c, out.data() + i * c);
  return out;
}

// Independent deterministic stream `stream` derived from `seed`.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x5347u};
  return std::mt19937_64(seq);
}

inline Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> nd(0.0, stddev);
  for (double& v : t.values()) v = nd(rng);
  return t;
}

inline Tensor rand_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> ud(lo, hi);
  for (double& v : t.values()) v = ud(rng);
  return t;
}

}  // namespace sgr
