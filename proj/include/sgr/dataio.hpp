// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <iterator>
#include <utility>

#include "sgr/etf.hpp"

namespace sgr {

class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Tensor features;  // N×d
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  std::string split = "train";
  bool standardized = false;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
};

inline void validate(const Dataset& ds) {
  require_matrix(ds.features, "dataset");
  if (ds.labels.empty()) throw std::invalid_argument("dataset is empty");
  if (ds.features.rows() != ds.labels.size()) throw DimensionError("dataset feature rows differ from label count");
  for (std::size_t y : ds.labels)
    if (y >= ds.classes) throw std::out_of_range("dataset label outside [0, K)");
}

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IdxError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw IdxError("truncated IDX header in " + path);
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  os.write(b, 4);
}

}  // namespace detail

// IDX image (magic 2051) and label (magic 2049) files; pixels scaled to [0,1].
inline Dataset load_mnist_idx(const std::string& image_path, const std::string& label_path) {
  const auto img = detail::read_bytes(image_path);
  const auto lbl = detail::read_bytes(label_path);
  if (const auto m = detail::be32(img, 0, image_path); m != 2051)
    throw IdxError("bad magic " + std::to_string(m) + " in image file " + image_path + " (expected 2051)");
  if (const auto m = detail::be32(lbl, 0, label_path); m != 2049)
    throw IdxError("bad magic " + std::to_string(m) + " in label file " + label_path + " (expected 2049)");
  const std::size_t n = detail::be32(img, 4, image_path);
  const std::size_t rows = detail::be32(img, 8, image_path);
  const std::size_t cols = detail::be32(img, 12, image_path);
  const std::size_t nl = detail::be32(lbl, 4, label_path);
  if (n != nl)
    throw IdxError("image count " + std::to_string(n) + " differs from label count " + std::to_string(nl));
  if (n == 0 || rows == 0 || cols == 0) throw IdxError("empty IDX payload");
  const std::size_t d = rows * cols;
  if (img.size() < 16 + n * d) throw IdxError("truncated image payload in " + image_path);
  if (lbl.size() < 8 + n) throw IdxError("truncated label payload in " + label_path);

  Dataset ds;
  ds.features = Tensor(Shape{n, d});
  ds.labels.resize(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n * d; ++i) ds.features[i] = static_cast<double>(img[16 + i]) / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lbl[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.classes = std::max<std::size_t>(10, max_label + 1);
  return ds;
}

// Inverse of load_mnist_idx for features that are multiples of 1/255.
inline void write_mnist_idx(const Dataset& ds, std::size_t rows, std::size_t cols, const std::string& image_path,
                            const std::string& label_path) {
  validate(ds);
  if (rows * cols != ds.dim()) throw DimensionError("write_mnist_idx: rows*cols differs from feature width");
  std::ofstream img(image_path, std::ios::binary), lbl(label_path, std::ios::binary);
  if (!img || !lbl) throw IdxError("cannot open IDX output files");
  detail::put_be32(img, 2051);
  detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(rows));
  detail::put_be32(img, static_cast<std::uint32_t>(cols));
  for (double v : ds.features.values()) {
    const double px = std::clamp(std::round(v * 255.0), 0.0, 255.0);
    img.put(static_cast<char>(static_cast<unsigned char>(px)));
  }
  detail::put_be32(lbl, 2049);
  detail::put_be32(lbl, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t y : ds.labels) {
    if (y > 255) throw IdxError("label does not fit in one byte");
    lbl.put(static_cast<char>(static_cast<unsigned char>(y)));
  }
  if (!img || !lbl) throw IdxError("error writing IDX files");
}

// Balanced Gaussian clusters around r·m_k, m_k the rows of a seeded ETF.
// Sample i belongs to class i mod K.
inline Dataset synth_blobs(std::size_t K, std::size_t d, std::size_t n_per_class, double r, double sigma,
                           std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("synth_blobs needs sigma >= 0");
  if (n_per_class < 1) throw std::invalid_argument("synth_blobs needs n >= 1");
  const EtfClassifier means = make_etf(K, d, seed);
  auto rng = make_rng(seed, 0xB70B);
  std::normal_distribution<double> nd(0.0, 1.0);
  Dataset ds;
  ds.classes = K;
  ds.features = Tensor(Shape{K * n_per_class, d});
  ds.labels.resize(K * n_per_class);
  for (std::size_t i = 0; i < K * n_per_class; ++i) {
    const std::size_t y = i % K;
    ds.labels[i] = y;
    for (std::size_t j = 0; j < d; ++j) ds.features.at(i, j) = r * means.M.at(y, j) + sigma * nd(rng);
  }
  return ds;
}

// Per class, the first (1 − test_fraction) share of samples goes to train.
inline std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, double test_fraction) {
  validate(ds);
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test_fraction must be in (0,1)");
  std::vector<std::size_t> per_class(ds.classes, 0), seen(ds.classes, 0);
  for (std::size_t y : ds.labels) ++per_class[y];
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::size_t y = ds.labels[i];
    const auto n_train = static_cast<std::size_t>(std::llround((1.0 - test_fraction) * per_class[y]));
    (seen[y]++ < n_train ? tr : te).push_back(i);
  }
  if (tr.empty() || te.empty()) throw std::invalid_argument("train_test_split produced an empty split");
  auto take = [&](const std::vector<std::size_t>& idx, const char* tag) {
    Dataset out;
    out.features = gather_rows(ds.features, idx);
    for (std::size_t i : idx) out.labels.push_back(ds.labels[i]);
    out.classes = ds.classes;
    out.split = tag;
    out.standardized = ds.standardized;
    return out;
  };
  return {take(tr, "train"), take(te, "test")};
}

struct Standardization {
  Tensor mean;  // d
  Tensor std;   // d, zero-variance features clamped to 1
};

inline Standardization fit_standardization(const Dataset& train) {
  validate(train);
  if (train.size() < 2) throw std::invalid_argument("standardize needs at least two samples");
  const std::size_t n = train.size(), d = train.dim();
  Standardization s{Tensor(Shape{d}), Tensor(Shape{d})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += train.features.at(i, j);
  for (std::size_t j = 0; j < d; ++j) s.mean[j] /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = train.features.at(i, j) - s.mean[j];
      s.std[j] += c * c;
    }
  for (std::size_t j = 0; j < d; ++j) {
    const double sd = std::sqrt(s.std[j] / static_cast<double>(n));
    s.std[j] = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

inline void apply_standardization(Dataset& ds, const Standardization& s) {
  if (ds.dim() != s.mean.size()) throw DimensionError("standardization width differs from dataset");
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < ds.dim(); ++j)
      ds.features.at(i, j) = (ds.features.at(i, j) - s.mean[j]) / s.std[j];
  ds.standardized = true;
}

// Fits on `train` and transforms both splits with the train statistics.
inline Standardization standardize(Dataset& train, Dataset& test) {
  Standardization s = fit_standardization(train);
  apply_standardization(train, s);
  apply_standardization(test, s);
  return s;
}

}  // namespace sgr
