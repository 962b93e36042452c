// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace sgr;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("sgr_dataio_" + name)).string();
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Two 2×3 images and their labels, byte for byte.
const std::vector<unsigned char> kImages = {0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3,
                                            0,    51,   102,  153,  204, 255, 255, 0, 1, 2, 128, 254};
const std::vector<unsigned char> kLabels = {0x00, 0x00, 0x08, 0x01, 0, 0, 0, 2, 7, 3};

struct IdxFiles {
  std::string img = temp_path("img.idx"), lbl = temp_path("lbl.idx");
  IdxFiles(const std::vector<unsigned char>& i, const std::vector<unsigned char>& l) {
    write_bytes(img, i);
    write_bytes(lbl, l);
  }
  ~IdxFiles() {
    std::filesystem::remove(img);
    std::filesystem::remove(lbl);
  }
};

}  // namespace

TEST(Idx, HandWrittenFixtureRecoversPixels) {
  const IdxFiles f(kImages, kLabels);
  const Dataset ds = load_mnist_idx(f.img, f.lbl);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.dim(), 6u);
  EXPECT_EQ(ds.classes, 10u);
  EXPECT_EQ(ds.labels, (std::vector<std::size_t>{7, 3}));
  const double expect[12] = {0, 0.2, 0.4, 0.6, 0.8, 1, 1, 0, 1.0 / 255, 2.0 / 255, 128.0 / 255, 254.0 / 255};
  for (std::size_t i = 0; i < 12; ++i) EXPECT_DOUBLE_EQ(ds.features[i], expect[i]);
}

TEST(Idx, BadMagicRejected) {
  auto img = kImages;
  img[3] = 0x02;  // 2050
  const IdxFiles f(img, kLabels);
  try {
    load_mnist_idx(f.img, f.lbl);
    FAIL();
  } catch (const IdxError& e) {
    EXPECT_NE(std::string(e.what()).find("2050"), std::string::npos);
  }
  const IdxFiles g(kImages, kImages);
  EXPECT_THROW(load_mnist_idx(g.img, g.lbl), IdxError);
}

TEST(Idx, TruncationAndCountMismatchRejected) {
  {
    const IdxFiles f(std::vector<unsigned char>(kImages.begin(), kImages.end() - 1), kLabels);
    EXPECT_THROW(load_mnist_idx(f.img, f.lbl), IdxError);
  }
  {
    const IdxFiles f(std::vector<unsigned char>(kImages.begin(), kImages.begin() + 10), kLabels);
    EXPECT_THROW(load_mnist_idx(f.img, f.lbl), IdxError);
  }
  {
    auto lbl = kLabels;
    lbl[7] = 3;
    lbl.push_back(1);
    const IdxFiles f(kImages, lbl);
    EXPECT_THROW(load_mnist_idx(f.img, f.lbl), IdxError);
  }
  EXPECT_THROW(load_mnist_idx("/nonexistent/a", "/nonexistent/b"), IdxError);
}

TEST(Idx, WriteThenReadIsIdentity) {
  auto rng = make_rng(1);
  Dataset ds;
  ds.classes = 10;
  ds.features = Tensor(Shape{5, 12});
  for (std::size_t i = 0; i < ds.features.size(); ++i) ds.features[i] = static_cast<double>(rng() % 256) / 255.0;
  for (std::size_t i = 0; i < 5; ++i) ds.labels.push_back(rng() % 10);
  const std::string img = temp_path("w_img"), lbl = temp_path("w_lbl");
  write_mnist_idx(ds, 3, 4, img, lbl);
  const Dataset back = load_mnist_idx(img, lbl);
  EXPECT_EQ(back.features, ds.features);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_THROW(write_mnist_idx(ds, 3, 3, img, lbl), DimensionError);
  std::filesystem::remove(img);
  std::filesystem::remove(lbl);
}

TEST(Blobs, ZeroNoiseSamplesSitOnScaledEtfVertices) {
  const Dataset ds = synth_blobs(5, 7, 3, 2.5, 0.0, 4);
  const EtfClassifier M = make_etf(5, 7, 4);
  ASSERT_EQ(ds.size(), 15u);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(ds.features.at(i, j), 2.5 * M.M.at(ds.labels[i], j));
  // Means realize the Gram structure scaled by r².
  const double K = 5, r2 = 6.25;
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = 0; b < 5; ++b) {
      double g = 0;
      for (std::size_t j = 0; j < 7; ++j) g += ds.features.at(a, j) * ds.features.at(b, j);
      EXPECT_NEAR(g, r2 * K / (K - 1) * ((a == b ? 1.0 : 0.0) - 1 / K), 1e-9);
    }
}

TEST(Blobs, BalancedAndDeterministic) {
  const Dataset a = synth_blobs(4, 6, 25, 3.0, 1.0, 7), b = synth_blobs(4, 6, 25, 3.0, 1.0, 7);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  std::vector<std::size_t> count(4, 0);
  for (std::size_t y : a.labels) ++count[y];
  for (std::size_t c : count) EXPECT_EQ(c, 25u);
  EXPECT_FALSE(a.features == synth_blobs(4, 6, 25, 3.0, 1.0, 8).features);
  EXPECT_THROW(synth_blobs(4, 3, 2, 1.0, 1.0, 0), UnsupportedDimensionError);
  EXPECT_THROW(synth_blobs(4, 6, 2, 1.0, -1.0, 0), std::invalid_argument);
}

TEST(Blobs, NearestMeanClassifierIsPerfectWhenWellSeparated) {
  const std::size_t K = 10, d = 16;
  const Dataset ds = synth_blobs(K, d, 100, 10.0, 1.0 / std::sqrt(static_cast<double>(d)), 5);
  const EtfClassifier M = make_etf(K, d, 5);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += std::pow(ds.features.at(i, j) - 10.0 * M.M.at(k, j), 2);
      if (s < best_d) best_d = s, best = k;
    }
    correct += best == ds.labels[i];
  }
  EXPECT_EQ(correct, ds.size());
}

TEST(Split, PerClassShares) {
  const Dataset ds = synth_blobs(3, 4, 10, 1.0, 1.0, 0);
  const auto [tr, te] = train_test_split(ds, 0.3);
  EXPECT_EQ(tr.size(), 21u);
  EXPECT_EQ(te.size(), 9u);
  EXPECT_EQ(tr.split, "train");
  EXPECT_EQ(te.split, "test");
  EXPECT_THROW(train_test_split(ds, 1.0), std::invalid_argument);
}

TEST(Standardize, ColumnMomentsAfterFit) {
  auto [tr, te] = train_test_split(synth_blobs(4, 6, 50, 5.0, 2.0, 1), 0.5);
  const Dataset te_raw = te;
  const Standardization s = standardize(tr, te);
  for (std::size_t j = 0; j < 6; ++j) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < tr.size(); ++i) m += tr.features.at(i, j) / static_cast<double>(tr.size());
    for (std::size_t i = 0; i < tr.size(); ++i) v += std::pow(tr.features.at(i, j) - m, 2) / static_cast<double>(tr.size());
    EXPECT_LE(std::abs(m), 1e-10);
    EXPECT_NEAR(v, 1.0, 1e-10);
  }
  for (std::size_t i = 0; i < te.size(); ++i)
    for (std::size_t j = 0; j < 6; ++j)
      EXPECT_NEAR(te.features.at(i, j), (te_raw.features.at(i, j) - s.mean[j]) / s.std[j], 1e-15);
  EXPECT_TRUE(tr.standardized);
  EXPECT_TRUE(te.standardized);
}

TEST(Standardize, IdempotentOnStandardizedData) {
  auto [tr, te] = train_test_split(synth_blobs(4, 6, 50, 5.0, 2.0, 2), 0.5);
  standardize(tr, te);
  const Dataset once = tr;
  standardize(tr, te);
  EXPECT_LE(max_abs_diff(tr.features, once.features), 1e-12);
}

TEST(Standardize, ConstantFeatureClampsScale) {
  Dataset tr = synth_blobs(2, 3, 10, 1.0, 1.0, 3);
  for (std::size_t i = 0; i < tr.size(); ++i) tr.features.at(i, 1) = 4.0;
  Dataset te = tr;
  const Standardization s = standardize(tr, te);
  EXPECT_EQ(s.std[1], 1.0);
  EXPECT_EQ(s.mean[1], 4.0);
  for (std::size_t i = 0; i < tr.size(); ++i) EXPECT_EQ(tr.features.at(i, 1), 0.0);
  Dataset one = tr;
  one.features = Tensor(Shape{1, 3});
  one.labels = {0};
  EXPECT_THROW(fit_standardization(one), std::invalid_argument);
}

TEST(Dataset, ValidationErrors) {
  Dataset ds = synth_blobs(2, 3, 2, 1.0, 1.0, 0);
  ds.labels[0] = 2;
  EXPECT_THROW(validate(ds), std::out_of_range);
  ds.labels.pop_back();
  EXPECT_THROW(validate(ds), DimensionError);
  EXPECT_THROW(validate(Dataset{}), std::exception);
}

TEST(Config, EmptyTextGivesDefaults) {
  const TrainConfig c = parse_config_text("");
  EXPECT_EQ(c, TrainConfig{});
  EXPECT_EQ(c.lambda, 1.0);
  EXPECT_EQ(c.mode, TrainMode::Sgr);
  EXPECT_EQ(c.momentum, 0.9);
}

TEST(Config, KeysCommentsAndWhitespace) {
  const TrainConfig c = parse_config_text(
      "# recipe\n lambda = 0.5  \nmode=layerwise # trailing\n\nnormalize_deltas = off\r\nschedule = constant\n"
      "head_mode = localbp\nepochs = 7\nbatch_size=32\nseed = 9\nmodules = 4\nlr = 1e-2\nmomentum = 0\n"
      "weight_decay = 0\n");
  EXPECT_EQ(c.lambda, 0.5);
  EXPECT_EQ(c.mode, TrainMode::Layerwise);
  EXPECT_FALSE(c.normalize_deltas);
  EXPECT_EQ(c.schedule, Schedule::Constant);
  EXPECT_EQ(c.head_mode, HeadMode::LocalBp);
  EXPECT_EQ(c.epochs, 7u);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.modules, 4u);
  EXPECT_EQ(c.lr, 0.01);
  EXPECT_EQ(c.momentum, 0.0);
}

TEST(Config, ErrorsNameTheProblem) {
  auto message = [](const std::string& text) {
    try {
      parse_config_text(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("modee = sgr").find("modee"), std::string::npos);
  EXPECT_NE(message("lambda 0.5").find("line 1"), std::string::npos);
  EXPECT_NE(message("\nlambda = abc").find("line 2"), std::string::npos);
  EXPECT_NE(message("lambda = -1").find("lambda"), std::string::npos);
  EXPECT_NE(message("batch_size = 0").find("batch_size"), std::string::npos);
  EXPECT_NE(message("epochs = 3.5").find("epochs"), std::string::npos);
  EXPECT_NE(message("mode = bp").find("bp"), std::string::npos);
  EXPECT_NE(message("= 3").find("empty key"), std::string::npos);
  EXPECT_THROW(parse_config("/nonexistent/recipe.cfg"), ConfigError);
}

TEST(Config, SerializeParseIsIdentity) {
  TrainConfig c;
  c.mode = TrainMode::Reforward;
  c.head_mode = HeadMode::LocalBp;
  c.lambda = 0.1;
  c.lr = 1.0 / 3.0;
  c.weight_decay = 1e-5;
  c.normalize_deltas = false;
  c.schedule = Schedule::Constant;
  c.epochs = 11;
  c.batch_size = 3;
  c.seed = 123456789012345ULL;
  c.modules = 5;
  EXPECT_EQ(parse_config_text(serialize_config(c)), c);
  EXPECT_EQ(parse_config_text(serialize_config(TrainConfig{})), TrainConfig{});
  const std::string path = temp_path("c.cfg");
  write_text(path, serialize_config(c));
  EXPECT_EQ(parse_config(path), c);
  std::filesystem::remove(path);
}
