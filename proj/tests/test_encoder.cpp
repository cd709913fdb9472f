#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "mimco/image.hpp"
#include "mimco/linalg.hpp"
#include "mimco/masking.hpp"
#include "mimco/rng.hpp"
#include "mimco/vit.hpp"

using mimco::EncoderConfig;
using mimco::FeatureMap;
using mimco::Image;
using mimco::Mat;
using mimco::Rng;
using mimco::VitActs;
using mimco::VitParams;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.image_h = 32;
  cfg.image_w = 32;
  cfg.token_patch = 16;  // 2x2 = 4 tokens
  cfg.embed_dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

Mat<double> random_pixels(const EncoderConfig& cfg, int batch, std::uint64_t seed) {
  Rng rng(seed);
  Mat<double> px(batch, cfg.in_channels * cfg.image_h * cfg.image_w);
  for (Eigen::Index i = 0; i < px.rows(); ++i)
    for (Eigen::Index j = 0; j < px.cols(); ++j) px(i, j) = rng.normal();
  return px;
}

double weighted_sum(const Mat<double>& values, const Mat<double>& w) {
  return (values.array() * w.array()).sum();
}

}  // namespace

TEST(EncoderConfig, ValidationCatchesBadGeometry) {
  EncoderConfig cfg = tiny_config();
  EXPECT_NO_THROW(cfg.validate());
  cfg.image_h = 33;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.embed_dim = 9;  // not divisible by heads
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.depth = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.mlp_ratio = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(EncoderConfig, DerivedSizes) {
  EncoderConfig cfg;
  cfg.image_h = 64;
  cfg.image_w = 64;
  cfg.token_patch = 16;
  cfg.embed_dim = 96;
  cfg.heads = 4;
  EXPECT_EQ(cfg.token_h(), 4);
  EXPECT_EQ(cfg.token_w(), 4);
  EXPECT_EQ(cfg.tokens(), 16);
  EXPECT_EQ(cfg.patch_dim(), 3 * 16 * 16);
  EXPECT_EQ(cfg.head_dim(), 24);
  EXPECT_EQ(cfg.mlp_hidden(), 384);
}

TEST(Patchify, RowOrderAndLayout) {
  EncoderConfig cfg = tiny_config();
  // Encode coordinates into pixel values; all fit a float exactly.
  Mat<double> px(1, cfg.in_channels * cfg.image_h * cfg.image_w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        px(0, (c * 32 + y) * 32 + x) = c * 10000 + y * 100 + x;
  Mat<double> patches = mimco::detail::patchify(cfg, px);
  ASSERT_EQ(patches.rows(), 4);
  ASSERT_EQ(patches.cols(), 3 * 16 * 16);
  // Token (ty=0, tx=1) is row 1; its first entry is channel 0, py 0, px 16.
  EXPECT_DOUBLE_EQ(patches(1, 0), 16.0);
  // Token (ty=1, tx=0) is row 2; first entry channel 0, py 0 of global y=16.
  EXPECT_DOUBLE_EQ(patches(2, 0), 1600.0);
  // Within a row: channel-major, then patch row, then patch column.
  // Entry [c=1, py=2, px=3] of token row 0 = 1*10000 + 2*100 + 3.
  EXPECT_DOUBLE_EQ(patches(0, (1 * 16 + 2) * 16 + 3), 10203.0);
}

TEST(Encoder, OutputShapeMatchesGeometry) {
  EncoderConfig cfg = tiny_config();
  Rng rng(5);
  VitParams<double> p;
  p.init(cfg, rng);
  Mat<double> px = random_pixels(cfg, 3, 9);
  FeatureMap<double> fm = mimco::encode_batch(p, px, nullptr);
  EXPECT_EQ(fm.batch, 3);
  EXPECT_EQ(fm.tokens(), 4);
  EXPECT_EQ(fm.values.rows(), 12);
  EXPECT_EQ(fm.values.cols(), 8);
  EXPECT_TRUE(fm.values.allFinite());
}

TEST(Encoder, RejectsMismatchedInputs) {
  EncoderConfig cfg = tiny_config();
  Rng rng(5);
  VitParams<double> p;
  p.init(cfg, rng);
  Mat<double> wrong(1, 7);
  EXPECT_THROW(mimco::encode_batch(p, wrong, nullptr), std::invalid_argument);
  Mat<double> px = random_pixels(cfg, 1, 1);
  std::vector<std::uint8_t> short_mask(3, 0);
  EXPECT_THROW(mimco::encode_batch(p, px, &short_mask), std::invalid_argument);
  EncoderConfig dcfg = tiny_config();
  dcfg.dropout = 0.5;
  VitParams<double> pd;
  pd.init(dcfg, rng);
  EXPECT_THROW(mimco::encode_batch(pd, px, nullptr, /*train=*/true, /*rng=*/nullptr),
               std::invalid_argument);
}

TEST(Encoder, AllFalseMaskEqualsUnmaskedForward) {
  EncoderConfig cfg = tiny_config();
  Rng rng(11);
  VitParams<double> p;
  p.init(cfg, rng);
  Mat<double> px = random_pixels(cfg, 2, 13);
  std::vector<std::uint8_t> none(2 * 4, 0);
  FeatureMap<double> masked = mimco::encode_batch(p, px, &none);
  FeatureMap<double> plain = mimco::encode_batch(p, px, nullptr);
  EXPECT_EQ(masked.values, plain.values);
}

TEST(Encoder, MaskTokenSubstitutionChangesOutput) {
  EncoderConfig cfg = tiny_config();
  Rng rng(17);
  VitParams<double> p;
  p.init(cfg, rng);
  Mat<double> px = random_pixels(cfg, 1, 19);
  std::vector<std::uint8_t> mask = {1, 0, 0, 0};
  FeatureMap<double> masked = mimco::encode_batch(p, px, &mask);
  FeatureMap<double> plain = mimco::encode_batch(p, px, nullptr);
  EXPECT_NE(masked.values, plain.values);
}

TEST(Encoder, MaskedPixelsNeverReachTheOutput) {
  // Two images identical outside the masked cells must encode identically,
  // bit for bit: the mask token replaces embeddings before anything mixes.
  mimco::PatchGrid grid(64, 64, 32, 16);
  EncoderConfig cfg;
  cfg.image_h = 64;
  cfg.image_w = 64;
  cfg.token_patch = 16;
  cfg.embed_dim = 16;
  cfg.depth = 2;
  cfg.heads = 2;
  Rng rng(23);
  VitParams<float> p;
  p.init(cfg, rng);

  Rng mask_rng(29);
  mimco::Mask mask = mimco::generate_mask(grid, 0.5, mask_rng);
  std::vector<std::uint8_t> token_mask = mimco::expand_to_tokens(mask, grid);

  Rng pix(31);
  Image a(64, 64, 3);
  for (auto& v : a.data) v = static_cast<float>(pix.uniform());
  Image b = a;
  // Scramble every pixel whose mask cell is on.
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        const int cell = (y / 32) * grid.grid_w() + (x / 32);
        if (mask.cells[static_cast<std::size_t>(cell)])
          b.at(c, y, x) = static_cast<float>(pix.uniform());
      }
    }
  }
  ASSERT_NE(a.data, b.data);

  FeatureMap<float> fa = mimco::encode_masked(p, a, token_mask);
  FeatureMap<float> fb = mimco::encode_masked(p, b, token_mask);
  EXPECT_EQ(fa.values, fb.values);
}

TEST(Encoder, GlobalAveragePoolMatchesManualMean) {
  EncoderConfig cfg = tiny_config();
  Rng rng(37);
  VitParams<double> p;
  p.init(cfg, rng);
  Mat<double> px = random_pixels(cfg, 2, 41);
  FeatureMap<double> fm = mimco::encode_batch(p, px, nullptr);
  Mat<double> pooled = mimco::global_average_pool(fm);
  ASSERT_EQ(pooled.rows(), 2);
  ASSERT_EQ(pooled.cols(), 8);
  for (int b = 0; b < 2; ++b) {
    for (int j = 0; j < 8; ++j) {
      double s = 0;
      for (int t = 0; t < 4; ++t) s += fm.values(b * 4 + t, j);
      EXPECT_NEAR(pooled(b, j), s / 4.0, 1e-12);
    }
  }
  // Backward spreads the pooled gradient evenly across token rows.
  Mat<double> dp = Mat<double>::Random(2, 8);
  Mat<double> dt = mimco::global_average_pool_backward(dp, 4);
  ASSERT_EQ(dt.rows(), 8);
  for (int b = 0; b < 2; ++b)
    for (int t = 0; t < 4; ++t)
      for (int j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(dt(b * 4 + t, j), dp(b, j) / 4.0);
}

TEST(Encoder, FiniteDifferenceGradients) {
  EncoderConfig cfg = tiny_config();
  Rng rng(43);
  VitParams<double> p;
  p.init(cfg, rng);
  const int batch = 2;
  const int T = cfg.tokens();
  Mat<double> px = random_pixels(cfg, batch, 47);
  // Mask a couple of rows so mask_token picks up gradient too.
  std::vector<std::uint8_t> mask = {1, 0, 0, 1, 0, 1, 0, 0};

  Rng wrng(53);
  Mat<double> w(batch * T, cfg.embed_dim);
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = wrng.normal();

  auto loss = [&]() {
    FeatureMap<double> fm = mimco::encode_batch(p, px, &mask);
    return weighted_sum(fm.values, w);
  };

  auto reg = mimco::collect_params(p);
  mimco::zero_grads(reg);
  VitActs<double> acts;
  FeatureMap<double> fm = mimco::encode_batch(p, px, &mask, false, nullptr, &acts);
  mimco::encode_backward(p, acts, w);

  const double h = 1e-5;
  int checked = 0;
  for (const auto& ref : reg) {
    Mat<double>& v = ref.p->v;
    const Mat<double>& g = ref.p->g;
    const Eigen::Index n = v.size();
    std::vector<Eigen::Index> picks = {0, n / 3, (2 * n) / 3, n - 1};
    for (Eigen::Index flat : picks) {
      if (flat < 0 || flat >= n) continue;
      const Eigen::Index i = flat / v.cols();
      const Eigen::Index j = flat % v.cols();
      const double orig = v(i, j);
      v(i, j) = orig + h;
      const double lp = loss();
      v(i, j) = orig - h;
      const double lm = loss();
      v(i, j) = orig;
      const double fd = (lp - lm) / (2 * h);
      const double an = g(i, j);
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      const double rel = std::abs(fd - an) / denom;
      EXPECT_LT(rel, 1e-4) << ref.name << " entry (" << i << "," << j << "): analytic " << an
                           << " fd " << fd;
      ++checked;
    }
  }
  // Every tensor contributed at least one probe.
  EXPECT_GE(checked, static_cast<int>(reg.size()));
}

TEST(Encoder, DropoutAndDropPathAreDeterministicUnderSeed) {
  EncoderConfig cfg = tiny_config();
  cfg.dropout = 0.3;
  cfg.drop_path = 0.2;
  Rng init(59);
  VitParams<float> p;
  p.init(cfg, init);
  Mat<float> px = random_pixels(cfg, 2, 61).cast<float>();

  Rng a(71), b(71), c(72);
  FeatureMap<float> fa = mimco::encode_batch(p, px, nullptr, true, &a);
  FeatureMap<float> fb = mimco::encode_batch(p, px, nullptr, true, &b);
  FeatureMap<float> fc = mimco::encode_batch(p, px, nullptr, true, &c);
  EXPECT_EQ(fa.values, fb.values);
  EXPECT_NE(fa.values, fc.values);
  // Eval mode ignores the rates entirely.
  FeatureMap<float> fe1 = mimco::encode_batch(p, px, nullptr, false);
  FeatureMap<float> fe2 = mimco::encode_batch(p, px, nullptr, false);
  EXPECT_EQ(fe1.values, fe2.values);

  // Backward through a stochastic forward still runs and stays finite.
  Rng d(73);
  VitActs<float> acts;
  FeatureMap<float> fm = mimco::encode_batch(p, px, nullptr, true, &d, &acts);
  Mat<float> grad = Mat<float>::Ones(fm.values.rows(), fm.values.cols());
  auto reg = mimco::collect_params(p);
  mimco::zero_grads(reg);
  mimco::encode_backward(p, acts, grad);
  for (const auto& r : reg) EXPECT_TRUE(r.p->g.allFinite()) << r.name;
}
