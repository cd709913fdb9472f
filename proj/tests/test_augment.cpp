#include <stdexcept>

#include <gtest/gtest.h>

#include "mimco/augment.hpp"
#include "mimco/rng.hpp"

using mimco::AugmentationConfig;
using mimco::Image;
using mimco::Rng;

namespace {

Image random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w, 3);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace

TEST(Augment, IdentityConfigIsPassThrough) {
  Image img = random_image(64, 64, 1);
  AugmentationConfig cfg = AugmentationConfig{}.identity_for(64, 64);
  Rng rng(2);
  Image out = mimco::apply_weak_augmentation(img, cfg, rng);
  ASSERT_EQ(out.h, 64);
  ASSERT_EQ(out.w, 64);
  EXPECT_EQ(out.data, img.data);
}

TEST(Augment, DeterministicUnderSeed) {
  Image img = random_image(48, 80, 3);
  AugmentationConfig cfg;
  cfg.out_h = 64;
  cfg.out_w = 64;
  cfg.color_jitter = 0.4;
  cfg.grayscale_prob = 0.2;
  Rng a(7), b(7);
  for (int i = 0; i < 10; ++i) {
    Image va = mimco::apply_weak_augmentation(img, cfg, a);
    Image vb = mimco::apply_weak_augmentation(img, cfg, b);
    ASSERT_EQ(va.data, vb.data);
  }
}

TEST(Augment, OutputShapeFollowsConfig) {
  Image img = random_image(100, 40, 5);
  AugmentationConfig cfg;
  cfg.out_h = 64;
  cfg.out_w = 64;
  Rng rng(11);
  Image out = mimco::apply_weak_augmentation(img, cfg, rng);
  EXPECT_EQ(out.h, 64);
  EXPECT_EQ(out.w, 64);
  EXPECT_EQ(out.c, 3);
}

TEST(Augment, NormalizationCentersConstantImage) {
  Image img(32, 32, 3);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) img.at(c, y, x) = 0.5f;
  AugmentationConfig cfg;
  cfg.crop_scale_lo = 1.0;
  cfg.crop_scale_hi = 1.0;
  cfg.aspect_lo = 1.0;
  cfg.aspect_hi = 1.0;
  cfg.hflip_prob = 0.0;
  cfg.out_h = 32;
  cfg.out_w = 32;
  // defaults: mean 0.5, std 0.25 per channel
  Rng rng(13);
  Image out = mimco::apply_weak_augmentation(img, cfg, rng);
  for (float v : out.data) ASSERT_FLOAT_EQ(v, 0.0f);
}

TEST(Augment, HorizontalFlipMirrorsColumns) {
  Image img = random_image(16, 16, 17);
  AugmentationConfig cfg = AugmentationConfig{}.identity_for(16, 16);
  cfg.hflip_prob = 1.0;
  Rng rng(1);
  Image out = mimco::apply_weak_augmentation(img, cfg, rng);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        ASSERT_FLOAT_EQ(out.at(c, y, x), img.at(c, y, 15 - x));
}

TEST(Augment, RejectsTinyOrNonRgbImages) {
  AugmentationConfig cfg;
  Rng rng(1);
  Image tiny(1, 8, 3);
  EXPECT_THROW(mimco::apply_weak_augmentation(tiny, cfg, rng), std::invalid_argument);
  Image gray(16, 16, 1);
  EXPECT_THROW(mimco::apply_weak_augmentation(gray, cfg, rng), std::invalid_argument);
}

TEST(Augment, ValidateRejectsBadRanges) {
  AugmentationConfig cfg;
  cfg.crop_scale_lo = 0.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AugmentationConfig{};
  cfg.aspect_lo = 2.0;  // lo > hi
  cfg.aspect_hi = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AugmentationConfig{};
  cfg.hflip_prob = 1.5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AugmentationConfig{};
  cfg.stddev = {0.25, 0.0, 0.25};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(EvalTransform, DeterministicResizeAndNormalize) {
  Image img = random_image(80, 48, 23);
  AugmentationConfig cfg;
  cfg.out_h = 64;
  cfg.out_w = 64;
  Image a = mimco::eval_transform(img, cfg);
  Image b = mimco::eval_transform(img, cfg);
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(a.h, 64);
  EXPECT_EQ(a.w, 64);
}

TEST(EvalTransform, SameSizeIsNormalizationOnly) {
  Image img = random_image(64, 64, 29);
  AugmentationConfig cfg;
  cfg.out_h = 64;
  cfg.out_w = 64;
  Image out = mimco::eval_transform(img, cfg);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const int ch = static_cast<int>(i / (64 * 64));
    const float expect = (img.data[i] - static_cast<float>(cfg.mean[static_cast<std::size_t>(ch)])) /
                         static_cast<float>(cfg.stddev[static_cast<std::size_t>(ch)]);
    ASSERT_FLOAT_EQ(out.data[i], expect);
  }
}
