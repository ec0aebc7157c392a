#include <gtest/gtest.h>

#include "medvqa/augment.hpp"
#include "medvqa/error.hpp"

using namespace medvqa;

namespace {

Image checker(int n) {
  Image img(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = ((x / 4 + y / 4) % 2) ? 0.9f : 0.1f;
  return img;
}

AugmentConfig only(double AugmentConfig::*prob) {
  auto cfg = AugmentConfig::none();
  cfg.*prob = 1.0;
  return cfg;
}

}  // namespace

TEST(Augment, NoneIsIdentity) {
  std::mt19937_64 rng(1);
  auto img = checker(32);
  EXPECT_EQ(augment(img, AugmentConfig::none(), rng), img);
}

TEST(Augment, SameSeedSameOutput) {
  std::mt19937_64 a(5), b(5);
  auto img = checker(32);
  AugmentConfig cfg;
  for (int i = 0; i < 5; ++i) EXPECT_EQ(augment(img, cfg, a), augment(img, cfg, b));
}

TEST(Augment, EachTransformKeepsShapeAndRange) {
  auto img = checker(32);
  std::mt19937_64 rng(2);
  for (auto prob : {&AugmentConfig::brightness_contrast_prob, &AugmentConfig::translate_rotate_prob,
                    &AugmentConfig::gaussian_blur_prob, &AugmentConfig::gaussian_noise_prob,
                    &AugmentConfig::crop_prob, &AugmentConfig::hflip_prob}) {
    auto cfg = only(prob);
    cfg.crop_scale_min = 0.5;
    auto out = augment(img, cfg, rng);
    EXPECT_EQ(out.height, 32);
    EXPECT_EQ(out.width, 32);
    EXPECT_NO_THROW(out.validate());
    EXPECT_NE(out, img);
  }
}

TEST(Augment, FlipMirrorsColumns) {
  Image img(2, 3);
  img.at(0, 0, 0) = 1.0f;
  std::mt19937_64 rng(3);
  auto out = augment(img, only(&AugmentConfig::hflip_prob), rng);
  EXPECT_EQ(out.at(0, 2, 0), 1.0f);
  EXPECT_EQ(out.at(0, 0, 0), 0.0f);
}

TEST(Augment, Validation) {
  AugmentConfig cfg;
  cfg.gaussian_noise_prob = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = AugmentConfig{};
  cfg.blur_kernel = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = AugmentConfig{};
  cfg.translate_rotate_magnitude = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(AugmentConfig::pretraining().validate());
  EXPECT_EQ(AugmentConfig::pretraining().hflip_prob, 0.0);
}
