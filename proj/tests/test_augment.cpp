#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace prototransfer;
using namespace pt_test;

namespace {

Image random_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(c, h, w);
  for (float& v : img.pixels) v = static_cast<float>(uniform(rng, 0, 1));
  return img;
}

Image from_rows(std::size_t h, std::size_t w, std::vector<float> v) {
  Image img(1, h, w);
  img.pixels = std::move(v);
  return img;
}

std::size_t zeros(const Image& img) {
  return static_cast<std::size_t>(std::count(img.pixels.begin(), img.pixels.end(), 0.0f));
}

}  // namespace

// ---- crop and resize -------------------------------------------------------------

TEST(RandomResizedCrop, DegenerateRangesGiveFullResize) {
  const Image img = random_image(3, 12, 12, 1);
  Rng rng(1);
  EXPECT_EQ(random_resized_crop(img, {1, 1}, {1, 1}, 7, rng), resize(img, 7, 7));
}

TEST(RandomResizedCrop, ConstantImageStaysConstant) {
  const Image img(1, 20, 13, 0.37f);
  Rng rng(2);
  for (int k = 0; k < 20; ++k) {
    const Image out = random_resized_crop(img, {0.08, 1}, {0.75, 4.0 / 3}, 9, rng);
    ASSERT_EQ(out.height, 9u);
    for (float v : out.pixels) EXPECT_NEAR(v, 0.37f, 1e-6);
  }
}

TEST(RandomResizedCrop, CheckerboardTopLeftBlockIsExact) {
  std::vector<float> v(16);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) v[y * 4 + x] = static_cast<float>((x + y) % 2);
  const Image board = from_rows(4, 4, v);
  const Image out = crop_resize(board, 0, 0, 2, 2, 2, 2);
  EXPECT_EQ(out.pixels, (std::vector<float>{0, 1, 1, 0}));
  const Image shifted = crop_resize(board, 1, 2, 2, 2, 2, 2);
  EXPECT_EQ(shifted.pixels, (std::vector<float>{1, 0, 0, 1}));
}

TEST(RandomResizedCrop, RejectsBadArguments) {
  const Image img(1, 8, 8);
  Rng rng(3);
  EXPECT_THROW(random_resized_crop(img, {0.5, 1}, {1, 1}, 0, rng), GeometryError);
  EXPECT_THROW(random_resized_crop(img, {0.0, 1}, {1, 1}, 4, rng), ContractError);
  EXPECT_THROW(random_resized_crop(img, {0.9, 0.5}, {1, 1}, 4, rng), ContractError);
  EXPECT_THROW(random_resized_crop(img, {0.5, 1}, {-1, 1}, 4, rng), ContractError);
}

// ---- flips -------------------------------------------------------------------------

TEST(Flip, ZeroProbabilityIsIdentity) {
  const Image img = random_image(3, 5, 4, 4);
  Rng rng(4);
  EXPECT_EQ(flip_h(img, 0, rng), img);
  EXPECT_EQ(flip_v(img, 0, rng), img);
}

TEST(Flip, IsAnInvolution) {
  const Image img = random_image(3, 5, 4, 5);
  Rng rng(5);
  EXPECT_EQ(flip_h(flip_h(img, 1, rng), 1, rng), img);
  EXPECT_EQ(flip_v(flip_v(img, 1, rng), 1, rng), img);
}

TEST(Flip, MirrorsByHand) {
  Rng rng(6);
  const Image img = from_rows(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(flip_h(img, 1, rng).pixels, (std::vector<float>{2, 1, 4, 3}));
  EXPECT_EQ(flip_v(img, 1, rng).pixels, (std::vector<float>{3, 4, 1, 2}));
}

// ---- color -------------------------------------------------------------------------

TEST(ColorJitter, ZeroProbabilityOrStrengthIsIdentity) {
  const Image img = random_image(3, 6, 6, 7);
  Rng rng(7);
  EXPECT_EQ(color_jitter(img, 0.8, 0.8, 0.8, 0.2, 0.0, rng), img);
  EXPECT_EQ(color_jitter(img, 0, 0, 0, 0, 1.0, rng), img);
}

TEST(ColorJitter, GrayPixelsIgnoreSaturationAndHue) {
  const Image img(3, 4, 4, 0.5f);
  Rng rng(8);
  for (int k = 0; k < 50; ++k) {
    const Image out = color_jitter(img, 0, 0, 0.9, 0.5, 1.0, rng);
    for (float v : out.pixels) ASSERT_NEAR(v, 0.5f, 1e-6);
  }
}

TEST(ColorJitter, HsvRoundTrip) {
  Rng rng(9);
  for (int k = 0; k < 200; ++k) {
    const double r = uniform(rng, 0, 1), g = uniform(rng, 0, 1), b = uniform(rng, 0, 1);
    const auto back = hsv_to_rgb(rgb_to_hsv(r, g, b));
    EXPECT_NEAR(back[0], r, 1e-9);
    EXPECT_NEAR(back[1], g, 1e-9);
    EXPECT_NEAR(back[2], b, 1e-9);
  }
}

TEST(Grayscale, ZeroProbabilityAndGrayInputAreIdentity) {
  Rng rng(10);
  const Image img = random_image(3, 4, 4, 10);
  EXPECT_EQ(random_grayscale(img, 0, rng), img);
  Image gray(3, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) {
    const float v = static_cast<float>(i) / 16;
    for (std::size_t c = 0; c < 3; ++c) gray.pixels[c * 16 + i] = v;
  }
  const Image out = random_grayscale(gray, 1, rng);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) EXPECT_NEAR(out.pixels[i], gray.pixels[i], 1e-6);
}

TEST(Grayscale, PureRedUsesLumaWeights) {
  Rng rng(11);
  Image red(3, 1, 1);
  red.pixels = {1, 0, 0};
  const Image out = random_grayscale(red, 1, rng);
  for (float v : out.pixels) EXPECT_NEAR(v, 0.299f, 1e-6);
}

// ---- blur ----------------------------------------------------------------------------

TEST(GaussianBlur, ConstantImageStaysConstant) {
  Rng rng(12);
  const Image out = gaussian_blur(Image(3, 9, 7, 0.6f), {0.1, 2.0}, rng);
  for (float v : out.pixels) EXPECT_NEAR(v, 0.6f, 1e-6);
}

TEST(GaussianBlur, VanishingSigmaIsIdentity) {
  const Image img = random_image(1, 8, 8, 13);
  EXPECT_EQ(gaussian_blur_sigma(img, 0.0), img);
  const Image tiny = gaussian_blur_sigma(img, 1e-3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(tiny.pixels[i], img.pixels[i], 1e-7);
}

TEST(GaussianBlur, ImpulseMatchesHandKernel) {
  Image impulse(1, 1, 5);
  impulse.at(0, 0, 2) = 1.0f;
  const Image out = gaussian_blur_sigma(impulse, 0.2);
  // Radius ceil(3 * 0.2) = 1; side tap exp(-1 / (2 * 0.04)).
  const double side = std::exp(-12.5);
  const double norm = 1 + 2 * side;
  EXPECT_NEAR(out.at(0, 0, 2), 1 / norm, 1e-7);
  EXPECT_NEAR(out.at(0, 0, 1), side / norm, 1e-9);
  EXPECT_NEAR(out.at(0, 0, 3), side / norm, 1e-9);
  EXPECT_EQ(out.at(0, 0, 0), 0.0f);
  const auto k = gaussian_kernel(0.2);
  ASSERT_EQ(k.size(), 3u);
  EXPECT_NEAR(k[0], side / norm, 1e-15);
}

// ---- dropout and erasing -----------------------------------------------------------------

TEST(PixelDropout, ExtremesAndIdentity) {
  const Image img(1, 10, 10, 1.0f);
  Rng rng(14);
  EXPECT_EQ(pixel_dropout(img, 0, 0.5, rng), img);
  EXPECT_EQ(zeros(pixel_dropout(img, 1, 1.0, rng)), 100u);
  EXPECT_EQ(pixel_dropout(img, 1, 0.0, rng), img);
}

TEST(PixelDropout, HalfRateConcentrates) {
  const Image img(1, 100, 100, 1.0f);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const double frac = static_cast<double>(zeros(pixel_dropout(img, 1, 0.5, rng))) / 10000.0;
    EXPECT_GE(frac, 0.47);
    EXPECT_LE(frac, 0.53);
  }
}

TEST(PixelDropout, DropsAllChannelsTogether) {
  const Image img(3, 8, 8, 1.0f);
  Rng rng(15);
  const Image out = pixel_dropout(img, 1, 0.5, rng);
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_EQ(out.pixels[i], out.pixels[64 + i]);
    EXPECT_EQ(out.pixels[i], out.pixels[128 + i]);
  }
}

TEST(RandomErasing, ZeroScaleIsIdentity) {
  const Image img = random_image(1, 28, 28, 16);
  Rng rng(16);
  EXPECT_EQ(random_erasing(img, {0, 0}, {0.3, 3.3}, rng), img);
}

TEST(RandomErasing, ErasedFractionStaysInScaleBounds) {
  const Image img(1, 28, 28, 1.0f);
  Rng rng(17);
  std::size_t erased = 0;
  for (int k = 0; k < 100; ++k) {
    const double frac = static_cast<double>(zeros(random_erasing(img, {0.02, 0.33}, {0.3, 3.3}, rng))) / 784.0;
    if (frac == 0) continue;
    ++erased;
    EXPECT_GE(frac, 0.02);
    EXPECT_LE(frac, 0.33);
  }
  EXPECT_GE(erased, 90u);
}

TEST(RandomErasing, OnlyTheRectangleChanges) {
  const Image img(1, 28, 28, 1.0f);
  Rng rng(18);
  const Image out = random_erasing(img, {0.1, 0.2}, {0.5, 2}, rng);
  EXPECT_EQ(*std::min_element(out.pixels.begin(), out.pixels.end()), 0.0f);
  std::size_t y0 = 28, y1 = 0, x0 = 28, x1 = 0;
  for (std::size_t y = 0; y < 28; ++y)
    for (std::size_t x = 0; x < 28; ++x)
      if (out.at(0, y, x) == 0.0f) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  for (std::size_t y = 0; y < 28; ++y)
    for (std::size_t x = 0; x < 28; ++x) {
      const bool inside = y >= y0 && y <= y1 && x >= x0 && x <= x1;
      EXPECT_EQ(out.at(0, y, x), inside ? 0.0f : 1.0f);
    }
}

// ---- pipeline ------------------------------------------------------------------------------

TEST(Pipeline, InactiveStagesReduceToResize) {
  AugmentationPipeline p{"noop", 3, 10, {}};
  p.transforms.push_back(presets::rrc({1, 1}, 10));
  p.transforms.back().ratio = {1, 1};
  TransformSpec f;
  f.kind = TransformKind::FlipH;
  f.p = 0;
  p.transforms.push_back(f);
  TransformSpec j = presets::jitter(0.8);
  j.p = 0;
  p.transforms.push_back(j);
  TransformSpec e;
  e.kind = TransformKind::RandomErasing;
  e.p = 0;
  p.transforms.push_back(e);
  const Image img = random_image(3, 16, 16, 19);
  Rng rng(19);
  EXPECT_EQ(apply_pipeline(p, img, rng), resize(img, 10, 10));
}

TEST(Pipeline, SameStreamGivesSameOutput) {
  const Image img = random_image(3, 30, 30, 20);
  for (const char* name : {"mini", "cdfsl"}) {
    const auto p = pipeline_preset(name, 24);
    Rng a = make_stream(5, Stream::Augment, {1, 2}), b = make_stream(5, Stream::Augment, {1, 2});
    EXPECT_EQ(apply_pipeline(p, img, a), apply_pipeline(p, img, b)) << name;
  }
}

TEST(Pipeline, OmniglotOutputIs28RegardlessOfInput) {
  const auto p = omniglot_pipeline();
  Rng rng(21);
  for (std::size_t s : {10u, 28u, 57u, 105u}) {
    const Image out = apply_pipeline(p, random_image(1, s, s + 3, s), rng);
    EXPECT_EQ(out.channels, 1u);
    EXPECT_EQ(out.height, 28u);
    EXPECT_EQ(out.width, 28u);
  }
}

TEST(Pipeline, ChannelMismatchIsRejected) {
  Rng rng(22);
  EXPECT_THROW(apply_pipeline(omniglot_pipeline(), Image(3, 28, 28), rng), ContractError);
  EXPECT_THROW(pipeline_preset("imagenet"), ConfigError);
}

TEST(Pipeline, TransformNamesRoundTrip) {
  for (int k = 0; k <= static_cast<int>(TransformKind::RandomErasing); ++k) {
    const auto kind = static_cast<TransformKind>(k);
    EXPECT_EQ(parse_transform_kind(transform_kind_name(kind)), kind);
  }
  EXPECT_THROW(parse_transform_kind("solarize"), ConfigError);
}

TEST(Ranges, EveryTransformKeepsPixelsInUnitInterval) {
  std::vector<TransformSpec> specs;
  for (int k = 0; k <= static_cast<int>(TransformKind::RandomErasing); ++k) {
    TransformSpec t;
    t.kind = static_cast<TransformKind>(k);
    t.p = 1.0;
    t.size = 13;
    t.brightness = t.contrast = t.saturation = 0.9;
    t.hue = 0.5;
    t.sigma = {0.1, 2.0};
    specs.push_back(t);
  }
  for (const auto& t : specs) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      Rng rng(seed);
      const Image out = apply_transform(t, random_image(3, 17, 17, seed + 100), rng);
      for (float v : out.pixels) {
        ASSERT_GE(v, 0.0f) << transform_kind_name(t.kind);
        ASSERT_LE(v, 1.0f) << transform_kind_name(t.kind);
      }
    }
  }
}

TEST(Presets, MatchPublishedTables) {
  const auto o = omniglot_pipeline();
  EXPECT_EQ(o.channels, 1u);
  EXPECT_EQ(o.out_size, 28u);
  ASSERT_EQ(o.transforms.size(), 6u);
  EXPECT_EQ(o.transforms[0].kind, TransformKind::Resize);
  EXPECT_EQ(o.transforms[0].size, 28u);
  EXPECT_EQ(o.transforms[1].kind, TransformKind::RandomResizedCrop);
  EXPECT_EQ(o.transforms[1].scale, (Range{0.6, 1.0}));
  EXPECT_EQ(o.transforms[1].ratio, (Range{3.0 / 4.0, 4.0 / 3.0}));
  EXPECT_EQ(o.transforms[2].kind, TransformKind::FlipH);
  EXPECT_EQ(o.transforms[3].kind, TransformKind::FlipV);
  EXPECT_EQ(o.transforms[4].kind, TransformKind::PixelDropout);
  EXPECT_EQ(o.transforms[4].p, 0.3);
  EXPECT_EQ(o.transforms[4].drop_rate, 0.5);
  EXPECT_EQ(o.transforms[5].kind, TransformKind::RandomErasing);
  EXPECT_EQ(o.transforms[5].scale, (Range{0.02, 0.33}));
  EXPECT_EQ(o.transforms[5].ratio, (Range{0.3, 3.3}));

  const auto m = mini_pipeline();
  EXPECT_EQ(m.channels, 3u);
  EXPECT_EQ(m.out_size, 84u);
  ASSERT_EQ(m.transforms.size(), 5u);
  EXPECT_EQ(m.transforms[0].scale, (Range{0.5, 1.0}));
  EXPECT_EQ(m.transforms[0].ratio, (Range{3.0 / 4.0, 4.0 / 3.0}));
  EXPECT_EQ(m.transforms[1].kind, TransformKind::FlipH);
  EXPECT_EQ(m.transforms[2].kind, TransformKind::FlipV);
  EXPECT_EQ(m.transforms[3].kind, TransformKind::ColorJitter);
  EXPECT_EQ(m.transforms[3].p, 0.8);
  EXPECT_EQ(m.transforms[3].brightness, 0.4);
  EXPECT_EQ(m.transforms[3].contrast, 0.4);
  EXPECT_EQ(m.transforms[3].saturation, 0.4);
  EXPECT_EQ(m.transforms[3].hue, 0.2);
  EXPECT_EQ(m.transforms[4].kind, TransformKind::Grayscale);
  EXPECT_EQ(m.transforms[4].p, 0.2);

  const auto c = cdfsl_pipeline();
  EXPECT_EQ(c.out_size, 224u);
  ASSERT_EQ(c.transforms.size(), 5u);
  EXPECT_EQ(c.transforms[0].scale, (Range{0.08, 1.0}));
  EXPECT_EQ(c.transforms[1].kind, TransformKind::FlipH);
  EXPECT_EQ(c.transforms[1].p, 0.5);
  EXPECT_EQ(c.transforms[2].brightness, 0.8);
  EXPECT_EQ(c.transforms[2].hue, 0.2);
  EXPECT_EQ(c.transforms[2].p, 0.8);
  EXPECT_EQ(c.transforms[3].p, 0.2);
  EXPECT_EQ(c.transforms[4].kind, TransformKind::GaussianBlur);
  EXPECT_EQ(c.transforms[4].sigma, (Range{0.1, 0.2}));
  EXPECT_EQ(c.transforms[4].p, 1.0);
}
