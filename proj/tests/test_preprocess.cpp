#include <gtest/gtest.h>

#include "memscore/preprocess.hpp"
#include "test_util.hpp"

using namespace memscore;

namespace {

double mean_pixel(const ImageTensor& img) {
  double s = 0;
  for (float v : img.values()) s += v;
  return s / static_cast<double>(img.size());
}

}  // namespace

TEST(TenCrop, UniformImageGivesTenIdenticalCrops) {
  auto img = make_image(3, 256, 256, 0.5f);
  auto crops = ten_crop(img, 224);
  ASSERT_EQ(crops.size(), 10u);
  for (const auto& c : crops) {
    EXPECT_EQ(c.h(), 224u);
    EXPECT_EQ(c.w(), 224u);
    EXPECT_EQ(c, crops[0]);
  }
}

TEST(TenCrop, CornerPixelMatchesHandIndexedOracle) {
  auto img = make_image(3, 256, 256, 0.0f);
  for (std::size_t c = 0; c < 3; ++c) img(0, c, 0, 0) = 1.0f;
  auto crops = ten_crop(img, 224);
  // Offsets: TL (0,0), TR (0,32), BL (32,0), BR (32,32), centre (16,16).
  // Only TL covers (0,0). Crop 5 mirrors TL, which is also the top-right
  // window of the flipped image, so the pixel lands at column 223 there.
  std::vector<int> hits;
  for (int k = 0; k < 10; ++k) {
    double s = 0;
    for (float v : crops[k].values()) s += v;
    if (s > 0) hits.push_back(k);
  }
  EXPECT_EQ(hits, (std::vector<int>{0, 5}));
  EXPECT_EQ(crops[0](0, 0, 0, 0), 1.0f);
  EXPECT_EQ(crops[5](0, 0, 0, 223), 1.0f);
}

TEST(TenCrop, MirrorOfTopRightCarriesTopRightCornerPixel) {
  auto img = make_image(1, 256, 256, 0.0f);
  img(0, 0, 0, 0) = 1.0f;
  img(0, 0, 0, 255) = 2.0f;
  auto crops = ten_crop(img, 224);
  // Hand oracle: TR crop covers columns 32..255, so (0,255) -> (0,223);
  // its mirror (index 6) maps column 223 -> 0.
  EXPECT_EQ(crops[1](0, 0, 0, 223), 2.0f);
  EXPECT_EQ(crops[6](0, 0, 0, 0), 2.0f);
  for (int k = 0; k < 10; ++k) {
    const bool has = std::find(crops[k].values().begin(), crops[k].values().end(), 1.0f) != crops[k].values().end();
    EXPECT_EQ(has, k == 0 || k == 5) << "crop " << k;
  }
}

TEST(TenCrop, MirroredCropsFlipTheirPartners) {
  Rng rng(3);
  auto img = testutil::random_image(rng, 3, 40, 50);
  auto crops = ten_crop(img, 32);
  for (int k = 0; k < 5; ++k) EXPECT_EQ(crops[k + 5], mirror_horizontal(crops[k]));
  // Centre offset rounds down: (40-32)/2 = 4, (50-32)/2 = 9.
  EXPECT_EQ(crops[4], crop(img, 4, 9, 32, 32));
  EXPECT_EQ(crops[3], crop(img, 8, 18, 32, 32));
}

TEST(TenCrop, CropLargerThanImageThrows) {
  EXPECT_THROW(ten_crop(make_image(3, 256, 256), 300), ShapeError);
}

TEST(LegacyForward, ConstantModel) {
  LegacyPipelineConfig cfg;
  cfg.crop_size = 32;
  cfg.mean_image = make_image(3, 64, 64, 0.0f);
  Rng rng(1);
  auto img = testutil::random_image(rng, 3, 64, 64);
  EXPECT_DOUBLE_EQ(legacy_forward(img, [](const ImageTensor&) { return 0.6; }, cfg), 0.6);
}

TEST(LegacyForward, MeanPixelModelWithScaling) {
  LegacyPipelineConfig cfg;
  cfg.crop_size = 32;
  cfg.scale_a = 2.0;
  cfg.scale_b = 0.1;
  cfg.mean_image = make_image(3, 64, 64, 0.0f);
  auto img = make_image(3, 64, 64, 0.7f);
  const double got = legacy_forward(img, mean_pixel, cfg);
  EXPECT_NEAR(got, (0.7 - 0.1) / 2.0, 1e-7);
}

TEST(LegacyForward, OutputIsClipped) {
  LegacyPipelineConfig cfg;
  cfg.crop_size = 32;
  cfg.mean_image = make_image(3, 64, 64, 0.0f);
  auto img = make_image(3, 64, 64, 0.5f);
  EXPECT_EQ(legacy_forward(img, [](const ImageTensor&) { return 1.4; }, cfg), 1.0);
  EXPECT_EQ(legacy_forward(img, [](const ImageTensor&) { return -0.3; }, cfg), 0.0);
}

TEST(LegacyForward, MeanImageSubtractedBeforeCropping) {
  LegacyPipelineConfig cfg;
  cfg.crop_size = 32;
  cfg.mean_image = make_image(3, 64, 64, 0.25f);
  auto img = make_image(3, 64, 64, 0.75f);
  EXPECT_NEAR(legacy_forward(img, mean_pixel, cfg), 0.5, 1e-7);
}

TEST(LegacyForward, MeanImageShapeMismatchThrows) {
  LegacyPipelineConfig cfg;
  cfg.crop_size = 32;
  cfg.mean_image = make_image(3, 60, 60, 0.0f);
  EXPECT_THROW(legacy_forward(make_image(3, 64, 64), mean_pixel, cfg), ShapeError);
}

TEST(LegacyForward, ResizesShortSideToCropPlus32) {
  auto r = resize_short_side(make_image(3, 100, 200, 0.3f), 64);
  EXPECT_EQ(r.h(), 64u);
  EXPECT_EQ(r.w(), 128u);
}

TEST(LegacyForward, CropOrderDoesNotMatter) {
  LegacyPipelineConfig cfg;
  cfg.crop_size = 32;
  cfg.mean_image = make_image(3, 64, 64, 0.0f);
  Rng rng(9);
  auto img = testutil::random_image(rng, 3, 64, 64);
  const auto crops = ten_crop(legacy_offset(img, cfg), 32);
  double sum = 0;
  for (auto it = crops.rbegin(); it != crops.rend(); ++it) sum += mean_pixel(*it);
  EXPECT_NEAR(legacy_forward(img, mean_pixel, cfg), sum / 10.0, 1e-12);
}

TEST(SimpleTransform, MeanImageNormalizesToZero) {
  SimplePipelineConfig cfg;
  cfg.target_size = 16;
  ImageTensor img(1, 3, 20, 20);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 20; ++y)
      for (std::size_t x = 0; x < 20; ++x) img(0, c, y, x) = static_cast<float>(cfg.per_channel_mean[c]);
  const auto out = simple_forward_transform(img, cfg);
  for (float v : out.values()) EXPECT_NEAR(v, 0.0f, 1e-6f);
}

TEST(SimpleTransform, SameSizeResizeIsIdentity) {
  Rng rng(4);
  auto img = testutil::random_image(rng, 3, 32, 32);
  EXPECT_EQ(resize_bilinear(img, 32, 32), img);
  SimplePipelineConfig cfg{32, {0, 0, 0}, {1, 1, 1}};
  EXPECT_EQ(simple_forward_transform(img, cfg), img);
}

TEST(SimpleTransform, IdempotentOnlyForIdentityNormalization) {
  Rng rng(5);
  SimplePipelineConfig id{24, {0, 0, 0}, {1, 1, 1}};
  SimplePipelineConfig in{24, {0.4, 0.5, 0.6}, {0.2, 0.3, 0.4}};
  for (int t = 0; t < 5; ++t) {
    auto img = testutil::random_image(rng, 3, 24, 24);
    const auto once = simple_forward_transform(img, id);
    EXPECT_EQ(simple_forward_transform(once, id), once);
    const auto n1 = simple_forward_transform(img, in);
    EXPECT_NE(simple_forward_transform(n1, in), n1);
    EXPECT_EQ(simple_forward_transform(img, in), n1);
  }
}

TEST(SimpleTransform, RejectsNonThreeChannelInput) {
  EXPECT_THROW(simple_forward_transform(make_image(2, 8, 8), SimplePipelineConfig{}), ShapeError);
}

TEST(SimpleTransform, StdMustBePositive) {
  SimplePipelineConfig cfg;
  cfg.per_channel_std[1] = 0.0;
  EXPECT_THROW(validate(cfg), DomainError);
  LegacyPipelineConfig l;
  l.scale_a = 0.0;
  EXPECT_THROW(validate(l), DomainError);
}

TEST(PipelineJson, RoundTrip) {
  SimplePipelineConfig s{48, {0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}};
  auto back = std::get<SimplePipelineConfig>(pipeline_from_json(pipeline_to_json(s)));
  EXPECT_EQ(back.target_size, 48u);
  EXPECT_EQ(back.per_channel_std, s.per_channel_std);
  LegacyPipelineConfig l = legacy_demo_preset(64);
  auto lb = std::get<LegacyPipelineConfig>(pipeline_from_json(pipeline_to_json(l)));
  EXPECT_EQ(lb.crop_size, 64u);
  EXPECT_EQ(lb.scale_a, 1.0);
}
