#include <gtest/gtest.h>

#include "slt/model.hpp"
#include "slt/vision.hpp"
#include "test_util.hpp"

using namespace slt;
using slt::test::random_tensor;

namespace {

Tensor random_clip(std::size_t d, std::size_t h, std::size_t w, std::uint64_t seed) {
  SplitMix64 rng(seed);
  return random_tensor({3, d, h, w}, rng, 0.0, 1.0);
}

}  // namespace

TEST(ResNetConfig, DepthDeterminesLayout) {
  ResNetConfig c10{10, 64}, c34{34, 64}, c50{50, 64};
  EXPECT_EQ(c10.block_type(), BlockType::kBasic);
  EXPECT_EQ(c34.block_type(), BlockType::kBasic);
  EXPECT_EQ(c50.block_type(), BlockType::kBottleneck);
  EXPECT_EQ(c10.stage_counts(), (std::array<std::size_t, 4>{1, 1, 1, 1}));
  EXPECT_EQ(c34.stage_counts(), (std::array<std::size_t, 4>{3, 4, 6, 3}));
  EXPECT_EQ(c50.stage_counts(), (std::array<std::size_t, 4>{3, 4, 6, 3}));
  EXPECT_EQ(c10.feature_size(), 512u);
  EXPECT_EQ(c34.feature_size(), 512u);
  EXPECT_EQ(c50.feature_size(), 2048u);
}

TEST(ResNetConfig, UnsupportedDepthIsConfigError) {
  EXPECT_THROW((ResNetConfig{18, 64}.validate()), ConfigError);
  EXPECT_THROW((ResNetConfig{10, 0}.validate()), ConfigError);
}

TEST(NormGroups, DividesChannelsWithAtLeastFourPerGroup) {
  EXPECT_EQ(norm_groups(4), 1u);
  EXPECT_EQ(norm_groups(8), 2u);
  EXPECT_EQ(norm_groups(32), 8u);
  EXPECT_EQ(norm_groups(64), 16u);
  EXPECT_EQ(norm_groups(256), 32u);
  EXPECT_EQ(norm_groups(2048), 32u);
  for (std::size_t c = 1; c <= 200; ++c) EXPECT_EQ(c % norm_groups(c), 0u);
}

TEST(ResNet3D, DeskScaleDepth10FeatureLength) {
  SplitMix64 rng(1);
  ResNet3D<float> net({10, 4}, rng);
  auto feature = net.forward(random_clip(16, 32, 32, 2));
  EXPECT_EQ(feature.shape(), (Shape{32}));
}

TEST(ResNet3D, DeskScaleDepth34And50FeatureLength) {
  SplitMix64 rng(1);
  ResNet3D<float> r34({34, 2}, rng);
  ResNet3D<float> r50({50, 2}, rng);
  auto clip = random_clip(8, 16, 16, 3);
  EXPECT_EQ(r34.forward(clip).size(), 16u);
  EXPECT_EQ(r50.forward(clip).size(), 64u);
}

TEST(ResNet3D, FullSizeClipDepth10Base64Gives512) {
  SplitMix64 rng(5);
  ResNet3D<float> net({10, 64}, rng);
  NoGradGuard no_grad;
  auto feature = net.forward(random_clip(100, 224, 224, 6));
  EXPECT_EQ(feature.shape(), (Shape{512}));
}

// Closed-form count: bias-free convs, GroupNorm gain+bias, projection
// shortcut on any shape change.
static std::size_t expected_parameters(std::size_t depth, std::size_t b) {
  const auto gn = [](std::size_t c) { return 2 * c; };
  std::size_t n = 3 * b * 343 + gn(b);
  const std::size_t stages[4] = {depth == 10 ? 1u : 3u, depth == 10 ? 1u : 4u,
                                 depth == 10 ? 1u : 6u, depth == 10 ? 1u : 3u};
  std::size_t cin = b;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t w = b << s;
    for (std::size_t i = 0; i < stages[s]; ++i) {
      std::size_t out = w;
      if (depth < 50) {
        n += 27 * cin * w + 27 * w * w + 2 * gn(w);
      } else {
        out = 4 * w;
        n += cin * w + 27 * w * w + w * out + 2 * gn(w) + gn(out);
      }
      if ((i == 0 && s > 0) || cin != out) n += cin * out + gn(out);
      cin = out;
    }
  }
  return n;
}

TEST(ResNet3D, ParameterCountMatchesClosedForm) {
  for (std::size_t base : {2u, 4u, 8u}) {
    for (std::size_t depth : {10u, 34u, 50u}) {
      SplitMix64 rng(7);
      EXPECT_EQ(ResNet3D<float>({int(depth), base}, rng).parameter_count(),
                expected_parameters(depth, base))
          << depth << "/" << base;
    }
  }
  EXPECT_EQ(expected_parameters(34, 64), 63513536u);
  EXPECT_EQ(expected_parameters(50, 64), 46198976u);
}

TEST(ResNet3D, DeeperNetsHoldMoreParametersThanDepth10) {
  for (std::size_t base : {2u, 4u, 8u}) {
    SplitMix64 rng(7);
    const auto n10 = ResNet3D<float>({10, base}, rng).parameter_count();
    const auto n34 = ResNet3D<float>({34, base}, rng).parameter_count();
    const auto n50 = ResNet3D<float>({50, base}, rng).parameter_count();
    EXPECT_LT(n10, n34) << base;
    EXPECT_LT(n10, n50) << base;
    // Full 3x3x3 basic blocks outweigh 1x1x1-heavy bottlenecks.
    EXPECT_GT(n34, n50) << base;
  }
}

TEST(ResNet3D, RejectsTooSmallOrWrongChannelClips) {
  SplitMix64 rng(1);
  ResNet3D<float> net({10, 4}, rng);
  EXPECT_THROW(net.forward(random_clip(1, 16, 16, 1)), DimensionError);
  EXPECT_THROW(net.forward(random_clip(8, 3, 16, 1)), DimensionError);
  SplitMix64 r2(2);
  EXPECT_THROW(net.forward(random_tensor({1, 8, 16, 16}, r2)), DimensionError);
}

TEST(ResNet3D, FeatureLengthIndependentOfClipDuration) {
  SplitMix64 rng(3);
  ResNet3D<float> net({10, 4}, rng);
  for (std::size_t d : {2u, 5u, 8u, 23u}) {
    EXPECT_EQ(net.forward(random_clip(d, 16, 16, d)).size(), 32u) << d;
  }
}

TEST(Swm, DefaultSplitGives32ChunksOf64) {
  SplitMix64 rng(4);
  auto feature = random_tensor({2048}, rng);
  auto chunks = swm_split(feature, 32);
  EXPECT_EQ(chunks.shape(), (Shape{32, 64}));
}

TEST(Swm, ContiguousSplit) {
  auto chunks = swm_split(Tensor({4}, {1, 2, 3, 4}), 2);
  ASSERT_EQ(chunks.shape(), (Shape{2, 2}));
  EXPECT_EQ(slt::test::to_vector(chunks), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Swm, SingleChunkWithIdentityProjectionIsFeature) {
  SplitMix64 rng(5);
  auto feature = random_tensor({6}, rng);
  std::vector<float> eye(36, 0.f);
  for (std::size_t i = 0; i < 6; ++i) eye[i * 6 + i] = 1.f;
  Linear<float> identity{Tensor({6, 6}, eye), Tensor::zeros({6})};
  auto out = swm_convert(feature, 1, identity);
  ASSERT_EQ(out.shape(), (Shape{1, 6}));
  EXPECT_EQ(slt::test::to_vector(out), slt::test::to_vector(feature));
}

TEST(Swm, IndivisibleFeatureIsConfigError) {
  SplitMix64 rng(6);
  EXPECT_THROW(swm_split(random_tensor({10}, rng), 4), ConfigError);
  EXPECT_THROW(swm_split(random_tensor({10}, rng), 0), ConfigError);
}

TEST(Swm, ChunksConcatenateBackToFeature) {
  SplitMix64 rng(7);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t swm = 1 + rng.below(8);
    const std::size_t chunk = 1 + rng.below(9);
    auto feature = random_tensor({swm * chunk}, rng);
    auto chunks = swm_split(feature, swm);
    std::vector<float> joined;
    for (std::size_t r = 0; r < swm; ++r)
      for (std::size_t c = 0; c < chunk; ++c) joined.push_back(chunks[r * chunk + c]);
    EXPECT_EQ(joined, slt::test::to_vector(feature));
  }
}

TEST(Swm, ProjectionShapeMismatchIsDimensionError) {
  SplitMix64 rng(8);
  auto proj = Linear<float>::xavier(5, 4, rng);
  EXPECT_THROW(swm_convert(random_tensor({32}, rng), 4, proj), DimensionError);
}
