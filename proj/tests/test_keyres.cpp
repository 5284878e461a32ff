#include <gtest/gtest.h>

#include <cstring>

#include "respike/data.hpp"
#include "respike/keyres.hpp"
#include "support.hpp"

using namespace respike;
using testsupport::Gen;

TEST(KeyRes, ScalarPixelExample) {
  Tensor<double> x({4, 1, 1, 1}, std::vector<double>{1, 3, 2, 5});
  auto segs = decompose(x, 2);
  EXPECT_EQ(segs.segments, 2u);
  EXPECT_EQ(segs.keys.shape(), (Shape{2, 1, 1, 1}));
  EXPECT_EQ(segs.residuals.shape(), (Shape{2, 1, 1, 1, 1}));
  EXPECT_EQ(segs.keys[0], 1);
  EXPECT_EQ(segs.keys[1], 2);
  EXPECT_EQ(segs.residuals[0], 2);
  EXPECT_EQ(segs.residuals[1], 3);
}

TEST(KeyRes, ConstantClipHasZeroResiduals) {
  Tensor<float> x({8, 3, 4, 4}, 0.37f);
  auto segs = decompose(x, 4);
  for (float v : segs.residuals.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(residual_nonzero_fraction(segs), 0.0);
}

TEST(KeyRes, RoundTripIsBitwiseForEveryDividingStride) {
  for (std::uint64_t c = 0; c < 30; ++c) {
    Gen g(c);
    const std::size_t t = 16;
    auto x = g.tensor<float>({t, 3, 5, 4}, 0, 1);
    // snap to the dataset's pixel grid, where differences are exact
    for (auto& v : x.data()) v = static_cast<float>(std::round(v / kPixelQuantum) * kPixelQuantum);
    for (std::size_t s : {2, 4, 8, 16}) {
      auto segs = decompose(x, s);
      EXPECT_EQ(segs.segments * s, t);
      Tensor<float> y = recompose(segs);
      ASSERT_EQ(y.shape(), x.shape());
      ASSERT_EQ(std::memcmp(y.data().data(), x.data().data(), x.numel() * sizeof(float)), 0)
          << "s=" << s;
    }
  }
}

TEST(KeyRes, KeysOnlyRepeatEachKey) {
  Tensor<double> x({6, 1, 1, 1}, std::vector<double>{4, 9, 9, 7, 1, 1});
  auto segs = decompose(x, 3);
  for (auto& v : segs.residuals.data()) v = 0;
  Tensor<double> y = recompose(segs);
  const std::vector<double> expect{4, 4, 4, 7, 7, 7};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], expect[i]);
}

TEST(KeyRes, StrideEqualToClipLengthGivesOneKey) {
  Gen g(3);
  auto x = g.tensor<double>({16, 2, 3, 3}, 0, 1);
  auto segs = decompose(x, 16);
  EXPECT_EQ(segs.segments, 1u);
  EXPECT_EQ(segs.keys.shape()[0], 1u);
  EXPECT_EQ(segs.residuals.shape()[1], 15u);
}

TEST(KeyRes, TrailingFramesAreDroppedWithAWarning) {
  std::vector<std::string> warnings;
  set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
  auto segs = decompose(Tensor<double>({10, 1, 2, 2}, 1.0), 4);
  set_warning_sink(nullptr);
  EXPECT_EQ(segs.segments, 2u);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("dropping 2"), std::string::npos);
}

TEST(KeyRes, RejectsStrideOutOfRange) {
  EXPECT_THROW(decompose(Tensor<double>({4, 1, 1, 1}), 1), std::invalid_argument);
  EXPECT_THROW(decompose(Tensor<double>({4, 1, 1, 1}), 8), std::invalid_argument);
}

TEST(KeyRes, ResidualsOfDatasetClipsStayInUnitRange) {
  SyntheticSpec spec;
  for (int label = 0; label < 8; ++label) {
    auto clip = generate_clip<float>(spec, label, clip_seed(spec.seed, label));
    auto segs = decompose(clip, 4);
    for (float v : segs.residuals.data()) {
      ASSERT_GE(v, -1.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

// Noise-free clips: a residual frame j steps after its key can only differ
// where the shape was or is, so with p the fraction of pixels the shape
// touches in one frame the nonzero fraction is at most p * (s - 1).
TEST(KeyRes, ResidualSparsityBoundedByMotionFootprint) {
  SyntheticSpec spec;
  spec.noise = 0;
  for (int label = 0; label < 8; ++label) {
    auto clip = generate_clip<double>(spec, label, clip_seed(99, label));
    const std::size_t t = clip.shape()[0], c = clip.shape()[1];
    const std::size_t hw = clip.shape()[2] * clip.shape()[3];
    // p: largest fraction of pixels changed between consecutive frames
    double touched = 0;
    for (std::size_t f = 1; f < t; ++f) {
      std::size_t diff = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        bool d = false;
        for (std::size_t ch = 0; ch < c; ++ch)
          d |= clip[(f * c + ch) * hw + i] != clip[((f - 1) * c + ch) * hw + i];
        diff += d;
      }
      touched = std::max(touched, static_cast<double>(diff) / hw);
    }
    for (std::size_t s : {2, 4, 8}) {
      auto segs = decompose(clip, s);
      EXPECT_LE(residual_nonzero_fraction(segs), touched * (s - 1) + 1e-9)
          << "label " << label << " s " << s;
    }
  }
}
