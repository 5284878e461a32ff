#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "respike/ops.hpp"
#include "support.hpp"

using namespace respike;
using testsupport::Gen;

TEST(Tensor, ShapeAndFill) {
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(), 2u);
  for (float v : t.data()) EXPECT_EQ(v, 1.5f);
  EXPECT_EQ(shape_str(t.shape()), "[2,3]");
}

TEST(Tensor, DetachCopiesStorage) {
  Tensor<double> a({2}, std::vector<double>{1, 2});
  Tensor<double> b = a.detach();
  b.data()[0] = 7;
  EXPECT_EQ(a[0], 1);
  EXPECT_TRUE(a.alias({2, 1}).shares_storage(a));
}

TEST(Tensor, SecondBackwardWithoutNewForwardThrows) {
  Tensor<double> x({2}, std::vector<double>{1, 2});
  x.set_requires_grad(true);
  Tensor<double> loss = ops::sum(ops::mul(x, x));
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  EXPECT_THROW(backward(loss), GraphError);
}

TEST(Tensor, GradientsAccumulateOverSharedInputs) {
  Tensor<double> x({1}, std::vector<double>{3});
  x.set_requires_grad(true);
  // y = x*x + x  ->  dy/dx = 2x + 1
  backward(ops::sum(ops::add(ops::mul(x, x), x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Tensor, NoGradRecordsNothing) {
  Tensor<double> x({1}, std::vector<double>{3});
  x.set_requires_grad(true);
  NoGradGuard guard;
  Tensor<double> y = ops::mul(x, x);
  EXPECT_TRUE(y.is_leaf());
}

TEST(Tensor, FiniteChecksRaiseNumericError) {
  FiniteCheckGuard on(true);
  Tensor<double> a({1}, std::vector<double>{1e308});
  EXPECT_THROW(ops::scale(a, 1e10), NumericError);
}

TEST(Ops, ShapeMismatchNamesTheDimension) {
  Tensor<float> a({2, 3}), b({2, 4});
  try {
    ops::add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
  Tensor<float> x({1, 3, 5, 5}), k({2, 4, 3, 3});
  EXPECT_THROW(ops::conv2d(x, k, 1, 1), ShapeError);
}

// Random geometries against the nested-loop oracle.
TEST(Ops, Conv2dMatchesDirectLoops) {
  for (std::uint64_t c = 0; c < 40; ++c) {
    Gen g(c);
    const std::size_t n = g.index(1, 2), ci = g.index(1, 4), co = g.index(1, 5);
    const std::size_t k = g.index(1, 3), stride = g.index(1, 2), pad = g.index(0, 1);
    const std::size_t h = g.index(k, 7), w = g.index(k, 7);
    auto x = g.tensor<double>({n, ci, h, w});
    auto kern = g.tensor<double>({co, ci, k, k});
    Tensor<double> y = ops::conv2d(x, kern, stride, pad);
    const auto ref = testsupport::naive_conv(x, kern, stride, pad);
    ASSERT_EQ(y.numel(), ref.size()) << "case " << c;
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-12) << "case " << c;
  }
}

TEST(Ops, Conv2dFloatMatchesDirectLoops) {
  Gen g(99);
  auto x = g.tensor<float>({2, 3, 8, 8});
  auto kern = g.tensor<float>({4, 3, 3, 3});
  Tensor<float> y = ops::conv2d(x, kern, 2, 1);
  const auto ref = testsupport::naive_conv(x, kern, 2, 1);
  for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(y[i], ref[i], 1e-5);
}

TEST(Ops, MatmulMatchesDirectLoops) {
  for (std::uint64_t c = 0; c < 20; ++c) {
    Gen g(100 + c);
    const std::size_t m = g.index(1, 6), k = g.index(1, 6), n = g.index(1, 6);
    const bool ta = g.coin(), tb = g.coin();
    auto a = g.tensor<double>(ta ? Shape{k, m} : Shape{m, k});
    auto b = g.tensor<double>(tb ? Shape{n, k} : Shape{k, n});
    Tensor<double> y = ops::matmul(a, b, ta, tb);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0;
        for (std::size_t r = 0; r < k; ++r)
          acc += (ta ? a[r * m + i] : a[i * k + r]) * (tb ? b[j * k + r] : b[r * n + j]);
        ASSERT_NEAR(y[i * n + j], acc, 1e-12);
      }
  }
}

TEST(Ops, LinearAddsBiasPerRow) {
  Tensor<double> x({2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> w({1, 2}, std::vector<double>{10, 1});
  Tensor<double> b({1}, std::vector<double>{0.5});
  Tensor<double> y = ops::linear(x, w, b);
  EXPECT_DOUBLE_EQ(y[0], 12.5);
  EXPECT_DOUBLE_EQ(y[1], 34.5);
}

TEST(Ops, SoftmaxRowsSumToOneAndIgnoreShifts) {
  for (std::uint64_t c = 0; c < 30; ++c) {
    Gen g(200 + c);
    const std::size_t rows = g.index(1, 5), cols = g.index(1, 9);
    auto x = g.tensor<double>({rows, cols}, -30, 30);
    Tensor<double> s = ops::softmax_rows(x);
    Tensor<double> shifted = x.detach();
    for (std::size_t r = 0; r < rows; ++r) {
      const double delta = g.uniform(-100, 100);
      for (std::size_t j = 0; j < cols; ++j) shifted.data()[r * cols + j] += delta;
    }
    Tensor<double> s2 = ops::softmax_rows(shifted);
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        sum += s[r * cols + j];
        EXPECT_NEAR(s[r * cols + j], s2[r * cols + j], 1e-9);
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Ops, CrossEntropyValues) {
  Tensor<double> l({2, 3}, std::vector<double>{1, 2, 3, 0, 0, 0});
  const std::vector<int> labels{2, 1};
  // -log(e^3 / (e + e^2 + e^3)) = log(1 + e^-1 + e^-2); uniform row gives log 3
  const double row0 = std::log(1 + std::exp(-1.0) + std::exp(-2.0));
  const double row1 = std::log(3.0);
  EXPECT_NEAR(ops::cross_entropy(l, std::span<const int>(labels)).item(), (row0 + row1) / 2, 1e-12);
  const std::vector<int> bad{3, 0};
  EXPECT_THROW(ops::cross_entropy(l, std::span<const int>(bad)), std::invalid_argument);
}

TEST(Ops, BatchNormEvalUsesRunningStatistics) {
  Tensor<double> x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> gamma({1}, 2.0), beta({1}, 0.5), rm({1}, 1.0), rv({1}, 4.0);
  Tensor<double> y = ops::batch_norm(x, gamma, beta, rm, rv, false, 0.1, 0.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], 2.0 * (x[i] - 1.0) / 2.0 + 0.5, 1e-12);
}

TEST(Ops, BatchNormTrainingNormalizesAndUpdatesRunningStats) {
  Tensor<double> x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> gamma({1}, 1.0), beta({1}, 0.0), rm({1}, 0.0), rv({1}, 1.0);
  Tensor<double> y = ops::batch_norm(x, gamma, beta, rm, rv, true, 0.1, 0.0);
  // mean 2.5, biased var 1.25, unbiased 5/3
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], (x[i] - 2.5) / std::sqrt(1.25), 1e-12);
  EXPECT_NEAR(rm[0], 0.25, 1e-12);
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * 5.0 / 3.0, 1e-12);
}

TEST(Ops, LayerNormRowsHaveZeroMeanUnitVariance) {
  Gen g(7);
  auto x = g.tensor<double>({4, 6}, -5, 5);
  Tensor<double> y = ops::layer_norm(x, Tensor<double>({6}, 1.0), Tensor<double>({6}, 0.0), 0.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 6; ++j) m += y[r * 6 + j];
    m /= 6;
    for (std::size_t j = 0; j < 6; ++j) v += (y[r * 6 + j] - m) * (y[r * 6 + j] - m);
    EXPECT_NEAR(m, 0, 1e-12);
    EXPECT_NEAR(v / 6, 1, 1e-12);
  }
}

TEST(Ops, PoolingAndUpsampling) {
  Tensor<double> x({1, 1, 2, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  Tensor<double> p = ops::avg_pool2d(x, 2);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_DOUBLE_EQ(p[0], 3.5);
  EXPECT_DOUBLE_EQ(p[1], 5.5);
  EXPECT_DOUBLE_EQ(ops::global_avg_pool(x)[0], 4.5);
  Tensor<double> u = ops::upsample_nearest(p, 2);
  EXPECT_EQ(u.shape(), (Shape{1, 1, 2, 4}));
  const std::vector<double> expect{3.5, 3.5, 5.5, 5.5, 3.5, 3.5, 5.5, 5.5};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(u[i], expect[i]);
  EXPECT_THROW(ops::avg_pool2d(x, 3), ShapeError);
}

TEST(Ops, GeluUsesTheErfForm) {
  Tensor<double> x({3}, std::vector<double>{-1, 0, 1});
  Tensor<double> y = ops::gelu(x);
  EXPECT_NEAR(y[0], -0.15865525393145707, 1e-12);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[2], 0.8413447460685429, 1e-12);
}

TEST(Ops, PermuteAndConcat) {
  Tensor<double> a({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  Tensor<double> t = ops::permute(a, {1, 0});
  const std::vector<double> expect{0, 3, 1, 4, 2, 5};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(t[i], expect[i]);
  Tensor<double> c = ops::concat(a, a, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 6}));
  EXPECT_DOUBLE_EQ(c[3], 0);
  EXPECT_DOUBLE_EQ(c[6], 3);
  Tensor<double> r = ops::repeat_batch(a, 2);
  EXPECT_EQ(r.shape(), (Shape{4, 3}));
  EXPECT_DOUBLE_EQ(r[7], 1);
}
