#include <gtest/gtest.h>

#include "gradient_suite.hpp"

using namespace respike;

class Primitive : public ::testing::TestWithParam<gradsuite::Case> {};

TEST_P(Primitive, MatchesCentralDifferences) {
  const auto& c = GetParam();
  GradCheckResult r = c.run();
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_err, c.tol) << "worst param " << r.worst_param << "[" << r.worst_index
                                  << "] analytic " << r.worst_analytic << " numeric "
                                  << r.worst_numeric;
}

INSTANTIATE_TEST_SUITE_P(Ops, Primitive, ::testing::ValuesIn(gradsuite::primitive_cases()),
                         [](const auto& info) { return info.param.name; });

TEST(FusionGradient, WholeBlockMatchesCentralDifferences) {
  GradCheckResult r = gradsuite::fusion_block_check(5);
  EXPECT_GT(r.checked, 100u);
  EXPECT_LT(r.max_rel_err, gradsuite::kPrimitiveTol);
}

TEST(EndToEndGradient, AnnOnly) {
  auto e = gradsuite::end_to_end_check(Architecture::ann_only, InputMode::res, 300);
  ASSERT_GT(e.seed, 0u);
  EXPECT_LT(e.result.max_rel_err, gradsuite::kEndToEndTol);
}

TEST(EndToEndGradient, SnnOnly) {
  auto e = gradsuite::end_to_end_check(Architecture::snn_only, InputMode::res, 300);
  ASSERT_GT(e.seed, 0u) << "no draw kept every neuron 1e-3 away from threshold";
  EXPECT_LT(e.result.max_rel_err, gradsuite::kEndToEndTol);
}

TEST(EndToEndGradient, Hybrid) {
  auto e = gradsuite::end_to_end_check(Architecture::hybrid, InputMode::key_res, 400);
  ASSERT_GT(e.seed, 0u) << "no draw kept every neuron 1e-3 away from threshold";
  EXPECT_LT(e.result.max_rel_err, gradsuite::kEndToEndTol);
}

TEST(EndToEndGradient, HybridWithoutAttention) {
  auto e = gradsuite::end_to_end_check(Architecture::hybrid_no_attention, InputMode::key_res, 300);
  ASSERT_GT(e.seed, 0u) << "no draw kept every neuron 1e-3 away from threshold";
  EXPECT_LT(e.result.max_rel_err, gradsuite::kEndToEndTol);
}

TEST(GradCheck, FlagsAWrongBackward) {
  // relu with a deliberately wrong slope must be caught
  Tensor<double> x({3}, std::vector<double>{0.5, -0.7, 1.2});
  auto bad = [&] {
    Tensor<double> y = ops::relu(x);
    return Tensor<double>::make_result("bad", {1}, {ops::sum(y).item()}, {x},
                                       [x](std::span<const double> g) {
                                         std::vector<double> d{2 * g[0], 0, 2 * g[0]};
                                         x.accumulate_grad(d);
                                       });
  };
  GradCheckResult r = grad_check<double>(bad, {x});
  EXPECT_GT(r.max_rel_err, 0.4);
}

TEST(GradCheck, ExcludesPerturbationsThatCrossAKink) {
  // epsilon 1e-5 moves the first coordinate across zero
  Tensor<double> x({2}, std::vector<double>{5e-6, 0.8});
  GradCheckResult r = grad_check<double>([&] { return ops::sum(ops::relu(x)); }, {x});
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_LT(r.max_rel_err, 1e-6);
}
