#include <gtest/gtest.h>

#include <cmath>

#include "natlab/oracle.hpp"

using namespace natlab;
using namespace natlab::oracle;

TEST(BruteCtc, TwoFrameExample) {
  const auto lp = LogProbMatrix::from_probs({{0.6, 0.4}, {0.5, 0.5}});
  EXPECT_NEAR(brute_ctc(lp, std::vector<int>{0}, 1), -std::log(0.8), 1e-12);
}

TEST(BruteCtc, NoValidPathIsInfinite) {
  const auto lp = LogProbMatrix::from_probs({{0.5, 0.5}});
  EXPECT_TRUE(std::isinf(brute_ctc(lp, std::vector<int>{0, 0}, 1)));
}

TEST(BruteCtc, BudgetIsEnforced) {
  const auto lp = LogProbMatrix(RowMatrix::Constant(12, 16, -std::log(16.0)));
  EXPECT_THROW(brute_ctc(lp, std::vector<int>{0}, 15), BudgetExceeded);
}

TEST(BruteOaxe, IdentityOptimumAndSwapExample) {
  const auto perfect = LogProbMatrix::from_probs({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}});
  EXPECT_NEAR(brute_oaxe(perfect, std::vector<int>{0, 1, 2}).value, 0.0, 1e-12);
  const auto lp = LogProbMatrix::from_probs({{0.2, 0.8}, {0.9, 0.1}});
  const auto r = brute_oaxe(lp, std::vector<int>{0, 1});
  EXPECT_NEAR(r.value, 0.3285040669720361, 1e-9);
  EXPECT_EQ(r.alpha, (std::vector<int>{1, 0}));
}

TEST(BruteAxe, PerfectRowsGiveZero) {
  const auto lp = LogProbMatrix::from_probs({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}});
  EXPECT_NEAR(brute_axe(lp, std::vector<int>{0, 1}, 2), 0.0, 1e-12);
}

TEST(BruteMoaxeStage2, SquareCaseIsAnchorCost) {
  Rng rng(3);
  const auto lp = LogProbMatrix::from_logits(random_logits(rng, 3, 3));
  const std::vector<int> t = {2, 0, 1};
  const std::vector<int> alpha = {1, 2, 0};
  double anchor_cost = 0.0;
  for (int i = 0; i < 3; ++i) anchor_cost -= lp(alpha[static_cast<std::size_t>(i)], t[static_cast<std::size_t>(i)]);
  EXPECT_NEAR(brute_moaxe_stage2(lp, t, alpha).value, anchor_cost, 1e-12);
}

TEST(BruteMoaxeStage2, MatchesSpanExtensionGivenSameAnchors) {
  for (std::uint64_t s = 0; s < 300; ++s) {
    Rng rng(s);
    const int n = static_cast<int>(uniform_int(rng, 1, 3));
    const int m = static_cast<int>(uniform_int(rng, n, 7));
    const auto lp = LogProbMatrix::from_logits(random_logits(rng, m, 4));
    const auto t = random_target(rng, n, 4);
    const auto alpha = oaxe_alignment(lp, t);
    double fast = 0.0;
    const auto beta = moaxe_spans(lp, t, alpha);
    for (int k = 0; k < m; ++k) fast -= lp(k, t[static_cast<std::size_t>(beta[static_cast<std::size_t>(k)])]);
    EXPECT_NEAR(fast, brute_moaxe_stage2(lp, t, alpha).value, 1e-9 * std::abs(fast));
  }
}

TEST(FiniteDiff, XeGradientMatchesClosedForm) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const RowMatrix logits = random_logits(rng, 4, 5);
    const std::vector<int> t = {0, 3, 3, 1};
    const auto fd = finite_diff_grad([&](const LogProbMatrix& lp) { return xe_loss(lp, t).value; }, logits);
    EXPECT_LT(relative_error(xe_loss(LogProbMatrix::from_logits(logits), t).grad, fd), 1e-6);
  }
}

TEST(FiniteDiff, ZeroGradientAtPerfectRows) {
  RowMatrix logits = RowMatrix::Constant(2, 3, -200.0);
  logits(0, 1) = 200.0;
  logits(1, 2) = 200.0;
  const std::vector<int> t = {1, 2};
  const auto fd = finite_diff_grad([&](const LogProbMatrix& lp) { return xe_loss(lp, t).value; }, logits);
  EXPECT_LT(fd.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  EXPECT_THROW(finite_diff_grad([](const LogProbMatrix&) { return 0.0; }, RowMatrix::Zero(1, 2), 0.0),
               std::invalid_argument);
}

TEST(OracleSuites, AllPassOnSmallRun) {
  SuiteLimits lim;
  lim.instances = 200;
  for (const auto& r : run_oracle_suites(12345, lim)) EXPECT_TRUE(r.passed) << r.name << " " << r.max_deviation;
}

TEST(GradientSuites, AllLossesPass) {
  GradientLimits lim;
  lim.points = 20;
  for (const auto& c : standard_gradient_cases()) {
    const auto r = run_gradient_suite(c, 99, lim);
    EXPECT_TRUE(r.passed) << r.name << " err=" << r.max_relative_error << " rowsum=" << r.max_row_sum;
  }
}

TEST(GradientSuites, DetectsSignErrorInCtcGradient) {
  GradientCase broken{"ctc-mutant", false, [](const LogProbMatrix& lp, std::span<const int> t) {
                        auto out = ctc_loss(lp, t, reserved_blank(lp.cols()));
                        out.grad = -out.grad;
                        return out;
                      }};
  GradientLimits lim;
  lim.points = 5;
  EXPECT_FALSE(run_gradient_suite(broken, 1, lim).passed);
}
