#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"

using namespace vbltr;
using namespace testutil;

TEST(InitState, ShapesAndPositiveXi) {
  std::mt19937_64 rng(1);
  const Dataset d = random_dataset({3, 4, 2}, 12, rng);
  Hyperparams hp;
  hp.rank = 2;
  const VariationalState s = init_state(d, hp);
  ASSERT_EQ(s.margins.size(), 3u);
  for (std::size_t j = 0; j < 3; ++j) {
    ASSERT_EQ(s.margins[j].size(), 2u);
    for (const auto& m : s.margins[j]) {
      EXPECT_EQ(m.mean.size(), static_cast<Eigen::Index>(d.dims[j]));
      EXPECT_LT((m.covariance - 0.1 * Matrix::Identity(m.mean.size(), m.mean.size())).cwiseAbs().maxCoeff(), 1e-15);
    }
  }
  ASSERT_EQ(s.xi.size(), 12);
  EXPECT_GT(s.xi.minCoeff(), 0.0);
  EXPECT_DOUBLE_EQ(s.scales.phi_weights[0], 0.5 * 9 - 0.5);
}

TEST(InitState, RejectsBadHyperparameters) {
  std::mt19937_64 rng(2);
  const Dataset d = random_dataset({2, 2}, 4, rng);
  Hyperparams hp;
  hp.b_tau = 0.0;
  EXPECT_THROW(init_state(d, hp), HyperparamError);
  hp = Hyperparams{};
  hp.init_scale = -1;
  EXPECT_THROW(init_state(d, hp), HyperparamError);
}

TEST(Fit, DeterministicForFixedSeed) {
  std::mt19937_64 rng(3);
  const Dataset d = planted_dataset({3, 3, 2}, 30, rng);
  Hyperparams hp;
  hp.rank = 2;
  hp.seed = 99;
  hp.max_iters = 15;
  const FitReport a = fit(d, hp);
  const FitReport b = fit(d, hp);
  EXPECT_EQ(a.elbo_trace, b.elbo_trace);
  EXPECT_EQ(a.state.margins[1][1].mean, b.state.margins[1][1].mean);
  hp.threads = 3;
  const FitReport c = fit(d, hp);
  EXPECT_EQ(a.elbo_trace, c.elbo_trace);
}

TEST(Fit, ZeroIterationsRecordsInitialBound) {
  std::mt19937_64 rng(4);
  const Dataset d = random_dataset({2, 3}, 10, rng);
  Hyperparams hp;
  hp.max_iters = 0;
  const FitReport r = fit(d, hp);
  ASSERT_EQ(r.elbo_trace.size(), 1u);
  EXPECT_EQ(r.iterations, 0);
  EXPECT_FALSE(r.converged);
  EXPECT_NEAR(r.final_elbo(), elbo(init_state(d, hp), d, hp), 1e-12 * std::abs(r.final_elbo()));
}

TEST(Fit, ConvergenceRules) {
  std::mt19937_64 rng(5);
  const Dataset d = planted_dataset({3, 3, 2}, 40, rng);
  Hyperparams hp;
  hp.max_iters = 500;
  const FitReport abs_fit = fit(d, hp);
  ASSERT_TRUE(abs_fit.converged);
  const auto& t = abs_fit.elbo_trace;
  EXPECT_LE(std::abs(t[t.size() - 1] - t[t.size() - 2]), hp.epsilon);
  EXPECT_EQ(t.size(), static_cast<std::size_t>(abs_fit.iterations) + 1);

  hp.convergence = ConvergenceRule::relative;
  hp.epsilon = 1e-3;
  const FitReport rel = fit(d, hp);
  ASSERT_TRUE(rel.converged);
  const auto& u = rel.elbo_trace;
  EXPECT_LE(std::abs(u[u.size() - 1] - u[u.size() - 2]), hp.epsilon * std::abs(u[u.size() - 2]));
}

TEST(Fit, SeparableToyProblem) {
  std::mt19937_64 rng(6);
  const Dims dims{3, 3, 2};
  // Labels from the sign of a fixed rank-1 coefficient, so the classes are
  // separated by a hyperplane in coefficient space.
  std::vector<Matrix> f{Matrix(3, 1), Matrix(3, 1), Matrix(2, 1)};
  f[0] << 1, -1, 0.5;
  f[1] << 1, 0.5, -1;
  f[2] << 1, -1;
  const DenseTensor w = cp_compose(CPFactors(f));
  Dataset d{dims, {}, {}};
  while (d.size() < 40) {
    DenseTensor x = random_tensor(dims, rng);
    const double a = inner(w, x);
    if (std::abs(a) < 0.5) continue;
    d.covariates.push_back(std::move(x));
    d.labels.push_back(a > 0 ? 1 : -1);
  }
  Hyperparams hp;
  hp.rank = 1;
  hp.seed = 3;
  hp.max_iters = 200;
  const FitReport r = fit(d, hp);
  const DenseTensor west = cp_compose(r.state.mean_factors());
  int correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    correct += (inner(west, d.covariates[i]) > 0 ? 1 : -1) == d.labels[i];
  }
  EXPECT_GE(correct, 38) << "training accuracy " << correct << "/40";
}

TEST(Fit, DerivedModeIsMonotone) {
  std::mt19937_64 rng(7);
  for (int inst = 0; inst < 5; ++inst) {
    const Dataset d = planted_dataset({4, 3, 2}, 60, rng);
    Hyperparams hp;
    hp.rank = 2;
    hp.formula = FormulaMode::derived;
    hp.seed = static_cast<std::uint64_t>(inst);
    hp.max_iters = 50;
    const FitReport r = fit(d, hp);
    EXPECT_EQ(r.elbo_decreases, 0u) << "instance " << inst;
  }
}

TEST(Fit, SingleClassIsFlaggedNotFatal) {
  std::mt19937_64 rng(8);
  Dataset d = random_dataset({2, 3}, 10, rng);
  for (auto& y : d.labels) y = 1;
  Hyperparams hp;
  hp.max_iters = 5;
  const FitReport r = fit(d, hp);
  EXPECT_TRUE(r.single_class);
}

TEST(Fit, RejectsEmptyData) {
  Dataset d{{2, 2}, {}, {}};
  EXPECT_THROW(fit(d, Hyperparams{}), DataError);
}

TEST(Fit, MonteCarloMomentsRun) {
  std::mt19937_64 rng(9);
  const Dataset d = planted_dataset({3, 3, 2}, 30, rng);
  Hyperparams hp;
  hp.rank = 2;
  hp.moments = MomentStrategy::monte_carlo;
  hp.mc_draws = 500;
  hp.max_iters = 10;
  const FitReport r = fit(d, hp);
  for (double l : r.elbo_trace) EXPECT_TRUE(std::isfinite(l));
  EXPECT_EQ(r.elbo_trace, fit(d, hp).elbo_trace);
}

TEST(SelectRank, SingleCandidateMatchesFit) {
  std::mt19937_64 rng(10);
  const Dataset d = planted_dataset({3, 3, 2}, 30, rng);
  Hyperparams hp;
  hp.max_iters = 20;
  const RankSelection sel = select_rank(d, hp, {1});
  EXPECT_EQ(sel.best_rank, 1u);
  EXPECT_EQ(sel.best().elbo_trace, fit(d, hp).elbo_trace);
  EXPECT_THROW(select_rank(d, hp, {}), HyperparamError);
}

TEST(SelectRank, PicksLargestFinalBound) {
  std::mt19937_64 rng(11);
  const Dataset d = planted_dataset({3, 3, 2}, 40, rng);
  Hyperparams hp;
  hp.max_iters = 30;
  const RankSelection sel = select_rank(d, hp, {1, 2, 3});
  ASSERT_EQ(sel.fits.size(), 3u);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t arg = 0;
  for (const auto& f : sel.fits) {
    ASSERT_TRUE(f.report.has_value());
    if (f.report->final_elbo() > best) {
      best = f.report->final_elbo();
      arg = f.rank;
    }
  }
  EXPECT_EQ(sel.best_rank, arg);
}
