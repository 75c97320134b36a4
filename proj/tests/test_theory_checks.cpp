#include "lacim/theory.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace lacim;

namespace {

// Composite Simpson rule on [lo, hi] with an even number of panels.
double simpson(const std::function<double(double)>& f, double lo, double hi, int panels = 20000) {
  const double h = (hi - lo) / panels;
  double total = f(lo) + f(hi);
  for (int i = 1; i < panels; ++i) total += (i % 2 ? 4.0 : 2.0) * f(lo + i * h);
  return total * h / 3.0;
}

double gauss(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

ExpFamSpec constant_spec(const std::string& name) {
  ExpFamSpec s;
  s.name = name;
  s.q = 2;
  s.k = 2;
  s.gamma = [](const RowVector&, const RowVector&) { return Matrix::Ones(2, 2); };
  s.suff_stats = {[](double t) { return t; }, [](double t) { return t * t; }};
  return s;
}

}  // namespace

TEST(Diversity, EnvironmentCountRule) {
  const ExpFamSpec s = constant_spec("s"), z = constant_spec("z");
  EXPECT_EQ(required_environments(s, z), 5);
  const GroundTruthScm scm4 = build_scm(1, ScmDims{}, 4);
  const TheoryReport r4 = check_diversity(scm4);
  EXPECT_FALSE(r4.details.at("environment_count_ok").get<bool>());
  EXPECT_FALSE(r4.pass);
  const GroundTruthScm scm5 = build_scm(1, ScmDims{}, 5);
  const TheoryReport r5 = check_diversity(scm5);
  EXPECT_TRUE(r5.details.at("environment_count_ok").get<bool>());
}

TEST(Diversity, DefaultSimulatorHasFullRank) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const TheoryReport r = check_diversity(build_scm(seed, ScmDims{}, 5));
    EXPECT_TRUE(r.pass) << r.details.dump();
    // Exactly the required five environments, so the count slack is zero.
    EXPECT_EQ(r.margin, 0.0);
    EXPECT_EQ(r.details.at("s").at("rank").get<int>(), 4);
    EXPECT_EQ(r.details.at("z").at("rank").get<int>(), 4);
  }
}

TEST(Diversity, ConstantNaturalParametersHaveRankZero) {
  const ExpFamSpec s = constant_spec("s"), z = constant_spec("z");
  std::vector<RowVector> env;
  std::vector<std::vector<RowVector>> grid;
  for (int e = 1; e <= 6; ++e) {
    env.push_back(RowVector::Constant(1, 2, e));
    grid.push_back({RowVector::Constant(1, 2, e), RowVector::Constant(1, 2, -e)});
  }
  const TheoryReport r = check_diversity(s, z, env, grid);
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.details.at("s").at("rank").get<int>(), 0);
  EXPECT_LT(r.margin, 0.0);
}

TEST(Rank, KnownRanksAndRowPermutationInvariance) {
  RngStream rng(3, 3);
  const Matrix a = rng.normal_matrix(8, 3);
  EXPECT_EQ(column_rank(a).rank, 3);
  Matrix deficient = a;
  deficient.col(2) = 2.0 * a.col(0) - a.col(1);
  EXPECT_EQ(column_rank(deficient).rank, 2);
  EXPECT_FALSE(column_rank(deficient).full_column_rank);
  EXPECT_EQ(column_rank(Matrix::Zero(4, 3)).rank, 0);
  EXPECT_FALSE(column_rank(rng.normal_matrix(2, 4)).full_column_rank);

  Eigen::PermutationMatrix<Eigen::Dynamic> perm(8);
  perm.setIdentity();
  std::swap(perm.indices()(0), perm.indices()(5));
  std::swap(perm.indices()(2), perm.indices()(7));
  const Matrix shuffled = perm * deficient;
  EXPECT_EQ(column_rank(shuffled).rank, 2);
  EXPECT_NEAR(column_rank(shuffled).sigma_max, column_rank(deficient).sigma_max, 1e-10);
}

TEST(MixtureMatrix, FullAndDeficient) {
  Matrix l(5, 3);
  l << 0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.3, 0.3, 0.4, 0.5, 0.25, 0.25;
  EXPECT_TRUE(check_mixture_matrix(l).pass);
  l.col(2) = l.col(1);
  EXPECT_FALSE(check_mixture_matrix(l).pass);
}

TEST(TheoryReport, JsonRoundTrip) {
  const TheoryReport r = check_diversity(build_scm(1, ScmDims{}, 5));
  const TheoryReport back = theory_report_from_json(to_json(r));
  EXPECT_EQ(back.check, r.check);
  EXPECT_EQ(back.pass, r.pass);
  EXPECT_EQ(back.margin, r.margin);
  EXPECT_EQ(back.details, r.details);
}

TEST(SteinKernel, StandardNormalIsOne) {
  const SteinKernel k = stein_kernel(GridDensity::from_function([](double x) { return gauss(x, 0, 1); }, -10, 10));
  for (double x = -3.0; x <= 3.0; x += 0.25) {
    const auto t = stein_kernel_at(k, x);
    ASSERT_TRUE(t.has_value());
    EXPECT_NEAR(*t, 1.0, 1e-4) << "x = " << x;
  }
  EXPECT_NEAR(k.expected_tau, 1.0, 1e-6);
}

TEST(SteinKernel, GaussianIsItsVariance) {
  const double sigma = 1.7, mu = 0.8;
  const SteinKernel k =
      stein_kernel(GridDensity::from_function([&](double x) { return gauss(x, mu, sigma); }, mu - 12 * sigma, mu + 12 * sigma));
  for (double x = mu - 3 * sigma; x <= mu + 3 * sigma; x += 0.5)
    EXPECT_NEAR(*stein_kernel_at(k, x), sigma * sigma, 1e-4 * sigma * sigma);
  EXPECT_NEAR(k.mean, mu, 1e-8);
}

TEST(SteinKernel, ExpectationEqualsVarianceOnMixtures) {
  for (int t = 0; t < 20; ++t) {
    RngStream rng(50 + t, 1);
    const double w = rng.uniform(0.1, 0.9);
    const double m1 = rng.uniform(-3, 3), m2 = rng.uniform(-3, 3);
    const double s1 = rng.uniform(0.3, 2), s2 = rng.uniform(0.3, 2);
    auto pdf = [&](double x) { return w * gauss(x, m1, s1) + (1 - w) * gauss(x, m2, s2); };
    const SteinKernel k = stein_kernel(GridDensity::from_function(pdf, -20, 20, 8001));
    const double mean = w * m1 + (1 - w) * m2;
    const double var = w * (s1 * s1 + m1 * m1) + (1 - w) * (s2 * s2 + m2 * m2) - mean * mean;
    EXPECT_NEAR(k.variance, var, 1e-6 * std::max(1.0, var));
    EXPECT_NEAR(k.expected_tau, var, 1e-5 * std::max(1.0, var));
    for (std::size_t i = 0; i < k.tau.size(); ++i) {
      if (!k.reliable[i]) continue;
      EXPECT_GE(k.tau[i], -1e-9);
    }
  }
}

TEST(SteinKernel, OutsideGridIsEmpty) {
  const SteinKernel k = stein_kernel(GridDensity::from_function([](double x) { return gauss(x, 0, 1); }, -5, 5));
  EXPECT_FALSE(stein_kernel_at(k, 6.0).has_value());
  EXPECT_THROW(stein_kernel(GridDensity{{0.0, 1.0, 2.0}, {0.0, 0.0, 0.0}}), Error);
  EXPECT_THROW(stein_kernel(GridDensity{{0.0, 1.0, 0.5}, {1.0, 1.0, 1.0}}), Error);
}

TEST(OodBound, IdenticalPosteriorsGiveZero) {
  GaussianPosteriorPair p{0.4, 1.2, 0.4, 1.2, [](double s) { return std::sin(s); }, nullptr, 1.0};
  const OodBoundResult r = ood_bound_check(p);
  EXPECT_TRUE(r.applicable);
  EXPECT_NEAR(r.lhs, 0.0, 1e-12);
  EXPECT_EQ(r.rhs, 0.0);
  EXPECT_TRUE(r.holds);
}

TEST(OodBound, ConstantRegressionFunction) {
  GaussianPosteriorPair p{0.0, 1.0, 0.5, 0.7, [](double) { return 3.0; }, [](double) { return 0.0; }, std::nullopt};
  const OodBoundResult r = ood_bound_check(p);
  EXPECT_TRUE(r.applicable);
  EXPECT_NEAR(r.lhs, 0.0, 1e-8);
  EXPECT_EQ(r.rhs, 0.0);
  EXPECT_TRUE(r.holds);
}

TEST(OodBound, TanhCaseMatchesIndependentQuadrature) {
  const double mu2 = 0.3, s2 = 0.8;
  GaussianPosteriorPair p{0.0, 1.0, mu2, s2, [](double s) { return std::tanh(s); }, nullptr, 1.0};
  const OodBoundResult r = ood_bound_check(p);
  ASSERT_TRUE(r.applicable);
  const double e1 = simpson([](double s) { return std::tanh(s) * gauss(s, 0, 1); }, -12, 12);
  const double e2 = simpson([&](double s) { return std::tanh(s) * gauss(s, mu2, s2); }, -12, 12);
  EXPECT_NEAR(r.lhs, std::abs(e1 - e2), 1e-7);
  // sup |pi'| by brute-force scan of pi(s) = p2(s)/p1(s) differentiated numerically.
  double sup = 0.0;
  for (double s = -15.0; s <= 15.0; s += 1e-4) {
    const double h = 1e-6;
    const double d = (gauss(s + h, mu2, s2) / gauss(s + h, 0, 1) - gauss(s - h, mu2, s2) / gauss(s - h, 0, 1)) / (2 * h);
    sup = std::max(sup, std::abs(d));
  }
  EXPECT_NEAR(r.rhs, sup, 1e-5 * sup);
  EXPECT_TRUE(r.holds);
  EXPECT_GT(r.slack, 0.0);
}

TEST(OodBound, HoldsOnRandomPairs) {
  int applicable = 0;
  for (int t = 0; t < 1000; ++t) {
    RngStream rng(1000 + t, 2);
    const double s1 = rng.uniform(0.3, 2.0);
    const double s2 = s1 * rng.uniform(0.2, 0.98);
    const double mu1 = rng.uniform(-2, 2), mu2 = mu1 + rng.uniform(-1.5, 1.5);
    const double a = rng.uniform(0.2, 3.0), b = rng.uniform(-1, 1);
    GaussianPosteriorPair p{mu1, s1, mu2, s2, [=](double s) { return std::sin(a * s + b); },
                            [=](double s) { return a * std::cos(a * s + b); }, std::nullopt};
    const OodBoundResult r = ood_bound_check(p, 2001);
    if (!r.applicable) continue;
    ++applicable;
    EXPECT_TRUE(r.holds) << "pair " << t << ": lhs " << r.lhs << " rhs " << r.rhs;
  }
  EXPECT_EQ(applicable, 1000);
}

TEST(OodBound, WiderSecondPosteriorIsInapplicable) {
  GaussianPosteriorPair p{0.0, 1.0, 0.2, 1.3, [](double s) { return s; }, nullptr, 1.0};
  const OodBoundResult r = ood_bound_check(p);
  EXPECT_FALSE(r.applicable);
  EXPECT_FALSE(r.holds);
  EXPECT_FALSE(r.note.empty());
  p.sigma2 = 1.0;
  p.mu2 = 0.5;
  EXPECT_FALSE(ood_bound_check(p).applicable);
}

TEST(OpenSet, LineFailsCloudPasses) {
  RngStream rng(7, 7);
  const Matrix t = rng.normal_matrix(500, 1);
  Matrix line(500, 2);
  line << t, 2.0 * t.array() + 1.0;
  EXPECT_FALSE(check_nonempty_open_set(line).pass);
  EXPECT_TRUE(check_nonempty_open_set(rng.normal_matrix(500, 3)).pass);
  EXPECT_THROW(check_nonempty_open_set(rng.normal_matrix(50, 3)), Error);
}

TEST(OpenSet, SimulatorSufficientStatisticsPass) {
  const GroundTruthScm scm = build_scm(2, ScmDims{}, 5);
  RngStream rng(2, stream::kEnvData + 1);
  const EnvDataset ds = sample_env(scm, 1, 2000, rng);
  const Matrix stats = gaussian_sufficient_statistics(ds.s, ds.z);
  EXPECT_EQ(stats.cols(), 8);
  EXPECT_EQ(stats(3, 1), ds.s(3, 0) * ds.s(3, 0));
  const TheoryReport r = check_nonempty_open_set(stats);
  EXPECT_TRUE(r.pass) << r.details.dump();
}

TEST(CompositeChecks, SteinAndBoundPassWithDetails) {
  RngStream a(4, 1), b(4, 2);
  const TheoryReport stein = check_stein_identity(a);
  EXPECT_TRUE(stein.pass) << stein.details.dump();
  EXPECT_EQ(stein.details.at("mixtures").size(), 10u);
  EXPECT_LT(stein.details.at("normal_max_abs_error").get<double>(), 1e-4);
  const TheoryReport bound = check_ood_bound(b, 200);
  EXPECT_TRUE(bound.pass);
  EXPECT_EQ(bound.details.at("applicable").get<int>(), 200);
  EXPECT_EQ(bound.details.at("holds").get<int>(), 200);
}

TEST(CompositeChecks, SteinFailsUnderImpossibleTolerance) {
  RngStream rng(4, 1);
  EXPECT_FALSE(check_stein_identity(rng, 3, 1e-15).pass);
}
