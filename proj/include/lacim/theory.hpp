#pragma once

#include "lacim/scm.hpp"

#include <json.hpp>

#include <Eigen/SVD>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace lacim {

/// Result of one theoretical side-condition check. `margin` is positive when
/// the check passes with room to spare.
struct TheoryReport {
  std::string check;
  bool pass = false;
  double margin = 0.0;
  nlohmann::json details = nlohmann::json::object();
};

inline nlohmann::json to_json(const TheoryReport& r) {
  return {{"check", r.check}, {"pass", r.pass}, {"margin", r.margin}, {"details", r.details}};
}

inline TheoryReport theory_report_from_json(const nlohmann::json& j) {
  TheoryReport r;
  r.check = j.at("check").get<std::string>();
  r.pass = j.at("pass").get<bool>();
  r.margin = j.at("margin").get<double>();
  r.details = j.at("details");
  return r;
}

// ---- diversity (rank) conditions -----------------------------------------

/// Conditional exponential family of one latent block t in {s, z}:
///   p(t | c, d) = prod_i exp( sum_j T_j(t_i) Gamma_{c,d,i,j} + B(t_i) - A_{c,d,i} ).
/// `gamma` returns the k x q natural-parameter matrix.
struct ExpFamSpec {
  std::string name;
  int q = 0;
  int k = 0;
  std::function<Matrix(const RowVector& c, const RowVector& d)> gamma;
  std::vector<std::function<double(double)>> suff_stats;
};

/// Gaussian block of the simulator: T(t) = (t, t^2) and per dimension
/// Gamma = (mu / sigma^2, -1 / (2 sigma^2)) with mu = c A_mu, log sigma = c A_sigma.
inline ExpFamSpec gaussian_spec(const GroundTruthScm& scm, bool causal_block) {
  const int q = causal_block ? scm.dims.q_s : scm.dims.q_z;
  const int offset = causal_block ? 0 : scm.dims.q_s;
  const Matrix a_mu = scm.a_mu.middleCols(offset, q);
  const Matrix a_sigma = scm.a_sigma.middleCols(offset, q);
  ExpFamSpec spec;
  spec.name = causal_block ? "s" : "z";
  spec.q = q;
  spec.k = 2;
  spec.gamma = [a_mu, a_sigma, q](const RowVector& c, const RowVector&) {
    const RowVector mu = c * a_mu;
    const RowVector var = (2.0 * (c * a_sigma)).array().exp();
    Matrix g(2, q);
    g.row(0) = mu.array() / var.array();
    g.row(1) = -0.5 / var.array();
    return g;
  };
  spec.suff_stats = {[](double t) { return t; }, [](double t) { return t * t; }};
  return spec;
}

struct RankSummary {
  Index rank = 0;
  Index columns = 0;
  double sigma_min = 0.0;
  double sigma_max = 0.0;
  bool full_column_rank = false;
};

/// Numerical rank with the relative threshold sigma > 1e-8 * sigma_max.
inline RankSummary column_rank(const Matrix& m, double rel_tol = 1e-8) {
  RankSummary r;
  r.columns = m.cols();
  if (m.size() == 0) return r;
  const Eigen::MatrixXd dense = m;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(dense);
  const Eigen::VectorXd sv = svd.singularValues();
  r.sigma_max = sv.size() ? sv(0) : 0.0;
  // Missing singular values (fewer rows than columns) count as zero.
  r.sigma_min = sv.size() == m.cols() ? sv(sv.size() - 1) : 0.0;
  for (Index i = 0; i < sv.size(); ++i)
    if (sv(i) > rel_tol * r.sigma_max && sv(i) > 0.0) ++r.rank;
  r.full_column_rank = r.rank == m.cols();
  return r;
}

/// Rows Gamma(c_{r,e}, d^e) - Gamma(c_{1,1}, d^{e1}) flattened to q*k columns,
/// for every environment e and grid point r (c_{r,e} = c_points[e][r]).
inline Matrix stacked_gamma_differences(const ExpFamSpec& spec, const std::vector<RowVector>& env_values,
                                        const std::vector<std::vector<RowVector>>& c_points) {
  require(env_values.size() == c_points.size() && !env_values.empty(), "stacked_gamma_differences: shape mismatch");
  const Matrix base = spec.gamma(c_points[0].at(0), env_values[0]);
  std::vector<Matrix> rows;
  for (std::size_t e = 0; e < env_values.size(); ++e)
    for (const RowVector& c : c_points[e]) {
      const Matrix diff = spec.gamma(c, env_values[e]) - base;
      rows.push_back(Eigen::Map<const Matrix>(diff.data(), 1, diff.size()));
    }
  Matrix out(static_cast<Index>(rows.size()), static_cast<Index>(spec.q) * spec.k);
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = rows[i];
  return out;
}

/// Minimum environment count max(q_s k_s, q_z k_z) + 1.
inline int required_environments(const ExpFamSpec& s, const ExpFamSpec& z) {
  return std::max(s.q * s.k, z.q * z.k) + 1;
}

/// Full column rank of the stacked natural-parameter differences for both
/// blocks plus the environment-count rule.
inline TheoryReport check_diversity(const ExpFamSpec& spec_s, const ExpFamSpec& spec_z,
                                    const std::vector<RowVector>& env_values,
                                    const std::vector<std::vector<RowVector>>& c_points) {
  TheoryReport r;
  r.check = "diversity";
  const int m = static_cast<int>(env_values.size());
  const int needed = required_environments(spec_s, spec_z);
  const bool count_ok = m >= needed;
  r.details["environments"] = m;
  r.details["required_environments"] = needed;
  r.details["environment_count_ok"] = count_ok;
  bool ranks_ok = true;
  double margin = static_cast<double>(m - needed);
  for (const ExpFamSpec* spec : {&spec_s, &spec_z}) {
    const RankSummary rs = column_rank(stacked_gamma_differences(*spec, env_values, c_points));
    ranks_ok = ranks_ok && rs.full_column_rank;
    const double ratio = rs.sigma_max > 0.0 ? rs.sigma_min / rs.sigma_max : 0.0;
    margin = std::min(margin, ratio - 1e-8);
    r.details[spec->name] = {{"rank", rs.rank},
                             {"columns", rs.columns},
                             {"sigma_min", rs.sigma_min},
                             {"sigma_max", rs.sigma_max},
                             {"full_column_rank", rs.full_column_rank}};
  }
  r.pass = count_ok && ranks_ok;
  r.margin = margin;
  return r;
}

/// Mixture matrix L = [P^e(C = c_r)] (m x R) for a discrete confounder; it
/// must have full column rank.
inline TheoryReport check_mixture_matrix(const Matrix& mixture) {
  TheoryReport r;
  r.check = "mixture_rank";
  const RankSummary rs = column_rank(mixture);
  r.pass = rs.full_column_rank;
  r.margin = rs.sigma_max > 0.0 ? rs.sigma_min / rs.sigma_max - 1e-8 : -1e-8;
  r.details = {{"rank", rs.rank}, {"columns", rs.columns}, {"sigma_min", rs.sigma_min}, {"sigma_max", rs.sigma_max}};
  return r;
}

/// Grid of c values per environment: E[c | d^e] + offset_r, so the grid
/// follows each environment's confounder distribution.
inline std::vector<std::vector<RowVector>> environment_c_grid(const GroundTruthScm& scm, int points) {
  require(points >= 1, "environment_c_grid: need at least one point");
  std::vector<std::vector<RowVector>> grid;
  const int qc = scm.dims.q_c;
  for (int e = 1; e <= scm.m; ++e) {
    std::vector<RowVector> pts;
    for (int r = 0; r < points; ++r) {
      RowVector c = scm.env_offset(e);
      // Lissajous pattern with radius 2 sd of c | e (Var = 4 + 1 per coordinate).
      for (int j = 0; j < qc; ++j)
        c(j) += 2.0 * std::sqrt(5.0) * std::cos(2.0 * std::numbers::pi * (j + 1) * r / points + j);
      pts.push_back(c);
    }
    grid.push_back(std::move(pts));
  }
  return grid;
}

inline TheoryReport check_diversity(const GroundTruthScm& scm, int grid_points = 8) {
  std::vector<RowVector> env_values;
  for (int e = 1; e <= scm.m; ++e) env_values.push_back(scm.env_offset(e));
  return check_diversity(gaussian_spec(scm, true), gaussian_spec(scm, false), env_values,
                         environment_c_grid(scm, grid_points));
}

// ---- Stein kernel ---------------------------------------------------------

/// A density sampled on an increasing grid; normalized by the trapezoid rule
/// before use.
struct GridDensity {
  std::vector<double> x;
  std::vector<double> p;

  static GridDensity from_function(const std::function<double(double)>& pdf, double lo, double hi, int points = 4001) {
    require(points >= 3 && hi > lo, "GridDensity: bad grid");
    GridDensity g;
    g.x.resize(static_cast<std::size_t>(points));
    g.p.resize(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i) {
      g.x[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (points - 1);
      g.p[static_cast<std::size_t>(i)] = pdf(g.x[static_cast<std::size_t>(i)]);
    }
    return g;
  }
};

inline double trapezoid(const std::vector<double>& x, const std::vector<double>& f) {
  double total = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) total += 0.5 * (x[i] - x[i - 1]) * (f[i] + f[i - 1]);
  return total;
}

struct SteinKernel {
  std::vector<double> x;
  std::vector<double> tau;
  std::vector<bool> reliable;  // false where p(x) < 1e-12
  double mean = 0.0;
  double variance = 0.0;
  double expected_tau = 0.0;   // E[tau(X)]
};

/// tau(x) = (1 / p(x)) * integral_{-inf}^{x} (E[X] - t) p(t) dt on every grid point,
/// with a cumulative trapezoid rule.
inline SteinKernel stein_kernel(const GridDensity& density) {
  const auto& x = density.x;
  require(x.size() >= 3 && x.size() == density.p.size(), "stein_kernel: bad grid");
  for (std::size_t i = 1; i < x.size(); ++i) require(x[i] > x[i - 1], "stein_kernel: grid must increase");
  for (double v : density.p) require(std::isfinite(v) && v >= 0.0, "stein_kernel: density must be finite and >= 0");
  const double mass = trapezoid(x, density.p);
  require(mass > 0.0, "stein_kernel: density has zero mass");
  std::vector<double> p(density.p.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = density.p[i] / mass;

  SteinKernel k;
  k.x = x;
  std::vector<double> xp(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) xp[i] = x[i] * p[i];
  k.mean = trapezoid(x, xp);
  std::vector<double> sq(p.size()), integrand(p.size()), cumulative(p.size(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    sq[i] = (x[i] - k.mean) * (x[i] - k.mean) * p[i];
    integrand[i] = (k.mean - x[i]) * p[i];
  }
  k.variance = trapezoid(x, sq);
  for (std::size_t i = 1; i < p.size(); ++i)
    cumulative[i] = cumulative[i - 1] + 0.5 * (x[i] - x[i - 1]) * (integrand[i] + integrand[i - 1]);
  k.tau.resize(p.size());
  k.reliable.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    k.reliable[i] = p[i] >= 1e-12;
    k.tau[i] = k.reliable[i] ? cumulative[i] / p[i] : 0.0;
  }
  // E[tau(X)] = integral tau p = integral of the cumulative term.
  k.expected_tau = trapezoid(x, cumulative);
  return k;
}

/// tau at an arbitrary point inside the grid by linear interpolation.
inline std::optional<double> stein_kernel_at(const SteinKernel& k, double x) {
  if (x < k.x.front() || x > k.x.back()) return std::nullopt;
  auto it = std::upper_bound(k.x.begin(), k.x.end(), x);
  std::size_t hi = it == k.x.end() ? k.x.size() - 1 : static_cast<std::size_t>(it - k.x.begin());
  std::size_t lo = hi == 0 ? 0 : hi - 1;
  if (!k.reliable[lo] || !k.reliable[hi]) return std::nullopt;
  if (hi == lo) return k.tau[lo];
  const double w = (x - k.x[lo]) / (k.x[hi] - k.x[lo]);
  return (1.0 - w) * k.tau[lo] + w * k.tau[hi];
}

// ---- OOD generalization bound ----------------------------------------------

/// Posteriors p^{e1}(s | x) = N(mu1, sigma1^2), p^{e2}(s | x) = N(mu2, sigma2^2)
/// for a fixed x, and the regression function g(s) = E[Y | S = s].
struct GaussianPosteriorPair {
  double mu1 = 0.0, sigma1 = 1.0;
  double mu2 = 0.0, sigma2 = 1.0;
  std::function<double(double)> g;
  std::function<double(double)> g_prime;
  /// sup |g'| when known in closed form; otherwise taken over the grid.
  std::optional<double> lipschitz;
};

struct OodBoundResult {
  bool applicable = false;
  double lhs = 0.0;
  double rhs = 0.0;
  double slack = 0.0;  // rhs - lhs
  bool holds = false;
  std::string note;
};

inline double normal_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

/// |E_{p1} g(S) - E_{p2} g(S)| against sup|g'| * sup|pi'| * sigma1^2 with
/// pi(s) = p2(s) / p1(s). pi is unbounded unless sigma2 < sigma1 (or the two
/// posteriors coincide); such pairs are reported as inapplicable.
inline OodBoundResult ood_bound_check(const GaussianPosteriorPair& pair, int points = 4001, double tol = 1e-6) {
  require(pair.sigma1 > 0.0 && pair.sigma2 > 0.0, "ood_bound_check: sigmas must be positive");
  require(static_cast<bool>(pair.g), "ood_bound_check: g is required");
  OodBoundResult res;
  const bool identical = pair.mu1 == pair.mu2 && pair.sigma1 == pair.sigma2;
  if (!identical && pair.sigma2 >= pair.sigma1) {
    res.note = "density ratio p2/p1 is unbounded in the tails (sigma2 >= sigma1)";
    return res;
  }
  res.applicable = true;

  const double lo = std::min(pair.mu1 - 8.0 * pair.sigma1, pair.mu2 - 8.0 * pair.sigma2);
  const double hi = std::max(pair.mu1 + 8.0 * pair.sigma1, pair.mu2 + 8.0 * pair.sigma2);
  std::vector<double> xs(static_cast<std::size_t>(points)), f1(xs.size()), f2(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    xs[i] = lo + (hi - lo) * static_cast<double>(i) / (points - 1);
    const double gv = pair.g(xs[i]);
    f1[i] = gv * normal_pdf(xs[i], pair.mu1, pair.sigma1);
    f2[i] = gv * normal_pdf(xs[i], pair.mu2, pair.sigma2);
  }
  res.lhs = std::abs(trapezoid(xs, f1) - trapezoid(xs, f2));

  double g_sup = 0.0;
  if (pair.lipschitz) {
    g_sup = *pair.lipschitz;
  } else {
    require(static_cast<bool>(pair.g_prime), "ood_bound_check: g' or a Lipschitz constant is required");
    for (double x : xs) g_sup = std::max(g_sup, std::abs(pair.g_prime(x)));
  }

  double pi_sup = 0.0;
  if (!identical) {
    // log pi(s) = log(s1/s2) - (s-mu2)^2/(2 s2^2) + (s-mu1)^2/(2 s1^2) is a concave
    // quadratic with vertex mu_e and curvature 1/sigma_e^2; |pi'| peaks at mu_e +- sigma_e.
    const double a1 = 1.0 / (pair.sigma1 * pair.sigma1), a2 = 1.0 / (pair.sigma2 * pair.sigma2);
    const double var_e = 1.0 / (a2 - a1);
    const double mu_e = (pair.mu2 * a2 - pair.mu1 * a1) * var_e;
    const double sd_e = std::sqrt(var_e);
    auto dpi = [&](double s) {
      const double log_pi = std::log(pair.sigma1 / pair.sigma2) - 0.5 * a2 * (s - pair.mu2) * (s - pair.mu2) +
                            0.5 * a1 * (s - pair.mu1) * (s - pair.mu1);
      return std::exp(log_pi) * (-(s - pair.mu2) * a2 + (s - pair.mu1) * a1);
    };
    std::vector<double> grid = xs;
    const double glo = mu_e - 8.0 * sd_e, ghi = mu_e + 8.0 * sd_e;
    for (int i = 0; i < points; ++i) grid.push_back(glo + (ghi - glo) * i / (points - 1));
    grid.push_back(mu_e - sd_e);
    grid.push_back(mu_e + sd_e);
    for (double s : grid) {
      const double v = std::abs(dpi(s));
      require(std::isfinite(v), "ood_bound_check: density-ratio derivative overflowed");
      pi_sup = std::max(pi_sup, v);
    }
  }
  res.rhs = g_sup * pi_sup * pair.sigma1 * pair.sigma1;
  res.slack = res.rhs - res.lhs;
  res.holds = res.lhs <= res.rhs + tol;
  return res;
}

// ---- non-empty open set proxy ---------------------------------------------

/// Stacks (t, t^2) for every column of each latent block.
inline Matrix gaussian_sufficient_statistics(const Matrix& s, const Matrix& z) {
  require(s.rows() == z.rows(), "gaussian_sufficient_statistics: row counts differ");
  Matrix out(s.rows(), 2 * (s.cols() + z.cols()));
  Index c = 0;
  for (const Matrix* m : {&s, &z})
    for (Index j = 0; j < m->cols(); ++j) {
      out.col(c++) = m->col(j);
      out.col(c++) = m->col(j).cwiseAbs2();
    }
  return out;
}

/// Heuristic: the sample points are not confined to a lower-dimensional affine
/// subspace, i.e. every eigenvalue of their correlation matrix exceeds `threshold`.
inline TheoryReport check_nonempty_open_set(const Matrix& points, double threshold = 1e-6) {
  require(points.rows() >= 100, "check_nonempty_open_set: need at least 100 points");
  require(points.allFinite(), "check_nonempty_open_set: non-finite points");
  const Matrix centered = points.rowwise() - points.colwise().mean();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(points.rows() - 1);
  const Eigen::VectorXd sd = cov.diagonal().cwiseSqrt();
  TheoryReport r;
  r.check = "nonempty_open_set";
  double min_eig = 0.0;
  if ((sd.array() > 0.0).all()) {
    const Eigen::MatrixXd corr = cov.array() / (sd * sd.transpose()).array();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(corr);
    min_eig = es.eigenvalues().minCoeff();
    r.details["eigenvalues"] = std::vector<double>(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  } else {
    r.details["note"] = "a coordinate has zero variance";
  }
  r.details["min_eigenvalue"] = min_eig;
  r.details["threshold"] = threshold;
  r.margin = min_eig - threshold;
  r.pass = min_eig > threshold;
  return r;
}

// ---- composite checks --------------------------------------------------------

/// tau == 1 for N(0, 1) on |x| <= 3, and E[tau] == Var on random two-component
/// Gaussian mixtures whose variance is known in closed form.
inline TheoryReport check_stein_identity(RngStream& rng, int mixtures = 10, double tol = 1e-4) {
  TheoryReport r;
  r.check = "stein_identity";
  const SteinKernel normal =
      stein_kernel(GridDensity::from_function([](double x) { return normal_pdf(x, 0.0, 1.0); }, -10.0, 10.0));
  double normal_err = 0.0;
  for (double x = -3.0; x <= 3.0 + 1e-12; x += 0.05) {
    const auto t = stein_kernel_at(normal, x);
    normal_err = std::max(normal_err, t ? std::abs(*t - 1.0) : std::numeric_limits<double>::infinity());
  }
  double mixture_err = 0.0;
  nlohmann::json cases = nlohmann::json::array();
  for (int i = 0; i < mixtures; ++i) {
    const double w = rng.uniform(0.1, 0.9);
    const double m1 = rng.uniform(-3.0, 3.0), m2 = rng.uniform(-3.0, 3.0);
    const double s1 = rng.uniform(0.3, 2.0), s2 = rng.uniform(0.3, 2.0);
    const double mean = w * m1 + (1 - w) * m2;
    const double var = w * (s1 * s1 + m1 * m1) + (1 - w) * (s2 * s2 + m2 * m2) - mean * mean;
    const SteinKernel k = stein_kernel(GridDensity::from_function(
        [&](double x) { return w * normal_pdf(x, m1, s1) + (1 - w) * normal_pdf(x, m2, s2); }, -20.0, 20.0, 8001));
    const double rel = std::abs(k.expected_tau - var) / var;
    mixture_err = std::max(mixture_err, rel);
    cases.push_back({{"weight", w}, {"means", {m1, m2}}, {"sds", {s1, s2}}, {"variance", var},
                     {"expected_tau", k.expected_tau}, {"relative_error", rel}});
  }
  r.details = {{"normal_max_abs_error", normal_err}, {"mixture_max_relative_error", mixture_err},
               {"tolerance", tol}, {"mixtures", cases}};
  r.margin = tol - std::max(normal_err, mixture_err);
  r.pass = r.margin >= 0.0;
  return r;
}

/// The bound on random applicable pairs (sigma2 < sigma1) with g(s) = sin(a s + b).
inline TheoryReport check_ood_bound(RngStream& rng, int pairs = 1000, double tol = 1e-6) {
  TheoryReport r;
  r.check = "ood_bound";
  int applicable = 0, holds = 0;
  double min_slack = std::numeric_limits<double>::infinity();
  for (int i = 0; i < pairs; ++i) {
    const double s1 = rng.uniform(0.3, 2.0);
    const double s2 = s1 * rng.uniform(0.2, 0.98);
    const double mu1 = rng.uniform(-2.0, 2.0), mu2 = mu1 + rng.uniform(-1.5, 1.5);
    const double a = rng.uniform(0.2, 3.0), b = rng.uniform(-1.0, 1.0);
    GaussianPosteriorPair p{mu1, s1, mu2, s2, [=](double s) { return std::sin(a * s + b); }, nullptr, a};
    const OodBoundResult res = ood_bound_check(p, 2001, tol);
    if (!res.applicable) continue;
    ++applicable;
    holds += res.holds ? 1 : 0;
    min_slack = std::min(min_slack, res.slack);
  }
  r.details = {{"pairs", pairs}, {"applicable", applicable}, {"holds", holds}, {"min_slack", min_slack},
               {"tolerance", tol}};
  r.margin = min_slack + tol;
  r.pass = applicable > 0 && holds == applicable;
  return r;
}

}  // namespace lacim
