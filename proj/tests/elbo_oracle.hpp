#pragma once

// Importance-sampling estimate of log p^e(x, y) with q^e(s, z | x) as the
// proposal. Written against the raw networks, without the tape. Test-only.

#include "lacim/model.hpp"

namespace lacim::testing {

struct IsEstimate {
  double log_likelihood = 0.0;
  double standard_error = 0.0;  // delta-method error of the log of the mean weight
};

inline Eigen::VectorXd diag_gauss_logpdf(const Matrix& x, const Matrix& mean, const Matrix& log_std) {
  const Eigen::ArrayXXd ls = log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax).array();
  const Eigen::ArrayXXd u = (x - mean).array() / ls.exp();
  return (-0.5 * u.square() - ls - 0.5 * std::log(2.0 * M_PI)).matrix().rowwise().sum();
}

/// Regression models only; x and y are single rows.
inline IsEstimate importance_log_likelihood(const LacimModel& model, const RowVector& x, const RowVector& y, int e,
                                            Index particles, RngStream& rng) {
  const auto& d = model.dims();
  const Posterior post = encode(model, x, e);
  Matrix mean(1, d.q_latent()), ls(1, d.q_latent());
  mean << post.mean_s, post.mean_z;
  ls << post.log_std_s, post.log_std_z;
  const Matrix means = mean.replicate(particles, 1), lss = ls.replicate(particles, 1);
  const Matrix sz = means + lss.array().exp().matrix().cwiseProduct(rng.normal_matrix(particles, d.q_latent()));

  const Matrix pri = model.prior_params(e);
  const Matrix px = model.decode_x(sz);
  const Matrix py = model.dec_y().evaluate(sz.leftCols(d.q_s));
  const Eigen::VectorXd logw =
      diag_gauss_logpdf(x.replicate(particles, 1), px.leftCols(d.q_x), px.rightCols(d.q_x)) +
      diag_gauss_logpdf(y.replicate(particles, 1), py.leftCols(d.q_y), py.rightCols(d.q_y)) +
      diag_gauss_logpdf(sz, pri.leftCols(d.q_latent()).replicate(particles, 1),
                        pri.rightCols(d.q_latent()).replicate(particles, 1)) -
      diag_gauss_logpdf(sz, means, lss);
  const double top = logw.maxCoeff();
  const Eigen::ArrayXd w = (logw.array() - top).exp();
  const double mw = w.mean();
  const double sd = std::sqrt((w - mw).square().sum() / static_cast<double>(particles - 1));
  return {top + std::log(mw), sd / (mw * std::sqrt(static_cast<double>(particles)))};
}

}  // namespace lacim::testing
