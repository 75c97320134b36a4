#pragma once

#include "lacim/dataset.hpp"
#include "lacim/mlp.hpp"
#include "lacim/rng.hpp"

#include <optional>
#include <vector>

namespace lacim {

struct ScmDims {
  int q_d = 2;
  int q_c = 2;
  int q_s = 2;
  int q_z = 2;
  int q_x = 4;
  int q_y = 2;

  int q_latent() const { return q_s + q_z; }
};

/// Scales of the randomly drawn generator parameters. Every entry of the
/// linear maps is Uniform(-scale, scale); the nets use the usual
/// 1/sqrt(fan_in) bound times their gain.
struct ScmOptions {
  int hidden = 16;
  double slope = 0.5;
  double latent_mean_scale = 0.1;
  double latent_logstd_scale = 0.04;
  double x_mean_gain = 2.0;
  double x_logstd_gain = 0.5;
  double y_mean_gain = 2.0;
  double y_logstd_gain = 0.5;
  /// Multiplies the observation noise exp(f_sigma(.)) of x and y. The
  /// bias-free sigma nets sit near log-std 0, i.e. unit noise, otherwise.
  double x_noise_scale = 0.05;
  double y_noise_scale = 0.2;
  /// Debug switch: drops observation noise on x and y.
  bool noiseless = false;
};

/// Frozen parameters of the data-generating model:
///   d^e = (N(0, I) + 5e) * 2,  c | d ~ N(d, I),
///   (s, z) | c ~ N(c A_mu, diag(exp(c A_sigma))^2),
///   x | s, z ~ N(f_x_mu(s, z), diag(exp(f_x_sigma(s, z)))^2),
///   y | s ~ N(f_y_mu(s), diag(exp(f_y_sigma(s)))^2).
struct GroundTruthScm {
  ScmDims dims;
  int m = 1;
  ScmOptions options;
  Matrix a_mu;     // q_c x (q_s + q_z)
  Matrix a_sigma;  // q_c x (q_s + q_z)
  Mlp f_x_mu, f_x_sigma;
  Mlp f_y_mu, f_y_sigma;

  /// Noise-free environment offset (N(0, I) term at zero): 10e per coordinate.
  RowVector env_offset(int e) const { return RowVector::Constant(dims.q_d, 10.0 * e); }
};

inline void validate_dims(const ScmDims& d) {
  for (int v : {d.q_d, d.q_c, d.q_s, d.q_z, d.q_x, d.q_y})
    require(v > 0, "ScmDims: all dimensions must be positive");
  require(d.q_c == d.q_d, "ScmDims: c | d ~ N(d, I) needs q_c == q_d");
  require(d.q_s + d.q_z <= d.q_x,
          "ScmDims: q_s + q_z (" + std::to_string(d.q_s + d.q_z) + ") exceeds q_x (" +
              std::to_string(d.q_x) + ")");
}

inline GroundTruthScm build_scm(std::uint64_t seed, const ScmDims& dims, int m,
                                const ScmOptions& options = {}) {
  validate_dims(dims);
  require(m >= 1, "build_scm: need at least one environment");
  RngStream rng(seed, stream::kScmParams);
  GroundTruthScm scm;
  scm.dims = dims;
  scm.m = m;
  scm.options = options;
  const int q = dims.q_latent();
  const int h = options.hidden;
  scm.a_mu = rng.uniform_matrix(dims.q_c, q, -options.latent_mean_scale, options.latent_mean_scale);
  scm.a_sigma =
      rng.uniform_matrix(dims.q_c, q, -options.latent_logstd_scale, options.latent_logstd_scale);
  scm.f_x_mu = Mlp("scm.fx_mu", {q, h, h, dims.q_x}, options.slope, true, rng, options.x_mean_gain);
  scm.f_x_sigma =
      Mlp("scm.fx_sigma", {q, h, h, dims.q_x}, options.slope, true, rng, options.x_logstd_gain);
  scm.f_y_mu = Mlp("scm.fy_mu", {dims.q_s, h, h, dims.q_y}, options.slope, true, rng, options.y_mean_gain);
  scm.f_y_sigma =
      Mlp("scm.fy_sigma", {dims.q_s, h, h, dims.q_y}, options.slope, true, rng, options.y_logstd_gain);
  return scm;
}

namespace detail {
inline Matrix gaussian_draw(const Matrix& mean, const Matrix& log_std, RngStream& rng, bool noiseless,
                            double noise_scale = 1.0) {
  if (noiseless) return mean;
  Matrix sd = noise_scale * log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax).array().exp();
  return mean + sd.cwiseProduct(rng.normal_matrix(mean.rows(), mean.cols()));
}
}  // namespace detail

/// Draws x from the invariant mechanism p(x | s, z); rows are samples.
inline Matrix sample_x_given_latents(const GroundTruthScm& scm, const Matrix& s, const Matrix& z,
                                     RngStream& rng) {
  require(s.cols() == scm.dims.q_s && z.cols() == scm.dims.q_z && s.rows() == z.rows(),
          "sample_x_given_latents: latent shape mismatch");
  Matrix sz(s.rows(), s.cols() + z.cols());
  sz << s, z;
  return detail::gaussian_draw(scm.f_x_mu.evaluate(sz), scm.f_x_sigma.evaluate(sz), rng,
                               scm.options.noiseless, scm.options.x_noise_scale);
}

inline Matrix sample_y_given_s(const GroundTruthScm& scm, const Matrix& s, RngStream& rng) {
  require(s.cols() == scm.dims.q_s, "sample_y_given_s: latent shape mismatch");
  return detail::gaussian_draw(scm.f_y_mu.evaluate(s), scm.f_y_sigma.evaluate(s), rng,
                               scm.options.noiseless, scm.options.y_noise_scale);
}

/// d^e = (noise + 5e) * 2, one row per sample.
inline Matrix env_d(int e, const Matrix& noise) { return (noise.array() + 5.0 * e) * 2.0; }

/// n samples from environment e in [1, m]; d^e is redrawn for every sample.
inline EnvDataset sample_env(const GroundTruthScm& scm, int e, Index n, RngStream& rng) {
  require(e >= 1 && e <= scm.m, "sample_env: environment index out of range");
  require(n >= 0, "sample_env: negative sample count");
  const auto& dm = scm.dims;
  EnvDataset ds;
  ds.env = e;
  ds.has_latents = true;
  const Matrix d = env_d(e, rng.normal_matrix(n, dm.q_d));
  ds.c = d + rng.normal_matrix(n, dm.q_c);
  const Matrix mean = ds.c * scm.a_mu;
  const Matrix log_std = ds.c * scm.a_sigma;
  const Matrix sz = detail::gaussian_draw(mean, log_std, rng, false);
  ds.s = sz.leftCols(dm.q_s);
  ds.z = sz.rightCols(dm.q_z);
  ds.x = sample_x_given_latents(scm, ds.s, ds.z, rng);
  ds.y = sample_y_given_s(scm, ds.s, rng);
  return ds;
}

struct Intervention {
  std::optional<std::vector<double>> s_star;
  std::optional<std::vector<double>> z_star;
};

enum class InterventionTarget { x, y, both };

/// Samples under do(s*, z*): x and y depend only on the intervened latents,
/// never on e, c or d. The result carries env = 0.
inline EnvDataset sample_interventional(const GroundTruthScm& scm, const Intervention& iv, Index n,
                                        RngStream& rng,
                                        InterventionTarget target = InterventionTarget::both) {
  const bool want_x = target != InterventionTarget::y;
  require(iv.s_star.has_value(), "sample_interventional: s* is required");
  require(!want_x || iv.z_star.has_value(), "sample_interventional: sampling x needs both s* and z*");
  require(static_cast<int>(iv.s_star->size()) == scm.dims.q_s, "sample_interventional: s* has wrong length");
  require(!iv.z_star || static_cast<int>(iv.z_star->size()) == scm.dims.q_z,
          "sample_interventional: z* has wrong length");
  EnvDataset ds;
  ds.env = 0;
  ds.has_latents = true;
  ds.s = row_matrix(*iv.s_star).replicate(n, 1);
  ds.z = iv.z_star ? Matrix(row_matrix(*iv.z_star).replicate(n, 1)) : Matrix(n, 0);
  ds.c = Matrix(n, 0);
  if (want_x) {
    ds.x = sample_x_given_latents(scm, ds.s, ds.z, rng);
  } else {
    ds.x = Matrix(n, 0);
  }
  if (target != InterventionTarget::x) ds.y = sample_y_given_s(scm, ds.s, rng);
  return ds;
}

/// Samples every environment 1..m with `n` rows each, using one stream per environment.
inline std::vector<EnvDataset> sample_all_envs(const GroundTruthScm& scm, Index n, std::uint64_t seed) {
  std::vector<EnvDataset> out;
  for (int e = 1; e <= scm.m; ++e) {
    RngStream rng(seed, stream::kEnvData + static_cast<std::uint64_t>(e));
    out.push_back(sample_env(scm, e, n, rng));
  }
  return out;
}

// ---- toy spurious-correlation classification -----------------------------

struct ToyConfig {
  std::vector<double> train_strengths{0.95, 0.99};
  double test_strength = 0.1;
  Index samples_per_env = 2000;
  Index test_samples = 2000;
  int q_s = 2;
  int q_z = 2;
  int q_x = 4;
  int hidden = 16;
  double class_mean = 1.0;
  double latent_std = 1.0;
  double x_noise_std = 0.1;
};

struct ToySplit {
  std::vector<EnvDataset> train;
  EnvDataset test;
  Mlp f_x;
};

namespace detail {
inline EnvDataset toy_env(const ToyConfig& cfg, Mlp& f_x, int env, double strength, Index n, RngStream& rng) {
  EnvDataset ds;
  ds.env = env;
  ds.has_latents = true;
  ds.s.resize(n, cfg.q_s);
  ds.z.resize(n, cfg.q_z);
  ds.c.resize(n, 1);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const int y = rng.bernoulli(0.5) ? 1 : 0;
    const double sign = y == 1 ? 1.0 : -1.0;
    // c records the spurious attribute: the class sign z is drawn around.
    const double z_sign = rng.bernoulli(strength) ? sign : -sign;
    ds.labels[static_cast<std::size_t>(i)] = y;
    ds.c(i, 0) = z_sign;
    for (int j = 0; j < cfg.q_s; ++j) ds.s(i, j) = sign * cfg.class_mean + cfg.latent_std * rng.normal();
    for (int j = 0; j < cfg.q_z; ++j) ds.z(i, j) = z_sign * cfg.class_mean + cfg.latent_std * rng.normal();
  }
  Matrix sz(n, cfg.q_s + cfg.q_z);
  sz << ds.s, ds.z;
  ds.x = f_x.evaluate(sz) + cfg.x_noise_std * rng.normal_matrix(n, cfg.q_x);
  return ds;
}
}  // namespace detail

/// Binary task where s carries the label and z agrees with it with
/// probability equal to the environment's strength.
inline ToySplit build_toy_spurious(std::uint64_t seed, const ToyConfig& cfg) {
  require(cfg.train_strengths.size() >= 2, "build_toy_spurious: need at least two training environments");
  for (double r : cfg.train_strengths)
    require(r > 0.0 && r <= 1.0, "build_toy_spurious: strengths must lie in (0, 1]");
  require(cfg.test_strength > 0.0 && cfg.test_strength <= 1.0,
          "build_toy_spurious: test strength must lie in (0, 1]");
  for (std::size_t i = 0; i < cfg.train_strengths.size(); ++i)
    for (std::size_t j = i + 1; j < cfg.train_strengths.size(); ++j)
      require(cfg.train_strengths[i] != cfg.train_strengths[j],
              "build_toy_spurious: environment strengths must be distinct");
  RngStream init(seed, stream::kToyData);
  ToySplit split;
  split.f_x = Mlp("toy.fx", {cfg.q_s + cfg.q_z, cfg.hidden, cfg.hidden, cfg.q_x}, 0.5, false, init, 2.0);
  for (std::size_t i = 0; i < cfg.train_strengths.size(); ++i) {
    const int env = static_cast<int>(i) + 1;
    RngStream rng(seed, stream::kToyData + static_cast<std::uint64_t>(env));
    split.train.push_back(detail::toy_env(cfg, split.f_x, env, cfg.train_strengths[i], cfg.samples_per_env, rng));
  }
  RngStream rng(seed, stream::kToyData + 99);
  split.test = detail::toy_env(cfg, split.f_x, 0, cfg.test_strength, cfg.test_samples, rng);
  return split;
}

}  // namespace lacim
