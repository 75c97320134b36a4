#pragma once

#include "lacim/adam.hpp"
#include "lacim/model.hpp"

#include <chrono>
#include <cstring>
#include <limits>

namespace lacim {

enum class InitMode {
  standard_normal,  // k candidates from N(0, I)
  posterior,        // k candidates from every environment's q^e(s, z | x)
};

struct InferConfig {
  int k_starts = 10;
  int iterations = 50;
  double lr = 0.002;
  double weight_decay = 0.0002;
  double lambda_s = 1e-3;
  double lambda_z = 1e-3;
  /// -1 penalizes the squared norms, +1 rewards them as printed in the
  /// original objective (which is unbounded above).
  int penalty_sign = -1;
  InitMode init = InitMode::standard_normal;
};

inline void validate(const InferConfig& cfg) {
  require(cfg.k_starts >= 1, "InferConfig: k_starts must be >= 1");
  require(cfg.iterations >= 0, "InferConfig: iterations must be >= 0");
  require(cfg.penalty_sign == 1 || cfg.penalty_sign == -1, "InferConfig: penalty_sign must be +1 or -1");
  require(cfg.lr >= 0.0, "InferConfig: negative learning rate");
}

struct InferResult {
  RowVector s;
  RowVector z;
  double objective = 0.0;
  std::vector<double> trace;  // objective of the initializer, then after each Adam step
};

/// log p(x | s, z) + penalty_sign * (lambda_s |s|^2 + lambda_z |z|^2) for every row of `sz`.
inline Eigen::VectorXd latent_objective(const LacimModel& model, const RowVector& x, const Matrix& sz,
                                        const InferConfig& cfg) {
  const auto& d = model.dims();
  const Matrix out = model.decode_x(sz);
  const Eigen::ArrayXXd ls = out.rightCols(d.q_x).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax).array();
  const Eigen::ArrayXXd diff = (out.leftCols(d.q_x).rowwise() - x).array();
  Eigen::VectorXd obj = (-0.5 * (diff * (-ls).exp()).square() - ls - kHalfLog2Pi).matrix().rowwise().sum();
  const Eigen::VectorXd ns = sz.leftCols(d.q_s).rowwise().squaredNorm();
  const Eigen::VectorXd nz = sz.rightCols(d.q_z).rowwise().squaredNorm();
  obj += cfg.penalty_sign * (cfg.lambda_s * ns + cfg.lambda_z * nz);
  return obj;
}

/// Multi-start search for (s, z) explaining x under the learned decoder,
/// followed by Adam ascent; returns the best iterate seen.
inline InferResult infer_latents(const LacimModel& model, const RowVector& x, const InferConfig& cfg, RngStream& rng) {
  validate(cfg);
  const auto& d = model.dims();
  require(x.cols() == d.q_x, "infer_latents: x has wrong width");
  require(x.allFinite(), "infer_latents: non-finite input");
  const int q = d.q_latent();

  Matrix starts;
  if (cfg.init == InitMode::standard_normal) {
    starts = rng.normal_matrix(cfg.k_starts, q);
  } else {
    starts.resize(static_cast<Index>(cfg.k_starts) * d.m, q);
    for (int e = 1; e <= d.m; ++e) {
      const Posterior post = encode(model, x, e);
      for (int k = 0; k < cfg.k_starts; ++k) {
        const auto r = static_cast<Index>((e - 1) * cfg.k_starts + k);
        for (int j = 0; j < d.q_s; ++j)
          starts(r, j) = post.mean_s(0, j) + std::exp(post.log_std_s(0, j)) * rng.normal();
        for (int j = 0; j < d.q_z; ++j)
          starts(r, d.q_s + j) = post.mean_z(0, j) + std::exp(post.log_std_z(0, j)) * rng.normal();
      }
    }
  }
  const Eigen::VectorXd start_obj = latent_objective(model, x, starts, cfg);
  Index best_start = -1;
  for (Index i = 0; i < start_obj.size(); ++i) {
    if (!std::isfinite(start_obj(i))) continue;
    if (best_start < 0 || start_obj(i) > start_obj(best_start)) best_start = i;
  }
  require(best_start >= 0, "infer_latents: objective is non-finite at every start");

  Parameter sz("sz", starts.row(best_start));
  RowVector best = sz.value.row(0);
  double best_obj = start_obj(best_start);
  InferResult res;
  res.trace.push_back(best_obj);

  const AdamConfig acfg{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
  AdamMoments moments;
  const Matrix xm = x;
  Tape tape;
  for (int it = 0; it < cfg.iterations; ++it) {
    tape.clear();
    Var v = tape.param(sz);
    Var out = model.dec_x().forward_frozen(tape, v);
    Var logpx = gaussian_logpdf(tape.constant(xm), cols(out, 0, d.q_x),
                                clamp(cols(out, d.q_x, d.q_x), kLogStdMin, kLogStdMax));
    Var pen = add(scale(sum(square(cols(v, 0, d.q_s))), cfg.lambda_s),
                  scale(sum(square(cols(v, d.q_s, d.q_z))), cfg.lambda_z));
    Var objective = add(sum(logpx), scale(pen, cfg.penalty_sign));
    sz.zero_grad();
    tape.backward(neg(objective));
    if (!sz.grad.allFinite()) break;
    adam_update(sz.value, sz.grad, moments, it + 1, acfg);
    const double obj = latent_objective(model, x, sz.value, cfg)(0);
    res.trace.push_back(obj);
    if (std::isfinite(obj) && obj > best_obj) {
      best_obj = obj;
      best = sz.value.row(0);
    }
  }
  res.s = best.leftCols(d.q_s);
  res.z = best.rightCols(d.q_z);
  res.objective = best_obj;
  return res;
}

struct Prediction {
  int label = -1;   // classification
  RowVector mean;   // regression: decoder mean of y; classification: logits
};

/// argmax_y p(y | s): the first maximal logit for classification, the
/// decoder mean for regression.
inline Prediction predict(const LacimModel& model, const RowVector& s) {
  const auto& d = model.dims();
  require(s.cols() == d.q_s, "predict: s has wrong width");
  const Matrix out = model.dec_y().evaluate(s);
  Prediction p;
  if (d.task == TaskKind::classification) {
    p.mean = out.row(0);
    Index best = 0;
    for (Index c = 1; c < out.cols(); ++c)
      if (out(0, c) > out(0, best)) best = c;
    p.label = static_cast<int>(best);
  } else {
    p.mean = out.row(0).leftCols(d.q_y);
  }
  return p;
}

struct BatchPrediction {
  std::vector<int> labels;
  Matrix means;
  Matrix s;
  Matrix z;
  std::vector<double> objectives;
  double seconds = 0.0;
  double samples_per_second = 0.0;
};

/// Key of a sample's private random stream: a hash of its bytes, so results
/// do not depend on where the sample sits in the batch.
inline std::uint64_t row_key(const RowVector& x) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Index i = 0; i < x.cols(); ++i) {
    std::uint64_t bits = 0;
    const double v = x(i);
    std::memcpy(&bits, &v, sizeof bits);
    h = splitmix64(h ^ bits);
  }
  return h;
}

inline BatchPrediction predict_batch(const LacimModel& model, const Matrix& xs, const InferConfig& cfg,
                                     const RngStream& rng) {
  const auto& d = model.dims();
  require(xs.cols() == d.q_x, "predict_batch: inputs have wrong width");
  const auto t0 = std::chrono::steady_clock::now();
  BatchPrediction out;
  const Index n = xs.rows();
  out.s.resize(n, d.q_s);
  out.z.resize(n, d.q_z);
  out.means.resize(n, d.q_y);
  for (Index i = 0; i < n; ++i) {
    const RowVector x = xs.row(i);
    RngStream sample_rng = rng.substream(row_key(x));
    const InferResult r = infer_latents(model, x, cfg, sample_rng);
    const Prediction p = predict(model, r.s);
    out.s.row(i) = r.s;
    out.z.row(i) = r.z;
    out.means.row(i) = p.mean;
    out.labels.push_back(p.label);
    out.objectives.push_back(r.objective);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.samples_per_second = out.seconds > 0.0 ? static_cast<double>(n) / out.seconds : 0.0;
  return out;
}

}  // namespace lacim
