#pragma once

#include "lacim/autodiff.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace lacim {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamMoments {
  Matrix m;
  Matrix v;
};

/// One Adam update of `value` in place. `step` is the 1-based step count after
/// incrementing. Weight decay is added to the gradient before the moments.
inline void adam_update(Matrix& value, const Matrix& grad, AdamMoments& moments, long step,
                        const AdamConfig& cfg) {
  if (moments.m.size() == 0) {
    moments.m = Matrix::Zero(value.rows(), value.cols());
    moments.v = Matrix::Zero(value.rows(), value.cols());
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (Index i = 0; i < value.size(); ++i) {
    const double g = grad.data()[i] + cfg.weight_decay * value.data()[i];
    double& m = moments.m.data()[i];
    double& v = moments.v.data()[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    value.data()[i] -= cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
  }
}

class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg), moments_(params_.size()) {
    require(cfg_.lr >= 0.0, "Adam: negative learning rate");
  }

  /// Applies the accumulated gradients; throws naming the first parameter
  /// whose gradient is not finite (nothing is updated in that case).
  void step() {
    for (const Parameter* p : params_) {
      require(p->grad.rows() == p->value.rows() && p->grad.cols() == p->value.cols(),
              "Adam: gradient shape mismatch for " + p->name);
      if (!p->grad.allFinite()) throw Error("Adam: non-finite gradient in parameter " + p->name);
    }
    ++steps_;
    for (std::size_t i = 0; i < params_.size(); ++i)
      adam_update(params_[i]->value, params_[i]->grad, moments_[i], steps_, cfg_);
  }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  long steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  std::vector<AdamMoments> moments_;
  long steps_ = 0;
};

}  // namespace lacim
