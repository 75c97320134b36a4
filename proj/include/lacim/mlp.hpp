#pragma once

#include "lacim/autodiff.hpp"
#include "lacim/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace lacim {

struct DenseLayer {
  Parameter weight;  // fan_in x fan_out; rows of the input multiply from the left
  Parameter bias;    // 1 x fan_out
};

/// Fully connected network with LeakyReLU between layers. When
/// `activate_output` is set the activation is applied after the last layer
/// too, which is how the ground-truth generator nets are built.
class Mlp {
 public:
  Mlp() = default;

  /// Weights ~ Uniform(-gain/sqrt(fan_in), gain/sqrt(fan_in)), biases zero.
  Mlp(const std::string& name, const std::vector<int>& widths, double slope, bool activate_output,
      RngStream& rng, double gain = 1.0)
      : slope_(slope), activate_output_(activate_output) {
    require(widths.size() >= 2, "Mlp: need at least input and output widths");
    require(slope > 0.0 && slope <= 1.0, "Mlp: slope must lie in (0, 1]");
    for (int w : widths) require(w > 0, "Mlp: widths must be positive");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const double bound = gain / std::sqrt(static_cast<double>(widths[i]));
      DenseLayer layer;
      layer.weight = Parameter(name + ".w" + std::to_string(i),
                               rng.uniform_matrix(widths[i], widths[i + 1], -bound, bound));
      layer.bias = Parameter(name + ".b" + std::to_string(i), Matrix::Zero(1, widths[i + 1]));
      layers_.push_back(std::move(layer));
    }
  }

  Index in_dim() const { return layers_.front().weight.value.rows(); }
  Index out_dim() const { return layers_.back().weight.value.cols(); }
  double slope() const { return slope_; }
  bool activate_output() const { return activate_output_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  Var forward(Tape& tape, Var x) {
    if (x.cols() != in_dim())
      throw Error("Mlp::forward: input has " + std::to_string(x.cols()) + " columns, network expects " +
                  std::to_string(in_dim()));
    Var h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = add_row(matmul(h, tape.param(layers_[i].weight)), tape.param(layers_[i].bias));
      if (i + 1 < layers_.size() || activate_output_) h = leaky_relu(h, slope_);
    }
    return h;
  }

  /// Forward with the weights recorded as constants, so gradients reach the
  /// input only and the parameters are left untouched.
  Var forward_frozen(Tape& tape, Var x) const {
    require(x.cols() == in_dim(), "Mlp::forward_frozen: input dimension mismatch");
    Var h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = add_row(matmul(h, tape.constant(layers_[i].weight.value)), tape.constant(layers_[i].bias.value));
      if (i + 1 < layers_.size() || activate_output_) h = leaky_relu(h, slope_);
    }
    return h;
  }

  /// Tape-free evaluation; rows are samples.
  Matrix evaluate(const Matrix& x) const {
    require(x.cols() == in_dim(), "Mlp::evaluate: input dimension mismatch");
    Matrix h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      Matrix next = h * layers_[i].weight.value;
      next.rowwise() += layers_[i].bias.value.row(0);
      if (i + 1 < layers_.size() || activate_output_) next = leaky_relu(next, slope_);
      h = std::move(next);
    }
    return h;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

 private:
  std::vector<DenseLayer> layers_;
  double slope_ = 0.5;
  bool activate_output_ = false;
};

/// Forward through `net` on a tape, recording every node.
inline Var mlp_forward(Mlp& net, Var x) { return net.forward(*x.tape, x); }

}  // namespace lacim
