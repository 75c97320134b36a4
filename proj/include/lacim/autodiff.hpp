#pragma once

#include "lacim/matrix.hpp"
#include "lacim/rng.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace lacim {

/// A named trainable matrix with its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

/// Reverse-mode tape over dense matrices. Nodes are appended in evaluation
/// order, so walking indices backwards is a reverse topological order.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  Var param(Parameter& p) {
    Var v = push(p.value, true, nullptr);
    nodes_.back().param = &p;
    return v;
  }

  /// Append an op result. `backward` is only kept when some input needs a gradient.
  Var push(Matrix value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward pass w.r.t. `v`; zero when unused.
  Matrix grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Expr>
  void accumulate(std::size_t id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Backpropagates from a 1x1 node and adds parameter gradients into
  /// `Parameter::grad`.
  void backward(Var loss) {
    require(loss.tape == this, "backward: loss belongs to another tape");
    const Matrix& lv = nodes_.at(loss.id).value;
    require(lv.rows() == 1 && lv.cols() == 1, "backward: loss node is not scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!nodes_[loss.id].needs_grad) return;
    nodes_[loss.id].grad = Matrix::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) {
        // The callback only touches earlier nodes, so the buffer can be lent out.
        Matrix g = std::move(n.grad);
        n.backward(*this, g);
        n.grad = std::move(g);
      }
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }

namespace detail {
inline bool any_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.tape->needs_grad(v)) return true;
  return false;
}
inline void same_tape(const Var& a, const Var& b) {
  require(a.tape == b.tape, "autodiff: operands live on different tapes");
}
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
              std::to_string(b.cols()) + ")");
}
}  // namespace detail

inline constexpr double kLogStdMin = -20.0;
inline constexpr double kLogStdMax = 5.0;
inline const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

// ---- linear algebra -------------------------------------------------------

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.rows())
    throw Error("matmul: inner dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                std::to_string(b.rows()) + ")");
  Matrix out = a.value() * b.value();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    const Var va{&t, ia}, vb{&t, ib};
    if (t.needs_grad(va)) t.accumulate(ia, g * vb.value().transpose());
    if (t.needs_grad(vb)) t.accumulate(ib, va.value().transpose() * g);
  });
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape& t, const Matrix& g) {
    const Var va{&t, ia}, vb{&t, ib};
    if (t.needs_grad(va)) t.accumulate(ia, g.cwiseProduct(vb.value()));
    if (t.needs_grad(vb)) t.accumulate(ib, g.cwiseProduct(va.value()));
  });
}

/// a + row, broadcasting a 1xN row over every row of a.
inline Var add_row(Var a, Var row) {
  detail::same_tape(a, row);
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  const std::size_t ia = a.id, ir = row.id;
  return a.tape->push(std::move(out), detail::any_grad({a, row}),
                      [ia, ir](Tape& t, const Matrix& g) {
                        t.accumulate(ia, g);
                        if (t.needs_grad(Var{&t, ir})) t.accumulate(ir, g.colwise().sum());
                      });
}

inline Var scale(Var a, double c) {
  Matrix out = a.value() * c;
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ia, c](Tape& t, const Matrix& g) { t.accumulate(ia, g * c); });
}

inline Var shift(Var a, double c) {
  Matrix out = a.value().array() + c;
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g); });
}

inline Var neg(Var a) { return scale(a, -1.0); }

// ---- elementwise nonlinearities ------------------------------------------

inline Var leaky_relu(Var a, double slope) {
  require(slope > 0.0 && slope <= 1.0, "leaky_relu: slope must lie in (0, 1]");
  Matrix out = leaky_relu(a.value(), slope);
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, slope](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(Var{&t, ia});
    t.accumulate(ia, (x.array() >= 0.0).select(g.array(), slope * g.array()).matrix());
  });
}

inline Var exp(Var a) {
  Matrix out = a.value().array().exp();
  const std::size_t ia = a.id, io = a.tape->size();
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, io](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(Var{&t, io})));
  });
}

inline Var log(Var a) {
  require((a.value().array() > 0.0).all(), "log: non-positive input");
  Matrix out = a.value().array().log();
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseQuotient(t.value(Var{&t, ia})));
  });
}

inline Var square(Var a) {
  Matrix out = a.value().cwiseAbs2();
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, 2.0 * g.cwiseProduct(t.value(Var{&t, ia})));
  });
}

/// Clamp with zero gradient outside [lo, hi].
inline Var clamp(Var a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, lo, hi](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(Var{&t, ia});
    Matrix mask = x.unaryExpr([lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
    t.accumulate(ia, g.cwiseProduct(mask));
  });
}

// ---- reductions and reshaping --------------------------------------------

inline Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const std::size_t ia = a.id;
  const Index r = a.rows(), c = a.cols();
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

inline Var mean(Var a) {
  require(a.value().size() > 0, "mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

/// Sum across columns: NxK -> Nx1.
inline Var row_sum(Var a) {
  Matrix out = a.value().rowwise().sum();
  const std::size_t ia = a.id;
  const Index c = a.cols();
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.replicate(1, c));
  });
}

/// Columns [start, start + count).
inline Var cols(Var a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "cols: slice out of range");
  Matrix out = a.value().middleCols(start, count);
  const std::size_t ia = a.id;
  const Index r = a.rows(), c = a.cols();
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ia, r, c, start, count](Tape& t, const Matrix& g) {
                        Matrix full = Matrix::Zero(r, c);
                        full.middleCols(start, count) = g;
                        t.accumulate(ia, full);
                      });
}

/// Horizontal concatenation [a, b].
inline Var hcat(Var a, Var b) {
  detail::same_tape(a, b);
  require(a.rows() == b.rows(), "hcat: row count mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const std::size_t ia = a.id, ib = b.id;
  const Index ca = a.cols(), cb = b.cols();
  return a.tape->push(std::move(out), detail::any_grad({a, b}),
                      [ia, ib, ca, cb](Tape& t, const Matrix& g) {
                        t.accumulate(ia, g.leftCols(ca));
                        t.accumulate(ib, g.rightCols(cb));
                      });
}

/// Stacks `times` copies of `a` vertically; block l occupies rows [l*N, (l+1)*N).
inline Var tile_rows(Var a, Index times) {
  require(times >= 1, "tile_rows: times must be positive");
  Matrix out = a.value().replicate(times, 1);
  const std::size_t ia = a.id;
  const Index n = a.rows();
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ia, n, times](Tape& t, const Matrix& g) {
                        Matrix acc = g.topRows(n);
                        for (Index l = 1; l < times; ++l) acc += g.middleRows(l * n, n);
                        t.accumulate(ia, acc);
                      });
}

/// Broadcasts a 1xK row to `rows` rows.
inline Var broadcast_rows(Var row, Index rows) {
  require(row.rows() == 1, "broadcast_rows: input must be a single row");
  return tile_rows(row, rows);
}

/// Row-major reshape.
inline Var reshape(Var a, Index rows, Index cols_) {
  require(rows * cols_ == a.value().size(), "reshape: element count mismatch");
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols_);
  const std::size_t ia = a.id;
  const Index r = a.rows(), c = a.cols();
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Eigen::Map<const Matrix>(g.data(), r, c));
  });
}

/// Per-column log-sum-exp over rows: RxC -> 1xC.
inline Var logsumexp_cols(Var a) {
  const Matrix& x = a.value();
  require(x.rows() >= 1, "logsumexp_cols: empty input");
  RowVector mx = x.colwise().maxCoeff();
  Matrix soft = (x.rowwise() - mx).array().exp();
  RowVector total = soft.colwise().sum();
  Matrix out = (total.array().log() + mx.array()).matrix();
  soft = soft.array().rowwise() / total.array();
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}),
                      [ia, soft = std::move(soft)](Tape& t, const Matrix& g) {
                        t.accumulate(ia, (soft.array().rowwise() * g.row(0).array()).matrix());
                      });
}

// ---- probabilistic primitives --------------------------------------------

/// Per-row diagonal Gaussian log-density: sum_j log N(x_j; mean_j, exp(log_std_j)^2).
/// Returns Nx1.
inline Var gaussian_logpdf(Var x, Var mean_, Var log_std) {
  detail::same_tape(x, mean_);
  detail::same_tape(x, log_std);
  detail::same_shape(x, mean_, "gaussian_logpdf");
  detail::same_shape(x, log_std, "gaussian_logpdf");
  const Eigen::ArrayXXd inv_std = (-log_std.value().array()).exp();
  const Eigen::ArrayXXd z = (x.value().array() - mean_.value().array()) * inv_std;
  Matrix out = (-0.5 * z.square() - log_std.value().array() - kHalfLog2Pi).matrix().rowwise().sum();
  const std::size_t ix = x.id, im = mean_.id, is = log_std.id;
  return x.tape->push(std::move(out), detail::any_grad({x, mean_, log_std}),
                      [ix, im, is, z, inv_std](Tape& t, const Matrix& g) {
                        const Eigen::ArrayXXd gb = g.replicate(1, z.cols()).array();
                        const Eigen::ArrayXXd dx = -gb * z * inv_std;
                        if (t.needs_grad(Var{&t, ix})) t.accumulate(ix, dx.matrix());
                        if (t.needs_grad(Var{&t, im})) t.accumulate(im, (-dx).matrix());
                        if (t.needs_grad(Var{&t, is}))
                          t.accumulate(is, (gb * (z.square() - 1.0)).matrix());
                      });
}

/// Per-row categorical log-likelihood log softmax(logits)[label]. Returns Nx1.
inline Var categorical_logpdf(Var logits, std::span<const int> labels) {
  const Matrix& l = logits.value();
  require(static_cast<Index>(labels.size()) == l.rows(), "categorical_logpdf: label count mismatch");
  Matrix soft(l.rows(), l.cols());
  Matrix out(l.rows(), 1);
  std::vector<int> lab(labels.begin(), labels.end());
  for (Index r = 0; r < l.rows(); ++r) {
    const int y = lab[static_cast<std::size_t>(r)];
    require(y >= 0 && y < l.cols(), "categorical_logpdf: label out of range");
    const double mx = l.row(r).maxCoeff();
    soft.row(r) = (l.row(r).array() - mx).exp();
    const double tot = soft.row(r).sum();
    soft.row(r) /= tot;
    out(r, 0) = l(r, y) - mx - std::log(tot);
  }
  const std::size_t il = logits.id;
  return logits.tape->push(std::move(out), detail::any_grad({logits}),
                           [il, soft = std::move(soft), lab = std::move(lab)](Tape& t, const Matrix& g) {
                             Matrix d = -soft;
                             for (Index r = 0; r < d.rows(); ++r) d(r, lab[static_cast<std::size_t>(r)]) += 1.0;
                             d.array().colwise() *= g.col(0).array();
                             t.accumulate(il, d);
                           });
}

/// Reparameterized draw mean + exp(clamp(log_std)) * eps with eps ~ N(0, I)
/// taken from `rng` in row-major order. Gradients reach mean and log_std only.
inline Var gaussian_sample_with(Var mean_, Var log_std, const Matrix& eps) {
  detail::same_tape(mean_, log_std);
  detail::same_shape(mean_, log_std, "gaussian_sample");
  require(eps.rows() == mean_.rows() && eps.cols() == mean_.cols(), "gaussian_sample: eps shape");
  const Matrix& ls = log_std.value();
  Matrix sd = ls.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax).array().exp();
  Matrix out = mean_.value() + sd.cwiseProduct(eps);
  Matrix dls = sd.cwiseProduct(eps);
  for (Index i = 0; i < ls.size(); ++i)
    if (ls.data()[i] < kLogStdMin || ls.data()[i] > kLogStdMax) dls.data()[i] = 0.0;
  const std::size_t im = mean_.id, is = log_std.id;
  return mean_.tape->push(std::move(out), detail::any_grad({mean_, log_std}),
                          [im, is, dls = std::move(dls)](Tape& t, const Matrix& g) {
                            t.accumulate(im, g);
                            if (t.needs_grad(Var{&t, is})) t.accumulate(is, g.cwiseProduct(dls));
                          });
}

inline Var gaussian_sample(Var mean_, Var log_std, RngStream& rng) {
  require(mean_.value().allFinite() && log_std.value().allFinite(),
          "gaussian_sample: non-finite mean or log_std");
  return gaussian_sample_with(mean_, log_std, rng.normal_matrix(mean_.rows(), mean_.cols()));
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace lacim
