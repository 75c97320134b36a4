#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lacim {

// Row-major so that one sample occupies one contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw Error(message);
}

inline void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw Error(what + ": non-finite value");
}

inline Matrix from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return Matrix(0, 0);
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index r = 0; r < m.rows(); ++r) {
    require(static_cast<Index>(rows[r].size()) == m.cols(), "from_rows: ragged input");
    for (Index c = 0; c < m.cols(); ++c) m(r, c) = rows[r][c];
  }
  return m;
}

inline Matrix row_matrix(std::span<const double> values) {
  Matrix m(1, static_cast<Index>(values.size()));
  for (Index i = 0; i < m.cols(); ++i) m(0, i) = values[static_cast<std::size_t>(i)];
  return m;
}

inline std::vector<double> to_vector(const Matrix& m) {
  return {m.data(), m.data() + m.size()};
}

/// Elementwise LeakyReLU on a plain vector. The derivative convention at 0
/// is the positive-branch slope 1.
inline std::vector<double> leaky_relu(std::span<const double> x, double slope) {
  require(slope > 0.0 && slope <= 1.0, "leaky_relu: slope must lie in (0, 1]");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw Error("leaky_relu: non-finite input at index " + std::to_string(i));
    out[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
  }
  return out;
}

inline Matrix leaky_relu(const Matrix& x, double slope) {
  return (x.array() >= 0.0).select(x.array(), slope * x.array()).matrix();
}

}  // namespace lacim
