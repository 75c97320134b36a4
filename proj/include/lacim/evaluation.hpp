#pragma once

#include "lacim/dataset.hpp"
#include "lacim/model.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

namespace lacim {

/// Hungarian method (Kuhn-Munkres with potentials) for a square
/// cost matrix. Returns assignment[row] = column minimizing the total cost.
/// Among optimal assignments the scan order favours low indices.
inline std::vector<int> hungarian_min(const Matrix& cost) {
  require(cost.rows() == cost.cols(), "hungarian: cost matrix must be square");
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] != 0) assignment[p[j] - 1] = j - 1;
  return assignment;
}

/// |Pearson correlation| between every learned column i and truth column j.
/// A zero-variance column correlates 0 with everything.
inline Matrix abs_correlation_matrix(const Matrix& learned, const Matrix& truth) {
  require(learned.rows() == truth.rows(), "correlation: row counts differ");
  const Index n = learned.rows();
  auto centered = [n](const Matrix& m) {
    Matrix c = m.rowwise() - m.colwise().mean();
    Eigen::VectorXd norms = c.colwise().norm();
    for (Index j = 0; j < c.cols(); ++j) {
      // Tolerates floating-point residue left by centering a constant column.
      const double scale = std::max(1.0, m.col(j).cwiseAbs().maxCoeff());
      if (norms(j) <= 1e-12 * scale * std::sqrt(static_cast<double>(n)))
        c.col(j).setZero();
      else
        c.col(j) /= norms(j);
    }
    return c;
  };
  const Matrix a = centered(learned);
  const Matrix b = centered(truth);
  return (a.transpose() * b).cwiseAbs().cwiseMin(1.0);
}

struct MccReport {
  double mcc = 0.0;
  std::vector<int> assignment;  // learned column i matched to truth column assignment[i]
  Matrix correlations;          // |corr(learned_i, truth_j)|
};

/// Mean absolute correlation under the one-to-one matching of learned to
/// true components that maximizes the total absolute correlation.
inline MccReport mcc(const Matrix& learned, const Matrix& truth) {
  require(learned.rows() >= 3, "mcc: need at least 3 samples");
  require(learned.cols() == truth.cols() && learned.cols() >= 1, "mcc: component counts differ");
  require(learned.allFinite() && truth.allFinite(), "mcc: non-finite input");
  MccReport r;
  r.correlations = abs_correlation_matrix(learned, truth);
  r.assignment = hungarian_min(-r.correlations);
  double total = 0.0;
  for (std::size_t i = 0; i < r.assignment.size(); ++i)
    total += r.correlations(static_cast<Index>(i), r.assignment[i]);
  r.mcc = total / static_cast<double>(r.assignment.size());
  return r;
}

inline nlohmann::json to_json(const MccReport& r) {
  nlohmann::json m = nlohmann::json::array();
  for (Index i = 0; i < r.correlations.rows(); ++i) {
    std::vector<double> row(r.correlations.row(i).data(), r.correlations.row(i).data() + r.correlations.cols());
    m.push_back(row);
  }
  return {{"mcc", r.mcc}, {"assignment", r.assignment}, {"matrix", m}};
}

struct IdentifiabilityReport {
  MccReport s;                      // posterior means pooled over environments
  MccReport z;
  std::vector<double> per_env_s;    // the same score computed inside each environment
  std::vector<double> per_env_z;
};

/// Concatenated posterior means of every environment.
struct PosteriorMeans {
  Matrix s, z, true_s, true_z;
  std::vector<int> env;
};

/// Posterior means from q^e(s, z | x) for every dataset. A single-environment
/// (pooled) model encodes every dataset with its one head.
inline PosteriorMeans posterior_means(const LacimModel& model, const std::vector<EnvDataset>& datasets) {
  PosteriorMeans pm;
  Index n = 0;
  for (const auto& d : datasets) {
    require(d.has_latents, "posterior_means: dataset for environment " + std::to_string(d.env) +
                               " has no ground-truth latents");
    n += d.size();
  }
  const auto& dims = model.dims();
  pm.s.resize(n, dims.q_s);
  pm.z.resize(n, dims.q_z);
  pm.true_s.resize(n, datasets.empty() ? 0 : datasets.front().s.cols());
  pm.true_z.resize(n, datasets.empty() ? 0 : datasets.front().z.cols());
  Index r = 0;
  for (const auto& d : datasets) {
    const int e = model.m() == 1 ? 1 : d.env;
    const Posterior post = encode(model, d.x, e);
    pm.s.middleRows(r, d.size()) = post.mean_s;
    pm.z.middleRows(r, d.size()) = post.mean_z;
    pm.true_s.middleRows(r, d.size()) = d.s;
    pm.true_z.middleRows(r, d.size()) = d.z;
    pm.env.insert(pm.env.end(), static_cast<std::size_t>(d.size()), d.env);
    r += d.size();
  }
  return pm;
}

inline IdentifiabilityReport evaluate_identifiability(const LacimModel& model, const std::vector<EnvDataset>& datasets) {
  const PosteriorMeans pm = posterior_means(model, datasets);
  IdentifiabilityReport rep;
  rep.s = mcc(pm.s, pm.true_s);
  rep.z = mcc(pm.z, pm.true_z);
  Index r = 0;
  for (const auto& d : datasets) {
    if (d.size() >= 3) {
      rep.per_env_s.push_back(mcc(pm.s.middleRows(r, d.size()), d.s).mcc);
      rep.per_env_z.push_back(mcc(pm.z.middleRows(r, d.size()), d.z).mcc);
    }
    r += d.size();
  }
  return rep;
}

inline double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  require(!predictions.empty(), "accuracy: empty input");
  require(predictions.size() == labels.size(), "accuracy: length mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline double mse(const Matrix& predictions, const Matrix& targets) {
  require(predictions.size() > 0, "mse: empty input");
  require(predictions.rows() == targets.rows() && predictions.cols() == targets.cols(), "mse: shape mismatch");
  return (predictions - targets).squaredNorm() / static_cast<double>(predictions.size());
}

/// CSV with true_s*, true_z*, post_mean_s*, post_mean_z*, env per sample.
inline void export_latent_scatter(const LacimModel& model, const std::vector<EnvDataset>& datasets,
                                  const std::filesystem::path& path) {
  const PosteriorMeans pm = posterior_means(model, datasets);
  std::ofstream out(path);
  require(out.good(), "export_latent_scatter: cannot open " + path.string());
  std::vector<std::string> header;
  for (Index i = 0; i < pm.true_s.cols(); ++i) header.push_back("true_s" + std::to_string(i));
  for (Index i = 0; i < pm.true_z.cols(); ++i) header.push_back("true_z" + std::to_string(i));
  for (Index i = 0; i < pm.s.cols(); ++i) header.push_back("post_mean_s" + std::to_string(i));
  for (Index i = 0; i < pm.z.cols(); ++i) header.push_back("post_mean_z" + std::to_string(i));
  header.emplace_back("env");
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (Index r = 0; r < pm.s.rows(); ++r) {
    for (const Matrix* m : {&pm.true_s, &pm.true_z, &pm.s, &pm.z})
      for (Index c = 0; c < m->cols(); ++c) out << csv::format_double((*m)(r, c)) << ',';
    out << pm.env[static_cast<std::size_t>(r)] << '\n';
  }
  require(out.good(), "export_latent_scatter: write failed");
}

inline void export_latent_scatter(const LacimModel& model, const EnvDataset& dataset, const std::filesystem::path& path) {
  export_latent_scatter(model, std::vector<EnvDataset>{dataset}, path);
}

}  // namespace lacim
