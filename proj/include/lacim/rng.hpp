#pragma once

#include "lacim/matrix.hpp"

#include <cstdint>
#include <random>

namespace lacim {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Well-known stream ids. Environment-indexed purposes add the environment
// index to the base id.
namespace stream {
inline constexpr std::uint64_t kScmParams = 1;
inline constexpr std::uint64_t kEnvData = 100;
inline constexpr std::uint64_t kInterventional = 200;
inline constexpr std::uint64_t kToyData = 300;
inline constexpr std::uint64_t kModelInit = 1000;
inline constexpr std::uint64_t kTraining = 2000;
inline constexpr std::uint64_t kInference = 3000;
inline constexpr std::uint64_t kErmInit = 4000;
inline constexpr std::uint64_t kTheory = 5000;
}  // namespace stream

/// Seeded random stream. The (seed, stream id) pair fully determines the
/// sequence of draws.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_(stream_id), engine_(mix(seed, stream_id)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, "RngStream::below: empty range");
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  Matrix normal_matrix(Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal();
    return m;
  }

  Matrix uniform_matrix(Index rows, Index cols, double lo, double hi) {
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(lo, hi);
    return m;
  }

  /// Independent child stream keyed by `key`; does not advance this stream.
  RngStream substream(std::uint64_t key) const {
    return RngStream(splitmix64(seed_ ^ splitmix64(key + 0x5bd1e995ULL)), stream_);
  }

  /// First `k` entries of a seeded permutation of [0, n), without replacement.
  std::vector<Index> sample_indices(Index n, Index k) {
    require(k <= n, "sample_indices: k > n");
    std::vector<Index> idx(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (Index i = 0; i < k; ++i) {
      auto j = i + static_cast<Index>(below(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(k));
    return idx;
  }

 private:
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream_id) {
    return splitmix64(splitmix64(seed) ^ (stream_id * 0xd6e8feb86659fd93ULL));
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace lacim
