#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dfl {

using Scalar = double;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

// Error categories. The CLI maps each one to a distinct exit code.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InternalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// FNV-1a over raw bytes; used for config digests and checkpoint digests.
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t seed = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::uint64_t hash_vec(const Vec& v, std::uint64_t seed = 1469598103934665603ULL) {
  return fnv1a(v.data(), sizeof(Scalar) * static_cast<std::size_t>(v.size()), seed);
}

inline std::string hex_digest(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// Deterministic per-stream RNG. Streams derived from a root seed never
// collide across (purpose, index) pairs, so per-sample work can run in any
// order and still reproduce bit-identically.
inline std::mt19937_64 make_rng(std::uint64_t root_seed, std::uint64_t purpose,
                                std::uint64_t index = 0) {
  std::uint64_t mix = root_seed;
  mix = fnv1a(&purpose, sizeof(purpose), mix ^ 0x9e3779b97f4a7c15ULL);
  mix = fnv1a(&index, sizeof(index), mix);
  return std::mt19937_64(mix);
}

inline Vec uniform_vec(std::mt19937_64& rng, Index n, Scalar lo, Scalar hi) {
  std::uniform_real_distribution<Scalar> dist(lo, hi);
  Vec v(n);
  for (Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

inline Vec gaussian_vec(std::mt19937_64& rng, Index n, Scalar mean = 0.0, Scalar stddev = 1.0) {
  std::normal_distribution<Scalar> dist(mean, stddev);
  Vec v(n);
  for (Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v;
}

// Strided parallel loop over [0, n). Each index writes only its own state,
// so results are bit-identical for any worker count; the first exception is
// rethrown after all threads join.
inline void parallel_for(Index n, int workers, const std::function<void(Index)>& fn) {
  workers = std::max(1, workers);
  if (workers == 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const int count = static_cast<int>(std::min<Index>(workers, n));
  for (int w = 0; w < count; ++w) {
    pool.emplace_back([&, w] {
      for (Index i = w; i < n; i += count) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace dfl
