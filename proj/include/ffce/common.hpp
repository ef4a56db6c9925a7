#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ffce {

using Shape = std::vector<std::size_t>;

// Thrown for malformed or inconsistent external data (files, manifests,
// checkpoints). The CLI maps these to exit code 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Deterministic RNG used for weight init, dropout, shuffling and the
// synthetic dataset. Wraps mt19937_64 so the full state can be captured in
// checkpoints via the stream operators. Draw order is fixed: uniform() takes
// one engine step, normal() takes two (no cached spare).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t raw() { return engine_(); }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller; first draw shifted so log() never sees zero
    double u1 = (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // index in [0, n)
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw DataError("rng state string is malformed");
  }

 private:
  std::mt19937_64 engine_;
};

// Worker cap shared by all parallel loops. FFCE_THREADS lowers it; it never
// raises it above what OpenMP reports.
inline int thread_budget() {
  static const int n = [] {
    int budget = 1;
#ifdef _OPENMP
    budget = omp_get_max_threads();
#endif
    if (const char* env = std::getenv("FFCE_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) budget = std::min(budget, v);
    }
    return std::max(1, budget);
  }();
  return n;
}

// Parallel loop over [0, n). Every iteration must write disjoint outputs;
// results are then bit-identical for any worker count.
template <typename F>
void parallel_for(std::size_t n, F&& f) {
#ifdef _OPENMP
  if (thread_budget() > 1 && n > 1) {
    const long long nn = static_cast<long long>(n);
#pragma omp parallel for schedule(static) num_threads(ffce::thread_budget())
    for (long long i = 0; i < nn; ++i) f(static_cast<std::size_t>(i));
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) f(i);
}

}  // namespace ffce
