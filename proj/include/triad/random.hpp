#pragma once

#include "triad/tensor.hpp"

#include <cstdint>
#include <random>

namespace triad {

/// Seeded 64-bit generator. Draws are converted by hand rather than through
/// <random> distributions so sequences are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  Index below(Index n) { return static_cast<Index>(uniform() * static_cast<double>(n)); }

  template <typename Scalar>
  void fill(Tensor<Scalar>& t, double lo, double hi) {
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(uniform(lo, hi));
  }

  template <typename Scalar = double>
  Tensor<Scalar> tensor(const Shape& s, double lo = -1.0, double hi = 1.0) {
    Tensor<Scalar> t(s);
    fill(t, lo, hi);
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace triad
