#pragma once

#include "triad/random.hpp"
#include "triad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace triad {

/// Central-difference gradient of a scalar function, one cell at a time.
/// Throws if any evaluation is non-finite, naming the cell.
template <typename Scalar, typename F>
Tensor<Scalar> finite_diff_grad(F&& f, const Tensor<Scalar>& x, Scalar eps = Scalar(1e-5)) {
  Tensor<Scalar> probe = x;
  Tensor<Scalar> g(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar orig = probe[i];
    probe[i] = orig + eps;
    const Scalar up = f(static_cast<const Tensor<Scalar>&>(probe));
    probe[i] = orig - eps;
    const Scalar down = f(static_cast<const Tensor<Scalar>&>(probe));
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw Error("finite_diff_grad: non-finite function value at cell " + std::to_string(i));
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

/// Relative error with a magnitude floor so that vanishing gradients are
/// compared on an absolute scale.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

template <typename Scalar>
double max_relative_error(const Tensor<Scalar>& analytic, const Tensor<Scalar>& numeric, double floor = 1e-4) {
  require_shape(analytic.shape() == numeric.shape(), "max_relative_error: shape " + analytic.shape().str() +
                                                         " vs " + numeric.shape().str());
  double worst = 0;
  for (Index i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, relative_error(static_cast<double>(analytic[i]), static_cast<double>(numeric[i]), floor));
  return worst;
}

/// Compares analytic gradients against central differences of a scalar
/// loss that reads the probed tensor in place.
///
/// Each cell is also probed at half the step. On a smooth stretch the two
/// central differences agree and the second difference shrinks fourfold;
/// a slope break (ReLU, max, clamp) inside [x - eps, x + eps] violates one
/// of the two. Cells where the disagreement could move the numeric gradient
/// by more than `kink_tol` (relative, floored like relative_error) are
/// counted as kinks and left out of the error.
class GradProbe {
 public:
  explicit GradProbe(Rng& rng, double kink_tol = 1e-6, Index max_cells = 48, double eps = 1e-5)
      : rng_(rng), max_cells_(max_cells), eps_(eps), kink_tol_(kink_tol) {}

  /// Test fixture: perturbs every analytic gradient before comparison.
  void corrupt(bool on) { corrupt_ = on; }

  /// `max_cells` < 0 uses the probe-wide limit.
  template <typename F>
  void probe(Tensord& target, const Tensord& analytic, F&& loss, Index max_cells = -1) {
    require_shape(target.shape() == analytic.shape(), "gradcheck: analytic gradient has shape " +
                                                          analytic.shape().str() + ", parameter " +
                                                          target.shape().str());
    const double mid = loss();
    for (Index i : pick(target.size(), max_cells < 0 ? max_cells_ : max_cells)) probe_cell(target, analytic, loss, i, mid);
  }

  /// One cell; `mid` is the loss at the unperturbed point.
  template <typename F>
  void probe_cell(Tensord& target, const Tensord& analytic, F&& loss, Index i, double mid) {
    const double orig = target[i];
    const auto at = [&](double delta) {
      target[i] = orig + delta;
      const double v = loss();
      target[i] = orig;
      if (!std::isfinite(v)) throw Error("gradcheck: non-finite loss while probing cell " + std::to_string(i));
      return v;
    };
    const double up = at(eps_), down = at(-eps_), up2 = at(eps_ / 2), down2 = at(-eps_ / 2);
    const double d1 = (up - down) / (2 * eps_), d2 = (up2 - down2) / eps_;
    const double sd1 = up - 2 * mid + down, sd2 = up2 - 2 * mid + down2;
    ++cells_;
    const double disagreement = std::abs(d1 - d2) + std::abs(sd2 - sd1 / 4) / eps_;
    if (disagreement > kink_tol_ * std::max(std::abs(d1), 1e-4)) {
      ++kinks_;
      return;
    }
    double a = analytic[i];
    if (corrupt_) a = a * 1.01 + 1e-3;
    worst_ = std::max(worst_, relative_error(a, d1));
  }

  double max_relative_error() const { return worst_; }
  Index cells() const { return cells_; }
  Index kinks() const { return kinks_; }

 private:
  std::vector<Index> pick(Index n, Index limit) {
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    if (n <= limit) return idx;
    // Partial Fisher-Yates with the portable generator.
    for (Index i = 0; i < limit; ++i)
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(i + rng_.below(n - i))]);
    idx.resize(static_cast<std::size_t>(limit));
    std::sort(idx.begin(), idx.end());
    return idx;
  }

  Rng& rng_;
  Index max_cells_;
  double eps_;
  double kink_tol_;
  bool corrupt_ = false;
  double worst_ = 0;
  Index cells_ = 0;
  Index kinks_ = 0;
};

}  // namespace triad
