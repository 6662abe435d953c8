#include "oracles.hpp"

#include "triad/coord_attention.hpp"
#include "triad/gradcheck_suite.hpp"

#include <doctest.h>

using namespace triad;

namespace {

CAParams random_ca(Index C, Index r, Rng& rng) {
  CAParams p(C, r);
  init(p, rng);
  rng.fill(p.squeeze.bias, -0.2, 0.2);
  rng.fill(p.squeeze_bn.scale, 0.5, 1.5);
  rng.fill(p.squeeze_bn.shift, -0.2, 0.2);
  rng.fill(p.squeeze_bn.mean, -0.1, 0.1);
  rng.fill(p.squeeze_bn.var, 0.5, 1.5);
  rng.fill(p.expand_h.bias, -0.5, 0.5);
  rng.fill(p.expand_w.bias, -0.5, 0.5);
  return p;
}

// One position of the shared squeeze path written out as scalar loops.
std::vector<double> squeeze_column(const CAParams& p, const std::vector<double>& q) {
  std::vector<double> f(static_cast<std::size_t>(p.mid()));
  for (Index m = 0; m < p.mid(); ++m) {
    double s = p.squeeze.bias[m];
    for (Index c = 0; c < p.channels; ++c) s += p.squeeze.weight(m, c, 0, 0) * q[static_cast<std::size_t>(c)];
    const auto& bn = p.squeeze_bn;
    s = (s - bn.mean[m]) / std::sqrt(bn.var[m] + bn.eps) * bn.scale[m] + bn.shift[m];
    f[static_cast<std::size_t>(m)] = std::max(s, 0.0);
  }
  return f;
}

double expand(const ConvParams<double>& e, const std::vector<double>& f, Index c) {
  double s = e.bias[c];
  for (std::size_t m = 0; m < f.size(); ++m) s += e.weight(c, static_cast<Index>(m), 0, 0) * f[m];
  return 1.0 / (1.0 + std::exp(-s));
}

}  // namespace

TEST_CASE("coord_embed: constants, row-only inputs and the naive loop") {
  const auto k = coord_embed(Tensord(Shape{1, 3, 4, 5}, 2.0));
  CHECK(identical(k.along_h, Tensord(Shape{1, 3, 4, 1}, 2.0)));
  CHECK(identical(k.along_w, Tensord(Shape{1, 3, 1, 5}, 2.0)));

  Tensord rows(Shape{1, 2, 4, 5});
  for (Index c = 0; c < 2; ++c)
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 5; ++j) rows(0, c, i, j) = static_cast<double>(c * 10 + i);
  const auto r = coord_embed(rows);
  for (Index c = 0; c < 2; ++c)
    for (Index j = 0; j < 5; ++j) CHECK(r.along_w(0, c, 0, j) == doctest::Approx(c * 10 + 1.5));

  Rng rng(1);
  const Tensord x = rng.tensor(Shape{2, 3, 4, 5});
  const auto q = coord_embed(x);
  const auto [qh, qw] = oracle::directional_means(x);
  CHECK(max_abs_diff(q.along_h, qh) < 1e-15);
  CHECK(max_abs_diff(q.along_w, qw) < 1e-15);
}

TEST_CASE("coord_generate: zero parameters give 0.5 gates") {
  Rng rng(2);
  CAParams p(32, 16);
  const auto q = coord_embed(rng.tensor(Shape{1, 32, 4, 6}));
  const CoordGates g = coord_generate(q.along_h, q.along_w, p);
  CHECK(identical(g.h, Tensord(Shape{1, 32, 4, 1}, 0.5)));
  CHECK(identical(g.w, Tensord(Shape{1, 32, 1, 6}, 0.5)));
}

TEST_CASE("coord_generate: scalar-loop reference at C=32, r=16, 4x4") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const CAParams p = random_ca(32, 16, rng);
    const Tensord x = rng.tensor(Shape{1, 32, 4, 4});
    const auto q = coord_embed(x);
    const CoordGates g = coord_generate(q.along_h, q.along_w, p);
    double worst = 0;
    for (Index i = 0; i < 4; ++i) {
      std::vector<double> qi(32), qj(32);
      for (Index c = 0; c < 32; ++c) qi[static_cast<std::size_t>(c)] = q.along_h(0, c, i, 0);
      for (Index c = 0; c < 32; ++c) qj[static_cast<std::size_t>(c)] = q.along_w(0, c, 0, i);
      const auto fh = squeeze_column(p, qi), fw = squeeze_column(p, qj);
      for (Index c = 0; c < 32; ++c) {
        worst = std::max(worst, std::abs(g.h(0, c, i, 0) - expand(p.expand_h, fh, c)));
        worst = std::max(worst, std::abs(g.w(0, c, 0, i) - expand(p.expand_w, fw, c)));
      }
    }
    CHECK(worst < 1e-14);
    for (Index i = 0; i < g.h.size(); ++i) CHECK((g.h[i] > 0 && g.h[i] < 1));
    for (Index i = 0; i < g.w.size(); ++i) CHECK((g.w[i] > 0 && g.w[i] < 1));
  }
}

TEST_CASE("coord_apply: unit gates, half gates and strict contraction") {
  Rng rng(4);
  const Tensord x = rng.tensor(Shape{1, 3, 4, 5});
  CHECK(identical(coord_apply(x, {Tensord(Shape{1, 3, 4, 1}, 1.0), Tensord(Shape{1, 3, 1, 5}, 1.0)}), x));
  CHECK(identical(coord_apply(x, {Tensord(Shape{1, 3, 4, 1}, 0.5), Tensord(Shape{1, 3, 1, 5}, 0.5)}), 0.25 * x));
  const CoordGates g{rng.tensor(Shape{1, 3, 4, 1}, 0.01, 0.99), rng.tensor(Shape{1, 3, 1, 5}, 0.01, 0.99)};
  const Tensord y = coord_apply(x, g);
  for (Index i = 0; i < x.size(); ++i)
    if (x[i] != 0) CHECK(std::abs(y[i]) < std::abs(x[i]));
}

TEST_CASE("coord_attention: applied weight map is the outer product of the gates") {
  Rng rng(5);
  const CAParams p = random_ca(16, 4, rng);
  const Tensord x = rng.tensor(Shape{1, 16, 5, 3});
  CoordCache cache;
  const Tensord y = coord_attention(x, p, &cache);
  for (Index c = 0; c < 16; ++c)
    for (Index i = 0; i < 5; ++i)
      for (Index j = 0; j < 3; ++j)
        CHECK(y(0, c, i, j) == x(0, c, i, j) * (cache.gates.h(0, c, i, 0) * cache.gates.w(0, c, 0, j)));
}

TEST_CASE("coord_attention: zero parameters scale by exactly 0.25") {
  Rng rng(6);
  for (Index C : {4, 16, 32}) {
    const Tensord x = rng.tensor(Shape{1, C, 4, 6});
    CHECK(identical(coord_attention(x, CAParams(C, 4)), 0.25 * x));
  }
}

TEST_CASE("coord_attention: shapes, energy contraction, transposition symmetry") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Index H = 1 + rng.below(6), W = 1 + rng.below(6);
    const CAParams p = random_ca(8, 2, rng);
    const Tensord x = rng.tensor(Shape{1, 8, H, W});
    const Tensord y = coord_attention(x, p);
    CHECK(y.shape() == x.shape());
    CHECK(y.vec().squaredNorm() <= x.vec().squaredNorm());
  }

  CAParams p = random_ca(8, 2, rng);
  const Tensord x = rng.tensor(Shape{1, 8, 4, 4});
  Tensord xt(x.shape());
  for (Index c = 0; c < 8; ++c)
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 4; ++j) xt(0, c, j, i) = x(0, c, i, j);
  CAParams pt = p;
  std::swap(pt.expand_h, pt.expand_w);
  const auto q = coord_embed(x), qt = coord_embed(xt);
  const CoordGates g = coord_generate(q.along_h, q.along_w, p);
  const CoordGates gt = coord_generate(qt.along_h, qt.along_w, pt);
  CHECK(max_abs_diff(g.h.reshaped(Shape{8, 4}), gt.w.reshaped(Shape{8, 4})) < 1e-15);
  CHECK(max_abs_diff(g.w.reshaped(Shape{8, 4}), gt.h.reshaped(Shape{8, 4})) < 1e-15);
}

TEST_CASE("coord-attention gradient suite, a few seeds") {
  for (const auto& row : run_gradcheck("coord-attention", 3)) {
    INFO(row.op << " max " << row.max_rel_error);
    CHECK(row.pass);
  }
}
