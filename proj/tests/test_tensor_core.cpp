#include "oracles.hpp"

#include "triad/gradcheck.hpp"
#include "triad/ops.hpp"
#include "triad/random.hpp"

#include <doctest.h>

using namespace triad;

namespace {

ConvParams<double> random_conv(const ConvSpec& s, Rng& rng) {
  ConvParams<double> p(s);
  rng.fill(p.weight, -1, 1);
  rng.fill(p.bias, -0.5, 0.5);
  return p;
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity kernel leaves the input unchanged") {
  Rng rng(1);
  const Tensord x = rng.tensor(Shape{2, 4, 5, 6});
  ConvParams<double> p(ConvSpec{4, 4, 1});
  for (Index c = 0; c < 4; ++c) p.weight(c, c, 0, 0) = 1;
  CHECK(identical(conv2d(x, p), x));
}

TEST_CASE("conv2d: all-ones 3x3 kernel on a constant field gives 9c inside") {
  ConvParams<double> p(same_conv(1, 1, 3));
  p.weight = Tensord(p.weight.shape(), 1.0);
  const Tensord y = conv2d(Tensord(Shape{1, 1, 6, 6}, 0.7), p);
  for (Index i = 1; i < 5; ++i)
    for (Index j = 1; j < 5; ++j) CHECK(y(0, 0, i, j) == doctest::Approx(6.3).epsilon(1e-14));
  CHECK(y(0, 0, 0, 0) == doctest::Approx(4 * 0.7));
}

TEST_CASE("conv2d: depthwise identity is the identity map") {
  Rng rng(2);
  const Tensord x = rng.tensor(Shape{1, 6, 4, 4});
  ConvParams<double> p(ConvSpec{6, 6, 1, 1, 0, 1, 6});
  p.weight = Tensord(p.weight.shape(), 1.0);
  CHECK(identical(conv2d(x, p), x));
}

TEST_CASE("conv2d: matches the direct loop for strides, dilations and groups") {
  Rng rng(3);
  const std::vector<ConvSpec> specs{{3, 4, 3, 1, 1, 1, 1}, {4, 6, 3, 2, 1, 1, 2}, {4, 4, 3, 1, 2, 2, 4},
                                    {2, 5, 5, 2, 2, 1, 1}, {6, 3, 1, 1, 0, 1, 3}};
  for (const ConvSpec& s : specs) {
    const auto p = random_conv(s, rng);
    const Tensord x = rng.tensor(Shape{2, s.in, 7, 6});
    CHECK(max_abs_diff(conv2d(x, p), oracle::conv2d(x, p)) < 1e-12);
  }
}

TEST_CASE("conv2d: input gradient on 2x3x5x5 matches central differences") {
  Rng rng(4);
  const auto p = random_conv(same_conv(3, 4, 3), rng);
  const Tensord x = rng.tensor(Shape{2, 3, 5, 5});
  const Tensord w = rng.tensor(Shape{2, 4, 5, 5});
  const auto g = conv2d_backward(x, p, w);
  const Tensord num = finite_diff_grad([&](const Tensord& t) { return dot(w, conv2d(t, p)); }, x);
  CHECK(max_relative_error(g.dx, num) < 1e-6);
}

TEST_CASE("conv2d: channel mismatch names the dimension") {
  ConvParams<double> p(same_conv(3, 4, 3));
  try {
    conv2d(Tensord(Shape{1, 5, 4, 4}), p);
    FAIL("accepted a 5-channel input");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
  CHECK_THROWS_AS(ConvParams<double>(ConvSpec{3, 4, 3, 1, 1, 1, 2}), ShapeError);
}

TEST_CASE("fully_connected: identity, bias-only and gradient") {
  Rng rng(5);
  const Tensord x = rng.tensor(Shape{4});
  Tensord eye(Shape{4, 4});
  for (Index i = 0; i < 4; ++i) eye(i, i) = 1;
  CHECK(identical(fully_connected(x, eye, Tensord(Shape{4})), x));
  const Tensord b = rng.tensor(Shape{3});
  CHECK(identical(fully_connected(x, Tensord(Shape{3, 4}), b), b));

  const Tensord w = rng.tensor(Shape{4, 8}), bias = rng.tensor(Shape{4}), u = rng.tensor(Shape{8});
  const Tensord proj = rng.tensor(Shape{4});
  const auto g = fully_connected_backward(u, w, proj);
  CHECK(max_relative_error(g.dx, finite_diff_grad([&](const Tensord& t) { return dot(proj, fully_connected(t, w, bias)); },
                                                  u)) < 1e-6);
  CHECK(max_relative_error(g.dweight, finite_diff_grad(
                                          [&](const Tensord& t) { return dot(proj, fully_connected(u, t, bias)); }, w)) <
        1e-6);
  CHECK_THROWS(fully_connected(rng.tensor(Shape{5}), w, bias));
}

TEST_CASE("max_pool2d: constants, spikes and the window scan") {
  CHECK(identical(max_pool2d(Tensord(Shape{1, 2, 5, 5}, 1.5), 5), Tensord(Shape{1, 2, 5, 5}, 1.5)));

  Tensord spike(Shape{1, 1, 5, 5});
  spike(0, 0, 2, 2) = 5;
  const Tensord y = max_pool2d(spike, 3);
  for (Index i = 0; i < 5; ++i)
    for (Index j = 0; j < 5; ++j) {
      const bool inside = i >= 1 && i <= 3 && j >= 1 && j <= 3;
      CHECK(y(0, 0, i, j) == (inside ? 5.0 : 0.0));
    }

  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensord x = rng.tensor(Shape{1, 1, 7, 7});
    CHECK(identical(max_pool2d(x, 5), oracle::max_pool2d(x, 5)));
  }
  CHECK_THROWS(max_pool2d(spike, 4));
}

TEST_CASE("global_avg_pool: constants, hand values and uniform gradient") {
  CHECK(global_avg_pool(Tensord(Shape{2, 3, 4, 5}, -0.25), {0, 1, 2, 3})[0] == -0.25);
  const Tensord x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(global_avg_pool(x, {2, 3})[0] == 2.5);
  const Tensord g = global_avg_pool_backward(Shape{1, 2, 3, 4}, {2, 3}, Tensord(Shape{1, 2, 1, 1}, 1.0));
  for (Index i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(1.0 / 12));
  Rng rng(7);
  const Tensord r = rng.tensor(Shape{1, 2, 3, 4});
  const Tensord num = finite_diff_grad([](const Tensord& t) { return sum(global_avg_pool(t, {2, 3})); }, r);
  CHECK(max_relative_error(g, num) < 1e-8);
  CHECK_THROWS(global_avg_pool(x, {}));
}

TEST_CASE("directional_pool: hand values, constants and the naive loop") {
  const auto q = directional_pool(Tensord(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
  CHECK(q.along_h[0] == 1.5);
  CHECK(q.along_h[1] == 3.5);
  CHECK(q.along_w[0] == 2.0);
  CHECK(q.along_w[1] == 3.0);
  const auto k = directional_pool(Tensord(Shape{1, 2, 3, 3}, 4.0));
  CHECK(identical(k.along_h, Tensord(Shape{1, 2, 3, 1}, 4.0)));
  CHECK(identical(k.along_w, Tensord(Shape{1, 2, 1, 3}, 4.0)));
  Rng rng(8);
  const Tensord x = rng.tensor(Shape{1, 3, 4, 5});
  const auto r = directional_pool(x);
  const auto [qh, qw] = oracle::directional_means(x);
  CHECK(max_abs_diff(r.along_h, qh) < 1e-15);
  CHECK(max_abs_diff(r.along_w, qw) < 1e-15);
}

TEST_CASE("bilinear_sample: grid points, midpoint and outside") {
  const Tensord x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(bilinear_sample(x, 0, 0, 1.0, 0.0) == 3.0);
  CHECK(bilinear_sample(x, 0, 0, 0.5, 0.5) == 2.5);
  CHECK(bilinear_sample(x, 0, 0, -1.0, -1.0) == 0.0);
  CHECK(bilinear_sample(x, 0, 0, -0.5, 0.0) == 0.5);
  CHECK_THROWS(bilinear_sample(x, 0, 0, std::nan(""), 0.0));
}

TEST_CASE("activations: hand values, ranges and monotonicity") {
  CHECK(hard_sigmoid(0.0) == 0.5);
  CHECK(hard_sigmoid(1.0) == 1.0);
  CHECK(hard_sigmoid(-1.0) == 0.0);
  CHECK(hard_sigmoid(0.5) == 0.75);
  CHECK(activate(Activation::relu, -2.0) == 0.0);
  CHECK(activate(Activation::relu, 3.0) == 3.0);
  CHECK(activate(Activation::leaky_relu, -2.0) == doctest::Approx(-0.2));
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(activation_derivative(Activation::relu, 0.0) == 0.0);
  CHECK(activation_derivative(Activation::hard_sigmoid, 1.0) == 0.0);
  CHECK(activation_derivative(Activation::hard_sigmoid, -1.0) == 0.0);

  Rng rng(9);
  std::vector<double> xs(500);
  for (double& v : xs) v = rng.uniform(-8, 8);
  std::sort(xs.begin(), xs.end());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double h = hard_sigmoid(xs[i]), s = sigmoid(xs[i]);
    CHECK((h >= 0 && h <= 1));
    CHECK((s > 0 && s < 1));
    if (i) {
      CHECK(h >= hard_sigmoid(xs[i - 1]));
      CHECK(s >= sigmoid(xs[i - 1]));
    }
  }

  // nudge away from the kinks before differencing
  Tensord x = rng.tensor(Shape{1, 2, 3, 3}, -2, 2);
  for (Index i = 0; i < x.size(); ++i)
    for (double k : {-1.0, 0.0, 1.0})
      if (std::abs(x[i] - k) < 1e-3) x[i] = k + 0.01;
  const Tensord w = rng.tensor(x.shape());
  for (Activation a : {Activation::relu, Activation::leaky_relu, Activation::sigmoid, Activation::hard_sigmoid}) {
    const Tensord num = finite_diff_grad([&](const Tensord& t) { return dot(w, activation(a, t)); }, x);
    CHECK(max_relative_error(activation_backward(a, x, w), num) < 1e-6);
  }
}

TEST_CASE("batchnorm_inference: identity, zero scale and the scalar loop") {
  Rng rng(10);
  const Tensord x = rng.tensor(Shape{2, 3, 4, 4});
  BatchNormParams<double> p(3);
  CHECK(max_abs_diff(batchnorm_inference(x, p), x) < 1e-5);

  p.scale = Tensord(Shape{3});
  p.shift = Tensord(Shape{3}, {0.1, -0.2, 0.3});
  const Tensord z = batchnorm_inference(x, p);
  for (Index c = 0; c < 3; ++c) CHECK(z(1, c, 2, 3) == p.shift[c]);

  rng.fill(p.scale, 0.5, 1.5);
  rng.fill(p.shift, -1, 1);
  rng.fill(p.mean, -1, 1);
  rng.fill(p.var, 0.1, 2);
  const Tensord y = batchnorm_inference(x, p);
  double worst = 0;
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 4; ++j) {
          const double ref = (x(n, c, i, j) - p.mean[c]) / std::sqrt(p.var[c] + 1e-5) * p.scale[c] + p.shift[c];
          worst = std::max(worst, std::abs(ref - y(n, c, i, j)));
        }
  CHECK(worst < 1e-14);
  p.var[1] = -0.1;
  CHECK_THROWS(batchnorm_inference(x, p));
}

TEST_CASE("concat_axis / split_axis: round trip and gradient routing") {
  Rng rng(11);
  const Tensord a = rng.tensor(Shape{1, 3, 4, 4}), b = rng.tensor(Shape{1, 3, 4, 4});
  const Tensord c = concat_axis<double>({a, b}, 1);
  CHECK(c.dim(1) == 6);
  const auto parts = split_axis(c, 1, {3, 3});
  CHECK(identical(parts[0], a));
  CHECK(identical(parts[1], b));
  CHECK_THROWS(concat_axis<double>({a, rng.tensor(Shape{1, 3, 4, 5})}, 1));

  // d/da of <w, concat(a, b)> is the matching slice of w
  const Tensord w = rng.tensor(c.shape());
  const Tensord num = finite_diff_grad([&](const Tensord& t) { return dot(w, concat_axis<double>({t, b}, 1)); }, a);
  CHECK(max_relative_error(split_axis(w, 1, {3, 3})[0], num) < 1e-8);
}

TEST_CASE("finite_diff_grad: quadratic, linear and a conv composite") {
  Rng rng(12);
  const Tensord x = rng.tensor(Shape{3, 4});
  const Tensord g = finite_diff_grad([](const Tensord& t) { return t.vec().squaredNorm(); }, x);
  CHECK(max_relative_error(g, 2.0 * x) < 1e-8);
  const Tensord ones = finite_diff_grad([](const Tensord& t) { return sum(t); }, x);
  CHECK(max_relative_error(ones, Tensord(x.shape(), 1.0)) < 1e-8);

  const auto p = random_conv(same_conv(2, 3, 3), rng);
  const Tensord u = rng.tensor(Shape{1, 2, 4, 4});
  const Tensord analytic = conv2d_backward(u, p, Tensord(Shape{1, 3, 4, 4}, 1.0)).dx;
  CHECK(max_relative_error(analytic, finite_diff_grad([&](const Tensord& t) { return sum(conv2d(t, p)); }, u)) < 1e-6);
  CHECK_THROWS_WITH(finite_diff_grad([](const Tensord& t) { return t[1] > 1 ? std::nan("") : 0.0; },
                                     Tensord(Shape{3}, 1.0)),
                    doctest::Contains("cell 1"));
}

TEST_CASE("upsample_nearest2x doubles extents and copies values") {
  const Tensord x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  const Tensord y = upsample_nearest2x(x);
  CHECK(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y(0, 0, 3, 2) == 4);
  CHECK(y(0, 0, 1, 0) == 1);
}

TEST_CASE("forward ops stay finite on finite inputs") {
  Rng rng(13);
  const Tensord x = rng.tensor(Shape{1, 4, 6, 6}, -50, 50);
  const auto p = random_conv(same_conv(4, 4, 3), rng);
  CHECK(conv2d(x, p).all_finite());
  CHECK(max_pool2d(x, 13).all_finite());
  for (Activation a : {Activation::relu, Activation::leaky_relu, Activation::sigmoid, Activation::hard_sigmoid})
    CHECK(activation(a, x).all_finite());
  CHECK(activation(Activation::sigmoid, Tensord(Shape{2}, {-800.0, 800.0})).all_finite());
}
