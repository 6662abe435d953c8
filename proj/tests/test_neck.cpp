#include "oracles.hpp"

#include "triad/gradcheck_suite.hpp"
#include "triad/model.hpp"
#include "triad/neck.hpp"

#include <doctest.h>

using namespace triad;

namespace {

Index conv_count(Index in, Index out, Index k) { return out * in * k * k + out; }

Index block_count(FuseBlock& b) {
  ParamList l;
  collect("b", b, l);
  return count_params(l);
}

std::array<CAParams, 3> zero_ca(const Widths& w, Index r) {
  return {CAParams(w.c3, r), CAParams(w.c4, r), CAParams(w.c5, r)};
}

}  // namespace

TEST_CASE("toy_backbone: stride arithmetic, zero weights, closed-form count") {
  Rng rng(1);
  const Widths w{16, 32, 64};
  BackboneParams p = make_backbone(w, {});
  init(p, rng);
  const FeaturePyramid c = toy_backbone(rng.tensor(Shape{1, 3, 64, 64}, 0, 1), p);
  CHECK(c[0].shape() == Shape{1, 16, 8, 8});
  CHECK(c[1].shape() == Shape{1, 32, 4, 4});
  CHECK(c[2].shape() == Shape{1, 64, 2, 2});

  const FeaturePyramid z = toy_backbone(rng.tensor(Shape{1, 3, 64, 64}, 0, 1), make_backbone(w, {}));
  for (std::size_t i = 0; i < 3; ++i) CHECK(identical(z[i], Tensord(z[i].shape())));

  ParamList l;
  collect("backbone", p, l);
  const Index expected = conv_count(3, 4, 3) + conv_count(4, 8, 3) + conv_count(8, 16, 3) + conv_count(16, 32, 3) +
                         conv_count(32, 64, 3);
  CHECK(count_params(l) == expected);
}

TEST_CASE("spp: width, constants and the window-scan oracle") {
  Rng rng(2);
  CHECK(spp(Tensord(Shape{1, 8, 6, 6})).dim(1) == 32);
  CHECK(identical(spp(Tensord(Shape{1, 8, 6, 6}, 0.3)), Tensord(Shape{1, 32, 6, 6}, 0.3)));

  const Tensord x = rng.tensor(Shape{1, 3, 9, 7});
  const auto parts = split_axis(spp(x), 1, {3, 3, 3, 3});
  CHECK(identical(parts[0], x));
  CHECK(identical(parts[1], oracle::max_pool2d(x, 5)));
  CHECK(identical(parts[2], oracle::max_pool2d(x, 9)));
  CHECK(identical(parts[3], oracle::max_pool2d(x, 13)));
}

TEST_CASE("csp_layer: with linear activations it equals the composed convolutions") {
  Rng rng(3);
  CspLayerParams p = make_csp_layer(6, 8, 2, {});
  init(p, rng);
  const auto linearize = [](ConvBlock& b) {
    for (auto& u : b.units) u.act = Activation::identity;
  };
  linearize(p.main);
  linearize(p.bypass);
  linearize(p.merge);
  for (auto& b : p.bottlenecks) linearize(b.reduce), linearize(b.conv);

  const Tensord x = rng.tensor(Shape{1, 6, 5, 5});
  Tensord a = oracle::conv2d(x, p.main.units[0].conv);
  for (const auto& b : p.bottlenecks)
    a = oracle::conv2d(oracle::conv2d(a, b.reduce.units[0].conv), b.conv.units[0].conv) + a;
  const Tensord ref = oracle::conv2d(concat_axis<double>({a, oracle::conv2d(x, p.bypass.units[0].conv)}, 1),
                                     p.merge.units[0].conv);
  const Tensord y = csp_layer(x, p);
  CHECK(y.shape() == Shape{1, 8, 5, 5});
  CHECK(max_abs_diff(y, ref) < 1e-12);

  // linearity: f(2x) - 2 f(x) is the bias term, f(0)
  const Tensord f0 = csp_layer(Tensord(x.shape()), p);
  CHECK(max_abs_diff(csp_layer(2.0 * x, p) + (-2.0) * y, f0 + (-2.0) * f0 + f0) < 1e-12);
}

TEST_CASE("csp_layer is cheaper than five 3x3 convs and than the five-conv block") {
  for (Index w = 32; w <= 1024; w *= 2) {
    FuseBlock csp = make_fuse_block(w, w, true, {false, false});
    FuseBlock plain = make_fuse_block(w, w, false, {false, false});
    CHECK(block_count(csp) < 5 * conv_count(w, w, 3));
    CHECK(block_count(csp) < block_count(plain));
    FuseBlock wide_csp = make_fuse_block(2 * w, w, true, {false, false});
    FuseBlock wide_plain = make_fuse_block(2 * w, w, false, {false, false});
    CHECK(block_count(wide_csp) < block_count(wide_plain));
  }
}

TEST_CASE("count_params: single 1x1 conv and the empty list") {
  ConvParams<double> c(same_conv(8, 8, 1));
  ParamList l;
  collect("c", c, l);
  CHECK(count_params(l) == 72);
  CHECK(count_params({}) == 0);
}

TEST_CASE("neck_forward: strides, determinism and the CSP toggle") {
  Rng rng(4);
  const Widths w{16, 32, 64};
  FeaturePyramid c;
  c[0] = rng.tensor(Shape{1, 16, 8, 8});
  c[1] = rng.tensor(Shape{1, 32, 4, 4});
  c[2] = rng.tensor(Shape{1, 64, 2, 2});
  std::array<CAParams, 3> ca = zero_ca(w, 16);
  for (auto& p : ca) init(p, rng);

  for (bool use_csp : {true, false}) {
    NeckParams n = make_neck(w, use_csp, {});
    init(n, rng);
    const FeaturePyramid p = neck_forward(c, n, ca);
    CHECK(p[0].shape() == Shape{1, 8, 8, 8});
    CHECK(p[1].shape() == Shape{1, 16, 4, 4});
    CHECK(p[2].shape() == Shape{1, 32, 2, 2});
    const FeaturePyramid again = neck_forward(c, n, ca);
    for (std::size_t i = 0; i < 3; ++i) CHECK(identical(p[i], again[i]));
  }

  for (Widths sweep : {Widths{16, 32, 64}, Widths{32, 64, 128}, Widths{64, 128, 256}, Widths{256, 512, 1024}}) {
    NeckParams a = make_neck(sweep, true, {false, false}), b = make_neck(sweep, false, {false, false});
    ParamList la, lb;
    collect("neck", a, la);
    collect("neck", b, lb);
    CHECK(count_params(la) < count_params(lb));
  }
}

TEST_CASE("upsample keeps the stride contract") {
  const Tensord x = Rng(5).tensor(Shape{1, 4, 2, 3});
  CHECK(upsample_nearest2x(x).shape() == Shape{1, 4, 4, 6});
}

TEST_CASE("model parameter tables") {
  for (Variant v : {Variant::full, Variant::tiny, Variant::nano, Variant::x_toy}) {
    Model m = build_model(ModelConfig::preset(v));
    Index table = 0;
    for (const auto& [name, count] : parameter_table(m)) table += count;
    Index storage = 0;
    for (const auto& p : parameters(m)) storage += p.tensor->size();
    CHECK(table == storage);
    CHECK(table == count_params(parameters(m)));
  }
  ModelConfig full = ModelConfig::preset(Variant::full), tiny = ModelConfig::preset(Variant::tiny);
  tiny.widths = full.widths;
  Model a = build_model(full, false), b = build_model(tiny, false);
  CHECK(count_params(parameters(b)) < count_params(parameters(a)));
}

TEST_CASE("neck gradient suite, a few seeds") {
  for (const auto& row : run_gradcheck("neck", 2)) {
    INFO(row.op << " max " << row.max_rel_error << " kinks " << row.kinks << "/" << row.cells);
    CHECK(row.pass);
  }
}
