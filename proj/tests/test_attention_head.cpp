#include "triad/attention_head.hpp"
#include "triad/gradcheck_suite.hpp"

#include <doctest.h>

using namespace triad;

namespace {

void randomize(ConvBlock& b, Rng& rng, double scale) {
  for (auto& u : b.units) {
    rng.fill(u.conv.weight, -scale, scale);
    rng.fill(u.conv.bias, -scale, scale);
  }
}

DynamicBlockParams random_block(Index C, Rng& rng) {
  DynamicBlockParams p{ScaleAttnParams(2), SpatialAttnParams(C, {}), DyReluParams(C, 4, 1.0, 0.5)};
  rng.fill(p.scale.weight, -1, 1);
  rng.fill(p.scale.bias, -0.5, 0.5);
  randomize(p.spatial.offset_predictor, rng, 0.2);
  randomize(p.spatial.modulation_predictor, rng, 0.5);
  rng.fill(p.spatial.tap_weights, -0.5, 0.5);
  rng.fill(p.task.fc1.weight, -0.5, 0.5);
  rng.fill(p.task.fc1.bias, -0.5, 0.5);
  rng.fill(p.task.fc2.weight, -0.5, 0.5);
  rng.fill(p.task.fc2.bias, -0.5, 0.5);
  return p;
}

StackedFeature random_stack(Index C, Index H, Index W, Rng& rng) {
  StackedFeature f{rng.tensor(Shape{2, H * W, C}), H, W};
  return f;
}

}  // namespace

TEST_CASE("concat_levels and recover") {
  Rng rng(1);
  const Tensord x = rng.tensor(Shape{8, 4, 4});
  const StackedFeature f = concat_levels(x);
  CHECK(f.data.shape() == Shape{2, 16, 8});
  CHECK(identical(level_as_nchw(f, 0), level_as_nchw(f, 1)));
  CHECK(identical(level_as_nchw(f, 0).reshaped(x.shape()), x));
  CHECK(identical(recover(f).reshaped(x.shape()), x));

  StackedFeature g = f;
  const Tensord b = rng.tensor(Shape{1, 8, 4, 4});
  set_level_from_nchw(g, 1, b);
  const Tensord r = recover(g).reshaped(Shape{1, 8, 4, 4});
  for (Index i = 0; i < r.size(); ++i) CHECK(r[i] == doctest::Approx((x[i] + b[i]) / 2).epsilon(1e-15));
}

TEST_CASE("scale_attention: zero parameters halve, saturation passes through") {
  Rng rng(2);
  const StackedFeature f = random_stack(6, 3, 4, rng);
  ScaleAttnParams p(2);
  CHECK(identical(scale_attention(f, p).data, 0.5 * f.data));

  p.weight(0, 0) = p.weight(1, 1) = 1;
  p.bias = Tensord(Shape{2}, 5.0);
  CHECK(identical(scale_attention(f, p).data, f.data));
}

TEST_CASE("scale_attention: naive loop of means, linear map, gate and broadcast") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const StackedFeature f = random_stack(6, 3, 4, rng);
    ScaleAttnParams p(2);
    rng.fill(p.weight, -2, 2);
    rng.fill(p.bias, -1, 1);
    double mean[2] = {0, 0};
    for (Index l = 0; l < 2; ++l) {
      for (Index s = 0; s < 12; ++s)
        for (Index c = 0; c < 6; ++c) mean[l] += f.data(l, s, c);
      mean[l] /= 72.0;
    }
    const StackedFeature y = scale_attention(f, p);
    const Tensord gates = scale_gates(f, p);
    for (Index l = 0; l < 2; ++l) {
      const double pre = p.weight(l, 0) * mean[0] + p.weight(l, 1) * mean[1] + p.bias[l];
      const double gate = std::clamp((pre + 1) / 2, 0.0, 1.0);
      CHECK(gates[l] == doctest::Approx(gate).epsilon(1e-14));
      CHECK((gates[l] >= 0 && gates[l] <= 1));
      for (Index s = 0; s < 12; ++s)
        for (Index c = 0; c < 6; ++c) CHECK(y.data(l, s, c) == doctest::Approx(gate * f.data(l, s, c)).epsilon(1e-13));
    }
  }
}

TEST_CASE("spatial_attention: centre tap with zero offsets is the identity") {
  Rng rng(4);
  SpatialAttnParams p(4, {});
  p.tap_weights[4] = 1;
  const StackedFeature f = concat_levels(rng.tensor(Shape{1, 4, 5, 6}));
  CHECK(max_abs_diff(spatial_attention(f, p, {true}).data, f.data) < 1e-15);
}

TEST_CASE("spatial_attention: uniform taps equal a 3x3 box filter") {
  Rng rng(5);
  SpatialAttnParams p(4, {});
  p.tap_weights = Tensord(Shape{9}, 1.0 / 9);
  const Tensord x = rng.tensor(Shape{1, 4, 8, 8});
  ConvParams<double> box(ConvSpec{4, 4, 3, 1, 1, 1, 4});
  box.weight = Tensord(box.weight.shape(), 1.0 / 9);
  const StackedFeature y = spatial_attention(concat_levels(x), p, {true});
  CHECK(max_abs_diff(level_as_nchw(y, 0), conv2d(x, box)) < 1e-12);
  CHECK(max_abs_diff(level_as_nchw(y, 1), conv2d(x, box)) < 1e-12);
}

TEST_CASE("spatial_attention: constant half-pixel offset samples the midpoint") {
  SpatialAttnParams p(1, {});
  p.tap_weights[4] = 1;
  auto& bias = p.offset_predictor.units[0].conv.bias;
  bias[8] = 0.5;
  bias[9] = 0.5;
  const StackedFeature f = concat_levels(Tensord(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
  CHECK(spatial_attention(f, p, {true}).data(0, 0, 0) == 2.5);
}

TEST_CASE("spatial_attention: sigmoid modulation of a zero predictor halves the output") {
  Rng rng(6);
  SpatialAttnParams p(3, {});
  p.tap_weights[4] = 1;
  const StackedFeature f = concat_levels(rng.tensor(Shape{1, 3, 4, 4}));
  CHECK(max_abs_diff(spatial_attention(f, p).data, 0.5 * f.data) < 1e-15);
}

TEST_CASE("task_attention: default and identity coefficients") {
  Rng rng(7);
  const StackedFeature f = random_stack(8, 2, 2, rng);
  DyReluParams p(8, 4, 1.0, 0.5);
  rng.fill(p.fc1.weight, -1, 1);
  const TaskCoefficients k = task_coefficients(f, p);
  CHECK(k.alpha1 == 1.0);
  CHECK(k.beta1 == 0.0);
  CHECK(k.alpha2 == 0.0);
  CHECK(k.beta2 == 0.0);
  const StackedFeature y = task_attention(f, p);
  for (Index i = 0; i < f.data.size(); ++i) CHECK(y.data[i] == std::max(f.data[i], 0.0));

  CHECK(identical(apply_task_coefficients(f, {1, 0, 1, 0}).data, f.data));
}

TEST_CASE("task_attention: output dominates both affine branches") {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const StackedFeature f = random_stack(8, 3, 3, rng);
    DyReluParams p(8, 4, 1.0, 0.5);
    rng.fill(p.fc1.weight, -1, 1);
    rng.fill(p.fc2.weight, -2, 2);
    rng.fill(p.fc2.bias, -1, 1);
    const TaskCoefficients k = task_coefficients(f, p);
    const StackedFeature y = task_attention(f, p);
    for (Index i = 0; i < f.data.size(); ++i) {
      CHECK(y.data[i] >= k.alpha1 * f.data[i] + k.beta1 - 1e-15);
      CHECK(y.data[i] >= k.alpha2 * f.data[i] + k.beta2 - 1e-15);
    }
    CHECK(std::abs(k.alpha1 - 1) <= 1.0);
    CHECK(std::abs(k.beta1) <= 0.5);
  }
}

TEST_CASE("dynamic_block is the composition of the three attentions") {
  Rng rng(9);
  for (Index C : {4, 8}) {
    const DynamicBlockParams p = random_block(C, rng);
    const StackedFeature f = random_stack(C, 3, 5, rng);
    const StackedFeature y = dynamic_block(f, p);
    const StackedFeature ref = task_attention(spatial_attention(scale_attention(f, p.scale), p.spatial), p.task);
    CHECK(identical(y.data, ref.data));
    CHECK(y.data.shape() == f.data.shape());
  }
}

TEST_CASE("tda head: extents, channel count and the zero-parameter trace") {
  Rng rng(10);
  TdaHeadParams h = make_tda_head({8, 2, 2, 3, 4, 1.0, 0.5}, {});
  CHECK(h.prediction_channels() == 21);
  init(h, rng);
  const Tensord x = rng.tensor(Shape{1, 8, 4, 6});
  const Tensord raw = tda_module_forward(x, h, nullptr);
  CHECK(raw.shape() == Shape{1, 21, 4, 6});

  TdaHeadParams z = make_tda_head({8, 2, 2, 3, 4, 1.0, 0.5}, {});
  auto& bias = z.out.units.back().conv.bias;
  rng.fill(bias, -1, 1);
  const Tensord r = tda_module_forward(x, z, nullptr);
  for (Index c = 0; c < 21; ++c)
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 6; ++j) CHECK(r(0, c, i, j) == bias[c]);
}

TEST_CASE("attention-head gradient suite, a few seeds") {
  for (const auto& row : run_gradcheck("attention-head", 3)) {
    INFO(row.op << " max " << row.max_rel_error << " kinks " << row.kinks << "/" << row.cells);
    CHECK(row.pass);
  }
}
