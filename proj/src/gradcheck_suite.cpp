#include "triad/gradcheck_suite.hpp"

#include "triad/attention_head.hpp"
#include "triad/coord_attention.hpp"
#include "triad/gradcheck.hpp"
#include "triad/model.hpp"
#include "triad/neck.hpp"
#include "triad/postproc.hpp"

#include <cstdio>
#include <functional>
#include <sstream>

namespace triad {

namespace {

constexpr double kElementwise = 1e-5;
constexpr double kComposed = 1e-4;

struct OpCheck {
  std::string op;
  double tolerance;
  std::function<void(Rng&, GradProbe&)> run;
};

template <typename P>
P zero_grad(const P& p) {
  P g = p;
  ParamList l;
  collect("", g, l);
  for (ParamRef& r : l)
    if (!r.tensor->empty()) r.tensor->set_zero();
  return g;
}

template <typename P>
void randomize(P& p, Rng& rng, double scale) {
  ParamList l;
  collect("", p, l);
  for (ParamRef& r : l)
    if (r.trainable) rng.fill(*r.tensor, -scale, scale);
}

/// Probes every trainable tensor of `p` against the matching tensor of `g`.
template <typename P, typename F>
void probe_params(GradProbe& gp, P& p, P& g, F&& loss, Index max_cells = -1) {
  ParamList lp, lg;
  collect("", p, lp);
  collect("", g, lg);
  for (std::size_t i = 0; i < lp.size(); ++i)
    if (lp[i].trainable) gp.probe(*lp[i].tensor, *lg[i].tensor, loss, max_cells);
}

void probe_conv(GradProbe& g, ConvParams<double>& p, const ConvParams<double>& d, const std::function<double()>& loss) {
  g.probe(p.weight, d.weight, loss);
  g.probe(p.bias, d.bias, loss);
}

Tensord distinct_values(Rng& rng, const Shape& s) {
  // A shuffled ramp: neighbours differ by far more than the probe step.
  Tensord t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = 0.01 * static_cast<double>(i) - 0.005 * static_cast<double>(t.size());
  for (Index i = t.size() - 1; i > 0; --i) std::swap(t[i], t[rng.below(i + 1)]);
  return t;
}

StackedFeature random_stack(Rng& rng, Index C, Index H, Index W) {
  return {rng.tensor(Shape{2, H * W, C}), H, W};
}

// --- tensor-core --------------------------------------------------------------

void conv_case(Rng& rng, GradProbe& g, const ConvSpec& spec, const Shape& xs) {
  ConvParams<double> p(spec);
  rng.fill(p.weight, -1, 1);
  rng.fill(p.bias, -1, 1);
  Tensord x = rng.tensor(xs);
  const Tensord r = rng.tensor(conv2d(x, p).shape());
  const ConvGrads<double> d = conv2d_backward(x, p, r);
  const auto loss = [&] { return dot(r, conv2d(x, p)); };
  g.probe(x, d.dx, loss);
  g.probe(p.weight, d.dweight, loss);
  g.probe(p.bias, d.dbias, loss);
}

std::vector<OpCheck> tensor_core_checks() {
  std::vector<OpCheck> c;
  c.push_back({"conv2d", kElementwise, [](Rng& rng, GradProbe& g) {
                 conv_case(rng, g, ConvSpec{3, 4, 3, 1, 1, 1, 1}, Shape{2, 3, 5, 6});
               }});
  c.push_back({"conv2d_grouped_strided_dilated", kElementwise, [](Rng& rng, GradProbe& g) {
                 conv_case(rng, g, ConvSpec{4, 6, 3, 2, 2, 2, 2}, Shape{1, 4, 7, 7});
               }});
  c.push_back({"conv2d_depthwise", kElementwise, [](Rng& rng, GradProbe& g) {
                 conv_case(rng, g, ConvSpec{3, 3, 3, 2, 1, 1, 3}, Shape{1, 3, 6, 5});
               }});
  c.push_back({"fully_connected", kElementwise, [](Rng& rng, GradProbe& g) {
                 Tensord x = rng.tensor(Shape{5}), w = rng.tensor(Shape{4, 5}), b = rng.tensor(Shape{4});
                 const Tensord r = rng.tensor(Shape{4});
                 const LinearGrads<double> d = fully_connected_backward(x, w, r);
                 const auto loss = [&] { return dot(r, fully_connected(x, w, b)); };
                 g.probe(x, d.dx, loss);
                 g.probe(w, d.dweight, loss);
                 g.probe(b, d.dbias, loss);
               }});
  c.push_back({"max_pool2d", kElementwise, [](Rng& rng, GradProbe& g) {
                 for (Index k : {3, 5}) {
                   Tensord x = distinct_values(rng, Shape{1, 2, 5, 6});
                   const Tensord r = rng.tensor(x.shape());
                   const Tensord dx = max_pool2d_backward(x, k, r);
                   g.probe(x, dx, [&] { return dot(r, max_pool2d(x, k)); });
                 }
               }});
  c.push_back({"global_avg_pool", kElementwise, [](Rng& rng, GradProbe& g) {
                 for (const std::vector<int>& axes : {std::vector<int>{2, 3}, std::vector<int>{1}, std::vector<int>{0, 3}}) {
                   Tensord x = rng.tensor(Shape{2, 3, 4, 5});
                   const Tensord r = rng.tensor(global_avg_pool(x, axes).shape());
                   const Tensord dx = global_avg_pool_backward(x.shape(), axes, r);
                   g.probe(x, dx, [&] { return dot(r, global_avg_pool(x, axes)); });
                 }
               }});
  c.push_back({"directional_pool", kElementwise, [](Rng& rng, GradProbe& g) {
                 Tensord x = rng.tensor(Shape{2, 3, 4, 5});
                 const auto q = directional_pool(x);
                 const Tensord rh = rng.tensor(q.along_h.shape()), rw = rng.tensor(q.along_w.shape());
                 const Tensord dx = directional_pool_backward(x.shape(), rh, rw);
                 g.probe(x, dx, [&] {
                   const auto p = directional_pool(x);
                   return dot(rh, p.along_h) + dot(rw, p.along_w);
                 });
               }});
  c.push_back({"bilinear_sample", kElementwise, [](Rng& rng, GradProbe& g) {
                 const Index H = 4, W = 5, K = 12;
                 Tensord x = rng.tensor(Shape{1, 2, H, W});
                 Tensord coords(Shape{K, 2});
                 for (Index k = 0; k < K; ++k) {
                   coords(k, 0) = rng.uniform(-1.5, H + 0.5);
                   coords(k, 1) = rng.uniform(-1.5, W + 0.5);
                 }
                 const Tensord r = rng.tensor(Shape{K});
                 const auto loss = [&] {
                   double s = 0;
                   for (Index k = 0; k < K; ++k) s += r[k] * bilinear_sample(x, 0, k % 2, coords(k, 0), coords(k, 1));
                   return s;
                 };
                 Tensord dx(x.shape()), dc(coords.shape());
                 for (Index k = 0; k < K; ++k) {
                   const auto st = bilinear_stencil(H, W, coords(k, 0), coords(k, 1));
                   const double* plane = x.data() + (k % 2) * H * W;
                   st.scatter(dx.data() + (k % 2) * H * W, r[k]);
                   dc(k, 0) = r[k] * st.d_dy(plane);
                   dc(k, 1) = r[k] * st.d_dx(plane);
                 }
                 g.probe(x, dx, loss);
                 g.probe(coords, dc, loss);
               }});
  c.push_back({"activations", kElementwise, [](Rng& rng, GradProbe& g) {
                 for (Activation a : {Activation::identity, Activation::relu, Activation::leaky_relu,
                                      Activation::sigmoid, Activation::hard_sigmoid}) {
                   Tensord x = rng.tensor(Shape{24}, -3, 3);
                   const Tensord r = rng.tensor(x.shape());
                   const Tensord dx = activation_backward(a, x, r);
                   g.probe(x, dx, [&] { return dot(r, activation(a, x)); });
                 }
               }});
  c.push_back({"batchnorm_inference", kElementwise, [](Rng& rng, GradProbe& g) {
                 BatchNormParams<double> p(3);
                 rng.fill(p.scale, 0.5, 1.5);
                 rng.fill(p.shift, -1, 1);
                 rng.fill(p.mean, -1, 1);
                 rng.fill(p.var, 0.5, 2);
                 Tensord x = rng.tensor(Shape{2, 3, 3, 4});
                 const Tensord r = rng.tensor(x.shape());
                 const BatchNormGrads<double> d = batchnorm_inference_backward(x, p, r);
                 const auto loss = [&] { return dot(r, batchnorm_inference(x, p)); };
                 g.probe(x, d.dx, loss);
                 g.probe(p.scale, d.dscale, loss);
                 g.probe(p.shift, d.dshift, loss);
               }});
  c.push_back({"upsample_nearest2x", kElementwise, [](Rng& rng, GradProbe& g) {
                 Tensord x = rng.tensor(Shape{1, 2, 3, 3});
                 const Tensord r = rng.tensor(Shape{1, 2, 6, 6});
                 g.probe(x, upsample_nearest2x_backward(r), [&] { return dot(r, upsample_nearest2x(x)); });
               }});
  c.push_back({"concat_split", kElementwise, [](Rng& rng, GradProbe& g) {
                 Tensord a = rng.tensor(Shape{1, 2, 3, 3}), b = rng.tensor(Shape{1, 3, 3, 3});
                 const Tensord r = rng.tensor(Shape{1, 5, 3, 3});
                 const auto parts = split_axis(r, 1, {2, 3});
                 const auto loss = [&] { return dot(r, concat_axis<double>({a, b}, 1)); };
                 g.probe(a, parts[0], loss);
                 g.probe(b, parts[1], loss);
               }});
  return c;
}

// --- attention-head -------------------------------------------------------------

SpatialAttnParams random_spatial(Rng& rng, Index C) {
  SpatialAttnParams p(C, BuildOptions{});
  for (auto* b : {&p.offset_predictor, &p.modulation_predictor})
    for (auto& u : b->units) {
      rng.fill(u.conv.weight, -0.3, 0.3);
      rng.fill(u.conv.bias, -0.5, 0.5);
    }
  rng.fill(p.tap_weights, -1, 1);
  return p;
}

SpatialAttnParams zero_spatial(const SpatialAttnParams& p) {
  SpatialAttnParams g = p;
  for (auto* b : {&g.offset_predictor, &g.modulation_predictor})
    for (auto& u : b->units) u.conv.weight.set_zero(), u.conv.bias.set_zero();
  g.tap_weights.set_zero();
  return g;
}

void probe_spatial(GradProbe& g, SpatialAttnParams& p, const SpatialAttnParams& d, const std::function<double()>& loss) {
  for (std::size_t i = 0; i < p.offset_predictor.units.size(); ++i)
    probe_conv(g, p.offset_predictor.units[i].conv, d.offset_predictor.units[i].conv, loss);
  for (std::size_t i = 0; i < p.modulation_predictor.units.size(); ++i)
    probe_conv(g, p.modulation_predictor.units[i].conv, d.modulation_predictor.units[i].conv, loss);
  g.probe(p.tap_weights, d.tap_weights, loss);
}

DyReluParams random_dyrelu(Rng& rng, Index C) {
  DyReluParams p(C, 4, 1.0, 0.5);
  rng.fill(p.fc1.weight, -1, 1);
  rng.fill(p.fc1.bias, -0.5, 0.5);
  rng.fill(p.fc2.weight, -1, 1);
  rng.fill(p.fc2.bias, -0.5, 0.5);
  return p;
}

void probe_dyrelu(GradProbe& g, DyReluParams& p, const DyReluParams& d, const std::function<double()>& loss) {
  g.probe(p.fc1.weight, d.fc1.weight, loss);
  g.probe(p.fc1.bias, d.fc1.bias, loss);
  g.probe(p.fc2.weight, d.fc2.weight, loss);
  g.probe(p.fc2.bias, d.fc2.bias, loss);
}

DyReluParams zero_dyrelu(const DyReluParams& p) {
  DyReluParams g = p;
  for (Tensord* t : {&g.fc1.weight, &g.fc1.bias, &g.fc2.weight, &g.fc2.bias}) t->set_zero();
  return g;
}

std::vector<OpCheck> attention_head_checks() {
  std::vector<OpCheck> c;
  c.push_back({"scale_attention", kElementwise, [](Rng& rng, GradProbe& g) {
                 StackedFeature f = random_stack(rng, 4, 3, 4);
                 ScaleAttnParams p(2);
                 rng.fill(p.weight, -1, 1);
                 rng.fill(p.bias, -0.5, 0.5);
                 ScaleAttnCache cache;
                 const StackedFeature y = scale_attention(f, p, &cache);
                 const StackedFeature r{rng.tensor(y.data.shape()), f.height, f.width};
                 ScaleAttnParams d(2);
                 const StackedFeature dx = scale_attention_backward(p, cache, r, d);
                 const auto loss = [&] { return dot(r.data, scale_attention(f, p).data); };
                 g.probe(f.data, dx.data, loss);
                 g.probe(p.weight, d.weight, loss);
                 g.probe(p.bias, d.bias, loss);
               }});
  c.push_back({"spatial_attention", kElementwise, [](Rng& rng, GradProbe& g) {
                 StackedFeature f = random_stack(rng, 3, 4, 5);
                 SpatialAttnParams p = random_spatial(rng, 3);
                 SpatialAttnCache cache;
                 const StackedFeature y = spatial_attention(f, p, {}, &cache);
                 const StackedFeature r{rng.tensor(y.data.shape()), f.height, f.width};
                 SpatialAttnParams d = zero_spatial(p);
                 const StackedFeature dx = spatial_attention_backward(p, cache, r, d);
                 const std::function<double()> loss = [&] { return dot(r.data, spatial_attention(f, p).data); };
                 g.probe(f.data, dx.data, loss);
                 probe_spatial(g, p, d, loss);
               }});
  c.push_back({"task_attention", kElementwise, [](Rng& rng, GradProbe& g) {
                 StackedFeature f = random_stack(rng, 8, 3, 3);
                 DyReluParams p = random_dyrelu(rng, 8);
                 TaskAttnCache cache;
                 const StackedFeature y = task_attention(f, p, &cache);
                 const StackedFeature r{rng.tensor(y.data.shape()), f.height, f.width};
                 DyReluParams d = zero_dyrelu(p);
                 const StackedFeature dx = task_attention_backward(p, cache, r, d);
                 const std::function<double()> loss = [&] { return dot(r.data, task_attention(f, p).data); };
                 g.probe(f.data, dx.data, loss);
                 probe_dyrelu(g, p, d, loss);
               }});
  c.push_back({"dynamic_block", kComposed, [](Rng& rng, GradProbe& g) {
                 const Index C = 4;
                 StackedFeature f = random_stack(rng, C, 3, 4);
                 DynamicBlockParams p{ScaleAttnParams(2), random_spatial(rng, C), random_dyrelu(rng, C)};
                 rng.fill(p.scale.weight, -1, 1);
                 rng.fill(p.scale.bias, -0.5, 0.5);
                 DynamicBlockCache cache;
                 const StackedFeature y = dynamic_block(f, p, &cache);
                 const StackedFeature r{rng.tensor(y.data.shape()), f.height, f.width};
                 DynamicBlockParams d{ScaleAttnParams(2), zero_spatial(p.spatial), zero_dyrelu(p.task)};
                 const StackedFeature dx = dynamic_block_backward(p, cache, r, d);
                 const std::function<double()> loss = [&] { return dot(r.data, dynamic_block(f, p).data); };
                 g.probe(f.data, dx.data, loss);
                 g.probe(p.scale.weight, d.scale.weight, loss);
                 g.probe(p.scale.bias, d.scale.bias, loss);
                 probe_spatial(g, p.spatial, d.spatial, loss);
                 probe_dyrelu(g, p.task, d.task, loss);
               }});
  c.push_back({"tda_head", kComposed, [](Rng& rng, GradProbe& g) {
                 HeadConfig hc;
                 hc.channels = 4;
                 hc.num_blocks = 2;
                 hc.num_classes = 2;
                 hc.anchors = 2;
                 TdaHeadParams p = make_tda_head(hc, BuildOptions{});
                 randomize(p, rng, 0.4);
                 Tensord x = rng.tensor(Shape{1, 4, 3, 3});
                 TdaHeadCache cache;
                 const Tensord y = tda_module_forward(x, p, &cache);
                 const Tensord r = rng.tensor(y.shape());
                 TdaHeadParams d = zero_grad(p);
                 const Tensord dx = tda_module_backward(p, cache, r, d);
                 const auto loss = [&] { return dot(r, tda_module_forward(x, p)); };
                 g.probe(x, dx, loss);
                 probe_params(g, p, d, loss, 12);
               }});
  return c;
}

// --- coord-attention ----------------------------------------------------------------

std::vector<OpCheck> coord_attention_checks() {
  std::vector<OpCheck> c;
  c.push_back({"coord_embed", kElementwise, [](Rng& rng, GradProbe& g) {
                 Tensord x = rng.tensor(Shape{1, 4, 3, 5});
                 const auto q = coord_embed(x);
                 const Tensord rh = rng.tensor(q.along_h.shape()), rw = rng.tensor(q.along_w.shape());
                 g.probe(x, directional_pool_backward(x.shape(), rh, rw), [&] {
                   const auto p = coord_embed(x);
                   return dot(rh, p.along_h) + dot(rw, p.along_w);
                 });
               }});
  c.push_back({"coord_apply", kElementwise, [](Rng& rng, GradProbe& g) {
                 Tensord x = rng.tensor(Shape{2, 3, 4, 5});
                 CoordGates gates{rng.tensor(Shape{2, 3, 4, 1}, 0, 1), rng.tensor(Shape{2, 3, 1, 5}, 0, 1)};
                 const Tensord r = rng.tensor(x.shape());
                 const CoordApplyGrads d = coord_apply_backward(x, gates, r);
                 const auto loss = [&] { return dot(r, coord_apply(x, gates)); };
                 g.probe(x, d.dx, loss);
                 g.probe(gates.h, d.dgates.h, loss);
                 g.probe(gates.w, d.dgates.w, loss);
               }});
  c.push_back({"coord_attention", kComposed, [](Rng& rng, GradProbe& g) {
                 CAParams p(8, 4);
                 init(p, rng);
                 rng.fill(p.squeeze_bn.scale, 0.5, 1.5);
                 rng.fill(p.squeeze_bn.shift, -0.5, 0.5);
                 rng.fill(p.squeeze_bn.mean, -0.2, 0.2);
                 rng.fill(p.squeeze_bn.var, 0.5, 2);
                 Tensord x = rng.tensor(Shape{1, 8, 4, 5});
                 CoordCache cache;
                 const Tensord y = coord_attention(x, p, &cache);
                 const Tensord r = rng.tensor(y.shape());
                 CAParams d = zero_grad(p);
                 const Tensord dx = coord_attention_backward(p, cache, r, d);
                 const auto loss = [&] { return dot(r, coord_attention(x, p)); };
                 g.probe(x, dx, loss);
                 probe_params(g, p, d, loss);
               }});
  return c;
}

// --- neck -----------------------------------------------------------------------------

std::vector<OpCheck> neck_checks() {
  std::vector<OpCheck> c;
  c.push_back({"spp", kElementwise, [](Rng& rng, GradProbe& g) {
                 Tensord x = distinct_values(rng, Shape{1, 2, 6, 6});
                 const std::vector<Index> pools{5, 9, 13};
                 const Tensord r = rng.tensor(Shape{1, 8, 6, 6});
                 g.probe(x, spp_backward(x, pools, r), [&] { return dot(r, spp(x, pools)); });
               }});
  c.push_back({"csp_layer", kComposed, [](Rng& rng, GradProbe& g) {
                 CspLayerParams p = make_csp_layer(8, 8, 1, BuildOptions{});
                 init(p, rng);
                 randomize(p, rng, 0.4);
                 Tensord x = rng.tensor(Shape{1, 8, 4, 4});
                 CspCache cache;
                 const Tensord y = csp_layer(x, p, &cache);
                 const Tensord r = rng.tensor(y.shape());
                 CspLayerParams d = zero_grad(p);
                 const Tensord dx = csp_layer_backward(p, cache, r, d);
                 const auto loss = [&] { return dot(r, csp_layer(x, p)); };
                 g.probe(x, dx, loss);
                 probe_params(g, p, d, loss, 12);
               }});
  c.push_back({"neck", kComposed, [](Rng& rng, GradProbe& g) {
                 const Widths w{8, 16, 32};
                 NeckParams p = make_neck(w, true, BuildOptions{});
                 init(p, rng);
                 std::array<CAParams, 3> ca{CAParams(8, 4), CAParams(16, 4), CAParams(32, 4)};
                 for (auto& a : ca) init(a, rng);
                 FeaturePyramid in;
                 in[0] = rng.tensor(Shape{1, 8, 8, 8});
                 in[1] = rng.tensor(Shape{1, 16, 4, 4});
                 in[2] = rng.tensor(Shape{1, 32, 2, 2});
                 NeckCache cache;
                 const FeaturePyramid y = neck_forward(in, p, ca, &cache);
                 FeaturePyramid r;
                 for (std::size_t i = 0; i < 3; ++i) r[i] = rng.tensor(y[i].shape());
                 NeckParams d = zero_grad(p);
                 std::array<CAParams, 3> dca{zero_grad(ca[0]), zero_grad(ca[1]), zero_grad(ca[2])};
                 const FeaturePyramid dx = neck_backward(p, ca, cache, r, d, dca);
                 const std::function<double()> loss = [&] {
                   const FeaturePyramid o = neck_forward(in, p, ca);
                   return dot(r[0], o[0]) + dot(r[1], o[1]) + dot(r[2], o[2]);
                 };
                 for (std::size_t i = 0; i < 3; ++i) g.probe(in[i], dx[i], loss, 16);
                 probe_params(g, p, d, loss, 2);
                 for (std::size_t i = 0; i < 3; ++i) probe_params(g, ca[i], dca[i], loss, 2);
               }});
  return c;
}

// --- postproc-loss ---------------------------------------------------------------------

Box random_box(Rng& rng) {
  return {rng.uniform(0, 10), rng.uniform(0, 10), rng.uniform(1, 6), rng.uniform(1, 6)};
}

std::vector<GroundTruth> random_targets(Rng& rng, Index n, double extent, Index classes) {
  std::vector<GroundTruth> t;
  for (Index i = 0; i < n; ++i)
    t.push_back({{rng.uniform(2, extent - 2), rng.uniform(2, extent - 2), rng.uniform(4, 0.75 * extent),
                  rng.uniform(4, 0.75 * extent)},
                 rng.below(classes),
                 rng.uniform(0.5, 1.0)});
  return t;
}

std::vector<OpCheck> postproc_checks() {
  std::vector<OpCheck> c;
  c.push_back({"diou", kElementwise, [](Rng& rng, GradProbe& g) {
                 for (int k = 0; k < 8; ++k) {
                   Tensord b(Shape{4});
                   const Box p0 = random_box(rng), t = random_box(rng);
                   b[0] = p0.cx, b[1] = p0.cy, b[2] = p0.w, b[3] = p0.h;
                   const DiouGrad d = diou_with_grad(p0, t);
                   const Tensord a(Shape{4}, {d.dcx, d.dcy, d.dw, d.dh});
                   g.probe(b, a, [&] { return diou_with_grad(Box{b[0], b[1], b[2], b[3]}, t).value; });
                 }
               }});
  c.push_back({"focal_loss", kElementwise, [](Rng& rng, GradProbe& g) {
                 const Index n = 16;
                 Tensord z = rng.tensor(Shape{n}, -4, 4);
                 const Tensord y = rng.tensor(Shape{n}, 0, 1);
                 const double alpha = rng.uniform(0.1, 0.9), gamma = static_cast<double>(rng.below(4));
                 Tensord a(Shape{n});
                 for (Index i = 0; i < n; ++i) a[i] = focal_loss_logit(z[i], y[i], alpha, gamma).dlogit;
                 g.probe(z, a, [&] {
                   double s = 0;
                   for (Index i = 0; i < n; ++i) s += focal_loss_logit(z[i], y[i], alpha, gamma).loss;
                   return s;
                 });
               }});
  c.push_back({"detection_loss", kComposed, [](Rng& rng, GradProbe& g) {
                 const Index nc = 2;
                 std::vector<LevelSpec> levels{{8, {{6, 8}, {10, 6}, {12, 12}}},
                                               {16, {{14, 18}, {20, 14}, {22, 22}}},
                                               {32, {{26, 20}, {30, 30}, {32, 28}}}};
                 std::vector<Tensord> raw{rng.tensor(Shape{1, 21, 4, 4}, -2, 2), rng.tensor(Shape{1, 21, 2, 2}, -2, 2),
                                          rng.tensor(Shape{1, 21, 1, 1}, -2, 2)};
                 const auto targets = random_targets(rng, 3, 32, nc);
                 const LossConfig cfg;
                 const LossBreakdown lb = detection_loss(raw, targets, levels, nc, cfg, true);
                 const auto loss = [&] { return detection_loss(raw, targets, levels, nc, cfg, false).total; };
                 for (std::size_t l = 0; l < raw.size(); ++l) g.probe(raw[l], lb.grads[l], loss, 1000);
               }});
  return c;
}

// --- model ------------------------------------------------------------------------------

std::vector<OpCheck> model_checks() {
  std::vector<OpCheck> c;
  c.push_back({"model_loss", kComposed, [](Rng& rng, GradProbe& g) {
                 ModelConfig cfg = ModelConfig::preset(Variant::full);
                 cfg.widths = {4, 8, 16};
                 cfg.ca_ratio = 4;
                 cfg.seed = rng.next();
                 Model m = build_model(cfg);
                 for (ParamRef& p : parameters(m))
                   if (p.trainable && p.name.find(".spatial.") != std::string::npos) rng.fill(*p.tensor, -0.1, 0.1);
                 Tensord image = rng.tensor(Shape{1, 3, 32, 32}, 0, 1);
                 const auto targets = random_targets(rng, 3, 32, cfg.num_classes);
                 const auto levels = cfg.levels();
                 ModelCache cache;
                 const ForwardResult fr = forward(m, image, &cache);
                 const LossBreakdown lb = detection_loss({fr.raw[0], fr.raw[1], fr.raw[2]}, targets, levels,
                                                         cfg.num_classes, cfg.loss, true);
                 Model d = zeros_like(m);
                 backward(m, cache, {lb.grads[0], lb.grads[1], lb.grads[2]}, d);
                 const std::function<double()> loss = [&] {
                   const ForwardResult o = forward(m, image);
                   return detection_loss({o.raw[0], o.raw[1], o.raw[2]}, targets, levels, cfg.num_classes, cfg.loss,
                                         false)
                       .total;
                 };
                 ParamList lp = parameters(m), ld = parameters(d);
                 const double mid = loss();
                 // A sparse sample: a dozen tensors, each at its largest analytic gradient.
                 for (int k = 0; k < 12; ++k) {
                   const std::size_t i = static_cast<std::size_t>(rng.below(static_cast<Index>(lp.size())));
                   if (!lp[i].trainable) continue;
                   Index best;
                   ld[i].tensor->vec().cwiseAbs().maxCoeff(&best);
                   g.probe_cell(*lp[i].tensor, *ld[i].tensor, loss, best, mid);
                 }
               }});
  return c;
}

std::vector<OpCheck> checks_for(const std::string& module) {
  if (module == "tensor-core") return tensor_core_checks();
  if (module == "attention-head") return attention_head_checks();
  if (module == "coord-attention") return coord_attention_checks();
  if (module == "neck") return neck_checks();
  if (module == "postproc-loss") return postproc_checks();
  if (module == "model") return model_checks();
  throw Error("gradcheck: unknown module '" + module + "'");
}

std::uint64_t op_seed(const std::string& op, int seed) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : op) h = (h ^ ch) * 1099511628211ull;
  return h ^ (static_cast<std::uint64_t>(seed) * 0x9E3779B97F4A7C15ull);
}

}  // namespace

std::vector<std::string> gradcheck_modules() {
  return {"tensor-core", "attention-head", "coord-attention", "neck", "postproc-loss", "model"};
}

std::vector<GradCheckRow> run_gradcheck(const std::string& module, int seeds, bool corrupt) {
  require(seeds >= 1, "gradcheck: --seeds must be at least 1");
  std::vector<GradCheckRow> rows;
  const std::vector<std::string> modules = module == "all" ? gradcheck_modules() : std::vector<std::string>{module};
  for (const std::string& mod : modules)
    for (const OpCheck& op : checks_for(mod)) {
      GradCheckRow row{mod, op.op, seeds, 0, 0, 0, op.tolerance, false};
      for (int s = 0; s < seeds; ++s) {
        Rng rng(op_seed(op.op, s));
        GradProbe probe(rng, op.tolerance / 10);
        probe.corrupt(corrupt);
        op.run(rng, probe);
        row.cells += probe.cells();
        row.kinks += probe.kinks();
        row.max_rel_error = std::max(row.max_rel_error, probe.max_relative_error());
      }
      row.pass = row.cells > 0 && row.max_rel_error < row.tolerance && 10 * row.kinks <= row.cells;
      rows.push_back(row);
    }
  return rows;
}

std::string format_gradcheck_table(const std::vector<GradCheckRow>& rows) {
  std::ostringstream o;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-16s %-32s %6s %8s %6s %12s %10s %s\n", "module", "op", "seeds", "cells", "kinks",
                "max_rel_err", "tolerance", "status");
  o << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-16s %-32s %6d %8lld %6lld %12.3e %10.1e %s\n", r.module.c_str(), r.op.c_str(),
                  r.seeds, static_cast<long long>(r.cells), static_cast<long long>(r.kinks), r.max_rel_error,
                  r.tolerance, r.pass ? "PASS" : "FAIL");
    o << buf;
  }
  return o.str();
}

}  // namespace triad
