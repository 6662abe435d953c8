#include "triad/attention_head.hpp"

#include <algorithm>
#include <cmath>

namespace triad {

namespace {

void check_same_layout(const StackedFeature& a, const StackedFeature& b, const char* op) {
  require_shape(a.data.shape() == b.data.shape() && a.height == b.height && a.width == b.width,
                std::string(op) + ": gradient layout " + b.data.shape().str() + " does not match " +
                    a.data.shape().str());
}

StackedFeature like(const StackedFeature& f) { return {Tensord(f.data.shape()), f.height, f.width}; }

}  // namespace

StackedFeature concat_levels(const Tensord& feature) {
  require_shape(feature.rank() == 3 || (feature.rank() == 4 && feature.dim(0) == 1),
                "concat_levels: expected a single C x H x W level, got " + feature.shape().str());
  const int o = feature.rank() - 3;
  const Index C = feature.dim(o), H = feature.dim(o + 1), W = feature.dim(o + 2), S = H * W;
  StackedFeature f{Tensord(Shape{2, S, C}), H, W};
  for (Index c = 0; c < C; ++c)
    for (Index s = 0; s < S; ++s) {
      const double v = feature[c * S + s];
      f.data(0, s, c) = v;
      f.data(1, s, c) = v;
    }
  return f;
}

Tensord concat_levels_backward(const StackedFeature& d) {
  const Index L = d.levels(), S = d.positions(), C = d.channels();
  Tensord dx(Shape{C, d.height, d.width});
  for (Index l = 0; l < L; ++l)
    for (Index s = 0; s < S; ++s)
      for (Index c = 0; c < C; ++c) dx[c * S + s] += d.data(l, s, c);
  return dx;
}

Tensord recover(const StackedFeature& f) {
  const Index L = f.levels(), S = f.positions(), C = f.channels();
  require_shape(S == f.height * f.width, "recover: " + std::to_string(S) + " positions but H*W = " +
                                             std::to_string(f.height * f.width));
  Tensord y(Shape{C, f.height, f.width});
  for (Index l = 0; l < L; ++l)
    for (Index s = 0; s < S; ++s)
      for (Index c = 0; c < C; ++c) y[c * S + s] += f.data(l, s, c);
  y.vec() /= static_cast<double>(L);
  return y;
}

StackedFeature recover_backward(const StackedFeature& shape_like, const Tensord& dy) {
  const Index L = shape_like.levels(), S = shape_like.positions(), C = shape_like.channels();
  require_shape(dy.size() == S * C, "recover_backward: gradient size mismatch");
  StackedFeature d = like(shape_like);
  const double inv = 1.0 / static_cast<double>(L);
  for (Index l = 0; l < L; ++l)
    for (Index s = 0; s < S; ++s)
      for (Index c = 0; c < C; ++c) d.data(l, s, c) = dy[c * S + s] * inv;
  return d;
}

Tensord level_as_nchw(const StackedFeature& f, Index level) {
  const Index S = f.positions(), C = f.channels();
  Tensord x(Shape{1, C, f.height, f.width});
  for (Index s = 0; s < S; ++s)
    for (Index c = 0; c < C; ++c) x[c * S + s] = f.data(level, s, c);
  return x;
}

void set_level_from_nchw(StackedFeature& f, Index level, const Tensord& x) {
  const Index S = f.positions(), C = f.channels();
  require_shape(x.size() == S * C, "set_level_from_nchw: size mismatch");
  for (Index s = 0; s < S; ++s)
    for (Index c = 0; c < C; ++c) f.data(level, s, c) = x[c * S + s];
}

// ---------------------------------------------------------------------------

ScaleAttnParams::ScaleAttnParams(Index l, bool allocate) : levels(l) {
  if (allocate) {
    weight = Tensord(Shape{l, l});
    bias = Tensord(Shape{l});
  }
}

namespace {

Tensord level_means(const StackedFeature& f) {
  const Index L = f.levels();
  const Index per = f.positions() * f.channels();
  Tensord m(Shape{L});
  for (Index l = 0; l < L; ++l) m[l] = f.data.vec().segment(l * per, per).mean();
  return m;
}

}  // namespace

Tensord scale_gates(const StackedFeature& f, const ScaleAttnParams& p) {
  require_shape(p.weight.shape() == Shape{f.levels(), f.levels()}, "scale_attention: weight must be levels x levels");
  return activation(Activation::hard_sigmoid, fully_connected(level_means(f), p.weight, p.bias));
}

StackedFeature scale_attention(const StackedFeature& f, const ScaleAttnParams& p, ScaleAttnCache* cache) {
  require_shape(p.weight.shape() == Shape{f.levels(), f.levels()}, "scale_attention: weight must be levels x levels");
  Tensord means = level_means(f);
  Tensord pre = fully_connected(means, p.weight, p.bias);
  const Index per = f.positions() * f.channels();
  StackedFeature y = f;
  for (Index l = 0; l < f.levels(); ++l) y.data.vec().segment(l * per, per) *= hard_sigmoid(pre[l]);
  if (cache) {
    cache->input = f;
    cache->means = std::move(means);
    cache->pre = std::move(pre);
  }
  return y;
}

StackedFeature scale_attention_backward(const ScaleAttnParams& p, const ScaleAttnCache& cache,
                                        const StackedFeature& dy, ScaleAttnParams& grad) {
  const StackedFeature& f = cache.input;
  check_same_layout(f, dy, "scale_attention_backward");
  const Index L = f.levels(), per = f.positions() * f.channels();
  StackedFeature dx = like(f);
  Tensord dpre(Shape{L});
  for (Index l = 0; l < L; ++l) {
    const auto seg_x = f.data.vec().segment(l * per, per);
    const auto seg_d = dy.data.vec().segment(l * per, per);
    dx.data.vec().segment(l * per, per) = seg_d * hard_sigmoid(cache.pre[l]);
    dpre[l] = seg_x.dot(seg_d) * activation_derivative(Activation::hard_sigmoid, cache.pre[l]);
  }
  LinearGrads<double> g = fully_connected_backward(cache.means, p.weight, dpre);
  grad.weight += g.dweight;
  grad.bias += g.dbias;
  for (Index l = 0; l < L; ++l) dx.data.vec().segment(l * per, per).array() += g.dx[l] / static_cast<double>(per);
  return dx;
}

// ---------------------------------------------------------------------------

SpatialAttnParams::SpatialAttnParams(Index c, const BuildOptions& opt) : channels(c) {
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) base_offsets.push_back({dy, dx});
  taps = static_cast<Index>(base_offsets.size());
  offset_predictor = make_conv(c, 2 * taps, 3, 1, Activation::identity, opt);
  modulation_predictor = make_conv(c, taps, 3, 1, Activation::identity, opt);
  if (opt.allocate) tap_weights = Tensord(Shape{taps});
}

StackedFeature spatial_attention(const StackedFeature& f, const SpatialAttnParams& p, const SpatialAttnOptions& opt,
                                 SpatialAttnCache* cache) {
  require_shape(f.channels() == p.channels, "spatial_attention: feature has " + std::to_string(f.channels()) +
                                                " channels, parameters expect " + std::to_string(p.channels));
  require_shape(p.tap_weights.size() == p.taps, "spatial_attention: tap weight count mismatch");
  const Index H = f.height, W = f.width, S = H * W, C = f.channels(), K = p.taps;
  SpatialAttnCache local;
  SpatialAttnCache& c = cache ? *cache : local;
  c.options = opt;
  c.levels = f.levels();
  c.source = level_as_nchw(f, 0);
  c.offsets = forward(p.offset_predictor, c.source, &c.offset_cache);
  c.modulation_pre = forward(p.modulation_predictor, c.source, &c.modulation_cache);
  require(c.offsets.all_finite(), "spatial_attention: non-finite predicted offsets");

  Tensord agg(Shape{C, S});
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) {
      const Index s = i * W + j;
      for (Index k = 0; k < K; ++k) {
        const double py = static_cast<double>(i + p.base_offsets[k][0]) + c.offsets[(2 * k) * S + s];
        const double px = static_cast<double>(j + p.base_offsets[k][1]) + c.offsets[(2 * k + 1) * S + s];
        const double m = opt.unit_modulation ? 1.0 : sigmoid(c.modulation_pre[k * S + s]);
        const double coef = p.tap_weights[k] * m;
        if (coef == 0.0) continue;
        const auto st = bilinear_stencil<double>(H, W, py, px);
        for (Index ch = 0; ch < C; ++ch) agg[ch * S + s] += coef * st.sample(c.source.data() + ch * S);
      }
    }
  StackedFeature y = like(f);
  for (Index l = 0; l < f.levels(); ++l)
    for (Index s = 0; s < S; ++s)
      for (Index ch = 0; ch < C; ++ch) y.data(l, s, ch) = agg[ch * S + s];
  return y;
}

StackedFeature spatial_attention_backward(const SpatialAttnParams& p, const SpatialAttnCache& c,
                                          const StackedFeature& dy, SpatialAttnParams& grad) {
  const Index H = dy.height, W = dy.width, S = H * W, C = dy.channels(), K = p.taps;
  Tensord g(Shape{C, S});
  for (Index l = 0; l < dy.levels(); ++l)
    for (Index s = 0; s < S; ++s)
      for (Index ch = 0; ch < C; ++ch) g[ch * S + s] += dy.data(l, s, ch);

  Tensord dsource(c.source.shape());
  Tensord doffsets(c.offsets.shape());
  Tensord dmod_pre(c.modulation_pre.shape());
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) {
      const Index s = i * W + j;
      for (Index k = 0; k < K; ++k) {
        const double py = static_cast<double>(i + p.base_offsets[k][0]) + c.offsets[(2 * k) * S + s];
        const double px = static_cast<double>(j + p.base_offsets[k][1]) + c.offsets[(2 * k + 1) * S + s];
        const double m = c.options.unit_modulation ? 1.0 : sigmoid(c.modulation_pre[k * S + s]);
        const double w = p.tap_weights[k];
        const auto st = bilinear_stencil<double>(H, W, py, px);
        double dw = 0, dm = 0, ddy = 0, ddx = 0;
        for (Index ch = 0; ch < C; ++ch) {
          const double* plane = c.source.data() + ch * S;
          const double gv = g[ch * S + s];
          const double v = st.sample(plane);
          dw += m * v * gv;
          dm += w * v * gv;
          ddy += st.d_dy(plane) * gv;
          ddx += st.d_dx(plane) * gv;
          st.scatter(dsource.data() + ch * S, w * m * gv);
        }
        grad.tap_weights[k] += dw;
        doffsets[(2 * k) * S + s] = w * m * ddy;
        doffsets[(2 * k + 1) * S + s] = w * m * ddx;
        dmod_pre[k * S + s] = c.options.unit_modulation ? 0.0 : dm * m * (1 - m);
      }
    }
  dsource += backward(p.offset_predictor, c.offset_cache, doffsets, grad.offset_predictor);
  dsource += backward(p.modulation_predictor, c.modulation_cache, dmod_pre, grad.modulation_predictor);
  StackedFeature dx = like(dy);
  set_level_from_nchw(dx, 0, dsource);
  return dx;
}

// ---------------------------------------------------------------------------

DyReluParams::DyReluParams(Index c, Index r, double la, double lb, bool allocate)
    : channels(c), reduction(r), lambda_a(la), lambda_b(lb) {
  require_shape(r >= 1, "dyrelu: reduction must be >= 1");
  const Index hidden = std::max<Index>(1, c / r);
  fc1 = LinearParams<double>(c, hidden, allocate);
  fc2 = LinearParams<double>(hidden, 4, allocate);
}

namespace {

Tensord channel_context(const StackedFeature& f) {
  const Index L = f.levels(), S = f.positions(), C = f.channels();
  Tensord ctx(Shape{C});
  for (Index l = 0; l < L; ++l)
    for (Index s = 0; s < S; ++s) ctx.vec() += f.data.vec().segment((l * S + s) * C, C);
  ctx.vec() /= static_cast<double>(L * S);
  return ctx;
}

}  // namespace

TaskCoefficients task_coefficients(const StackedFeature& f, const DyReluParams& p, TaskAttnCache* cache) {
  require_shape(f.channels() == p.fc1.in, "task_attention: feature has " + std::to_string(f.channels()) +
                                              " channels, fc1 expects " + std::to_string(p.fc1.in));
  Tensord ctx = channel_context(f);
  Tensord hidden_pre = fully_connected(ctx, p.fc1);
  Tensord hidden = activation(Activation::relu, hidden_pre);
  Tensord theta_pre = fully_connected(hidden, p.fc2);
  // hard sigmoid remapped to [-1, 1]
  std::array<double, 4> theta{};
  for (int i = 0; i < 4; ++i) theta[i] = 2.0 * hard_sigmoid(theta_pre[i]) - 1.0;
  TaskCoefficients k{1.0 + p.lambda_a * theta[0], p.lambda_b * theta[1], p.lambda_a * theta[2],
                     p.lambda_b * theta[3]};
  if (cache) {
    cache->input = f;
    cache->context = std::move(ctx);
    cache->hidden_pre = std::move(hidden_pre);
    cache->hidden = std::move(hidden);
    cache->theta_pre = std::move(theta_pre);
    cache->coefficients = k;
  }
  return k;
}

StackedFeature apply_task_coefficients(const StackedFeature& f, const TaskCoefficients& k) {
  StackedFeature y = f;
  y.data.vec() = f.data.vec().unaryExpr(
      [&k](double v) { return std::max(k.alpha1 * v + k.beta1, k.alpha2 * v + k.beta2); });
  return y;
}

StackedFeature task_attention(const StackedFeature& f, const DyReluParams& p, TaskAttnCache* cache) {
  return apply_task_coefficients(f, task_coefficients(f, p, cache));
}

StackedFeature task_attention_backward(const DyReluParams& p, const TaskAttnCache& c, const StackedFeature& dy,
                                       DyReluParams& grad) {
  const StackedFeature& f = c.input;
  check_same_layout(f, dy, "task_attention_backward");
  const TaskCoefficients& k = c.coefficients;
  StackedFeature dx = like(f);
  double da1 = 0, db1 = 0, da2 = 0, db2 = 0;
  for (Index i = 0; i < f.data.size(); ++i) {
    const double v = f.data[i], d = dy.data[i];
    if (k.alpha1 * v + k.beta1 >= k.alpha2 * v + k.beta2) {
      dx.data[i] = k.alpha1 * d;
      da1 += v * d;
      db1 += d;
    } else {
      dx.data[i] = k.alpha2 * d;
      da2 += v * d;
      db2 += d;
    }
  }
  const std::array<double, 4> dtheta{p.lambda_a * da1, p.lambda_b * db1, p.lambda_a * da2, p.lambda_b * db2};
  Tensord dtheta_pre(Shape{4});
  for (int i = 0; i < 4; ++i)
    dtheta_pre[i] = 2.0 * dtheta[i] * activation_derivative(Activation::hard_sigmoid, c.theta_pre[i]);
  LinearGrads<double> g2 = fully_connected_backward(c.hidden, p.fc2.weight, dtheta_pre);
  grad.fc2.weight += g2.dweight;
  grad.fc2.bias += g2.dbias;
  const Tensord dhidden_pre = activation_backward(Activation::relu, c.hidden_pre, g2.dx);
  LinearGrads<double> g1 = fully_connected_backward(c.context, p.fc1.weight, dhidden_pre);
  grad.fc1.weight += g1.dweight;
  grad.fc1.bias += g1.dbias;
  const Index L = f.levels(), S = f.positions(), C = f.channels();
  const Eigen::VectorXd dctx = g1.dx.vec() / static_cast<double>(L * S);
  for (Index l = 0; l < L; ++l)
    for (Index s = 0; s < S; ++s) dx.data.vec().segment((l * S + s) * C, C) += dctx;
  return dx;
}

// ---------------------------------------------------------------------------

StackedFeature dynamic_block(const StackedFeature& f, const DynamicBlockParams& p, DynamicBlockCache* cache) {
  StackedFeature a = scale_attention(f, p.scale, cache ? &cache->scale : nullptr);
  StackedFeature b = spatial_attention(a, p.spatial, {}, cache ? &cache->spatial : nullptr);
  return task_attention(b, p.task, cache ? &cache->task : nullptr);
}

StackedFeature dynamic_block_backward(const DynamicBlockParams& p, const DynamicBlockCache& cache,
                                      const StackedFeature& dy, DynamicBlockParams& grad) {
  StackedFeature d = task_attention_backward(p.task, cache.task, dy, grad.task);
  d = spatial_attention_backward(p.spatial, cache.spatial, d, grad.spatial);
  return scale_attention_backward(p.scale, cache.scale, d, grad.scale);
}

// ---------------------------------------------------------------------------

TdaHeadParams make_tda_head(const HeadConfig& cfg, const BuildOptions& opt) {
  require_shape(cfg.num_blocks >= 1, "tda head: at least one dynamic block");
  TdaHeadParams h;
  h.num_classes = cfg.num_classes;
  h.anchors = cfg.anchors;
  for (Index b = 0; b < cfg.num_blocks; ++b) {
    DynamicBlockParams blk;
    blk.scale = ScaleAttnParams(2, opt.allocate);
    blk.spatial = SpatialAttnParams(cfg.channels, opt);
    blk.task = DyReluParams(cfg.channels, cfg.dyrelu_reduction, cfg.lambda_a, cfg.lambda_b, opt.allocate);
    h.blocks.push_back(std::move(blk));
  }
  h.mid = make_conv(cfg.channels, 2 * cfg.channels, 3, 1, Activation::leaky_relu, opt);
  h.out = make_conv(2 * cfg.channels, h.prediction_channels(), 1, 1, Activation::identity, opt);
  return h;
}

void init(TdaHeadParams& p, Rng& rng) {
  for (auto& b : p.blocks) {
    // Gates start at hard_sigmoid(0) = 0.5, inside the non-saturated range.
    b.scale.weight.set_zero();
    b.scale.bias.set_zero();
    for (auto& u : b.spatial.offset_predictor.units) u.conv.weight.set_zero(), u.conv.bias.set_zero();
    for (auto& u : b.spatial.modulation_predictor.units) u.conv.weight.set_zero(), u.conv.bias.set_zero();
    // Centre tap 2 cancels the initial modulation sigmoid(0) = 0.5.
    b.spatial.tap_weights.set_zero();
    b.spatial.tap_weights[b.spatial.taps / 2] = 2.0;
    init_uniform_fan_in(b.task.fc1, rng);
    b.task.fc2.weight.set_zero();
    b.task.fc2.bias.set_zero();
  }
  init(p.mid, rng);
  init(p.out, rng);
}

void collect(const std::string& prefix, TdaHeadParams& p, ParamList& out) {
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string bp = prefix + ".block" + std::to_string(i);
    out.push_back({bp + ".scale.weight", &b.scale.weight, Shape{b.scale.levels, b.scale.levels}, true});
    out.push_back({bp + ".scale.bias", &b.scale.bias, Shape{b.scale.levels}, true});
    collect(bp + ".spatial.offset", b.spatial.offset_predictor, out);
    collect(bp + ".spatial.modulation", b.spatial.modulation_predictor, out);
    out.push_back({bp + ".spatial.taps", &b.spatial.tap_weights, Shape{b.spatial.taps}, true});
    collect(bp + ".task.fc1", b.task.fc1, out);
    collect(bp + ".task.fc2", b.task.fc2, out);
  }
  collect(prefix + ".mid", p.mid, out);
  collect(prefix + ".out", p.out, out);
}

Tensord tda_module_forward(const Tensord& feature, const TdaHeadParams& p, TdaHeadCache* cache) {
  require_shape(p.out.out() == p.prediction_channels(),
                "tda head: output channels " + std::to_string(p.out.out()) + " != anchors * (5 + classes) = " +
                    std::to_string(p.prediction_channels()));
  require_shape(feature.rank() == 4 && feature.dim(0) == 1, "tda head: expected [1, C, H, W] input");
  StackedFeature f = concat_levels(feature);
  if (cache) {
    cache->block_inputs.clear();
    cache->blocks.assign(p.blocks.size(), {});
  }
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    if (cache) cache->block_inputs.push_back(f);
    f = dynamic_block(f, p.blocks[i], cache ? &cache->blocks[i] : nullptr);
  }
  const Tensord rec = recover(f).reshaped(feature.shape());
  if (cache) cache->last = f;
  const Tensord mid = forward(p.mid, rec, cache ? &cache->mid : nullptr);
  return forward(p.out, mid, cache ? &cache->out : nullptr);
}

Tensord tda_module_backward(const TdaHeadParams& p, const TdaHeadCache& cache, const Tensord& dy,
                            TdaHeadParams& grad) {
  Tensord d = backward(p.out, cache.out, dy, grad.out);
  d = backward(p.mid, cache.mid, d, grad.mid);
  StackedFeature ds = recover_backward(cache.last, d);
  for (std::size_t i = p.blocks.size(); i-- > 0;)
    ds = dynamic_block_backward(p.blocks[i], cache.blocks[i], ds, grad.blocks[i]);
  Tensord dx = concat_levels_backward(ds);
  return dx.reshaped(Shape{1, dx.dim(0), dx.dim(1), dx.dim(2)});
}

}  // namespace triad
