#include "triad/coord_attention.hpp"

namespace triad {

CAParams::CAParams(Index c, Index r, bool allocate) : channels(c), reduction(r) {
  require_shape(r >= 1 && c % r == 0, "coord attention: reduction " + std::to_string(r) +
                                          " does not divide channels " + std::to_string(c));
  squeeze = ConvParams<double>(same_conv(c, c / r, 1), allocate);
  squeeze_bn = BatchNormParams<double>(c / r, allocate);
  expand_h = ConvParams<double>(same_conv(c / r, c, 1), allocate);
  expand_w = ConvParams<double>(same_conv(c / r, c, 1), allocate);
}

void init(CAParams& p, Rng& rng) {
  init_uniform_fan_in(p.squeeze, rng);
  p.squeeze_bn = BatchNormParams<double>(p.mid());
  init_uniform_fan_in(p.expand_h, rng);
  init_uniform_fan_in(p.expand_w, rng);
}

void collect(const std::string& prefix, CAParams& p, ParamList& out) {
  collect(prefix + ".squeeze", p.squeeze, out);
  collect(prefix + ".squeeze_bn", p.squeeze_bn, out);
  collect(prefix + ".expand_h", p.expand_h, out);
  collect(prefix + ".expand_w", p.expand_w, out);
}

DirectionalPool<double> coord_embed(const Tensord& x) { return directional_pool(x); }

CoordGates coord_generate(const Tensord& q_h, const Tensord& q_w, const CAParams& p, CoordCache* cache) {
  require_shape(q_h.rank() == 4 && q_h.dim(3) == 1, "coord_generate: q_h must be [N, C, H, 1]");
  require_shape(q_w.rank() == 4 && q_w.dim(2) == 1, "coord_generate: q_w must be [N, C, 1, W]");
  require_shape(q_h.dim(0) == q_w.dim(0) && q_h.dim(1) == q_w.dim(1), "coord_generate: q_h / q_w batch or channels differ");
  require_shape(q_h.dim(1) == p.channels, "coord_generate: " + std::to_string(q_h.dim(1)) +
                                              " channels, parameters expect " + std::to_string(p.channels));
  require_shape(p.channels % p.reduction == 0, "coord_generate: reduction does not divide channels");
  const Index N = q_h.dim(0), C = q_h.dim(1), H = q_h.dim(2), W = q_w.dim(3);
  // [N, C, 1, W] and [N, C, W, 1] share one memory order.
  const Tensord q_w_col = q_w.reshaped(Shape{N, C, W, 1});
  CoordCache local;
  CoordCache& c = cache ? *cache : local;
  c.stacked = concat_axis<double>({q_h, q_w_col}, 2);
  c.squeezed = conv2d(c.stacked, p.squeeze);
  c.normed = batchnorm_inference(c.squeezed, p.squeeze_bn);
  const Tensord f = activation(Activation::relu, c.normed);
  auto parts = split_axis(f, 2, {H, W});
  c.f_h = std::move(parts[0]);
  c.f_w = std::move(parts[1]);
  c.pre_h = conv2d(c.f_h, p.expand_h);
  c.pre_w = conv2d(c.f_w, p.expand_w);
  c.gates.h = activation(Activation::sigmoid, c.pre_h);
  c.gates.w = activation(Activation::sigmoid, c.pre_w).reshaped(Shape{N, C, 1, W});
  return c.gates;
}

Tensord coord_apply(const Tensord& x, const CoordGates& g) {
  require_shape(x.rank() == 4, "coord_apply: input must be rank 4");
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require_shape(g.h.shape() == Shape{N, C, H, 1}, "coord_apply: g_h shape " + g.h.shape().str());
  require_shape(g.w.shape() == Shape{N, C, 1, W}, "coord_apply: g_w shape " + g.w.shape().str());
  Tensord y(x.shape());
  for (Index nc = 0; nc < N * C; ++nc)
    for (Index i = 0; i < H; ++i)
      for (Index j = 0; j < W; ++j) {
        const Index at = (nc * H + i) * W + j;
        y[at] = x[at] * (g.h[nc * H + i] * g.w[nc * W + j]);
      }
  return y;
}

CoordApplyGrads coord_apply_backward(const Tensord& x, const CoordGates& g, const Tensord& dy) {
  require_shape(dy.shape() == x.shape(), "coord_apply_backward: gradient shape mismatch");
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  CoordApplyGrads r{Tensord(x.shape()), {Tensord(g.h.shape()), Tensord(g.w.shape())}};
  for (Index nc = 0; nc < N * C; ++nc)
    for (Index i = 0; i < H; ++i)
      for (Index j = 0; j < W; ++j) {
        const Index at = (nc * H + i) * W + j;
        const double gh = g.h[nc * H + i], gw = g.w[nc * W + j];
        r.dx[at] = dy[at] * gh * gw;
        r.dgates.h[nc * H + i] += dy[at] * x[at] * gw;
        r.dgates.w[nc * W + j] += dy[at] * x[at] * gh;
      }
  return r;
}

Tensord coord_attention(const Tensord& x, const CAParams& p, CoordCache* cache) {
  const auto q = coord_embed(x);
  CoordCache local;
  CoordCache& c = cache ? *cache : local;
  c.input = x;
  coord_generate(q.along_h, q.along_w, p, &c);
  return coord_apply(x, c.gates);
}

Tensord coord_attention_backward(const CAParams& p, const CoordCache& c, const Tensord& dy, CAParams& grad) {
  const Tensord& x = c.input;
  const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  CoordApplyGrads ga = coord_apply_backward(x, c.gates, dy);

  const Tensord dpre_h = activation_backward(Activation::sigmoid, c.pre_h, ga.dgates.h);
  const Tensord dpre_w =
      activation_backward(Activation::sigmoid, c.pre_w, ga.dgates.w.reshaped(c.pre_w.shape()));
  ConvGrads<double> gh = conv2d_backward(c.f_h, p.expand_h, dpre_h);
  ConvGrads<double> gw = conv2d_backward(c.f_w, p.expand_w, dpre_w);
  grad.expand_h.weight += gh.dweight;
  grad.expand_h.bias += gh.dbias;
  grad.expand_w.weight += gw.dweight;
  grad.expand_w.bias += gw.dbias;

  const Tensord df = concat_axis<double>({gh.dx, gw.dx}, 2);
  const Tensord dnormed = activation_backward(Activation::relu, c.normed, df);
  BatchNormGrads<double> gb = batchnorm_inference_backward(c.squeezed, p.squeeze_bn, dnormed);
  grad.squeeze_bn.scale += gb.dscale;
  grad.squeeze_bn.shift += gb.dshift;
  ConvGrads<double> gs = conv2d_backward(c.stacked, p.squeeze, gb.dx);
  grad.squeeze.weight += gs.dweight;
  grad.squeeze.bias += gs.dbias;

  auto dq = split_axis(gs.dx, 2, {H, W});
  Tensord dx = directional_pool_backward(x.shape(), dq[0], dq[1].reshaped(Shape{N, C, 1, W}));
  dx += ga.dx;
  return dx;
}

}  // namespace triad
