#include "triad/neck.hpp"

namespace triad {

namespace {

constexpr Activation kAct = Activation::leaky_relu;

}  // namespace

// --- backbone ------------------------------------------------------------------

BackboneParams make_backbone(const Widths& w, const BuildOptions& opt) {
  require_shape(w.c3 % 4 == 0, "backbone: c3 width " + std::to_string(w.c3) + " must be divisible by 4");
  const std::array<Index, 6> ch{3, w.c3 / 4, w.c3 / 2, w.c3, w.c4, w.c5};
  BackboneParams p;
  for (std::size_t i = 0; i < 5; ++i) p.stages[i] = make_conv(ch[i], ch[i + 1], 3, 2, kAct, opt);
  return p;
}

void init(BackboneParams& p, Rng& rng) {
  for (auto& s : p.stages) init(s, rng);
}

void collect(const std::string& prefix, BackboneParams& p, ParamList& out) {
  for (std::size_t i = 0; i < p.stages.size(); ++i) collect(prefix + ".stage" + std::to_string(i), p.stages[i], out);
}

FeaturePyramid toy_backbone(const Tensord& image, const BackboneParams& p, BackboneCache* cache) {
  require_shape(image.rank() == 4 && image.dim(1) == 3, "backbone: expected [N, 3, H, W] image, got " +
                                                            image.shape().str());
  require_shape(image.dim(2) % 32 == 0, "backbone: image height (axis 2) = " + std::to_string(image.dim(2)) +
                                            " is not divisible by 32");
  require_shape(image.dim(3) % 32 == 0, "backbone: image width (axis 3) = " + std::to_string(image.dim(3)) +
                                            " is not divisible by 32");
  FeaturePyramid fp;
  Tensord h = image;
  for (std::size_t i = 0; i < 5; ++i) {
    h = forward(p.stages[i], h, cache ? &cache->stages[i] : nullptr);
    if (i >= 2) fp[i - 2] = h;
  }
  return fp;
}

Tensord toy_backbone_backward(const BackboneParams& p, const BackboneCache& cache, const FeaturePyramid& dy,
                              BackboneParams& grad) {
  Tensord d = dy[2];
  for (std::size_t i = 5; i-- > 0;) {
    if (i >= 2 && i < 4) d += dy[i - 2];
    d = backward(p.stages[i], cache.stages[i], d, grad.stages[i]);
  }
  return d;
}

// --- SPP -------------------------------------------------------------------------

Tensord spp(const Tensord& x, const std::vector<Index>& pools) {
  std::vector<Tensord> parts{x};
  for (Index k : pools) parts.push_back(max_pool2d(x, k));
  return concat_axis(parts, 1);
}

Tensord spp_backward(const Tensord& x, const std::vector<Index>& pools, const Tensord& dy) {
  std::vector<Index> sizes(pools.size() + 1, x.dim(1));
  auto parts = split_axis(dy, 1, sizes);
  Tensord dx = parts[0];
  for (std::size_t i = 0; i < pools.size(); ++i) dx += max_pool2d_backward(x, pools[i], parts[i + 1]);
  return dx;
}

// --- CSP layer -------------------------------------------------------------------

CspLayerParams make_csp_layer(Index in, Index out, Index depth, const BuildOptions& opt) {
  require_shape(out % 2 == 0, "csp layer: output width " + std::to_string(out) + " must be even");
  const Index hidden = out / 2;
  CspLayerParams p;
  p.main = make_conv(in, hidden, 1, 1, kAct, opt);
  p.bypass = make_conv(in, hidden, 1, 1, kAct, opt);
  for (Index i = 0; i < depth; ++i)
    p.bottlenecks.push_back({make_conv(hidden, hidden, 1, 1, kAct, opt), make_conv(hidden, hidden, 3, 1, kAct, opt),
                             true});
  p.merge = make_conv(2 * hidden, out, 1, 1, kAct, opt);
  return p;
}

Tensord csp_layer(const Tensord& x, const CspLayerParams& p, CspCache* cache) {
  require_shape(x.rank() == 4 && x.dim(1) == p.main.in(), "csp layer: input width " + std::to_string(x.dim(1)) +
                                                              ", expected " + std::to_string(p.main.in()));
  if (cache) cache->bottlenecks.assign(p.bottlenecks.size(), {});
  Tensord a = forward(p.main, x, cache ? &cache->main : nullptr);
  for (std::size_t i = 0; i < p.bottlenecks.size(); ++i) {
    const Bottleneck& b = p.bottlenecks[i];
    Tensord r = forward(b.reduce, a, cache ? &cache->bottlenecks[i].first : nullptr);
    r = forward(b.conv, r, cache ? &cache->bottlenecks[i].second : nullptr);
    if (b.shortcut) r += a;
    a = std::move(r);
  }
  const Tensord c = forward(p.bypass, x, cache ? &cache->bypass : nullptr);
  if (cache) cache->hidden = a.dim(1);
  return forward(p.merge, concat_axis<double>({a, c}, 1), cache ? &cache->merge : nullptr);
}

Tensord csp_layer_backward(const CspLayerParams& p, const CspCache& cache, const Tensord& dy, CspLayerParams& grad) {
  Tensord dcat = backward(p.merge, cache.merge, dy, grad.merge);
  auto parts = split_axis(dcat, 1, {cache.hidden, dcat.dim(1) - cache.hidden});
  Tensord da = parts[0];
  for (std::size_t i = p.bottlenecks.size(); i-- > 0;) {
    const Bottleneck& b = p.bottlenecks[i];
    Tensord dr = backward(b.conv, cache.bottlenecks[i].second, da, grad.bottlenecks[i].conv);
    dr = backward(b.reduce, cache.bottlenecks[i].first, dr, grad.bottlenecks[i].reduce);
    if (b.shortcut) dr += da;
    da = std::move(dr);
  }
  Tensord dx = backward(p.main, cache.main, da, grad.main);
  dx += backward(p.bypass, cache.bypass, parts[1], grad.bypass);
  return dx;
}

// --- fusion blocks ----------------------------------------------------------------

ConvBlock make_five_conv(Index in, Index mid, const BuildOptions& opt) {
  ConvBlock b = make_conv(in, mid, 1, 1, kAct, opt);
  append(b, make_conv(mid, 2 * mid, 3, 1, kAct, opt));
  append(b, make_conv(2 * mid, mid, 1, 1, kAct, opt));
  append(b, make_conv(mid, 2 * mid, 3, 1, kAct, opt));
  append(b, make_conv(2 * mid, mid, 1, 1, kAct, opt));
  return b;
}

ConvBlock make_three_conv(Index in, Index mid, const BuildOptions& opt) {
  ConvBlock b = make_conv(in, mid, 1, 1, kAct, opt);
  append(b, make_conv(mid, 2 * mid, 3, 1, kAct, opt));
  append(b, make_conv(2 * mid, mid, 1, 1, kAct, opt));
  return b;
}

FuseBlock make_fuse_block(Index in, Index out, bool csp, const BuildOptions& opt) {
  FuseBlock b;
  b.csp = csp;
  if (csp)
    b.csp_layer = make_csp_layer(in, out, 1, opt);
  else
    b.plain = make_five_conv(in, out, opt);
  return b;
}

Tensord forward(const FuseBlock& b, const Tensord& x, FuseCache* cache) {
  return b.csp ? csp_layer(x, b.csp_layer, cache ? &cache->csp : nullptr)
               : forward(b.plain, x, cache ? &cache->plain : nullptr);
}

Tensord backward(const FuseBlock& b, const FuseCache& cache, const Tensord& dy, FuseBlock& grad) {
  return b.csp ? csp_layer_backward(b.csp_layer, cache.csp, dy, grad.csp_layer)
               : backward(b.plain, cache.plain, dy, grad.plain);
}

void init(CspLayerParams& p, Rng& rng) {
  init(p.main, rng);
  init(p.bypass, rng);
  for (auto& bn : p.bottlenecks) {
    init(bn.reduce, rng);
    init(bn.conv, rng);
  }
  init(p.merge, rng);
}

void collect(const std::string& prefix, CspLayerParams& p, ParamList& out) {
  collect(prefix + ".main", p.main, out);
  collect(prefix + ".bypass", p.bypass, out);
  for (std::size_t i = 0; i < p.bottlenecks.size(); ++i) {
    collect(prefix + ".bottleneck" + std::to_string(i) + ".reduce", p.bottlenecks[i].reduce, out);
    collect(prefix + ".bottleneck" + std::to_string(i) + ".conv", p.bottlenecks[i].conv, out);
  }
  collect(prefix + ".merge", p.merge, out);
}

void init(FuseBlock& b, Rng& rng) {
  if (b.csp)
    init(b.csp_layer, rng);
  else
    init(b.plain, rng);
}

void collect(const std::string& prefix, FuseBlock& b, ParamList& out) {
  if (b.csp)
    collect(prefix, b.csp_layer, out);
  else
    collect(prefix, b.plain, out);
}

// --- neck ------------------------------------------------------------------------

NeckParams make_neck(const Widths& w, bool csp, const BuildOptions& opt) {
  require_shape(w.c3 % 2 == 0 && w.c4 % 2 == 0 && w.c5 % 2 == 0, "neck: widths must be even");
  const Index h3 = w.c3 / 2, h4 = w.c4 / 2, h5 = w.c5 / 2;
  if (csp) require_shape(h3 % 2 == 0 && h4 % 2 == 0 && h5 % 2 == 0, "neck: CSP needs widths divisible by 4");
  NeckParams p;
  p.widths = w;
  p.csp = csp;
  p.spp_pre = make_fuse_block(w.c5, h5, false, opt);
  p.spp_post = make_fuse_block(4 * h5, h5, false, opt);
  p.reduce5 = make_conv(h5, h4, 1, 1, kAct, opt);
  p.lateral4 = make_three_conv(w.c4, h4, opt);
  p.fuse4 = make_fuse_block(2 * h4, h4, csp, opt);
  p.reduce4 = make_conv(h4, h3, 1, 1, kAct, opt);
  p.lateral3 = make_three_conv(w.c3, h3, opt);
  p.fuse3 = make_fuse_block(2 * h3, h3, csp, opt);
  p.down3 = make_conv(h3, h4, 3, 2, kAct, opt);
  p.fuse4_out = make_fuse_block(2 * h4, h4, csp, opt);
  p.down4 = make_conv(h4, h5, 3, 2, kAct, opt);
  p.fuse5_out = make_fuse_block(2 * h5, h5, csp, opt);
  return p;
}

void init(NeckParams& p, Rng& rng) {
  for (FuseBlock* b : {&p.spp_pre, &p.spp_post, &p.fuse4, &p.fuse3, &p.fuse4_out, &p.fuse5_out}) init(*b, rng);
  for (ConvBlock* b : {&p.reduce5, &p.lateral4, &p.reduce4, &p.lateral3, &p.down3, &p.down4}) init(*b, rng);
}

void collect(const std::string& prefix, NeckParams& p, ParamList& out) {
  collect(prefix + ".spp_pre", p.spp_pre, out);
  collect(prefix + ".spp_post", p.spp_post, out);
  collect(prefix + ".reduce5", p.reduce5, out);
  collect(prefix + ".lateral4", p.lateral4, out);
  collect(prefix + ".fuse4", p.fuse4, out);
  collect(prefix + ".reduce4", p.reduce4, out);
  collect(prefix + ".lateral3", p.lateral3, out);
  collect(prefix + ".fuse3", p.fuse3, out);
  collect(prefix + ".down3", p.down3, out);
  collect(prefix + ".fuse4_out", p.fuse4_out, out);
  collect(prefix + ".down4", p.down4, out);
  collect(prefix + ".fuse5_out", p.fuse5_out, out);
}

FeaturePyramid neck_forward(const FeaturePyramid& c, const NeckParams& p, const std::array<CAParams, 3>& ca,
                            NeckCache* cache) {
  for (std::size_t i = 0; i < 3; ++i)
    require_shape(c[i].rank() == 4 && c[i].dim(1) == p.widths[i],
                  "neck: level " + std::to_string(i + 3) + " has " + std::to_string(c[i].dim(1)) +
                      " channels, expected " + std::to_string(p.widths[i]));
  std::array<Tensord, 3> a;
  for (std::size_t i = 0; i < 3; ++i) a[i] = coord_attention(c[i], ca[i], cache ? &cache->ca[i] : nullptr);

  const Tensord x5 = forward(p.spp_pre, a[2], cache ? &cache->spp_pre : nullptr);
  const Tensord t5 = forward(p.spp_post, spp(x5), cache ? &cache->spp_post : nullptr);
  const Tensord u5 = upsample_nearest2x(forward(p.reduce5, t5, cache ? &cache->reduce5 : nullptr));
  const Tensord l4 = forward(p.lateral4, a[1], cache ? &cache->lateral4 : nullptr);
  const Tensord t4 = forward(p.fuse4, concat_axis<double>({l4, u5}, 1), cache ? &cache->fuse4 : nullptr);
  const Tensord u4 = upsample_nearest2x(forward(p.reduce4, t4, cache ? &cache->reduce4 : nullptr));
  const Tensord l3 = forward(p.lateral3, a[0], cache ? &cache->lateral3 : nullptr);

  FeaturePyramid out;
  out[0] = forward(p.fuse3, concat_axis<double>({l3, u4}, 1), cache ? &cache->fuse3 : nullptr);
  const Tensord d3 = forward(p.down3, out[0], cache ? &cache->down3 : nullptr);
  out[1] = forward(p.fuse4_out, concat_axis<double>({d3, t4}, 1), cache ? &cache->fuse4_out : nullptr);
  const Tensord d4 = forward(p.down4, out[1], cache ? &cache->down4 : nullptr);
  out[2] = forward(p.fuse5_out, concat_axis<double>({d4, t5}, 1), cache ? &cache->fuse5_out : nullptr);
  if (cache) {
    cache->ca_out = a;
    cache->spp_in = x5;
  }
  return out;
}

FeaturePyramid neck_backward(const NeckParams& p, const std::array<CAParams, 3>& ca, const NeckCache& c,
                             const FeaturePyramid& dy, NeckParams& g, std::array<CAParams, 3>& ca_grad) {
  const Index h3 = p.widths.c3 / 2, h4 = p.widths.c4 / 2, h5 = p.widths.c5 / 2;

  auto d5 = split_axis(backward(p.fuse5_out, c.fuse5_out, dy[2], g.fuse5_out), 1, {h5, h5});
  Tensord dt5 = d5[1];
  Tensord dp4 = dy[1];
  dp4 += backward(p.down4, c.down4, d5[0], g.down4);

  auto d4 = split_axis(backward(p.fuse4_out, c.fuse4_out, dp4, g.fuse4_out), 1, {h4, h4});
  Tensord dt4 = d4[1];
  Tensord dp3 = dy[0];
  dp3 += backward(p.down3, c.down3, d4[0], g.down3);

  auto d3 = split_axis(backward(p.fuse3, c.fuse3, dp3, g.fuse3), 1, {h3, h3});
  FeaturePyramid dc;
  dc[0] = backward(p.lateral3, c.lateral3, d3[0], g.lateral3);
  dt4 += backward(p.reduce4, c.reduce4, upsample_nearest2x_backward(d3[1]), g.reduce4);

  auto dtd4 = split_axis(backward(p.fuse4, c.fuse4, dt4, g.fuse4), 1, {h4, h4});
  dc[1] = backward(p.lateral4, c.lateral4, dtd4[0], g.lateral4);
  dt5 += backward(p.reduce5, c.reduce5, upsample_nearest2x_backward(dtd4[1]), g.reduce5);

  const Tensord dspp = backward(p.spp_post, c.spp_post, dt5, g.spp_post);
  const Tensord dx5 = spp_backward(c.spp_in, {5, 9, 13}, dspp);
  dc[2] = backward(p.spp_pre, c.spp_pre, dx5, g.spp_pre);

  for (std::size_t i = 0; i < 3; ++i) dc[i] = coord_attention_backward(ca[i], c.ca[i], dc[i], ca_grad[i]);
  return dc;
}

}  // namespace triad
