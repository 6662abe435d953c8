#include "triad/layers.hpp"

#include <cmath>

namespace triad {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::hard_sigmoid: return "hard_sigmoid";
  }
  return "identity";
}

Activation activation_from_string(const std::string& name) {
  for (Activation a : {Activation::identity, Activation::relu, Activation::leaky_relu, Activation::sigmoid,
                       Activation::hard_sigmoid})
    if (to_string(a) == name) return a;
  throw Error("unknown activation '" + name + "'");
}

void collect(const std::string& prefix, ConvParams<double>& p, ParamList& out) {
  out.push_back({prefix + ".weight", &p.weight, p.spec.weight_shape(), true});
  out.push_back({prefix + ".bias", &p.bias, Shape{p.spec.out}, true});
}

void collect(const std::string& prefix, LinearParams<double>& p, ParamList& out) {
  out.push_back({prefix + ".weight", &p.weight, Shape{p.out, p.in}, true});
  out.push_back({prefix + ".bias", &p.bias, Shape{p.out}, true});
}

void collect(const std::string& prefix, BatchNormParams<double>& p, ParamList& out) {
  const Shape s{p.channels};
  out.push_back({prefix + ".scale", &p.scale, s, true});
  out.push_back({prefix + ".shift", &p.shift, s, true});
  out.push_back({prefix + ".mean", &p.mean, s, false});
  out.push_back({prefix + ".var", &p.var, s, false});
}

Index count_params(const ParamList& params) {
  Index n = 0;
  for (const auto& p : params) n += p.count();
  return n;
}

void init_uniform_fan_in(ConvParams<double>& p, Rng& rng) {
  const double fan_in = static_cast<double>(p.spec.in / p.spec.groups * p.spec.kernel * p.spec.kernel);
  const double bound = std::sqrt(6.0 / fan_in);
  rng.fill(p.weight, -bound, bound);
  p.bias.set_zero();
}

void init_uniform_fan_in(LinearParams<double>& p, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(p.in));
  rng.fill(p.weight, -bound, bound);
  p.bias.set_zero();
}

ConvBlock make_conv(Index in, Index out, Index kernel, Index stride, Activation act, const BuildOptions& opt) {
  ConvBlock b;
  if (kernel > 1 && opt.separable) {
    b.units.push_back({ConvParams<double>(same_conv(in, in, kernel, stride, in), opt.allocate), act});
    b.units.push_back({ConvParams<double>(same_conv(in, out, 1), opt.allocate), act});
  } else {
    b.units.push_back({ConvParams<double>(same_conv(in, out, kernel, stride), opt.allocate), act});
  }
  return b;
}

void append(ConvBlock& dst, const ConvBlock& src) {
  dst.units.insert(dst.units.end(), src.units.begin(), src.units.end());
}

Tensord forward(const ConvUnit& u, const Tensord& x, ConvUnitCache* cache) {
  Tensord pre = conv2d(x, u.conv);
  Tensord y = activation(u.act, pre);
  if (cache) {
    cache->input = x;
    cache->pre = std::move(pre);
  }
  return y;
}

Tensord backward(const ConvUnit& u, const ConvUnitCache& cache, const Tensord& dy, ConvUnit& grad) {
  const Tensord dpre = activation_backward(u.act, cache.pre, dy);
  ConvGrads<double> g = conv2d_backward(cache.input, u.conv, dpre);
  grad.conv.weight += g.dweight;
  grad.conv.bias += g.dbias;
  return std::move(g.dx);
}

Tensord forward(const ConvBlock& b, const Tensord& x, ConvBlockCache* cache) {
  if (cache) cache->units.resize(b.units.size());
  Tensord h = x;
  for (std::size_t i = 0; i < b.units.size(); ++i) h = forward(b.units[i], h, cache ? &cache->units[i] : nullptr);
  return h;
}

Tensord backward(const ConvBlock& b, const ConvBlockCache& cache, const Tensord& dy, ConvBlock& grad) {
  Tensord d = dy;
  for (std::size_t i = b.units.size(); i-- > 0;) d = backward(b.units[i], cache.units[i], d, grad.units[i]);
  return d;
}

void collect(const std::string& prefix, ConvBlock& b, ParamList& out) {
  for (std::size_t i = 0; i < b.units.size(); ++i) collect(prefix + "." + std::to_string(i), b.units[i].conv, out);
}

void init(ConvBlock& b, Rng& rng) {
  for (auto& u : b.units) init_uniform_fan_in(u.conv, rng);
}

}  // namespace triad
