#pragma once

// Parameterized building blocks shared by the backbone, neck and heads.
// Everything above the kernel level runs in double precision.

#include "triad/ops.hpp"
#include "triad/random.hpp"

#include <string>
#include <vector>

namespace triad {

/// A named parameter slot. `shape` is the declared shape, valid even when the
/// owning structure was built without storage (parameter audits at full width).
struct ParamRef {
  std::string name;
  Tensord* tensor = nullptr;
  Shape shape;
  bool trainable = true;

  Index count() const { return shape.size(); }
};

using ParamList = std::vector<ParamRef>;

void collect(const std::string& prefix, ConvParams<double>& p, ParamList& out);
void collect(const std::string& prefix, LinearParams<double>& p, ParamList& out);
void collect(const std::string& prefix, BatchNormParams<double>& p, ParamList& out);

/// Total declared scalar count.
Index count_params(const ParamList& params);

/// Fan-in scaled uniform init (Kaiming bound sqrt(6 / fan_in)) for weights, zero bias.
void init_uniform_fan_in(ConvParams<double>& p, Rng& rng);
void init_uniform_fan_in(LinearParams<double>& p, Rng& rng);

/// Convolution followed by a pointwise activation.
struct ConvUnit {
  ConvParams<double> conv;
  Activation act = Activation::identity;
};

struct ConvUnitCache {
  Tensord input;
  Tensord pre;
};

/// Sequence of conv units applied in order. A depth-wise separable 3x3 conv
/// is two units: a grouped 3x3 and a pointwise 1x1.
struct ConvBlock {
  std::vector<ConvUnit> units;

  Index in() const { return units.front().conv.spec.in; }
  Index out() const { return units.back().conv.spec.out; }
};

struct ConvBlockCache {
  std::vector<ConvUnitCache> units;
};

/// Options shared by every block builder.
struct BuildOptions {
  bool allocate = true;
  bool separable = false;  // spatial convs become depth-wise + point-wise
};

ConvBlock make_conv(Index in, Index out, Index kernel, Index stride, Activation act, const BuildOptions& opt);
void append(ConvBlock& dst, const ConvBlock& src);

Tensord forward(const ConvUnit& u, const Tensord& x, ConvUnitCache* cache = nullptr);
Tensord backward(const ConvUnit& u, const ConvUnitCache& cache, const Tensord& dy, ConvUnit& grad);

Tensord forward(const ConvBlock& b, const Tensord& x, ConvBlockCache* cache = nullptr);
Tensord backward(const ConvBlock& b, const ConvBlockCache& cache, const Tensord& dy, ConvBlock& grad);

void collect(const std::string& prefix, ConvBlock& b, ParamList& out);
void init(ConvBlock& b, Rng& rng);

/// Visits every spatial (kernel > 1) convolution in a block.
template <typename F>
void for_each_spatial_conv(const ConvBlock& b, F&& f) {
  for (const auto& u : b.units)
    if (u.conv.spec.kernel > 1) f(u.conv.spec);
}

}  // namespace triad
