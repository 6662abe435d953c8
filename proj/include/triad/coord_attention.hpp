#pragma once

// Coordinate attention: row/column pooling, a shared squeeze conv with
// batchnorm and ReLU, and separable sigmoid gates g_h(c, i) * g_w(c, j).

#include "triad/layers.hpp"

namespace triad {

struct CAParams {
  Index channels = 16;
  Index reduction = 16;
  ConvParams<double> squeeze;  // 1x1, C -> C / r
  BatchNormParams<double> squeeze_bn;
  ConvParams<double> expand_h;  // 1x1, C / r -> C
  ConvParams<double> expand_w;  // 1x1, C / r -> C

  CAParams() = default;
  CAParams(Index c, Index r, bool allocate = true);

  Index mid() const { return channels / reduction; }
};

void init(CAParams& p, Rng& rng);
void collect(const std::string& prefix, CAParams& p, ParamList& out);

struct CoordGates {
  Tensord h;  // [N, C, H, 1]
  Tensord w;  // [N, C, 1, W]
};

struct CoordCache {
  Tensord input;
  Tensord stacked;   // [N, C, H + W, 1]
  Tensord squeezed;  // after the 1x1 conv
  Tensord normed;    // after batchnorm
  Tensord f_h;       // [N, C/r, H, 1]
  Tensord f_w;       // [N, C/r, W, 1] (column layout)
  Tensord pre_h;
  Tensord pre_w;
  CoordGates gates;
};

/// Row means q_h [N, C, H, 1] and column means q_w [N, C, 1, W].
DirectionalPool<double> coord_embed(const Tensord& x);
CoordGates coord_generate(const Tensord& q_h, const Tensord& q_w, const CAParams& p, CoordCache* cache = nullptr);
Tensord coord_apply(const Tensord& x, const CoordGates& g);
Tensord coord_attention(const Tensord& x, const CAParams& p, CoordCache* cache = nullptr);

/// Gradients of y = x * g_h * g_w with respect to x and both gates.
struct CoordApplyGrads {
  Tensord dx;
  CoordGates dgates;
};
CoordApplyGrads coord_apply_backward(const Tensord& x, const CoordGates& g, const Tensord& dy);

Tensord coord_attention_backward(const CAParams& p, const CoordCache& cache, const Tensord& dy, CAParams& grad);

}  // namespace triad
