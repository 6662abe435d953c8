#pragma once

// Toy strided backbone and the PAN-style neck: coordinate attention on the
// three taps, SPP wrapped in five-conv blocks, three-conv laterals, and
// five-conv (or CSP) fusion blocks on the top-down and bottom-up paths.

#include "triad/coord_attention.hpp"
#include "triad/layers.hpp"

#include <array>

namespace triad {

/// C3 / C4 / C5 (backbone) or P3 / P4 / P5 (neck), strides 8 / 16 / 32.
struct FeaturePyramid {
  std::array<Tensord, 3> levels;

  const Tensord& operator[](std::size_t i) const { return levels[i]; }
  Tensord& operator[](std::size_t i) { return levels[i]; }
};

inline constexpr std::array<Index, 3> kPyramidStrides{8, 16, 32};

struct Widths {
  Index c3 = 16;
  Index c4 = 32;
  Index c5 = 64;

  Index operator[](std::size_t i) const { return i == 0 ? c3 : (i == 1 ? c4 : c5); }
};

// --- backbone ------------------------------------------------------------------

/// Five stride-2 3x3 conv stages: 3 -> c3/4 -> c3/2 -> c3 -> c4 -> c5.
struct BackboneParams {
  std::array<ConvBlock, 5> stages;
};

BackboneParams make_backbone(const Widths& w, const BuildOptions& opt);
void init(BackboneParams& p, Rng& rng);
void collect(const std::string& prefix, BackboneParams& p, ParamList& out);

struct BackboneCache {
  std::array<ConvBlockCache, 5> stages;
};

FeaturePyramid toy_backbone(const Tensord& image, const BackboneParams& p, BackboneCache* cache = nullptr);
/// Returns the image gradient (rarely needed, kept for completeness of the chain).
Tensord toy_backbone_backward(const BackboneParams& p, const BackboneCache& cache, const FeaturePyramid& dy,
                              BackboneParams& grad);

// --- SPP -------------------------------------------------------------------------

/// concat(x, maxpool5(x), maxpool9(x), maxpool13(x)) along channels.
Tensord spp(const Tensord& x, const std::vector<Index>& pools = {5, 9, 13});
Tensord spp_backward(const Tensord& x, const std::vector<Index>& pools, const Tensord& dy);

// --- CSP layer -------------------------------------------------------------------

struct Bottleneck {
  ConvBlock reduce;  // 1x1
  ConvBlock conv;    // 3x3
  bool shortcut = true;
};

struct CspLayerParams {
  ConvBlock main;   // 1x1, in -> hidden, feeds the bottlenecks
  ConvBlock bypass; // 1x1, in -> hidden, shortcut branch
  std::vector<Bottleneck> bottlenecks;
  ConvBlock merge;  // 1x1, 2 * hidden -> out
};

CspLayerParams make_csp_layer(Index in, Index out, Index depth, const BuildOptions& opt);
void init(CspLayerParams& p, Rng& rng);
void collect(const std::string& prefix, CspLayerParams& p, ParamList& out);

struct CspCache {
  ConvBlockCache main;
  ConvBlockCache bypass;
  std::vector<std::pair<ConvBlockCache, ConvBlockCache>> bottlenecks;
  ConvBlockCache merge;
  Index hidden = 0;
};

Tensord csp_layer(const Tensord& x, const CspLayerParams& p, CspCache* cache = nullptr);
Tensord csp_layer_backward(const CspLayerParams& p, const CspCache& cache, const Tensord& dy, CspLayerParams& grad);

// --- fusion block: five convs or a CSP layer -------------------------------------

/// 1x1 in->mid, 3x3 mid->2mid, 1x1 2mid->mid, 3x3 mid->2mid, 1x1 2mid->mid.
ConvBlock make_five_conv(Index in, Index mid, const BuildOptions& opt);
/// 1x1 in->mid, 3x3 mid->2mid, 1x1 2mid->mid.
ConvBlock make_three_conv(Index in, Index mid, const BuildOptions& opt);

struct FuseBlock {
  bool csp = false;
  ConvBlock plain;
  CspLayerParams csp_layer;
};

FuseBlock make_fuse_block(Index in, Index out, bool csp, const BuildOptions& opt);
void init(FuseBlock& b, Rng& rng);
void collect(const std::string& prefix, FuseBlock& b, ParamList& out);

struct FuseCache {
  ConvBlockCache plain;
  CspCache csp;
};

Tensord forward(const FuseBlock& b, const Tensord& x, FuseCache* cache = nullptr);
Tensord backward(const FuseBlock& b, const FuseCache& cache, const Tensord& dy, FuseBlock& grad);

// --- neck ------------------------------------------------------------------------

struct NeckParams {
  Widths widths;
  bool csp = true;
  FuseBlock spp_pre;    // c5 -> c5/2
  FuseBlock spp_post;   // 4 * c5/2 -> c5/2
  ConvBlock reduce5;    // 1x1, c5/2 -> c4/2, then upsampled
  ConvBlock lateral4;   // three convs on C4, c4 -> c4/2
  FuseBlock fuse4;      // c4 -> c4/2 (top-down)
  ConvBlock reduce4;    // 1x1, c4/2 -> c3/2, then upsampled
  ConvBlock lateral3;   // three convs on C3, c3 -> c3/2
  FuseBlock fuse3;      // c3 -> c3/2, emits P3
  ConvBlock down3;      // 3x3 stride 2, c3/2 -> c4/2
  FuseBlock fuse4_out;  // c4 -> c4/2, emits P4
  ConvBlock down4;      // 3x3 stride 2, c4/2 -> c5/2
  FuseBlock fuse5_out;  // c5 -> c5/2, emits P5

  std::array<Index, 3> out_channels() const { return {widths.c3 / 2, widths.c4 / 2, widths.c5 / 2}; }
};

NeckParams make_neck(const Widths& w, bool csp, const BuildOptions& opt);
void init(NeckParams& p, Rng& rng);
void collect(const std::string& prefix, NeckParams& p, ParamList& out);

struct NeckCache {
  std::array<CoordCache, 3> ca;
  std::array<Tensord, 3> ca_out;
  FuseCache spp_pre, spp_post, fuse4, fuse3, fuse4_out, fuse5_out;
  Tensord spp_in;
  ConvBlockCache reduce5, lateral4, reduce4, lateral3, down3, down4;
};

/// Coordinate attention on C3/C4/C5, then the SPP, top-down and bottom-up paths.
FeaturePyramid neck_forward(const FeaturePyramid& c, const NeckParams& p, const std::array<CAParams, 3>& ca,
                            NeckCache* cache = nullptr);
FeaturePyramid neck_backward(const NeckParams& p, const std::array<CAParams, 3>& ca, const NeckCache& cache,
                             const FeaturePyramid& dy, NeckParams& grad, std::array<CAParams, 3>& ca_grad);

/// Visits the spec of every spatial conv in a neck or backbone.
template <typename F>
void for_each_spatial_conv(const FuseBlock& b, F&& f) {
  if (!b.csp) {
    for_each_spatial_conv(b.plain, f);
    return;
  }
  for_each_spatial_conv(b.csp_layer.main, f);
  for_each_spatial_conv(b.csp_layer.bypass, f);
  for (const auto& bn : b.csp_layer.bottlenecks) {
    for_each_spatial_conv(bn.reduce, f);
    for_each_spatial_conv(bn.conv, f);
  }
  for_each_spatial_conv(b.csp_layer.merge, f);
}

template <typename F>
void for_each_spatial_conv(const NeckParams& p, F&& f) {
  for (const FuseBlock* b : {&p.spp_pre, &p.spp_post, &p.fuse4, &p.fuse3, &p.fuse4_out, &p.fuse5_out})
    for_each_spatial_conv(*b, f);
  for (const ConvBlock* b : {&p.reduce5, &p.lateral4, &p.reduce4, &p.lateral3, &p.down3, &p.down4})
    for_each_spatial_conv(*b, f);
}

}  // namespace triad
