#pragma once

// Triple-awareness detection head: a single feature level is stacked with
// itself, passed through Dynamic Blocks (scale gate, deformable spatial
// aggregation, dynamic ReLU), averaged back to C x H x W and decoded by a
// YOLO head.

#include "triad/layers.hpp"

#include <array>
#include <vector>

namespace triad {

/// Levels x positions x channels, with the spatial extents needed to recover
/// the C x H x W view.
struct StackedFeature {
  Tensord data;  // [levels, H*W, C]
  Index height = 1;
  Index width = 1;

  Index levels() const { return data.dim(0); }
  Index positions() const { return data.dim(1); }
  Index channels() const { return data.dim(2); }
};

/// Stacks a C x H x W feature with itself into two levels.
StackedFeature concat_levels(const Tensord& feature);
/// Mean over levels, reshaped to C x H x W.
Tensord recover(const StackedFeature& f);
/// Backward of recover: each level receives half of the C x H x W gradient.
StackedFeature recover_backward(const StackedFeature& like, const Tensord& dy);
/// Sum of level gradients, reshaped to C x H x W (backward of concat_levels).
Tensord concat_levels_backward(const StackedFeature& d);

/// One level as a [1, C, H, W] tensor and the inverse placement.
Tensord level_as_nchw(const StackedFeature& f, Index level);
void set_level_from_nchw(StackedFeature& f, Index level, const Tensord& x);

// --- scale-aware attention -------------------------------------------------

struct ScaleAttnParams {
  Index levels = 2;
  Tensord weight;  // [levels, levels]
  Tensord bias;    // [levels]

  ScaleAttnParams() = default;
  explicit ScaleAttnParams(Index l, bool allocate = true);
};

struct ScaleAttnCache {
  StackedFeature input;
  Tensord means;  // [levels]
  Tensord pre;    // [levels], before the hard sigmoid
};

/// Per-level gate hard_sigmoid(W * mean + b), broadcast over positions and channels.
Tensord scale_gates(const StackedFeature& f, const ScaleAttnParams& p);
StackedFeature scale_attention(const StackedFeature& f, const ScaleAttnParams& p, ScaleAttnCache* cache = nullptr);
StackedFeature scale_attention_backward(const ScaleAttnParams& p, const ScaleAttnCache& cache,
                                        const StackedFeature& dy, ScaleAttnParams& grad);

// --- spatial-aware attention -----------------------------------------------

struct SpatialAttnParams {
  Index channels = 1;
  Index taps = 9;
  std::vector<std::array<int, 2>> base_offsets;  // (dy, dx) of a 3x3 stencil
  ConvBlock offset_predictor;                    // C -> 2 * taps, (dy, dx) interleaved per tap
  ConvBlock modulation_predictor;                // C -> taps, pre-sigmoid
  Tensord tap_weights;                           // [taps]

  SpatialAttnParams() = default;
  SpatialAttnParams(Index c, const BuildOptions& opt);
};

struct SpatialAttnOptions {
  /// Use modulation 1 instead of sigmoid(predictor output).
  bool unit_modulation = false;
};

struct SpatialAttnCache {
  Tensord source;  // aggregation level as [1, C, H, W]
  Tensord offsets;
  Tensord modulation_pre;
  ConvBlockCache offset_cache;
  ConvBlockCache modulation_cache;
  Index levels = 2;
  SpatialAttnOptions options;
};

StackedFeature spatial_attention(const StackedFeature& f, const SpatialAttnParams& p,
                                 const SpatialAttnOptions& opt = {}, SpatialAttnCache* cache = nullptr);
StackedFeature spatial_attention_backward(const SpatialAttnParams& p, const SpatialAttnCache& cache,
                                          const StackedFeature& dy, SpatialAttnParams& grad);

// --- task-aware attention (dynamic ReLU, shared coefficients) ---------------

struct DyReluParams {
  Index channels = 1;
  Index reduction = 4;
  double lambda_a = 1.0;
  double lambda_b = 0.5;
  LinearParams<double> fc1;  // C -> C / reduction
  LinearParams<double> fc2;  // C / reduction -> 4

  DyReluParams() = default;
  DyReluParams(Index c, Index r, double la, double lb, bool allocate = true);
};

/// (alpha1, beta1, alpha2, beta2) of max(alpha1 x + beta1, alpha2 x + beta2).
struct TaskCoefficients {
  double alpha1 = 1.0;
  double beta1 = 0.0;
  double alpha2 = 0.0;
  double beta2 = 0.0;
};

struct TaskAttnCache {
  StackedFeature input;
  Tensord context;
  Tensord hidden_pre;
  Tensord hidden;
  Tensord theta_pre;
  TaskCoefficients coefficients;
};

TaskCoefficients task_coefficients(const StackedFeature& f, const DyReluParams& p, TaskAttnCache* cache = nullptr);
StackedFeature apply_task_coefficients(const StackedFeature& f, const TaskCoefficients& k);
StackedFeature task_attention(const StackedFeature& f, const DyReluParams& p, TaskAttnCache* cache = nullptr);
StackedFeature task_attention_backward(const DyReluParams& p, const TaskAttnCache& cache, const StackedFeature& dy,
                                       DyReluParams& grad);

// --- dynamic block -----------------------------------------------------------

struct DynamicBlockParams {
  ScaleAttnParams scale;
  SpatialAttnParams spatial;
  DyReluParams task;
};

struct DynamicBlockCache {
  ScaleAttnCache scale;
  SpatialAttnCache spatial;
  TaskAttnCache task;
};

StackedFeature dynamic_block(const StackedFeature& f, const DynamicBlockParams& p,
                             DynamicBlockCache* cache = nullptr);
StackedFeature dynamic_block_backward(const DynamicBlockParams& p, const DynamicBlockCache& cache,
                                      const StackedFeature& dy, DynamicBlockParams& grad);

// --- full head ----------------------------------------------------------------

struct HeadConfig {
  Index channels = 8;
  Index num_blocks = 2;
  Index num_classes = 2;
  Index anchors = 3;
  Index dyrelu_reduction = 4;
  double lambda_a = 1.0;
  double lambda_b = 0.5;
};

struct TdaHeadParams {
  std::vector<DynamicBlockParams> blocks;
  ConvBlock mid;  // 3x3 conv, C -> 2C, leaky ReLU
  ConvBlock out;  // 1x1 conv, 2C -> anchors * (5 + classes)
  Index num_classes = 2;
  Index anchors = 3;

  Index prediction_channels() const { return anchors * (5 + num_classes); }
};

TdaHeadParams make_tda_head(const HeadConfig& cfg, const BuildOptions& opt);
void init(TdaHeadParams& p, Rng& rng);
void collect(const std::string& prefix, TdaHeadParams& p, ParamList& out);

struct TdaHeadCache {
  std::vector<StackedFeature> block_inputs;
  std::vector<DynamicBlockCache> blocks;
  StackedFeature last;
  ConvBlockCache mid;
  ConvBlockCache out;
};

/// [1, C, H, W] -> raw predictions [1, anchors * (5 + classes), H, W].
Tensord tda_module_forward(const Tensord& feature, const TdaHeadParams& p, TdaHeadCache* cache = nullptr);
Tensord tda_module_backward(const TdaHeadParams& p, const TdaHeadCache& cache, const Tensord& dy,
                            TdaHeadParams& grad);

}  // namespace triad
