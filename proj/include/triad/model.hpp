#pragma once

// Whole detector: toy backbone, coordinate attention on C3/C4/C5, the neck,
// and one attention head per pyramid level. Also the flat key = value
// configuration and variant presets.

#include "triad/attention_head.hpp"
#include "triad/augment.hpp"
#include "triad/neck.hpp"
#include "triad/postproc.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace triad {

enum class Variant { full, tiny, nano, x_toy };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct ModelConfig {
  Variant variant = Variant::full;
  Index num_classes = 2;
  Widths widths{16, 32, 64};
  std::array<std::vector<Anchor>, 3> anchors;
  bool csp = true;
  std::uint64_t seed = 0;
  Index image_size = 64;

  double conf_threshold = 0.25;
  double nms_threshold = 0.45;
  LossConfig loss;

  Index ca_ratio = 16;
  Index dyrelu_reduction = 4;
  double lambda_a = 1.0;
  double lambda_b = 0.5;

  Index head_blocks = 2;
  bool separable = false;
  bool mixup = false;
  MosaicRanges mosaic;

  double lr = 0.01;

  /// Defaults of a variant: block count, separable convs, augmentation and widths.
  static ModelConfig preset(Variant v);
  void validate() const;
  std::vector<LevelSpec> levels() const;
};

/// Parses `key = value` lines ('#' starts a comment). `model.variant` is
/// applied first so that the remaining keys override its preset.
ModelConfig parse_config(const std::string& text);
ModelConfig load_config(const std::string& path);
std::string serialize_config(const ModelConfig& cfg);

struct Model {
  ModelConfig config;
  BackboneParams backbone;
  std::array<CAParams, 3> ca;
  NeckParams neck;
  std::array<TdaHeadParams, 3> heads;
};

/// Builds and (when allocating) seeds every parameter from cfg.seed.
Model build_model(const ModelConfig& cfg, bool allocate = true);
/// Same structure, every tensor zero (also the gradient container).
Model zeros_like(const Model& m);

ParamList parameters(Model& m);
/// FNV-1a over names and single-precision parameter bytes.
std::uint64_t parameter_checksum(Model& m);

/// Per-module scalar counts in build order.
std::vector<std::pair<std::string, Index>> parameter_table(Model& m);

Index ca_tap_count(const Model& m);
Index blocks_per_head(const Model& m);
/// True when every spatial conv in the model is grouped with groups == in == out.
bool all_spatial_convs_depthwise(const Model& m);

struct ModelCache {
  BackboneCache backbone;
  NeckCache neck;
  std::array<TdaHeadCache, 3> heads;
};

struct ForwardResult {
  FeaturePyramid backbone;  // C3 / C4 / C5
  FeaturePyramid neck;      // P3 / P4 / P5
  std::array<Tensord, 3> raw;
};

/// image: [1, 3, H, W] with H and W divisible by 32.
ForwardResult forward(const Model& m, const Tensord& image, ModelCache* cache = nullptr);
void backward(const Model& m, const ModelCache& cache, const std::array<Tensord, 3>& draw, Model& grad);

/// Decode on every level, then DIoU-NMS.
std::vector<Detection> detect(const Model& m, const ForwardResult& r);

}  // namespace triad
