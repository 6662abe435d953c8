#pragma once

// Synthetic rectangle scenes and a plain gradient-descent loop used as a
// training smoke test.

#include "triad/augment.hpp"
#include "triad/model.hpp"

#include <cstdint>
#include <vector>

namespace triad {

/// A size x size image on a dim background with one or two filled
/// rectangles. Class 0 rectangles are warm (red dominant), class 1 cool
/// (blue dominant).
LabeledImage synthetic_image(Index size, Index num_classes, Rng& rng);

/// Four synthetic images combined once: mixup of the first two when the
/// configuration asks for mixup, otherwise a mosaic with the configured ranges.
LabeledImage training_scene(const ModelConfig& cfg, std::uint64_t seed);

struct TrainOptions {
  int steps = 200;
  double lr = 0.01;
};

/// Loss before each update plus the final loss (steps + 1 values). The model
/// is updated in place. Throws when the loss turns non-finite.
std::vector<double> train_toy(Model& m, const LabeledImage& scene, const TrainOptions& opt);

/// Loss and raw-prediction gradients of the model on one labelled image.
LossBreakdown model_loss(const Model& m, const LabeledImage& scene, ModelCache* cache = nullptr);

}  // namespace triad
