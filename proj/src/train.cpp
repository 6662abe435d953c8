#include "triad/train.hpp"

#include <cmath>

namespace triad {

LabeledImage synthetic_image(Index size, Index num_classes, Rng& rng) {
  LabeledImage img{Tensord(Shape{3, size, size}), {}};
  for (Index c = 0; c < 3; ++c) {
    const double bg = rng.uniform(0.1, 0.3);
    for (Index i = 0; i < size * size; ++i) img.pixels[c * size * size + i] = bg;
  }
  const Index count = 1 + rng.below(2);
  const double s = static_cast<double>(size);
  for (Index k = 0; k < count; ++k) {
    const Index cls = rng.below(num_classes);
    const double w = rng.uniform(0.2 * s, 0.45 * s), h = rng.uniform(0.2 * s, 0.45 * s);
    const double x1 = std::floor(rng.uniform(0, s - w)), y1 = std::floor(rng.uniform(0, s - h));
    const double x2 = x1 + std::round(w), y2 = y1 + std::round(h);
    const double hue = num_classes > 1 ? static_cast<double>(cls) / static_cast<double>(num_classes - 1) : 0.0;
    const std::array<double, 3> color{0.9 - 0.7 * hue + rng.uniform(-0.05, 0.05), rng.uniform(0.35, 0.55),
                                      0.2 + 0.7 * hue + rng.uniform(-0.05, 0.05)};
    for (Index y = static_cast<Index>(y1); y < static_cast<Index>(y2); ++y)
      for (Index x = static_cast<Index>(x1); x < static_cast<Index>(x2); ++x)
        for (Index c = 0; c < 3; ++c) img.pixels(c, y, x) = color[static_cast<std::size_t>(c)];
    img.boxes.push_back({Box::from_corners(x1, y1, x2, y2), cls, 1.0});
  }
  return img;
}

LabeledImage training_scene(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LabeledImage> sources;
  for (int i = 0; i < 4; ++i) sources.push_back(synthetic_image(cfg.image_size, cfg.num_classes, rng));
  if (cfg.mixup) return mixup(sources[0], sources[1], rng);
  return mosaic(sources, cfg.image_size, cfg.mosaic, rng);
}

LossBreakdown model_loss(const Model& m, const LabeledImage& scene, ModelCache* cache) {
  const Tensord image = scene.pixels.reshaped(Shape{1, 3, scene.height(), scene.width()});
  const ForwardResult r = forward(m, image, cache);
  return detection_loss({r.raw[0], r.raw[1], r.raw[2]}, scene.boxes, m.config.levels(), m.config.num_classes,
                        m.config.loss, cache != nullptr);
}

std::vector<double> train_toy(Model& m, const LabeledImage& scene, const TrainOptions& opt) {
  require(opt.steps >= 0, "train-toy: --steps must be non-negative");
  require(opt.lr >= 0 && std::isfinite(opt.lr), "train-toy: learning rate must be finite and non-negative");
  std::vector<double> losses;
  ParamList params = parameters(m);
  for (int step = 0; step <= opt.steps; ++step) {
    ModelCache cache;
    const LossBreakdown lb = model_loss(m, scene, &cache);
    if (!std::isfinite(lb.total))
      throw Error("train-toy: loss diverged at step " + std::to_string(step) + " (box " + std::to_string(lb.box) +
                  ", obj " + std::to_string(lb.obj) + ", cls " + std::to_string(lb.cls) + ")");
    losses.push_back(lb.total);
    if (step == opt.steps) break;
    Model grad = zeros_like(m);
    backward(m, cache, {lb.grads[0], lb.grads[1], lb.grads[2]}, grad);
    ParamList g = parameters(grad);
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].trainable) params[i].tensor->vec() -= opt.lr * g[i].tensor->vec();
  }
  return losses;
}

}  // namespace triad
