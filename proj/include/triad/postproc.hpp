#pragma once

// Box geometry, YOLO decoding, DIoU-NMS and the detection loss
// (DIoU box term, alpha-balanced focal objectness/classification with
// label smoothing).

#include "triad/tensor.hpp"

#include <array>
#include <string>
#include <vector>

namespace triad {

struct Corners {
  double x1, y1, x2, y2;
};

/// Centre/size box in pixels.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  Corners corners() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
  double area() const { return w * h; }
  static Box from_corners(double x1, double y1, double x2, double y2) {
    return {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }
};

struct Detection {
  Box box;
  Index class_id = 0;
  double score = 0;
};

struct Anchor {
  double w = 1, h = 1;
};

double iou(const Box& a, const Box& b);
/// IoU minus squared centre distance over squared enclosing-box diagonal.
double diou(const Box& a, const Box& b);

/// DIoU and its partial derivatives with respect to the first box.
struct DiouGrad {
  double value = 0;
  double dcx = 0, dcy = 0, dw = 0, dh = 0;
};
DiouGrad diou_with_grad(const Box& pred, const Box& target);

/// Class-wise greedy suppression in descending score order (ties by input
/// index); drops a candidate when diou(kept, candidate) > threshold.
std::vector<Detection> diou_nms(const std::vector<Detection>& dets, double threshold);

// --- decoding ------------------------------------------------------------------

/// Raw [1, A * (5 + K), H, W] (or without the batch axis) to detections with
/// score sigmoid(obj) * sigmoid(best class) strictly above the threshold.
std::vector<Detection> decode_predictions(const Tensord& raw, const std::vector<Anchor>& anchors, double stride,
                                          double conf_threshold);

Box decode_box(const std::array<double, 4>& t, Index gx, Index gy, const Anchor& a, double stride);
/// Inverse of decode_box.
std::array<double, 4> encode_box(const Box& b, Index gx, Index gy, const Anchor& a, double stride);

/// `<image> <class> <score> <cx> <cy> <w> <h>` with six decimals.
std::string format_detection(const std::string& image_id, const Detection& d);

// --- losses --------------------------------------------------------------------

inline constexpr double kProbabilityClamp = 1e-7;

/// Counts probabilities that had to be clamped into [1e-7, 1 - 1e-7].
struct ClampCounter {
  Index count = 0;
};

/// -alpha_t (1 - p_t)^gamma log(p_t). A soft target y in [0, 1] mixes the
/// y = 1 and y = 0 losses linearly.
double focal_loss(double p, double y, double alpha, double gamma, ClampCounter* clamps = nullptr);

/// Focal loss on a logit and its derivative with respect to the logit.
struct FocalTerm {
  double loss = 0;
  double dlogit = 0;
};
FocalTerm focal_loss_logit(double logit, double y, double alpha, double gamma, ClampCounter* clamps = nullptr);

/// y (1 - eps) + eps / K.
std::vector<double> label_smooth(const std::vector<double>& onehot, double eps);

struct LossConfig {
  double alpha = 0.25;
  double gamma = 2.0;
  double label_smoothing = 0.1;
  double w_box = 0.05;
  double w_obj = 1.0;
  double w_cls = 0.5;
};

struct GroundTruth {
  Box box;
  Index class_id = 0;
  double weight = 1.0;  // mixup weight
};

struct LevelSpec {
  double stride = 8;
  std::vector<Anchor> anchors;
};

struct Assignment {
  std::size_t target = 0;
  std::size_t level = 0;
  Index anchor = 0;
  Index gx = 0;
  Index gy = 0;
};

/// One positive per ground truth: the best anchor over all levels by
/// width/height IoU, at the cell containing the box centre. A later target
/// claiming the same slot replaces the earlier one.
std::vector<Assignment> assign_targets(const std::vector<GroundTruth>& targets, const std::vector<LevelSpec>& levels,
                                       const std::vector<std::array<Index, 2>>& extents);

struct LossBreakdown {
  double total = 0;
  double box = 0;
  double obj = 0;
  double cls = 0;
  Index positives = 0;
  Index clamped = 0;
  std::vector<Tensord> grads;  // d total / d raw, one per level (when requested)
};

/// Sums are normalised by max(1, positives); the box term is a mean over positives.
LossBreakdown detection_loss(const std::vector<Tensord>& raw, const std::vector<GroundTruth>& targets,
                             const std::vector<LevelSpec>& levels, Index num_classes, const LossConfig& cfg,
                             bool with_grad = true);

}  // namespace triad
