#include "triad/postproc.hpp"

#include "triad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace triad {

namespace {

struct AxisOverlap {
  double inter = 0, d_inter_lo = 0, d_inter_hi = 0;
  double enclose = 0, d_enclose_lo = 0, d_enclose_hi = 0;
};

// Overlap and enclosing extent of [lo, hi] against a fixed [tlo, thi].
AxisOverlap axis_overlap(double lo, double hi, double tlo, double thi) {
  AxisOverlap r;
  const double ilo = std::max(lo, tlo), ihi = std::min(hi, thi);
  if (ihi > ilo) {
    r.inter = ihi - ilo;
    r.d_inter_lo = lo > tlo ? -1.0 : 0.0;
    r.d_inter_hi = hi < thi ? 1.0 : 0.0;
  }
  r.enclose = std::max(hi, thi) - std::min(lo, tlo);
  r.d_enclose_lo = lo < tlo ? -1.0 : 0.0;
  r.d_enclose_hi = hi > thi ? 1.0 : 0.0;
  return r;
}

double inter_area(const Box& a, const Box& b) {
  const Corners p = a.corners(), q = b.corners();
  const double iw = std::max(0.0, std::min(p.x2, q.x2) - std::max(p.x1, q.x1));
  const double ih = std::max(0.0, std::min(p.y2, q.y2) - std::max(p.y1, q.y1));
  return iw * ih;
}

Index raw_offset(Index ch, Index y, Index x, Index H, Index W) { return (ch * H + y) * W + x; }

std::array<Index, 3> raw_extents(const Tensord& raw) {
  require_shape(raw.rank() == 3 || (raw.rank() == 4 && raw.dim(0) == 1),
                "predictions: expected [1, C, H, W] or [C, H, W], got " + raw.shape().str());
  const int o = raw.rank() - 3;
  return {raw.dim(o), raw.dim(o + 1), raw.dim(o + 2)};
}

}  // namespace

double iou(const Box& a, const Box& b) {
  const double inter = inter_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double diou(const Box& a, const Box& b) { return diou_with_grad(a, b).value; }

DiouGrad diou_with_grad(const Box& pred, const Box& t) {
  const Corners p = pred.corners(), q = t.corners();
  const AxisOverlap ax = axis_overlap(p.x1, p.x2, q.x1, q.x2);
  const AxisOverlap ay = axis_overlap(p.y1, p.y2, q.y1, q.y2);

  // Derivatives of interval ends with respect to (centre, size): lo = c - s/2, hi = c + s/2.
  const auto wrt_centre = [](double d_lo, double d_hi) { return d_lo + d_hi; };
  const auto wrt_size = [](double d_lo, double d_hi) { return (d_hi - d_lo) / 2; };

  DiouGrad g;
  const double inter = ax.inter * ay.inter;
  const double uni = pred.area() + t.area() - inter;
  double iou_v = 0, diou_dcx = 0, diou_dcy = 0, diou_dw = 0, diou_dh = 0;
  if (uni > 0) {
    iou_v = inter / uni;
    const double di_dcx = wrt_centre(ax.d_inter_lo, ax.d_inter_hi) * ay.inter;
    const double di_dw = wrt_size(ax.d_inter_lo, ax.d_inter_hi) * ay.inter;
    const double di_dcy = wrt_centre(ay.d_inter_lo, ay.d_inter_hi) * ax.inter;
    const double di_dh = wrt_size(ay.d_inter_lo, ay.d_inter_hi) * ax.inter;
    const double du_dcx = -di_dcx, du_dcy = -di_dcy;
    const double du_dw = pred.h - di_dw, du_dh = pred.w - di_dh;
    const auto quot = [&](double di, double du) { return (di * uni - inter * du) / (uni * uni); };
    diou_dcx = quot(di_dcx, du_dcx);
    diou_dcy = quot(di_dcy, du_dcy);
    diou_dw = quot(di_dw, du_dw);
    diou_dh = quot(di_dh, du_dh);
  }

  const double ddx = pred.cx - t.cx, ddy = pred.cy - t.cy;
  const double rho2 = ddx * ddx + ddy * ddy;
  const double c2 = ax.enclose * ax.enclose + ay.enclose * ay.enclose;
  g.value = iou_v;
  if (c2 > 0) {
    g.value -= rho2 / c2;
    const double dc2_dcx = 2 * ax.enclose * wrt_centre(ax.d_enclose_lo, ax.d_enclose_hi);
    const double dc2_dw = 2 * ax.enclose * wrt_size(ax.d_enclose_lo, ax.d_enclose_hi);
    const double dc2_dcy = 2 * ay.enclose * wrt_centre(ay.d_enclose_lo, ay.d_enclose_hi);
    const double dc2_dh = 2 * ay.enclose * wrt_size(ay.d_enclose_lo, ay.d_enclose_hi);
    const auto pen = [&](double drho2, double dc2) { return (drho2 * c2 - rho2 * dc2) / (c2 * c2); };
    diou_dcx -= pen(2 * ddx, dc2_dcx);
    diou_dcy -= pen(2 * ddy, dc2_dcy);
    diou_dw -= pen(0, dc2_dw);
    diou_dh -= pen(0, dc2_dh);
  }
  g.dcx = diou_dcx;
  g.dcy = diou_dcy;
  g.dw = diou_dw;
  g.dh = diou_dh;
  return g;
}

std::vector<Detection> diou_nms(const std::vector<Detection>& dets, double threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const Detection& cand = dets[i];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == cand.class_id && diou(k.box, cand.box) > threshold;
    });
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

// ---------------------------------------------------------------------------

Box decode_box(const std::array<double, 4>& t, Index gx, Index gy, const Anchor& a, double stride) {
  return {(sigmoid(t[0]) + static_cast<double>(gx)) * stride, (sigmoid(t[1]) + static_cast<double>(gy)) * stride,
          a.w * std::exp(t[2]), a.h * std::exp(t[3])};
}

std::array<double, 4> encode_box(const Box& b, Index gx, Index gy, const Anchor& a, double stride) {
  const auto logit = [](double p) { return std::log(p / (1 - p)); };
  return {logit(b.cx / stride - static_cast<double>(gx)), logit(b.cy / stride - static_cast<double>(gy)),
          std::log(b.w / a.w), std::log(b.h / a.h)};
}

std::vector<Detection> decode_predictions(const Tensord& raw, const std::vector<Anchor>& anchors, double stride,
                                          double conf_threshold) {
  const auto [C, H, W] = raw_extents(raw);
  const Index A = static_cast<Index>(anchors.size());
  require_shape(A >= 1 && C % A == 0 && C / A > 5,
                "decode: " + std::to_string(C) + " channels is not anchors * (5 + classes) for " +
                    std::to_string(A) + " anchors");
  const Index per = C / A, K = per - 5;
  std::vector<Detection> out;
  for (Index a = 0; a < A; ++a)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const auto at = [&](Index field) { return raw[raw_offset(a * per + field, y, x, H, W)]; };
        Index best = 0;
        for (Index k = 1; k < K; ++k)
          if (at(5 + k) > at(5 + best)) best = k;
        const double score = sigmoid(at(4)) * sigmoid(at(5 + best));
        if (!(score > conf_threshold)) continue;
        out.push_back({decode_box({at(0), at(1), at(2), at(3)}, x, y, anchors[static_cast<std::size_t>(a)], stride),
                       best, score});
      }
  return out;
}

std::string format_detection(const std::string& image_id, const Detection& d) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s %lld %.6f %.6f %.6f %.6f %.6f", image_id.c_str(),
                static_cast<long long>(d.class_id), d.score, d.box.cx, d.box.cy, d.box.w, d.box.h);
  return buf;
}

// ---------------------------------------------------------------------------

double focal_loss(double p, double y, double alpha, double gamma, ClampCounter* clamps) {
  const double lo = kProbabilityClamp, hi = 1 - kProbabilityClamp;
  if (p < lo || p > hi || std::isnan(p)) {
    if (clamps) ++clamps->count;
    p = std::isnan(p) ? lo : std::clamp(p, lo, hi);
  }
  const double pos = alpha * std::pow(1 - p, gamma) * -std::log(p);
  const double neg = (1 - alpha) * std::pow(p, gamma) * -std::log(1 - p);
  return y * pos + (1 - y) * neg;
}

FocalTerm focal_loss_logit(double logit, double y, double alpha, double gamma, ClampCounter* clamps) {
  const double lo = kProbabilityClamp, hi = 1 - kProbabilityClamp;
  double p = sigmoid(logit);
  bool clamped = false;
  if (p < lo || p > hi) {
    if (clamps) ++clamps->count;
    p = std::clamp(p, lo, hi);
    clamped = true;
  }
  FocalTerm t;
  t.loss = focal_loss(p, y, alpha, gamma);
  if (!clamped) {
    // d/dz of each branch, using dp/dz = p (1 - p).
    const double dpos = alpha * std::pow(1 - p, gamma) * (gamma * p * std::log(p) - (1 - p));
    const double dneg = (1 - alpha) * std::pow(p, gamma) * (p - gamma * (1 - p) * std::log(1 - p));
    t.dlogit = y * dpos + (1 - y) * dneg;
  }
  return t;
}

std::vector<double> label_smooth(const std::vector<double>& onehot, double eps) {
  require(eps >= 0 && eps < 1, "label_smooth: eps must be in [0, 1)");
  require(!onehot.empty(), "label_smooth: empty label vector");
  const double k = static_cast<double>(onehot.size());
  std::vector<double> out(onehot.size());
  for (std::size_t i = 0; i < onehot.size(); ++i) out[i] = onehot[i] * (1 - eps) + eps / k;
  return out;
}

// ---------------------------------------------------------------------------

std::vector<Assignment> assign_targets(const std::vector<GroundTruth>& targets, const std::vector<LevelSpec>& levels,
                                       const std::vector<std::array<Index, 2>>& extents) {
  require(levels.size() == extents.size(), "assign_targets: level and extent counts differ");
  std::vector<Assignment> out;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Box& b = targets[t].box;
    if (b.w <= 0 || b.h <= 0) continue;
    double best = -1;
    Assignment as{t, 0, 0, 0, 0};
    for (std::size_t l = 0; l < levels.size(); ++l)
      for (std::size_t a = 0; a < levels[l].anchors.size(); ++a) {
        const Anchor& an = levels[l].anchors[a];
        const double inter = std::min(b.w, an.w) * std::min(b.h, an.h);
        const double v = inter / (b.w * b.h + an.w * an.h - inter);
        if (v > best) {
          best = v;
          as.level = l;
          as.anchor = static_cast<Index>(a);
        }
      }
    const double s = levels[as.level].stride;
    const auto [H, W] = extents[as.level];
    as.gx = std::clamp(static_cast<Index>(std::floor(b.cx / s)), Index{0}, W - 1);
    as.gy = std::clamp(static_cast<Index>(std::floor(b.cy / s)), Index{0}, H - 1);
    const auto same_slot = [&](const Assignment& o) {
      return o.level == as.level && o.anchor == as.anchor && o.gx == as.gx && o.gy == as.gy;
    };
    out.erase(std::remove_if(out.begin(), out.end(), same_slot), out.end());
    out.push_back(as);
  }
  return out;
}

LossBreakdown detection_loss(const std::vector<Tensord>& raw, const std::vector<GroundTruth>& targets,
                             const std::vector<LevelSpec>& levels, Index num_classes, const LossConfig& cfg,
                             bool with_grad) {
  require(raw.size() == levels.size(), "detection_loss: " + std::to_string(raw.size()) + " prediction levels, " +
                                           std::to_string(levels.size()) + " level specs");
  std::vector<std::array<Index, 2>> extents;
  for (std::size_t l = 0; l < raw.size(); ++l) {
    const auto [C, H, W] = raw_extents(raw[l]);
    const Index A = static_cast<Index>(levels[l].anchors.size());
    require_shape(C == A * (5 + num_classes), "detection_loss: level " + std::to_string(l) + " has " +
                                                  std::to_string(C) + " channels, expected " +
                                                  std::to_string(A * (5 + num_classes)));
    extents.push_back({H, W});
  }
  for (const auto& t : targets)
    require(t.class_id >= 0 && t.class_id < num_classes, "detection_loss: target class out of range");

  const std::vector<Assignment> assigned = assign_targets(targets, levels, extents);
  const Index P = static_cast<Index>(assigned.size());
  const double norm = static_cast<double>(std::max<Index>(1, P));

  LossBreakdown r;
  r.positives = P;
  if (with_grad)
    for (const auto& t : raw) r.grads.emplace_back(t.shape());
  ClampCounter clamps;

  // Objectness targets (and mixup weights) per slot.
  std::vector<std::vector<double>> obj_target(raw.size()), obj_weight(raw.size());
  for (std::size_t l = 0; l < raw.size(); ++l) {
    obj_target[l].assign(static_cast<std::size_t>(raw[l].size() / (5 + num_classes)), 0.0);
    obj_weight[l].assign(obj_target[l].size(), 1.0);
  }
  const auto slot = [&](std::size_t l, Index a, Index y, Index x) {
    return static_cast<std::size_t>((a * extents[l][0] + y) * extents[l][1] + x);
  };
  for (const Assignment& as : assigned) {
    obj_target[as.level][slot(as.level, as.anchor, as.gy, as.gx)] = 1.0;
    obj_weight[as.level][slot(as.level, as.anchor, as.gy, as.gx)] = targets[as.target].weight;
  }

  const Index per = 5 + num_classes;
  for (std::size_t l = 0; l < raw.size(); ++l) {
    const Index A = static_cast<Index>(levels[l].anchors.size()), H = extents[l][0], W = extents[l][1];
    for (Index a = 0; a < A; ++a)
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
          const std::size_t s = slot(l, a, y, x);
          const Index off = raw_offset(a * per + 4, y, x, H, W);
          const FocalTerm ft = focal_loss_logit(raw[l][off], obj_target[l][s], cfg.alpha, cfg.gamma, &clamps);
          r.obj += obj_weight[l][s] * ft.loss / norm;
          if (with_grad) r.grads[l][off] += cfg.w_obj * obj_weight[l][s] * ft.dlogit / norm;
        }
  }

  for (const Assignment& as : assigned) {
    const GroundTruth& gt = targets[as.target];
    const std::size_t l = as.level;
    const Index H = extents[l][0], W = extents[l][1];
    const Anchor& an = levels[l].anchors[static_cast<std::size_t>(as.anchor)];
    const double stride = levels[l].stride;
    const auto off = [&](Index field) { return raw_offset(as.anchor * per + field, as.gy, as.gx, H, W); };
    const std::array<double, 4> t{raw[l][off(0)], raw[l][off(1)], raw[l][off(2)], raw[l][off(3)]};
    const Box pred = decode_box(t, as.gx, as.gy, an, stride);
    const DiouGrad dg = diou_with_grad(pred, gt.box);
    r.box += gt.weight * (1 - dg.value) / static_cast<double>(P);
    if (with_grad) {
      const double k = -cfg.w_box * gt.weight / static_cast<double>(P);
      const double sx = sigmoid(t[0]), sy = sigmoid(t[1]);
      r.grads[l][off(0)] += k * dg.dcx * stride * sx * (1 - sx);
      r.grads[l][off(1)] += k * dg.dcy * stride * sy * (1 - sy);
      r.grads[l][off(2)] += k * dg.dw * pred.w;
      r.grads[l][off(3)] += k * dg.dh * pred.h;
    }
    std::vector<double> onehot(static_cast<std::size_t>(num_classes), 0.0);
    onehot[static_cast<std::size_t>(gt.class_id)] = 1.0;
    const std::vector<double> soft = label_smooth(onehot, cfg.label_smoothing);
    for (Index c = 0; c < num_classes; ++c) {
      const FocalTerm ft = focal_loss_logit(raw[l][off(5 + c)], soft[static_cast<std::size_t>(c)], cfg.alpha,
                                            cfg.gamma, &clamps);
      r.cls += gt.weight * ft.loss / norm;
      if (with_grad) r.grads[l][off(5 + c)] += cfg.w_cls * gt.weight * ft.dlogit / norm;
    }
  }

  r.clamped = clamps.count;
  r.total = cfg.w_box * r.box + cfg.w_obj * r.obj + cfg.w_cls * r.cls;
  return r;
}

}  // namespace triad
