#include "triad/augment.hpp"

#include "triad/ops.hpp"

#include <algorithm>
#include <cmath>

namespace triad {

namespace {

void check_image(const LabeledImage& img, const char* where) {
  require_shape(img.pixels.rank() == 3 && img.pixels.dim(0) == 3,
                std::string(where) + ": pixels must be [3, H, W], got " + img.pixels.shape().str());
}

// Clips to [0, W] x [0, H]; false when the remainder is below the minimum area.
bool clip_box(Box& b, double W, double H) {
  Corners c = b.corners();
  c.x1 = std::clamp(c.x1, 0.0, W);
  c.x2 = std::clamp(c.x2, 0.0, W);
  c.y1 = std::clamp(c.y1, 0.0, H);
  c.y2 = std::clamp(c.y2, 0.0, H);
  b = Box::from_corners(c.x1, c.y1, c.x2, c.y2);
  return b.w > 0 && b.h > 0 && b.area() >= kMinBoxArea;
}

}  // namespace

LabeledImage hflip(const LabeledImage& img) {
  check_image(img, "hflip");
  const Index H = img.height(), W = img.width();
  LabeledImage out{Tensord(img.pixels.shape()), img.boxes};
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) out.pixels(c, y, x) = img.pixels(c, y, W - 1 - x);
  for (auto& gt : out.boxes) gt.box.cx = static_cast<double>(W) - gt.box.cx;
  return out;
}

LabeledImage rgb_shift(const LabeledImage& img, const std::array<double, 3>& shift) {
  check_image(img, "rgb_shift");
  LabeledImage out = img;
  const Index plane = img.height() * img.width();
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < plane; ++i) {
      double& v = out.pixels[c * plane + i];
      v = std::clamp(v + shift[static_cast<std::size_t>(c)], 0.0, 1.0);
    }
  return out;
}

LabeledImage rescale(const LabeledImage& img, double scale) {
  check_image(img, "rescale");
  require(scale > 0 && std::isfinite(scale), "rescale: scale must be positive");
  const Index H = img.height(), W = img.width();
  const Index oh = std::max<Index>(1, std::lround(static_cast<double>(H) * scale));
  const Index ow = std::max<Index>(1, std::lround(static_cast<double>(W) * scale));
  const double sy = static_cast<double>(oh) / static_cast<double>(H);
  const double sx = static_cast<double>(ow) / static_cast<double>(W);
  const Tensord src = img.pixels.reshaped(Shape{1, 3, H, W});
  LabeledImage out{Tensord(Shape{3, oh, ow}), img.boxes};
  for (Index y = 0; y < oh; ++y) {
    const double py = std::clamp((static_cast<double>(y) + 0.5) / sy - 0.5, 0.0, static_cast<double>(H - 1));
    for (Index x = 0; x < ow; ++x) {
      const double px = std::clamp((static_cast<double>(x) + 0.5) / sx - 0.5, 0.0, static_cast<double>(W - 1));
      for (Index c = 0; c < 3; ++c) out.pixels(c, y, x) = bilinear_sample(src, 0, c, py, px);
    }
  }
  for (auto& gt : out.boxes) gt.box = {gt.box.cx * sx, gt.box.cy * sy, gt.box.w * sx, gt.box.h * sy};
  return out;
}

LabeledImage crop(const LabeledImage& img, Index y0, Index x0, Index h, Index w, double pad) {
  check_image(img, "crop");
  require(h > 0 && w > 0, "crop: window must be non-empty");
  const Index H = img.height(), W = img.width();
  LabeledImage out{Tensord(Shape{3, h, w}, pad), {}};
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y) {
      const Index sy = y0 + y;
      if (sy < 0 || sy >= H) continue;
      for (Index x = 0; x < w; ++x) {
        const Index sx = x0 + x;
        if (sx >= 0 && sx < W) out.pixels(c, y, x) = img.pixels(c, sy, sx);
      }
    }
  for (GroundTruth gt : img.boxes) {
    gt.box.cx -= static_cast<double>(x0);
    gt.box.cy -= static_cast<double>(y0);
    if (clip_box(gt.box, static_cast<double>(w), static_cast<double>(h))) out.boxes.push_back(gt);
  }
  return out;
}

LabeledImage scale_crop(const LabeledImage& img, double scale, Index y0, Index x0, Index h, Index w) {
  return crop(rescale(img, scale), y0, x0, h, w);
}

MosaicPlan sample_mosaic_plan(Index size, const MosaicRanges& ranges, Rng& rng) {
  require(size >= 4, "mosaic: output size must be at least 4");
  const double s = static_cast<double>(size);
  MosaicPlan plan;
  plan.cx = static_cast<Index>(std::floor(rng.uniform(0.25 * s, 0.75 * s)));
  plan.cy = static_cast<Index>(std::floor(rng.uniform(0.25 * s, 0.75 * s)));
  for (auto& t : plan.tiles) {
    t.scale = rng.uniform(ranges.scale_lo, ranges.scale_hi);
    t.flip = rng.bernoulli(ranges.flip_p);
    for (auto& v : t.shift) v = rng.uniform(-ranges.shift, ranges.shift);
  }
  return plan;
}

LabeledImage mosaic(const std::vector<LabeledImage>& imgs, Index size, const MosaicPlan& plan) {
  require(imgs.size() >= 4, "mosaic: needs four images, got " + std::to_string(imgs.size()));
  require(plan.cx > 0 && plan.cx < size && plan.cy > 0 && plan.cy < size, "mosaic: centre outside the canvas");
  LabeledImage out{Tensord(Shape{3, size, size}, kMosaicPad), {}};
  for (std::size_t i = 0; i < 4; ++i) {
    const TileJitter& j = plan.tiles[i];
    LabeledImage t = rescale(imgs[i], j.scale);
    if (j.flip) t = hflip(t);
    t = rgb_shift(t, j.shift);
    const Index h = t.height(), w = t.width();
    const bool right = i == 1 || i == 3, bottom = i == 2 || i == 3;
    // Canvas region and the tile's top-left corner on the canvas.
    const Index ry0 = bottom ? plan.cy : 0, ry1 = bottom ? size : plan.cy;
    const Index rx0 = right ? plan.cx : 0, rx1 = right ? size : plan.cx;
    const Index ty = bottom ? plan.cy : plan.cy - h;
    const Index tx = right ? plan.cx : plan.cx - w;
    const LabeledImage piece = crop(t, ry0 - ty, rx0 - tx, ry1 - ry0, rx1 - rx0);
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < ry1 - ry0; ++y)
        for (Index x = 0; x < rx1 - rx0; ++x) out.pixels(c, ry0 + y, rx0 + x) = piece.pixels(c, y, x);
    for (GroundTruth gt : piece.boxes) {
      gt.box.cx += static_cast<double>(rx0);
      gt.box.cy += static_cast<double>(ry0);
      out.boxes.push_back(gt);
    }
  }
  return out;
}

LabeledImage mosaic(const std::vector<LabeledImage>& imgs, Index size, const MosaicRanges& ranges, Rng& rng) {
  require(imgs.size() >= 4, "mosaic: needs four images, got " + std::to_string(imgs.size()));
  return mosaic(imgs, size, sample_mosaic_plan(size, ranges, rng));
}

LabeledImage mixup(const LabeledImage& a, const LabeledImage& b, double lambda) {
  check_image(a, "mixup");
  check_image(b, "mixup");
  require_shape(a.pixels.shape() == b.pixels.shape(),
                "mixup: extents differ, " + a.pixels.shape().str() + " vs " + b.pixels.shape().str());
  require(lambda >= 0 && lambda <= 1, "mixup: lambda must be in [0, 1]");
  LabeledImage out{Tensord(a.pixels.shape()), {}};
  out.pixels.vec() = lambda * a.pixels.vec() + (1 - lambda) * b.pixels.vec();
  for (Index i = 0; i < out.pixels.size(); ++i) out.pixels[i] = std::clamp(out.pixels[i], 0.0, 1.0);
  for (GroundTruth gt : a.boxes) {
    gt.weight *= lambda;
    out.boxes.push_back(gt);
  }
  for (GroundTruth gt : b.boxes) {
    gt.weight *= 1 - lambda;
    out.boxes.push_back(gt);
  }
  return out;
}

LabeledImage mixup(const LabeledImage& a, const LabeledImage& b, Rng& rng) {
  return mixup(a, b, rng.uniform(0.3, 0.7));
}

}  // namespace triad
