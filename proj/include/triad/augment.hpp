#pragma once

// Seeded image augmentation for labelled toy images: horizontal flip,
// per-channel RGB shift, bilinear rescale, crop, four-image mosaic and mixup.

#include "triad/postproc.hpp"
#include "triad/random.hpp"

#include <array>
#include <vector>

namespace triad {

/// Pixels [3, H, W] in [0, 1]; boxes carry a class and a mixup weight.
struct LabeledImage {
  Tensord pixels;
  std::vector<GroundTruth> boxes;

  Index height() const { return pixels.dim(1); }
  Index width() const { return pixels.dim(2); }
};

inline constexpr double kMosaicPad = 0.5;
inline constexpr double kMinBoxArea = 4.0;

LabeledImage hflip(const LabeledImage& img);
/// Adds a constant per channel, then clamps to [0, 1].
LabeledImage rgb_shift(const LabeledImage& img, const std::array<double, 3>& shift);
/// Output extents round(H * scale) x round(W * scale), bilinear with edge replication.
LabeledImage rescale(const LabeledImage& img, double scale);
/// Window [y0, y0 + h) x [x0, x0 + w) of the source; uncovered pixels get `pad`.
/// Boxes are translated, clipped to the window and dropped below kMinBoxArea.
LabeledImage crop(const LabeledImage& img, Index y0, Index x0, Index h, Index w, double pad = kMosaicPad);
LabeledImage scale_crop(const LabeledImage& img, double scale, Index y0, Index x0, Index h, Index w);

struct TileJitter {
  double scale = 1.0;
  bool flip = false;
  std::array<double, 3> shift{0, 0, 0};
};

struct MosaicRanges {
  double scale_lo = 0.5;
  double scale_hi = 1.5;
  double shift = 0.05;
  double flip_p = 0.5;

  static MosaicRanges standard() { return {}; }
  static MosaicRanges stronger() { return {0.25, 1.75, 0.1, 0.5}; }
};

/// Mosaic centre (pixels, integer) plus one jitter per source.
struct MosaicPlan {
  Index cx = 0;
  Index cy = 0;
  std::array<TileJitter, 4> tiles;
};

MosaicPlan sample_mosaic_plan(Index size, const MosaicRanges& ranges, Rng& rng);

/// Tiles four jittered images around the centre. Image 0 fills the top-left
/// region with its bottom-right corner at the centre, image 1 the top-right,
/// image 2 the bottom-left and image 3 the bottom-right.
LabeledImage mosaic(const std::vector<LabeledImage>& imgs, Index size, const MosaicPlan& plan);
LabeledImage mosaic(const std::vector<LabeledImage>& imgs, Index size, const MosaicRanges& ranges, Rng& rng);

/// lambda * a + (1 - lambda) * b; boxes of a weighted by lambda, of b by 1 - lambda.
LabeledImage mixup(const LabeledImage& a, const LabeledImage& b, double lambda);
/// lambda drawn uniformly from [0.3, 0.7].
LabeledImage mixup(const LabeledImage& a, const LabeledImage& b, Rng& rng);

}  // namespace triad
