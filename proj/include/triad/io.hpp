#pragma once

// Weight files ("3AW1", little-endian manifest + f32 payloads) and binary
// PPM / PGM images.

#include "triad/model.hpp"

#include <cstdint>
#include <string>

namespace triad {

inline constexpr char kWeightMagic[4] = {'3', 'A', 'W', '1'};

/// Every parameter (trainable or not) in collection order.
void save_weights(Model& m, const std::string& path);
/// Fills an allocated model of the same configuration. Unknown names,
/// duplicate or missing tensors, shape or byte-length disagreements and
/// truncated payloads are errors; the magic is checked before anything else
/// is read.
void load_weights(Model& m, const std::string& path);

/// Binary P6 to [1, 3, H, W] in [0, 1].
Tensord read_ppm(const std::string& path);
/// [1, 3, H, W] or [3, H, W] in [0, 1] to binary P6.
void write_ppm(const std::string& path, const Tensord& image);

/// Binary P5 to [H, W] in [0, 1].
Tensord read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Tensord& gray);

/// Tiles the channels of a [1, C, H, W] feature map on a near-square grid
/// and min-max normalises the whole canvas to [0, 1].
Tensord channel_grid(const Tensord& feature);

}  // namespace triad
