#pragma once

#include "harmonia/imagecore.hpp"

#include <array>
#include <cstdint>

namespace harmonia::synth {

using Rgb = std::array<double, 3>;

/// Textured image of a single base colour with deterministic noise.
RasterImage textured(int width, int height, Rgb base, double amplitude, std::uint64_t seed);

/// Centered ellipse covering roughly `fraction` of the frame.
ForegroundMask ellipse_mask(int width, int height, double fraction = 0.25);

/// Background texture plus a differently coloured textured object under the mask.
CompositeCase split_composite(int size, Rgb fore, Rgb back, std::uint64_t seed = 1);

RasterImage random_image(int width, int height, std::uint64_t seed);

double max_abs_diff(const RasterImage& a, const RasterImage& b);

}  // namespace harmonia::synth
