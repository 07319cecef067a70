#pragma once

#include "harmonia/evaluate.hpp"
#include "harmonia/imagecore.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace harmonia::fixtures {

using Rgb = std::array<double, 3>;

/// Every colour of a 40^3 grid over [0,1]^3, red fastest, as a 320x200 image.
RasterImage color_sweep();

/// Smooth textured field around `base` (value noise plus a low sine).
RasterImage texture(int width, int height, Rgb base, double amplitude, std::uint64_t seed);

/// Ellipse centred at (cx, cy) in relative coordinates.
ForegroundMask ellipse(int width, int height, double cx, double cy, double rx, double ry);

struct CaseSpec {
    std::string id;
    int width = 192;
    int height = 144;
    Rgb fore;
    Rgb back;
    std::array<double, 4> ellipse{0.5, 0.55, 0.22, 0.3};  // cx, cy, rx, ry
    std::vector<std::string> descriptions;  // scripted provider lines
    std::uint64_t seed = 1;
};

/// Five composites whose foregrounds carry a deliberate luma/tint shift.
const std::vector<CaseSpec>& bundled_cases();
CompositeCase render_case(const CaseSpec& spec);

/// Soft-labelled harmony examples: foreground reflectance close to the
/// background's, lit by a light shifted by a random amount m in [0,1);
/// the label is 1 - m on the 10-rank grid with one rank of rater noise.
std::vector<ScoredExample> evaluator_examples(int count = 200, int size = 64, std::uint64_t seed = 11);

/// Same scene with and without a foreground light shift of magnitude m.
ScoredExample evaluator_example(int size, double m, std::uint64_t seed);

/// Writes cases/<id>/{image.png,mask.png,descriptions.txt},
/// evaluator/{*.png,manifest.csv} and color_sweep.png under `root`.
void write_fixture_set(const std::filesystem::path& root);

}  // namespace harmonia::fixtures
