#pragma once

#include "harmonia/imagecore.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace harmonia {

/// L x L x L lattice over [0,1]^3 with red varying fastest.
struct Lut3D {
    int size = 17;
    std::vector<double> table;  // size^3 * 3, node (r, g, b) at ((b * L + g) * L + r) * 3
    std::string region = "global";

    static Lut3D identity(int size = 17);

    std::size_t node(int r, int g, int b) const {
        return (static_cast<std::size_t>(b) * size + g) * size + r;
    }
    std::array<double, 3> at(int r, int g, int b) const;
    /// Trilinear lookup, input clamped to the domain.
    std::array<double, 3> lookup(double r, double g, double b) const;
};

struct LutFitConfig {
    int size = 17;
    double lambda = 0.01;  // weight of the squared second differences along each axis
    /// Fewer mask pixels per occupied lattice cell than this raises lambda tenfold.
    double min_pixels_per_cell = 2.0;
};

struct LutFit {
    Lut3D lut;
    double lambda_used = 0.0;
    bool flagged = false;  // lambda was raised automatically
    double mean_abs_residual = 0.0;
    std::size_t pixels = 0;
    std::size_t occupied_cells = 0;
};

/// Least squares over the N masked pixels,
///   (L^3/N) sum_p |LUT(from_p) - to_p|^2 + lambda * sum |second difference|^2,
/// i.e. the data term weighs as one pixel per lattice node on average,
/// plus a 1e-9 pull toward the identity so lattice nodes no pixel reaches
/// stay determined. Throws MaskShapeError / DegenerateMaskError.
LutFit fit_lut(const RasterImage& from, const RasterImage& to, const ForegroundMask& mask,
               const LutFitConfig& cfg = {});

/// Masked pixels pass through the LUT; the rest are copied.
RasterImage apply_lut(const RasterImage& image, const Lut3D& lut, const ForegroundMask& mask);
RasterImage apply_lut(const RasterImage& image, const Lut3D& lut);

/// `.cube` text: LUT_3D_SIZE header, red fastest, six decimals.
std::string format_cube(const Lut3D& lut, const std::string& title = {});
void export_lut(const Lut3D& lut, const std::filesystem::path& path, const std::string& title = {});
Lut3D parse_cube(const std::string& text);
Lut3D import_lut(const std::filesystem::path& path);

}  // namespace harmonia
