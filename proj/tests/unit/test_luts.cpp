#include "harmonia/errors.hpp"
#include "harmonia/fixtures.hpp"
#include "harmonia/luts.hpp"
#include "support/synthetic.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace harmonia;

namespace {

RasterImage map_pixels(const RasterImage& in, double (*f)(double)) {
    RasterImage out = in;
    for (auto& v : out.data()) v = static_cast<float>(f(v));
    return out;
}

double encode_gamma(double v) { return std::pow(v, 1.0 / 2.2); }
double decode_gamma(double v) { return std::pow(v, 2.2); }

double mean_abs(const RasterImage& a, const RasterImage& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) s += std::abs(double(a.data()[i]) - b.data()[i]);
    return s / static_cast<double>(a.data().size());
}

ForegroundMask full(const RasterImage& img) { return ForegroundMask(img.width(), img.height(), 1); }

}  // namespace

TEST(Lut, IdentityLookupIsExactOnNodes) {
    const Lut3D id = Lut3D::identity(17);
    EXPECT_EQ(id.table.size(), 17u * 17 * 17 * 3);
    const auto v = id.lookup(0.25, 0.5, 0.75);
    EXPECT_NEAR(v[0], 0.25, 1e-15);
    EXPECT_NEAR(v[1], 0.5, 1e-15);
    EXPECT_NEAR(v[2], 0.75, 1e-15);
    // Red varies fastest.
    EXPECT_DOUBLE_EQ(id.table[3], 1.0 / 16);
    EXPECT_DOUBLE_EQ(id.table[17 * 3 + 1], 1.0 / 16);
}

TEST(Lut, ApplyIdentityLeavesImage) {
    const RasterImage img = synth::random_image(40, 30, 3);
    const RasterImage out = apply_lut(img, Lut3D::identity(17));
    EXPECT_LE(synth::max_abs_diff(img, out), 1e-6);
}

TEST(Lut, ConstantLutFillsMaskOnly) {
    Lut3D c = Lut3D::identity(5);
    for (std::size_t i = 0; i < c.table.size(); i += 3) {
        c.table[i] = 0.2;
        c.table[i + 1] = 0.4;
        c.table[i + 2] = 0.6;
    }
    const RasterImage img = synth::random_image(20, 20, 4);
    const ForegroundMask mask = synth::ellipse_mask(20, 20, 0.3);
    const RasterImage out = apply_lut(img, c, mask);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                if (mask.at(y, x)) EXPECT_NEAR(out.at(y, x, ch), 0.2 * (ch + 1), 1e-6);
                else EXPECT_EQ(out.at(y, x, ch), img.at(y, x, ch));
            }
}

TEST(LutFit, IdentityFitIsIdentity) {
    const RasterImage img = synth::random_image(128, 128, 5);
    const LutFit fit = fit_lut(img, img, full(img));
    const Lut3D id = Lut3D::identity(17);
    double worst = 0.0;
    for (std::size_t i = 0; i < id.table.size(); ++i) worst = std::max(worst, std::abs(fit.lut.table[i] - id.table[i]));
    EXPECT_LE(worst, 1e-4);
    EXPECT_FALSE(fit.flagged);
}

TEST(LutFit, GammaOnColorSweep) {
    const RasterImage sweep = fixtures::color_sweep();
    for (auto f : {encode_gamma, decode_gamma}) {
        const RasterImage target = map_pixels(sweep, f);
        const LutFit fit = fit_lut(sweep, target, full(sweep));
        EXPECT_LE(mean_abs(apply_lut(sweep, fit.lut), target), 1.0 / 255.0);
    }
}

TEST(LutFit, ChannelPermutationEquivariant) {
    const RasterImage from = synth::random_image(48, 48, 6);
    RasterImage to = map_pixels(from, decode_gamma);
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x) to.at(y, x, 2) = static_cast<float>(0.5 * to.at(y, x, 2) + 0.2);
    auto permute = [](const RasterImage& im) {  // (r,g,b) -> (g,b,r)
        RasterImage o = im;
        for (int y = 0; y < im.height(); ++y)
            for (int x = 0; x < im.width(); ++x)
                for (int c = 0; c < 3; ++c) o.at(y, x, c) = im.at(y, x, (c + 1) % 3);
        return o;
    };
    const auto mask = full(from);
    const Lut3D a = fit_lut(from, to, mask, {.size = 9}).lut;
    const Lut3D b = fit_lut(permute(from), permute(to), mask, {.size = 9}).lut;
    for (int bi = 0; bi < 9; ++bi)
        for (int g = 0; g < 9; ++g)
            for (int r = 0; r < 9; ++r) {
                // Node (r,g,b) of a corresponds to node (g,b,r) of b, output permuted alike.
                const auto va = a.at(r, g, bi);
                const auto vb = b.at(g, bi, r);
                for (int c = 0; c < 3; ++c) ASSERT_NEAR(vb[c], va[(c + 1) % 3], 1e-8);
            }
}

TEST(LutFit, SparseDataRaisesLambda) {
    RasterImage img = synth::random_image(8, 8, 7);
    const LutFit fit = fit_lut(img, img, full(img), {.size = 17, .lambda = 0.01, .min_pixels_per_cell = 2.0});
    EXPECT_TRUE(fit.flagged);
    EXPECT_GT(fit.lambda_used, 0.01);
    for (double v : fit.lut.table) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(LutFit, Errors) {
    const RasterImage a = synth::random_image(16, 16, 1);
    const RasterImage b = synth::random_image(16, 8, 1);
    EXPECT_THROW(fit_lut(a, b, full(a)), MaskShapeError);
    EXPECT_THROW(fit_lut(a, a, ForegroundMask(16, 16, 0)), DegenerateMaskError);
}

TEST(Cube, IdentityHas4913DataLines) {
    const std::string text = format_cube(Lut3D::identity(17));
    std::istringstream in(text);
    int data = 0;
    bool header = false;
    for (std::string line; std::getline(in, line);) {
        if (line == "LUT_3D_SIZE 17") header = true;
        if (!line.empty() && (std::isdigit(static_cast<unsigned char>(line[0])) || line[0] == '-')) ++data;
    }
    EXPECT_TRUE(header);
    EXPECT_EQ(data, 4913);
}

TEST(Cube, RoundtripLossless) {
    const RasterImage sweep = fixtures::color_sweep();
    const Lut3D lut = fit_lut(sweep, map_pixels(sweep, encode_gamma), full(sweep)).lut;
    const auto path = std::filesystem::temp_directory_path() / "harmonia_roundtrip.cube";
    export_lut(lut, path, "roundtrip");
    const Lut3D back = import_lut(path);
    ASSERT_EQ(back.size, lut.size);
    for (std::size_t i = 0; i < lut.table.size(); ++i) ASSERT_NEAR(back.table[i], lut.table[i], 5e-7);
    EXPECT_EQ(format_cube(back, "roundtrip"), format_cube(lut, "roundtrip"));
    EXPECT_EQ(import_lut(path).table, back.table);
    std::filesystem::remove(path);
}

TEST(Cube, RejectsMalformed) {
    EXPECT_THROW(parse_cube("0 0 0\n"), ConfigError);
    EXPECT_THROW(parse_cube("LUT_3D_SIZE 2\n0 0 0\n"), ConfigError);
    EXPECT_THROW(parse_cube("LUT_1D_SIZE 4\n"), ConfigError);
}
