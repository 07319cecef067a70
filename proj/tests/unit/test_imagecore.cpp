#include "harmonia/errors.hpp"
#include "harmonia/imagecore.hpp"
#include "support/synthetic.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace harmonia;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("harmonia_imagecore_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Independent nearest-neighbour oracle: source index floor(dst * src / dst_size).
ForegroundMask nearest_oracle(const ForegroundMask& m, Size size) {
    ForegroundMask out(size.width, size.height);
    for (int y = 0; y < size.height; ++y) {
        const int sy = std::min(m.height() - 1, static_cast<int>(std::floor(y * double(m.height()) / size.height)));
        for (int x = 0; x < size.width; ++x) {
            const int sx = std::min(m.width() - 1, static_cast<int>(std::floor(x * double(m.width()) / size.width)));
            out.at(y, x) = m.at(sy, sx);
        }
    }
    return out;
}

// 8x8 grey-level PNG whose first row starts 0, 128, 255, stored as RGB;
// the mask loader converts it to one channel.
void write_gray_ramp_png(const fs::path& path) {
    std::vector<std::uint8_t> rgb(8 * 8 * 3, 0);
    for (int c = 0; c < 3; ++c) {
        rgb[3 + c] = 128;
        rgb[6 + c] = 255;
    }
    save_png(RasterImage::from_rgb8(8, 8, rgb), path);
}

}  // namespace

TEST(LoadCase, ValidPairAtWorkingResolution) {
    auto dir = temp_dir("valid");
    auto c = synth::split_composite(512, {0.9, 0.9, 0.8}, {0.2, 0.25, 0.2});
    save_png(c.image, dir / "img.png");
    save_mask_png(c.mask, dir / "mask.png");
    auto loaded = load_case(dir / "img.png", dir / "mask.png");
    EXPECT_EQ(loaded.image.size(), (Size{512, 512}));
    EXPECT_EQ(loaded.mask, c.mask);
    EXPECT_EQ(loaded.case_id, "img");
}

TEST(LoadCase, AllZeroMaskIsDegenerate) {
    auto dir = temp_dir("zero");
    save_png(RasterImage(32, 32, 0.5f), dir / "img.png");
    save_mask_png(ForegroundMask(32, 32, 0), dir / "mask.png");
    EXPECT_THROW(load_case(dir / "img.png", dir / "mask.png"), DegenerateMaskError);
}

TEST(LoadCase, FullMaskIsDegenerate) {
    EXPECT_THROW(make_case(RasterImage(16, 16), ForegroundMask(16, 16, 1)), DegenerateMaskError);
}

TEST(LoadCase, ShapeMismatch) {
    EXPECT_THROW(make_case(RasterImage(16, 16), ForegroundMask(16, 17, 1)), MaskShapeError);
}

TEST(LoadCase, GrayMaskThresholdsAtHalf) {
    std::vector<std::uint8_t> gray{0, 128, 255, 127, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    auto m = ForegroundMask::from_gray8(4, 4, gray);
    EXPECT_EQ(m.at(0, 0), 0);
    EXPECT_EQ(m.at(0, 1), 0);
    EXPECT_EQ(m.at(0, 2), 1);
    EXPECT_EQ(m.at(0, 3), 0);
}

TEST(LoadCase, GrayPngThresholdExample) {
    auto dir = temp_dir("gray");
    write_gray_ramp_png(dir / "m.png");
    auto back = load_mask(dir / "m.png");
    EXPECT_EQ(back.at(0, 0), 0);
    EXPECT_EQ(back.at(0, 1), 0);
    EXPECT_EQ(back.at(0, 2), 1);
    for (auto v : back.data()) EXPECT_TRUE(v == 0 || v == 1);
}

TEST(ResizeToWorking, RemembersOriginalSize) {
    auto img = synth::random_image(1024, 768, 3);
    auto mask = synth::ellipse_mask(1024, 768);
    auto c = make_case(img, mask, "big");
    auto w = resize_to_working(c, 512);
    EXPECT_EQ(w.image.size(), (Size{512, 512}));
    EXPECT_EQ(w.mask.size(), (Size{512, 512}));
    EXPECT_EQ(w.original_size, (Size{1024, 768}));
    for (float v : w.image.data()) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
    }
}

TEST(ResizeToWorking, IdentityAtWorkingSize) {
    auto c = synth::split_composite(64, {0.8, 0.2, 0.2}, {0.1, 0.1, 0.6});
    auto w = resize_to_working(c, 64);
    EXPECT_EQ(w.image, c.image);
    EXPECT_EQ(w.mask, c.mask);
}

TEST(ResizeToWorking, MaskMatchesNearestOracle) {
    std::mt19937 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const int w = 20 + static_cast<int>(rng() % 90);
        const int h = 20 + static_cast<int>(rng() % 90);
        ForegroundMask m(w, h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) m.at(y, x) = (rng() % 3 == 0) ? 1 : 0;
        m.at(0, 0) = 1;
        m.at(h - 1, w - 1) = 0;
        const Size target{37 + trial, 53};
        EXPECT_EQ(resize_nearest(m, target), nearest_oracle(m, target)) << "trial " << trial;
    }
}

TEST(ResizeToWorking, SingleForegroundPixel) {
    // The oracle decides whether the lone pixel survives; the resize either
    // keeps it or reports the degenerate mask.
    for (int px : {0, 37, 51, 99}) {
        ForegroundMask m(100, 100);
        m.at(px, px) = 1;
        auto c = make_case(RasterImage(100, 100, 0.3f), m);
        const auto expected = nearest_oracle(m, {64, 64});
        if (expected.foreground_count() == 0) {
            EXPECT_THROW(resize_to_working(c, 64), DegenerateMaskError);
        } else {
            auto w = resize_to_working(c, 64);
            EXPECT_EQ(w.mask, expected);
        }
    }
}

TEST(ResizeToWorking, RoundtripOnlyInterpolationError) {
    auto c = synth::split_composite(128, {0.7, 0.5, 0.3}, {0.2, 0.3, 0.4});
    auto small = resize_to_working(c, 96);
    auto back = resize_to_working(small, 128);
    for (auto v : back.mask.data()) EXPECT_TRUE(v == 0 || v == 1);
    double sum = 0.0;
    auto a = back.image.data();
    auto b = c.image.data();
    for (std::size_t i = 0; i < a.size(); ++i) sum += std::abs(a[i] - b[i]);
    EXPECT_LT(sum / a.size(), 0.05);
}

TEST(CompositeBack, AllOnesGivesEdited) {
    auto orig = synth::random_image(16, 16, 1);
    auto edited = synth::random_image(16, 16, 2);
    EXPECT_EQ(composite_back(orig, edited, ForegroundMask(16, 16, 1)), edited);
}

TEST(CompositeBack, AllZerosGivesOriginalBitExact) {
    auto orig = synth::random_image(16, 16, 1);
    auto edited = synth::random_image(16, 16, 2);
    EXPECT_EQ(composite_back(orig, edited, ForegroundMask(16, 16, 0)), orig);
}

TEST(CompositeBack, HalfMaskPerPixelOracle) {
    auto orig = synth::random_image(24, 20, 3);
    auto edited = synth::random_image(24, 20, 4);
    ForegroundMask m(24, 20);
    for (int y = 0; y < 20; ++y)
        for (int x = 12; x < 24; ++x) m.at(y, x) = 1;
    auto out = composite_back(orig, edited, m);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 24; ++x)
            for (int c = 0; c < 3; ++c)
                ASSERT_EQ(out.at(y, x, c), m.at(y, x) ? edited.at(y, x, c) : orig.at(y, x, c));
}

TEST(CompositeBack, ShapeMismatchThrows) {
    EXPECT_THROW(composite_back(RasterImage(8, 8), RasterImage(9, 8), ForegroundMask(8, 8)), MaskShapeError);
}

TEST(CompositeBack, FeatheredKeepsBackground) {
    auto c = synth::split_composite(64, {0.9, 0.9, 0.9}, {0.1, 0.1, 0.1});
    auto edited = synth::random_image(64, 64, 9);
    auto out = composite_back_feathered(c.image, edited, c.mask, 3.0);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            if (!c.mask.at(y, x))
                for (int ch = 0; ch < 3; ++ch) ASSERT_EQ(out.at(y, x, ch), c.image.at(y, x, ch));
}

TEST(CompositeBack, ClampsOutOfRangeEdits) {
    auto orig = synth::random_image(8, 8, 1);
    RasterImage edited(8, 8, 1.7f);
    auto out = composite_back(orig, edited, ForegroundMask(8, 8, 1));
    for (float v : out.data()) EXPECT_EQ(v, 1.0f);
}

TEST(RasterImage, Rgb8Roundtrip) {
    std::vector<std::uint8_t> rgb(8 * 8 * 3);
    for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<std::uint8_t>(i * 7);
    EXPECT_EQ(RasterImage::from_rgb8(8, 8, rgb).to_rgb8(), rgb);
}

TEST(RasterImage, PngRoundtripThroughBytes) {
    auto img = RasterImage::from_rgb8(9, 11, std::vector<std::uint8_t>(9 * 11 * 3, 200));
    auto bytes = encode_png(img);
    EXPECT_EQ(decode_image(bytes), img);
}

TEST(RasterImage, DecodeGarbageThrows) {
    std::vector<std::uint8_t> junk{1, 2, 3, 4};
    EXPECT_THROW(decode_image(junk), ImageDecodeError);
}

TEST(Color, LabOfWhiteAndBlack) {
    auto w = srgb_to_lab(1, 1, 1);
    EXPECT_NEAR(w[0], 100.0, 1e-3);
    EXPECT_NEAR(w[1], 0.0, 1e-2);
    EXPECT_NEAR(w[2], 0.0, 1e-2);
    auto k = srgb_to_lab(0, 0, 0);
    EXPECT_NEAR(k[0], 0.0, 1e-6);
}

TEST(Color, RegionStatsSeparatesRegions) {
    auto c = synth::split_composite(64, {0.9, 0.1, 0.1}, {0.1, 0.1, 0.9});
    auto fg = region_stats(c.image, c.mask, true);
    auto bg = region_stats(c.image, c.mask, false);
    EXPECT_EQ(fg.count + bg.count, 64u * 64u);
    EXPECT_GT(fg.mean_rgb[0], bg.mean_rgb[0]);
    EXPECT_LT(fg.mean_rgb[2], bg.mean_rgb[2]);
}
