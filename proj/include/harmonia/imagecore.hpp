#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace harmonia {

struct Size {
    int width = 0;
    int height = 0;

    friend bool operator==(const Size&, const Size&) = default;
};

/// Working RGB image: interleaved HxWx3 floats in [0,1].
///
/// The external contract is 8-bit sRGB; conversion happens at the file
/// boundary (`load_image`, `save_png`) and in `to_rgb8`/`from_rgb8`.
class RasterImage {
public:
    static constexpr int kChannels = 3;
    static constexpr int kMinSide = 8;

    RasterImage() = default;
    RasterImage(int width, int height, float fill = 0.0f);

    static RasterImage from_rgb8(int width, int height, std::span<const std::uint8_t> rgb);
    std::vector<std::uint8_t> to_rgb8() const;

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    Size size() const noexcept { return {width_, height_}; }
    std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(width_) * height_; }
    bool empty() const noexcept { return data_.empty(); }

    float& at(int y, int x, int c) { return data_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c]; }
    float at(int y, int x, int c) const { return data_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c]; }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    void clamp();

    friend bool operator==(const RasterImage&, const RasterImage&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<float> data_;
};

/// Binary foreground mask, 1 = foreground.
class ForegroundMask {
public:
    ForegroundMask() = default;
    ForegroundMask(int width, int height, std::uint8_t fill = 0);

    /// Thresholds 8-bit values at the midpoint: 128 and below is background.
    static ForegroundMask from_gray8(int width, int height, std::span<const std::uint8_t> gray);

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    Size size() const noexcept { return {width_, height_}; }

    std::uint8_t& at(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    std::uint8_t at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

    std::span<const std::uint8_t> data() const noexcept { return data_; }

    std::size_t foreground_count() const;
    bool is_degenerate() const;  // all foreground or all background
    ForegroundMask complement() const;
    std::vector<std::uint8_t> to_gray8() const;  // 255 = foreground

    friend bool operator==(const ForegroundMask&, const ForegroundMask&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> data_;
};

struct CompositeCase {
    RasterImage image;
    ForegroundMask mask;
    std::string case_id;
    std::vector<std::string> tags;
    Size original_size;  // size before resize_to_working
};

// -- I/O ---------------------------------------------------------------------

RasterImage load_image(const std::filesystem::path& path);
ForegroundMask load_mask(const std::filesystem::path& path);
void save_png(const RasterImage& image, const std::filesystem::path& path);
void save_mask_png(const ForegroundMask& mask, const std::filesystem::path& path);
/// Writes a single-channel map scaled from [0, max] to 0..255.
void save_gray_png(std::span<const double> values, Size size, const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const RasterImage& image);
RasterImage decode_image(std::span<const std::uint8_t> bytes);
ForegroundMask decode_mask(std::span<const std::uint8_t> bytes);

// -- Case operations -----------------------------------------------------------

/// Throws MaskShapeError / DegenerateMaskError.
void validate_case(const RasterImage& image, const ForegroundMask& mask);

CompositeCase load_case(const std::filesystem::path& image_path,
                        const std::filesystem::path& mask_path,
                        std::string case_id = {});

CompositeCase make_case(RasterImage image, ForegroundMask mask, std::string case_id = {});

/// Bilinear image, nearest-neighbour mask (re-binarized). Keeps original_size.
CompositeCase resize_to_working(const CompositeCase& composite, int size = 512);

RasterImage resize_bilinear(const RasterImage& image, Size size);
ForegroundMask resize_nearest(const ForegroundMask& mask, Size size);

/// mask*edited + (1-mask)*original. Pixels with mask=0 are copied bit-exactly.
RasterImage composite_back(const RasterImage& original, const RasterImage& edited,
                           const ForegroundMask& mask);

/// Soft paste whose alpha is a Gaussian-feathered mask restricted to the
/// foreground, so background pixels are still copied bit-exactly.
RasterImage composite_back_feathered(const RasterImage& original, const RasterImage& edited,
                                     const ForegroundMask& mask, double radius_px = 3.0);

// -- Color utilities -------------------------------------------------------------

/// Rec.601 luma.
inline double luma601(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

std::vector<double> luma_plane(const RasterImage& image);

/// sRGB (D65) to CIE L*a*b*.
std::array<double, 3> srgb_to_lab(double r, double g, double b);

struct RegionStats {
    std::array<double, 3> mean_lab{};
    std::array<double, 3> std_lab{};
    std::array<double, 3> mean_rgb{};
    double mean_luma = 0.0;
    std::size_t count = 0;
};

/// Statistics over pixels where mask == want.
RegionStats region_stats(const RasterImage& image, const ForegroundMask& mask, bool want);

}  // namespace harmonia
