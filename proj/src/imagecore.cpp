#include "harmonia/imagecore.hpp"

#include "harmonia/errors.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

namespace harmonia {

namespace {

std::uint8_t quantize(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

RasterImage from_bgr_mat(const cv::Mat& bgr) {
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return RasterImage::from_rgb8(rgb.cols, rgb.rows,
                                  std::span<const std::uint8_t>(rgb.data, rgb.total() * 3));
}

cv::Mat to_bgr_mat(const RasterImage& image) {
    auto rgb8 = image.to_rgb8();
    cv::Mat rgb(image.height(), image.width(), CV_8UC3, rgb8.data());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

ForegroundMask mask_from_mat(const cv::Mat& decoded) {
    cv::Mat gray;
    if (decoded.channels() == 1) {
        gray = decoded;
    } else if (decoded.channels() == 4) {
        cv::cvtColor(decoded, gray, cv::COLOR_BGRA2GRAY);
    } else {
        cv::cvtColor(decoded, gray, cv::COLOR_BGR2GRAY);
    }
    if (gray.depth() != CV_8U) {
        cv::Mat tmp;
        gray.convertTo(tmp, CV_8U, gray.depth() == CV_16U ? 1.0 / 257.0 : 1.0);
        gray = tmp;
    }
    cv::Mat contiguous = gray.isContinuous() ? gray : gray.clone();
    return ForegroundMask::from_gray8(contiguous.cols, contiguous.rows,
                                      std::span<const std::uint8_t>(contiguous.data, contiguous.total()));
}

void check_min_size(int width, int height, const std::string& what) {
    if (width < RasterImage::kMinSide || height < RasterImage::kMinSide) {
        throw ImageDecodeError(what + " is smaller than 8x8");
    }
}

}  // namespace

// -- RasterImage ---------------------------------------------------------------

RasterImage::RasterImage(int width, int height, float fill)
    : width_(width), height_(height), data_(static_cast<std::size_t>(width) * height * 3, fill) {}

RasterImage RasterImage::from_rgb8(int width, int height, std::span<const std::uint8_t> rgb) {
    RasterImage out(width, height);
    if (rgb.size() != out.data_.size()) {
        throw ImageDecodeError("rgb buffer size does not match image dimensions");
    }
    std::transform(rgb.begin(), rgb.end(), out.data_.begin(),
                   [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
    return out;
}

std::vector<std::uint8_t> RasterImage::to_rgb8() const {
    std::vector<std::uint8_t> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), quantize);
    return out;
}

void RasterImage::clamp() {
    for (auto& v : data_) {
        v = std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f;
    }
}

// -- ForegroundMask ------------------------------------------------------------

ForegroundMask::ForegroundMask(int width, int height, std::uint8_t fill)
    : width_(width), height_(height), data_(static_cast<std::size_t>(width) * height, fill ? 1 : 0) {}

ForegroundMask ForegroundMask::from_gray8(int width, int height, std::span<const std::uint8_t> gray) {
    ForegroundMask out(width, height);
    if (gray.size() != out.data_.size()) {
        throw ImageDecodeError("mask buffer size does not match dimensions");
    }
    std::transform(gray.begin(), gray.end(), out.data_.begin(),
                   [](std::uint8_t v) -> std::uint8_t { return v > 128 ? 1 : 0; });
    return out;
}

std::size_t ForegroundMask::foreground_count() const {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

bool ForegroundMask::is_degenerate() const {
    const auto fg = foreground_count();
    return fg == 0 || fg == data_.size();
}

ForegroundMask ForegroundMask::complement() const {
    ForegroundMask out = *this;
    for (auto& v : out.data_) {
        v = v ? 0 : 1;
    }
    return out;
}

std::vector<std::uint8_t> ForegroundMask::to_gray8() const {
    std::vector<std::uint8_t> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](std::uint8_t v) -> std::uint8_t { return v ? 255 : 0; });
    return out;
}

// -- I/O -------------------------------------------------------------------------

RasterImage load_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw IoError("image not found: " + path.string());
    }
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw ImageDecodeError("cannot decode image: " + path.string());
    }
    check_min_size(bgr.cols, bgr.rows, path.string());
    return from_bgr_mat(bgr);
}

ForegroundMask load_mask(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw IoError("mask not found: " + path.string());
    }
    cv::Mat decoded = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (decoded.empty()) {
        throw ImageDecodeError("cannot decode mask: " + path.string());
    }
    return mask_from_mat(decoded);
}

void save_png(const RasterImage& image, const std::filesystem::path& path) {
    if (!cv::imwrite(path.string(), to_bgr_mat(image))) {
        throw IoError("cannot write " + path.string());
    }
}

void save_mask_png(const ForegroundMask& mask, const std::filesystem::path& path) {
    auto gray = mask.to_gray8();
    cv::Mat m(mask.height(), mask.width(), CV_8UC1, gray.data());
    if (!cv::imwrite(path.string(), m)) {
        throw IoError("cannot write " + path.string());
    }
}

void save_gray_png(std::span<const double> values, Size size, const std::filesystem::path& path) {
    double peak = 0.0;
    for (double v : values) {
        peak = std::max(peak, std::abs(v));
    }
    cv::Mat m(size.height, size.width, CV_8UC1);
    for (int i = 0; i < size.width * size.height; ++i) {
        const double n = peak > 0.0 ? std::abs(values[i]) / peak : 0.0;
        m.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(n, 0.0, 1.0) * 255.0));
    }
    if (!cv::imwrite(path.string(), m)) {
        throw IoError("cannot write " + path.string());
    }
}

std::vector<std::uint8_t> encode_png(const RasterImage& image) {
    std::vector<std::uint8_t> out;
    cv::imencode(".png", to_bgr_mat(image), out);
    return out;
}

RasterImage decode_image(std::span<const std::uint8_t> bytes) {
    cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat bgr = cv::imdecode(raw, cv::IMREAD_COLOR);
    if (bgr.empty()) {
        throw ImageDecodeError("cannot decode image bytes");
    }
    check_min_size(bgr.cols, bgr.rows, "image");
    return from_bgr_mat(bgr);
}

ForegroundMask decode_mask(std::span<const std::uint8_t> bytes) {
    cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat decoded = cv::imdecode(raw, cv::IMREAD_UNCHANGED);
    if (decoded.empty()) {
        throw ImageDecodeError("cannot decode mask bytes");
    }
    return mask_from_mat(decoded);
}

// -- Case operations -------------------------------------------------------------

void validate_case(const RasterImage& image, const ForegroundMask& mask) {
    if (image.size() != mask.size()) {
        throw MaskShapeError("mask is " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                             " but image is " + std::to_string(image.width()) + "x" +
                             std::to_string(image.height()));
    }
    if (mask.foreground_count() == 0) {
        throw DegenerateMaskError("mask has no foreground pixels");
    }
    if (mask.is_degenerate()) {
        throw DegenerateMaskError("mask has no background pixels");
    }
}

CompositeCase make_case(RasterImage image, ForegroundMask mask, std::string case_id) {
    validate_case(image, mask);
    CompositeCase out;
    out.original_size = image.size();
    out.image = std::move(image);
    out.mask = std::move(mask);
    out.case_id = std::move(case_id);
    return out;
}

CompositeCase load_case(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                        std::string case_id) {
    if (case_id.empty()) {
        case_id = image_path.stem().string();
    }
    return make_case(load_image(image_path), load_mask(mask_path), std::move(case_id));
}

RasterImage resize_bilinear(const RasterImage& image, Size size) {
    if (image.size() == size) {
        return image;
    }
    cv::Mat src(image.height(), image.width(), CV_32FC3, const_cast<float*>(image.data().data()));
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(size.width, size.height), 0, 0, cv::INTER_LINEAR);
    RasterImage out(size.width, size.height);
    std::copy_n(reinterpret_cast<const float*>(dst.data), out.data().size(), out.data().begin());
    out.clamp();
    return out;
}

ForegroundMask resize_nearest(const ForegroundMask& mask, Size size) {
    if (mask.size() == size) {
        return mask;
    }
    auto gray = mask.to_gray8();
    cv::Mat src(mask.height(), mask.width(), CV_8UC1, gray.data());
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(size.width, size.height), 0, 0, cv::INTER_NEAREST);
    return ForegroundMask::from_gray8(size.width, size.height,
                                      std::span<const std::uint8_t>(dst.data, dst.total()));
}

CompositeCase resize_to_working(const CompositeCase& composite, int size) {
    CompositeCase out;
    out.case_id = composite.case_id;
    out.tags = composite.tags;
    out.original_size = composite.original_size.width > 0 ? composite.original_size : composite.image.size();
    const Size target{size, size};
    out.image = resize_bilinear(composite.image, target);
    out.mask = resize_nearest(composite.mask, target);
    if (out.mask.foreground_count() == 0) {
        throw DegenerateMaskError("foreground vanished when resizing mask to working resolution");
    }
    if (out.mask.is_degenerate()) {
        throw DegenerateMaskError("background vanished when resizing mask to working resolution");
    }
    return out;
}

RasterImage composite_back(const RasterImage& original, const RasterImage& edited, const ForegroundMask& mask) {
    if (original.size() != edited.size() || original.size() != mask.size()) {
        throw MaskShapeError("composite_back inputs differ in shape");
    }
    RasterImage out = original;
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (mask.at(y, x)) {
                for (int c = 0; c < 3; ++c) {
                    out.at(y, x, c) = std::clamp(edited.at(y, x, c), 0.0f, 1.0f);
                }
            }
        }
    }
    return out;
}

RasterImage composite_back_feathered(const RasterImage& original, const RasterImage& edited,
                                     const ForegroundMask& mask, double radius_px) {
    if (original.size() != edited.size() || original.size() != mask.size()) {
        throw MaskShapeError("composite_back inputs differ in shape");
    }
    cv::Mat m(mask.height(), mask.width(), CV_32FC1);
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            m.at<float>(y, x) = mask.at(y, x) ? 1.0f : 0.0f;
        }
    }
    cv::Mat blurred;
    const int k = 2 * static_cast<int>(std::ceil(3.0 * radius_px)) + 1;
    cv::GaussianBlur(m, blurred, cv::Size(k, k), radius_px, radius_px, cv::BORDER_REFLECT);

    RasterImage out = original;
    for (int y = 0; y < mask.height(); ++y) {
        for (int x = 0; x < mask.width(); ++x) {
            if (!mask.at(y, x)) {
                continue;
            }
            // Inside the mask the ramp goes from ~0.5 at the seam to 1 in the interior.
            const float a = std::clamp(2.0f * blurred.at<float>(y, x) - 1.0f, 0.0f, 1.0f);
            for (int c = 0; c < 3; ++c) {
                const float v = a * edited.at(y, x, c) + (1.0f - a) * original.at(y, x, c);
                out.at(y, x, c) = std::clamp(v, 0.0f, 1.0f);
            }
        }
    }
    return out;
}

// -- Color -------------------------------------------------------------------------

std::vector<double> luma_plane(const RasterImage& image) {
    std::vector<double> out(image.pixel_count());
    const auto d = image.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = luma601(d[3 * i], d[3 * i + 1], d[3 * i + 2]);
    }
    return out;
}

std::array<double, 3> srgb_to_lab(double r, double g, double b) {
    auto linear = [](double c) {
        return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
    };
    const double rl = linear(r), gl = linear(g), bl = linear(b);
    const double x = (0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl) / 0.95047;
    const double y = (0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl) / 1.0;
    const double z = (0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl) / 1.08883;
    auto f = [](double t) {
        constexpr double delta = 6.0 / 29.0;
        return t > delta * delta * delta ? std::cbrt(t) : t / (3.0 * delta * delta) + 4.0 / 29.0;
    };
    const double fx = f(x), fy = f(y), fz = f(z);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

RegionStats region_stats(const RasterImage& image, const ForegroundMask& mask, bool want) {
    RegionStats s;
    std::array<double, 3> sq{};
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            if ((mask.at(y, x) != 0) != want) {
                continue;
            }
            const double r = image.at(y, x, 0), g = image.at(y, x, 1), b = image.at(y, x, 2);
            const auto lab = srgb_to_lab(r, g, b);
            for (int c = 0; c < 3; ++c) {
                s.mean_lab[c] += lab[c];
                sq[c] += lab[c] * lab[c];
            }
            s.mean_rgb[0] += r;
            s.mean_rgb[1] += g;
            s.mean_rgb[2] += b;
            s.mean_luma += luma601(r, g, b);
            ++s.count;
        }
    }
    if (s.count == 0) {
        return s;
    }
    const double n = static_cast<double>(s.count);
    for (int c = 0; c < 3; ++c) {
        s.mean_lab[c] /= n;
        s.mean_rgb[c] /= n;
        s.std_lab[c] = std::sqrt(std::max(0.0, sq[c] / n - s.mean_lab[c] * s.mean_lab[c]));
    }
    s.mean_luma /= n;
    return s;
}

}  // namespace harmonia
