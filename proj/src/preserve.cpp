#include "harmonia/preserve.hpp"

#include "harmonia/errors.hpp"

#include <dlfcn.h>

#include <algorithm>
#include <cmath>

namespace harmonia {

namespace {

constexpr int kKh[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
constexpr int kKv[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
constexpr double kLuma[3] = {0.299, 0.587, 0.114};

int reflect101(int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
}

struct Responses {
    std::vector<double> gx;
    std::vector<double> gy;
};

Responses sobel_responses(const std::vector<double>& luma, Size size) {
    const int w = size.width;
    const int h = size.height;
    constexpr double kw[3] = {1.0, 2.0, 1.0};
    Responses r{std::vector<double>(luma.size(), 0.0), std::vector<double>(luma.size(), 0.0)};
    auto px = [&](int y, int x) { return luma[static_cast<std::size_t>(reflect101(y, h)) * w + reflect101(x, w)]; };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            // Antisymmetric taps are paired so flat regions give exactly 0.
            double gx = 0.0;
            double gy = 0.0;
            for (int d = -1; d <= 1; ++d) {
                gx += kw[d + 1] * (px(y - d, x - 1) - px(y - d, x + 1));
                gy += kw[d + 1] * (px(y - 1, x - d) - px(y + 1, x - d));
            }
            r.gx[static_cast<std::size_t>(y) * w + x] = gx;
            r.gy[static_cast<std::size_t>(y) * w + x] = gy;
        }
    }
    return r;
}

// Adjoint of the reflect-padded convolution with kernel k.
void convolve_adjoint(const std::vector<double>& g, const int (&k)[3][3], Size size, std::vector<double>& out) {
    const int w = size.width;
    const int h = size.height;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double gv = g[static_cast<std::size_t>(y) * w + x];
            if (gv == 0.0) continue;
            for (int u = -1; u <= 1; ++u) {
                const int sy = reflect101(y - u, h);
                for (int v = -1; v <= 1; ++v) {
                    out[static_cast<std::size_t>(sy) * w + reflect101(x - v, w)] += k[u + 1][v + 1] * gv;
                }
            }
        }
    }
}

void check_edge_size(const RasterImage& image, const EdgeMap& map) {
    if (map.width != image.width() || map.height != image.height()) {
        throw MaskShapeError("edge map and image sizes differ");
    }
}

std::vector<double> luma_grad_to_rgb(const std::vector<double>& g) {
    std::vector<double> out(g.size() * 3);
    for (std::size_t i = 0; i < g.size(); ++i) {
        for (int c = 0; c < 3; ++c) out[i * 3 + c] = kLuma[c] * g[i];
    }
    return out;
}

}  // namespace

const char* to_string(SobelMode mode) { return mode == SobelMode::signed_sum ? "signed_sum" : "magnitude"; }

SobelMode sobel_mode_from_string(const std::string& name) {
    if (name == "signed_sum" || name == "sum") return SobelMode::signed_sum;
    if (name == "magnitude") return SobelMode::magnitude;
    throw ConfigError("unknown sobel mode '" + name + "'");
}

double sobel_bound(SobelMode mode) { return mode == SobelMode::signed_sum ? 6.0 : 4.0 * std::sqrt(2.0); }

EdgeMap sobel_edges_luma(const std::vector<double>& luma, Size size, SobelMode mode) {
    if (luma.size() != static_cast<std::size_t>(size.width) * size.height) {
        throw LengthMismatchError("luma plane does not match its size");
    }
    const Responses r = sobel_responses(luma, size);
    EdgeMap out(size.width, size.height);
    for (std::size_t i = 0; i < luma.size(); ++i) {
        out.values[i] = mode == SobelMode::signed_sum ? r.gx[i] + r.gy[i] : std::hypot(r.gx[i], r.gy[i]);
    }
    return out;
}

EdgeMap sobel_edges(const RasterImage& image, SobelMode mode) {
    return sobel_edges_luma(luma_plane(image), image.size(), mode);
}

std::vector<double> sobel_edges_vjp(const RasterImage& image, const EdgeMap& grad, SobelMode mode) {
    check_edge_size(image, grad);
    const Size size = image.size();
    std::vector<double> g_luma(grad.values.size(), 0.0);
    if (mode == SobelMode::signed_sum) {
        convolve_adjoint(grad.values, kKh, size, g_luma);
        convolve_adjoint(grad.values, kKv, size, g_luma);
    } else {
        const Responses r = sobel_responses(luma_plane(image), size);
        std::vector<double> gx(grad.values.size(), 0.0);
        std::vector<double> gy(grad.values.size(), 0.0);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double m = std::hypot(r.gx[i], r.gy[i]);
            if (m == 0.0) continue;
            gx[i] = grad.values[i] * r.gx[i] / m;
            gy[i] = grad.values[i] * r.gy[i] / m;
        }
        convolve_adjoint(gx, kKh, size, g_luma);
        convolve_adjoint(gy, kKv, size, g_luma);
    }
    return luma_grad_to_rgb(g_luma);
}

EdgeMap SobelFallbackDetector::detect(const RasterImage& image) const {
    EdgeMap e = sobel_edges(image, mode_);
    const double bound = sobel_bound(mode_);
    for (auto& v : e.values) v = std::min(1.0, std::abs(v) / bound);
    return e;
}

std::optional<std::vector<double>> SobelFallbackDetector::detect_vjp(const RasterImage& image,
                                                                     const EdgeMap& grad) const {
    check_edge_size(image, grad);
    const EdgeMap e = sobel_edges(image, mode_);
    const double bound = sobel_bound(mode_);
    EdgeMap inner(e.width, e.height);
    for (std::size_t i = 0; i < e.values.size(); ++i) {
        const double s = e.values[i] > 0.0 ? 1.0 : (e.values[i] < 0.0 ? -1.0 : 0.0);
        inner.values[i] = grad.values[i] * s / bound;
    }
    return sobel_edges_vjp(image, inner, mode_);
}

PluginEdgeDetector::PluginEdgeDetector(const std::filesystem::path& library) : path_(library) {
    handle_ = ::dlopen(library.c_str(), RTLD_NOW | RTLD_LOCAL);
    if (handle_ == nullptr) {
        const char* why = ::dlerror();
        throw IoError("cannot load edge plugin " + library.string() + ": " + (why ? why : "unknown error"));
    }
    detect_ = reinterpret_cast<DetectFn>(::dlsym(handle_, "harmonia_edge_detect"));
    if (detect_ == nullptr) {
        ::dlclose(handle_);
        handle_ = nullptr;
        throw IoError("edge plugin " + library.string() + " lacks harmonia_edge_detect");
    }
    vjp_ = reinterpret_cast<VjpFn>(::dlsym(handle_, "harmonia_edge_detect_vjp"));
}

PluginEdgeDetector::~PluginEdgeDetector() {
    if (handle_ != nullptr) ::dlclose(handle_);
}

std::string PluginEdgeDetector::id() const { return "plugin:" + path_.filename().string(); }

EdgeMap PluginEdgeDetector::detect(const RasterImage& image) const {
    std::vector<float> out(image.pixel_count(), 0.0f);
    if (detect_(image.data().data(), image.width(), image.height(), out.data()) != 0) {
        throw BackendNumericsError("edge plugin " + path_.string() + " reported failure");
    }
    EdgeMap e(image.width(), image.height());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!std::isfinite(out[i])) throw BackendNumericsError("edge plugin returned a non-finite value");
        e.values[i] = std::clamp(static_cast<double>(out[i]), 0.0, 1.0);
    }
    return e;
}

std::optional<std::vector<double>> PluginEdgeDetector::detect_vjp(const RasterImage& image,
                                                                  const EdgeMap& grad) const {
    if (vjp_ == nullptr) return std::nullopt;
    check_edge_size(image, grad);
    std::vector<float> g(grad.values.begin(), grad.values.end());
    std::vector<float> out(image.data().size(), 0.0f);
    if (vjp_(image.data().data(), image.width(), image.height(), g.data(), out.data()) != 0) {
        throw BackendNumericsError("edge plugin gradient reported failure");
    }
    return std::vector<double>(out.begin(), out.end());
}

LoadedDetector load_edge_detector(const std::optional<std::filesystem::path>& library, SobelMode fallback_mode) {
    LoadedDetector out;
    if (library && !library->empty()) {
        try {
            out.detector = std::make_shared<PluginEdgeDetector>(*library);
            return out;
        } catch (const Error& e) {
            out.warnings.push_back(std::string(e.what()) + "; using Sobel fallback for deep edges");
        }
    } else {
        out.warnings.push_back("no deep edge plugin configured; using Sobel fallback for deep edges");
    }
    out.detector = std::make_shared<SobelFallbackDetector>(fallback_mode);
    return out;
}

EdgeMap deep_edges(const RasterImage& image, const EdgeDetector& detector) { return detector.detect(image); }

std::set<int> self_attention_steps(int steps, double fraction) {
    if (fraction < 0.0 || fraction > 1.0) throw ConfigError("self-attention fraction must be within [0,1]");
    const int count = static_cast<int>(std::lround(fraction * steps));
    std::set<int> out;
    for (int k = steps; k > steps - count; --k) out.insert(k);
    return out;
}

EdgeObjective::EdgeObjective(const RasterImage& original, double gamma, SobelMode mode,
                             std::shared_ptr<const EdgeDetector> deep)
    : gamma_(gamma), mode_(mode), deep_(std::move(deep)) {
    if (gamma_ < 0.0) throw ConfigError("gamma must be >= 0");
    if (gamma_ > 0.0 && !deep_) deep_ = std::make_shared<SobelFallbackDetector>(mode_);
    sobel_ref_ = sobel_edges(original, mode_);
    if (gamma_ > 0.0) {
        deep_ref_ = deep_->detect(original);
        const EdgeMap probe(original.width(), original.height());
        deep_differentiable_ = deep_->detect_vjp(original, probe).has_value();
    }
}

EdgeLoss EdgeObjective::evaluate(const RasterImage& candidate, bool want_grad) const {
    if (candidate.size() != sobel_ref_.size()) throw MaskShapeError("edge loss inputs differ in size");
    const double n = static_cast<double>(sobel_ref_.values.size());
    EdgeLoss out;
    const EdgeMap e = sobel_edges(candidate, mode_);
    EdgeMap g(e.width, e.height);
    for (std::size_t i = 0; i < e.values.size(); ++i) {
        const double d = e.values[i] - sobel_ref_.values[i];
        out.sobel_term += d * d;
        g.values[i] = 2.0 * d / n;
    }
    out.sobel_term /= n;
    if (want_grad) out.grad = sobel_edges_vjp(candidate, g, mode_);

    if (gamma_ > 0.0) {
        const EdgeMap dmap = deep_->detect(candidate);
        EdgeMap dg(dmap.width, dmap.height);
        for (std::size_t i = 0; i < dmap.values.size(); ++i) {
            const double d = dmap.values[i] - deep_ref_.values[i];
            out.deep_term += d * d;
            dg.values[i] = 2.0 * gamma_ * d / n;
        }
        out.deep_term /= n;
        if (want_grad && deep_differentiable_) {
            const auto extra = deep_->detect_vjp(candidate, dg);
            for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += (*extra)[i];
        }
    }
    out.value = out.sobel_term + gamma_ * out.deep_term;
    return out;
}

double edge_loss(const RasterImage& original, const RasterImage& candidate, double gamma, const EdgeDetector& deep,
                 SobelMode mode) {
    const std::shared_ptr<const EdgeDetector> view(&deep, [](const EdgeDetector*) {});
    return EdgeObjective(original, gamma, mode, view).value(candidate);
}

double edge_loss(const RasterImage& original, const RasterImage& candidate, double gamma, SobelMode mode) {
    return EdgeObjective(original, gamma, mode, std::make_shared<SobelFallbackDetector>(mode)).value(candidate);
}

}  // namespace harmonia
