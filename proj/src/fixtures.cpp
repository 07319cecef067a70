#include "harmonia/fixtures.hpp"

#include "harmonia/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace harmonia::fixtures {

namespace fs = std::filesystem;

RasterImage color_sweep() {
    constexpr int n = 40;
    RasterImage img(320, 200);
    for (int i = 0; i < n * n * n; ++i) {
        const int y = i / 320, x = i % 320;
        img.at(y, x, 0) = static_cast<float>((i % n) / double(n - 1));
        img.at(y, x, 1) = static_cast<float>((i / n % n) / double(n - 1));
        img.at(y, x, 2) = static_cast<float>((i / (n * n)) / double(n - 1));
    }
    return img;
}

RasterImage texture(int width, int height, Rgb base, double amplitude, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    // 9x9 control grid, bilinearly interpolated.
    constexpr int g = 9;
    std::vector<double> ctrl(g * g);
    for (auto& v : ctrl) v = u(rng);
    const double phase = 3.0 * u(rng);
    RasterImage img(width, height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double gx = x * (g - 1.0) / std::max(1, width - 1);
            const double gy = y * (g - 1.0) / std::max(1, height - 1);
            const int ix = std::min(g - 2, static_cast<int>(gx));
            const int iy = std::min(g - 2, static_cast<int>(gy));
            const double fx = gx - ix, fy = gy - iy;
            const double v = (1 - fx) * (1 - fy) * ctrl[iy * g + ix] + fx * (1 - fy) * ctrl[iy * g + ix + 1] +
                             (1 - fx) * fy * ctrl[(iy + 1) * g + ix] + fx * fy * ctrl[(iy + 1) * g + ix + 1];
            const double wave = 0.6 * v + 0.4 * std::sin(0.23 * x + 0.11 * y + phase);
            for (int c = 0; c < 3; ++c) {
                img.at(y, x, c) = static_cast<float>(std::clamp(base[c] + amplitude * wave, 0.0, 1.0));
            }
        }
    }
    return img;
}

ForegroundMask ellipse(int width, int height, double cx, double cy, double rx, double ry) {
    ForegroundMask m(width, height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double dx = ((x + 0.5) / width - cx) / rx;
            const double dy = ((y + 0.5) / height - cy) / ry;
            m.at(y, x) = dx * dx + dy * dy <= 1.0 ? 1 : 0;
        }
    }
    return m;
}

const std::vector<CaseSpec>& bundled_cases() {
    static const std::vector<CaseSpec> cases{
        {"dog_dusky_lawn", 192, 144, {0.95, 0.92, 0.9}, {0.25, 0.2, 0.15}, {0.5, 0.58, 0.2, 0.28},
         {"object: dog | foreground: overbright | background: dusky warm",
          "object: dog | foreground: bright | background: dusky",
          "object: dog | foreground: overexposed | background: dark warm",
          "object: dog | foreground: bright daylight | background: dusk",
          "object: dog | foreground: overbright | background: evening"},
         3},
        {"bird_sunset", 192, 144, {0.55, 0.7, 0.9}, {0.85, 0.5, 0.25}, {0.42, 0.45, 0.16, 0.22},
         {"object: bird | foreground: cool blue | background: sunset orange",
          "object: bird | foreground: cold | background: golden",
          "object: bird | foreground: bluish | background: warm sunset",
          "object: bird | foreground: winter | background: orange",
          "object: bird | foreground: cool | background: autumn"},
         5},
        {"car_night", 192, 144, {0.85, 0.82, 0.7}, {0.12, 0.14, 0.3}, {0.55, 0.62, 0.25, 0.2},
         {"object: car | foreground: sunny midday | background: night blue",
          "object: car | foreground: daylight | background: night",
          "object: car | foreground: bright | background: dark cool",
          "object: car | foreground: sunny | background: night",
          "object: car | foreground: noon | background: dark blue"},
         7},
        {"vase_shade", 192, 144, {0.98, 0.97, 0.95}, {0.4, 0.42, 0.4}, {0.5, 0.5, 0.15, 0.3},
         {"object: vase | foreground: overexposed | background: shade overcast",
          "object: vase | foreground: overbright | background: gloomy",
          "object: vase | foreground: bright | background: overcast",
          "object: vase | foreground: overexposed | background: shadowy",
          "object: vase | foreground: light | background: cloudy"},
         9},
        {"cup_golden", 192, 144, {0.45, 0.55, 0.75}, {0.8, 0.62, 0.3}, {0.38, 0.6, 0.18, 0.22},
         {"object: cup | foreground: cold blue | background: golden warm",
          "object: cup | foreground: cool | background: golden",
          "object: cup | foreground: bluish | background: warm yellow",
          "object: cup | foreground: winter | background: sunset",
          "object: cup | foreground: cold | background: orange"},
         13},
    };
    return cases;
}

CompositeCase render_case(const CaseSpec& spec) {
    RasterImage img = texture(spec.width, spec.height, spec.back, 0.08, spec.seed);
    const RasterImage fg = texture(spec.width, spec.height, spec.fore, 0.06, spec.seed + 101);
    const auto& e = spec.ellipse;
    ForegroundMask mask = ellipse(spec.width, spec.height, e[0], e[1], e[2], e[3]);
    for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x)
            if (mask.at(y, x))
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = fg.at(y, x, c);
    return make_case(std::move(img), std::move(mask), spec.id);
}

ScoredExample evaluator_example(int size, double m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Rgb back{0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng)};
    Rgb fore{};
    for (int c = 0; c < 3; ++c) fore[c] = std::clamp(back[c] * (0.85 + 0.3 * u(rng)), 0.05, 0.95);
    const double sign = u(rng) < 0.5 ? -1.0 : 1.0;
    const double gain = 1.0 + sign * 0.7 * m;
    const int tint_channel = static_cast<int>(u(rng) * 3.0) % 3;
    const double tint = (u(rng) < 0.5 ? -0.25 : 0.25) * m;
    Rgb lit{};
    for (int c = 0; c < 3; ++c) lit[c] = std::clamp(fore[c] * gain + (c == tint_channel ? tint : 0.0), 0.0, 1.0);

    const std::uint64_t tex_seed = rng();
    RasterImage img = texture(size, size, back, 0.07, tex_seed);
    const RasterImage fg = texture(size, size, lit, 0.06, tex_seed + 1);
    const double cx = 0.35 + 0.3 * u(rng), cy = 0.35 + 0.3 * u(rng);
    const double rx = 0.15 + 0.1 * u(rng), ry = 0.15 + 0.1 * u(rng);
    ForegroundMask mask = ellipse(size, size, cx, cy, rx, ry);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            if (mask.at(y, x))
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = fg.at(y, x, c);

    ScoredExample ex;
    ex.image = std::move(img);
    ex.mask = std::move(mask);
    const int noise = static_cast<int>(u(rng) * 3.0) - 1;
    const int rank = std::clamp(static_cast<int>(std::lround(10.0 * (1.0 - m))) + noise, 1, 10);
    ex.label = rank / 10.0;
    return ex;
}

std::vector<ScoredExample> evaluator_examples(int count, int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<ScoredExample> out;
    for (int i = 0; i < count; ++i) {
        const double m = u(rng);
        ScoredExample ex = evaluator_example(size, m, rng());
        char name[32];
        std::snprintf(name, sizeof name, "ex_%03d", i);
        ex.id = name;
        out.push_back(std::move(ex));
    }
    return out;
}

void write_fixture_set(const fs::path& root) {
    fs::create_directories(root / "cases");
    for (const auto& spec : bundled_cases()) {
        const fs::path dir = root / "cases" / spec.id;
        fs::create_directories(dir);
        const CompositeCase c = render_case(spec);
        save_png(c.image, dir / "image.png");
        save_mask_png(c.mask, dir / "mask.png");
        std::ofstream out(dir / "descriptions.txt");
        for (const auto& line : spec.descriptions) out << line << '\n';
        if (!out) throw IoError("cannot write " + (dir / "descriptions.txt").string());
    }

    const fs::path ev = root / "evaluator";
    fs::create_directories(ev);
    std::ofstream manifest(ev / "manifest.csv");
    manifest << "# image,mask,label\n";
    for (const auto& ex : evaluator_examples()) {
        save_png(ex.image, ev / (ex.id + ".png"));
        save_mask_png(ex.mask, ev / (ex.id + "_mask.png"));
        char label[16];
        std::snprintf(label, sizeof label, "%.1f", ex.label);
        manifest << ex.id << ".png," << ex.id << "_mask.png," << label << '\n';
    }
    if (!manifest) throw IoError("cannot write evaluator manifest");

    save_png(color_sweep(), root / "color_sweep.png");
}

}  // namespace harmonia::fixtures
