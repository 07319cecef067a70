#include "harmonia/luts.hpp"

#include "harmonia/errors.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace harmonia {

Lut3D Lut3D::identity(int size) {
    if (size < 2) throw ConfigError("LUT size must be at least 2");
    Lut3D lut;
    lut.size = size;
    lut.table.resize(static_cast<std::size_t>(size) * size * size * 3);
    const double step = 1.0 / (size - 1);
    for (int b = 0; b < size; ++b)
        for (int g = 0; g < size; ++g)
            for (int r = 0; r < size; ++r) {
                const auto i = lut.node(r, g, b) * 3;
                lut.table[i] = r * step;
                lut.table[i + 1] = g * step;
                lut.table[i + 2] = b * step;
            }
    return lut;
}

std::array<double, 3> Lut3D::at(int r, int g, int b) const {
    const auto i = node(r, g, b) * 3;
    return {table[i], table[i + 1], table[i + 2]};
}

namespace {

struct Cell {
    int i[3];
    double f[3];
};

Cell locate(int size, double r, double g, double b) {
    Cell c{};
    const double v[3] = {r, g, b};
    for (int a = 0; a < 3; ++a) {
        const double t = std::clamp(v[a], 0.0, 1.0) * (size - 1);
        int i = static_cast<int>(std::floor(t));
        if (i >= size - 1) i = size - 2;
        c.i[a] = i;
        c.f[a] = t - i;
    }
    return c;
}

// Corner k of a cell: bit 0 red, bit 1 green, bit 2 blue.
double corner_weight(const Cell& c, int k) {
    double w = 1.0;
    for (int a = 0; a < 3; ++a) w *= (k >> a & 1) ? c.f[a] : 1.0 - c.f[a];
    return w;
}

}  // namespace

std::array<double, 3> Lut3D::lookup(double r, double g, double b) const {
    const Cell c = locate(size, r, g, b);
    std::array<double, 3> out{};
    for (int k = 0; k < 8; ++k) {
        const double w = corner_weight(c, k);
        const auto i = node(c.i[0] + (k & 1), c.i[1] + (k >> 1 & 1), c.i[2] + (k >> 2 & 1)) * 3;
        for (int ch = 0; ch < 3; ++ch) out[ch] += w * table[i + ch];
    }
    return out;
}

LutFit fit_lut(const RasterImage& from, const RasterImage& to, const ForegroundMask& mask, const LutFitConfig& cfg) {
    if (from.size() != to.size() || from.size() != mask.size()) {
        throw MaskShapeError("LUT fit inputs differ in size");
    }
    if (mask.foreground_count() == 0) throw DegenerateMaskError("LUT fit mask is empty");
    if (cfg.size < 2) throw ConfigError("LUT size must be at least 2");
    if (cfg.lambda < 0.0) throw ConfigError("LUT smoothness weight must be >= 0");

    const int L = cfg.size;
    const auto nodes = static_cast<std::size_t>(L) * L * L;
    // Normal equations, accumulated per node over its 27 lattice neighbours.
    std::vector<double> ata(nodes * 27, 0.0);
    std::vector<double> atb(nodes * 3, 0.0);
    auto slot = [](int dr, int dg, int db) { return (db + 1) * 9 + (dg + 1) * 3 + (dr + 1); };
    std::set<std::size_t> cells;
    std::size_t n = 0;

    for (int y = 0; y < from.height(); ++y) {
        for (int x = 0; x < from.width(); ++x) {
            if (mask.at(y, x) == 0) continue;
            ++n;
            const Cell c = locate(L, from.at(y, x, 0), from.at(y, x, 1), from.at(y, x, 2));
            cells.insert((static_cast<std::size_t>(c.i[2]) * L + c.i[1]) * L + c.i[0]);
            double w[8];
            std::size_t idx[8];
            for (int k = 0; k < 8; ++k) {
                w[k] = corner_weight(c, k);
                idx[k] = (static_cast<std::size_t>(c.i[2] + (k >> 2 & 1)) * L + c.i[1] + (k >> 1 & 1)) * L + c.i[0] +
                         (k & 1);
            }
            for (int a = 0; a < 8; ++a) {
                for (int ch = 0; ch < 3; ++ch) atb[idx[a] * 3 + ch] += w[a] * to.at(y, x, ch);
                for (int b = 0; b < 8; ++b) {
                    const int dr = (b & 1) - (a & 1), dg = (b >> 1 & 1) - (a >> 1 & 1), db = (b >> 2 & 1) - (a >> 2 & 1);
                    ata[idx[a] * 27 + slot(dr, dg, db)] += w[a] * w[b];
                }
            }
        }
    }

    LutFit fit;
    fit.pixels = n;
    fit.occupied_cells = cells.size();
    fit.lambda_used = cfg.lambda;
    if (static_cast<double>(n) < cfg.min_pixels_per_cell * static_cast<double>(cells.size())) {
        fit.lambda_used = std::max(cfg.lambda, 1e-6) * 10.0;
        fit.flagged = true;
    }

    const Lut3D id = Lut3D::identity(L);
    constexpr double anchor = 1e-9;
    const double data_weight = static_cast<double>(nodes) / static_cast<double>(n);

    for (int attempt = 0;; ++attempt) {
        const double lambda = fit.lambda_used;
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(nodes * 27);
        auto id_of = [L](int r, int g, int b) { return (static_cast<int>(b) * L + g) * L + r; };
        for (int b = 0; b < L; ++b)
            for (int g = 0; g < L; ++g)
                for (int r = 0; r < L; ++r) {
                    const int i = id_of(r, g, b);
                    for (int db = -1; db <= 1; ++db)
                        for (int dg = -1; dg <= 1; ++dg)
                            for (int dr = -1; dr <= 1; ++dr) {
                                const double v = ata[static_cast<std::size_t>(i) * 27 + slot(dr, dg, db)];
                                if (v != 0.0) trip.emplace_back(i, id_of(r + dr, g + dg, b + db), v * data_weight);
                            }
                    trip.emplace_back(i, i, anchor);
                }
        // Second differences (v[j-1] - 2 v[j] + v[j+1]) along each axis.
        for (int axis = 0; axis < 3; ++axis)
            for (int b = 0; b < L; ++b)
                for (int g = 0; g < L; ++g)
                    for (int r = 0; r < L; ++r) {
                        int p[3] = {r, g, b};
                        if (p[axis] == 0 || p[axis] == L - 1) continue;
                        int q[3][3];
                        for (int t = 0; t < 3; ++t) {
                            std::copy(p, p + 3, q[t]);
                            q[t][axis] += t - 1;
                        }
                        const double coef[3] = {1.0, -2.0, 1.0};
                        for (int s = 0; s < 3; ++s)
                            for (int t = 0; t < 3; ++t)
                                trip.emplace_back(id_of(q[s][0], q[s][1], q[s][2]), id_of(q[t][0], q[t][1], q[t][2]),
                                                  lambda * coef[s] * coef[t]);
                    }
        Eigen::SparseMatrix<double> A(static_cast<Eigen::Index>(nodes), static_cast<Eigen::Index>(nodes));
        A.setFromTriplets(trip.begin(), trip.end());
        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(A);
        if (solver.info() != Eigen::Success) {
            if (attempt >= 3) throw Error(ErrorCode::internal, "LUT system could not be factorized");
            fit.lambda_used = std::max(fit.lambda_used, 1e-6) * 10.0;
            fit.flagged = true;
            continue;
        }
        fit.lut.size = L;
        fit.lut.table.assign(nodes * 3, 0.0);
        for (int ch = 0; ch < 3; ++ch) {
            Eigen::VectorXd rhs(static_cast<Eigen::Index>(nodes));
            for (std::size_t i = 0; i < nodes; ++i) rhs[static_cast<Eigen::Index>(i)] = atb[i * 3 + ch] * data_weight + anchor * id.table[i * 3 + ch];
            const Eigen::VectorXd v = solver.solve(rhs);
            for (std::size_t i = 0; i < nodes; ++i) fit.lut.table[i * 3 + ch] = std::clamp(v[static_cast<Eigen::Index>(i)], 0.0, 1.0);
        }
        break;
    }

    double residual = 0.0;
    for (int y = 0; y < from.height(); ++y)
        for (int x = 0; x < from.width(); ++x) {
            if (mask.at(y, x) == 0) continue;
            const auto o = fit.lut.lookup(from.at(y, x, 0), from.at(y, x, 1), from.at(y, x, 2));
            for (int ch = 0; ch < 3; ++ch) residual += std::abs(o[ch] - to.at(y, x, ch));
        }
    fit.mean_abs_residual = residual / (3.0 * static_cast<double>(n));
    return fit;
}

RasterImage apply_lut(const RasterImage& image, const Lut3D& lut, const ForegroundMask& mask) {
    if (image.size() != mask.size()) throw MaskShapeError("LUT mask does not match the image");
    RasterImage out = image;
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x) {
            if (mask.at(y, x) == 0) continue;
            const auto o = lut.lookup(image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2));
            for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = static_cast<float>(std::clamp(o[ch], 0.0, 1.0));
        }
    return out;
}

RasterImage apply_lut(const RasterImage& image, const Lut3D& lut) {
    return apply_lut(image, lut, ForegroundMask(image.width(), image.height(), 1));
}

std::string format_cube(const Lut3D& lut, const std::string& title) {
    std::string out;
    out.reserve(lut.table.size() * 10 + 128);
    if (!title.empty()) out += "TITLE \"" + title + "\"\n";
    out += "LUT_3D_SIZE " + std::to_string(lut.size) + "\n";
    out += "DOMAIN_MIN 0.0 0.0 0.0\nDOMAIN_MAX 1.0 1.0 1.0\n";
    char buf[96];
    for (std::size_t i = 0; i + 2 < lut.table.size(); i += 3) {
        std::snprintf(buf, sizeof buf, "%.6f %.6f %.6f\n", lut.table[i], lut.table[i + 1], lut.table[i + 2]);
        out += buf;
    }
    return out;
}

void export_lut(const Lut3D& lut, const std::filesystem::path& path, const std::string& title) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << format_cube(lut, title);
    if (!out) throw IoError("failed writing " + path.string());
}

Lut3D parse_cube(const std::string& text) {
    Lut3D lut;
    lut.size = 0;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        if (std::isalpha(static_cast<unsigned char>(line[first]))) {
            std::istringstream kw(line);
            std::string key;
            kw >> key;
            if (key == "LUT_3D_SIZE") {
                kw >> lut.size;
                if (lut.size < 2 || lut.size > 256) throw ConfigError("bad LUT_3D_SIZE in cube file");
            } else if (key == "LUT_1D_SIZE") {
                throw ConfigError("1D cube files are not supported");
            } else if (key == "DOMAIN_MIN" || key == "DOMAIN_MAX") {
                double a, b, c;
                kw >> a >> b >> c;
                if ((key == "DOMAIN_MIN" && (a != 0 || b != 0 || c != 0)) ||
                    (key == "DOMAIN_MAX" && (a != 1 || b != 1 || c != 1))) {
                    throw ConfigError("only the [0,1] cube domain is supported");
                }
            }
            continue;
        }
        std::istringstream row(line);
        double r, g, b;
        if (!(row >> r >> g >> b)) throw ConfigError("malformed cube data line '" + line + "'");
        lut.table.insert(lut.table.end(), {r, g, b});
    }
    if (lut.size == 0) throw ConfigError("cube file has no LUT_3D_SIZE");
    if (lut.table.size() != static_cast<std::size_t>(lut.size) * lut.size * lut.size * 3) {
        throw ConfigError("cube file has " + std::to_string(lut.table.size() / 3) + " entries, expected " +
                          std::to_string(lut.size * lut.size * lut.size));
    }
    return lut;
}

Lut3D import_lut(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_cube(ss.str());
}

}  // namespace harmonia
