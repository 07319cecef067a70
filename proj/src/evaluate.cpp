#include "harmonia/evaluate.hpp"

#include "harmonia/errors.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace harmonia {

using nlohmann::json;

const char* to_string(DecisionKind kind) {
    switch (kind) {
        case DecisionKind::Continue: return "continue";
        case DecisionKind::Regenerate: return "regenerate";
        case DecisionKind::Conclude: return "conclude";
    }
    return "continue";
}

DecisionKind decision_kind_from_string(const std::string& name) {
    std::string n = name;
    std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
    if (n == "continue") return DecisionKind::Continue;
    if (n == "regenerate") return DecisionKind::Regenerate;
    if (n == "conclude") return DecisionKind::Conclude;
    throw ConfigError("unknown decision kind '" + name + "'");
}

Decision decide(const std::vector<double>& h, int best_index, int regen_count, const DecideConfig& cfg) {
    if (h.empty()) throw ConfigError("decide needs at least one score");
    const auto n = h.size();
    if (static_cast<int>(n) >= cfg.max_iterations) return {DecisionKind::Conclude, std::nullopt};
    if (n >= 3 && h[n - 3] > h[n - 2] && h[n - 2] > h[n - 1]) {
        if (regen_count < cfg.max_regenerations) return {DecisionKind::Regenerate, best_index};
        return {DecisionKind::Conclude, std::nullopt};
    }
    return {DecisionKind::Continue, std::nullopt};
}

int select_initial(const std::vector<double>& scores) {
    if (scores.empty()) throw ConfigError("select_initial needs at least one score");
    int best = 0;
    for (int i = 1; i < static_cast<int>(scores.size()); ++i) {
        if (scores[i] > scores[best]) best = i;
    }
    return best;
}

// -- Features ----------------------------------------------------------------------

const std::vector<std::string>& harmony_feature_names() {
    static const std::vector<std::string> names{
        "dL", "abs_dL", "abs_da", "abs_db", "log_std_L_ratio", "abs_dchroma", "seam_step",
    };
    return names;
}

std::vector<double> harmony_features(const RasterImage& full_image, const ForegroundMask& full_mask) {
    validate_case(full_image, full_mask);
    const Size size{HarmonyModel::kInputSize, HarmonyModel::kInputSize};
    RasterImage image = full_image;
    ForegroundMask mask = full_mask;
    if (full_image.size() != size) {
        image = resize_bilinear(full_image, size);
        mask = resize_nearest(full_mask, size);
        if (mask.is_degenerate()) {
            image = full_image;
            mask = full_mask;
        }
    }
    const RegionStats f = region_stats(image, mask, true);
    const RegionStats b = region_stats(image, mask, false);

    double seam = 0.0;
    std::size_t seam_count = 0;
    const auto luma = luma_plane(image);
    const int w = image.width();
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < w; ++x) {
            if (mask.at(y, x) == 0) continue;
            const int dy[] = {-1, 1, 0, 0};
            const int dx[] = {0, 0, -1, 1};
            for (int d = 0; d < 4; ++d) {
                const int yy = y + dy[d], xx = x + dx[d];
                if (yy < 0 || xx < 0 || yy >= image.height() || xx >= w || mask.at(yy, xx) != 0) continue;
                seam += std::abs(luma[static_cast<std::size_t>(y) * w + x] - luma[static_cast<std::size_t>(yy) * w + xx]);
                ++seam_count;
            }
        }
    }
    if (seam_count > 0) seam /= static_cast<double>(seam_count);

    const double cf = std::hypot(f.mean_lab[1], f.mean_lab[2]);
    const double cb = std::hypot(b.mean_lab[1], b.mean_lab[2]);
    return {
        (f.mean_lab[0] - b.mean_lab[0]) / 100.0,
        std::abs(f.mean_lab[0] - b.mean_lab[0]) / 100.0,
        std::abs(f.mean_lab[1] - b.mean_lab[1]) / 100.0,
        std::abs(f.mean_lab[2] - b.mean_lab[2]) / 100.0,
        std::log((f.std_lab[0] + 1.0) / (b.std_lab[0] + 1.0)),
        std::abs(cf - cb) / 100.0,
        seam,
    };
}

namespace {

double sigmoid(double t) {
    if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
}

std::string sha256_hex(const std::string& text) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

double soft_cross_entropy(double p, double y) {
    constexpr double eps = 1e-12;
    return -(y * std::log(std::max(p, eps)) + (1.0 - y) * std::log(std::max(1.0 - p, eps)));
}

}  // namespace

double HarmonyModel::score_features(const std::vector<double>& features) const {
    if (features.size() != weights.size()) throw ConfigError("feature count does not match the evaluator model");
    double t = bias;
    for (std::size_t i = 0; i < features.size(); ++i) t += weights[i] * (features[i] - mean[i]) / scale[i];
    return sigmoid(t);
}

double HarmonyModel::score(const RasterImage& image, const ForegroundMask& mask) const {
    return score_features(harmony_features(image, mask));
}

void HarmonyModel::save(const std::filesystem::path& path) const {
    json j{
        {"format", "harmonia-evaluator"},
        {"version", kVersion},
        {"config_hash", config_hash},
        {"features", harmony_feature_names()},
        {"mean", mean},
        {"scale", scale},
        {"weights", weights},
        {"bias", bias},
        {"validation_auc", validation_auc},
        {"train_loss", train_loss},
    };
    std::ofstream out(path);
    if (!out) throw IoError("cannot write evaluator model " + path.string());
    out << j.dump(2) << '\n';
}

HarmonyModel HarmonyModel::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw EvaluatorUnavailable("evaluator model not found: " + path.string());
    try {
        const json j = json::parse(in);
        if (j.at("format") != "harmonia-evaluator" || j.at("version").get<int>() != kVersion) {
            throw EvaluatorUnavailable("unsupported evaluator model format in " + path.string());
        }
        HarmonyModel m;
        m.config_hash = j.at("config_hash").get<std::string>();
        m.mean = j.at("mean").get<std::vector<double>>();
        m.scale = j.at("scale").get<std::vector<double>>();
        m.weights = j.at("weights").get<std::vector<double>>();
        m.bias = j.at("bias").get<double>();
        m.validation_auc = j.value("validation_auc", 0.0);
        m.train_loss = j.value("train_loss", 0.0);
        const auto n = harmony_feature_names().size();
        if (m.mean.size() != n || m.scale.size() != n || m.weights.size() != n) {
            throw EvaluatorUnavailable("evaluator model has the wrong feature count");
        }
        return m;
    } catch (const json::exception& e) {
        throw EvaluatorUnavailable("malformed evaluator model " + path.string() + ": " + e.what());
    }
}

bool on_label_grid(double label) {
    const double r = std::round(label * 10.0);
    return r >= 1.0 && r <= 10.0 && std::abs(label * 10.0 - r) < 1e-9;
}

double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
    double pos = 0, neg = 0, wins = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!positive[i]) continue;
        ++pos;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (positive[j]) continue;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    for (bool p : positive) neg += p ? 0.0 : 1.0;
    if (pos == 0 || neg == 0) return std::nan("");
    return wins / (pos * neg);
}

TrainReport train_evaluator(const std::vector<ScoredExample>& examples, const TrainConfig& cfg) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (!on_label_grid(examples[i].label)) {
            throw ConfigError("label " + std::to_string(examples[i].label) + " is not on the 10-rank grid");
        }
        (examples[i].label > 0.5 ? pos : neg).push_back(i);
    }
    if (pos.size() < 2 || neg.size() < 2) {
        throw LabelDegeneracyError("training needs at least two examples on each side of 0.5");
    }

    std::vector<std::vector<double>> feats(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) feats[i] = harmony_features(examples[i].image, examples[i].mask);
    auto distinct = [&](const std::vector<std::size_t>& idx) {
        for (std::size_t i = 1; i < idx.size(); ++i) {
            if (feats[idx[i]] != feats[idx[0]]) return true;
        }
        return false;
    };
    if (!distinct(pos) && !distinct(neg) && feats[pos[0]] == feats[neg[0]]) {
        throw LabelDegeneracyError("all training examples are identical");
    }

    // Stratified split so both classes reach validation.
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> train, val;
    for (auto* group : {&pos, &neg}) {
        auto idx = *group;
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
        const auto n_val = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::lround(cfg.validation_fraction * static_cast<double>(idx.size()))), 1,
            idx.size() - 1);
        val.insert(val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
        train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());

    const auto d = harmony_feature_names().size();
    HarmonyModel model;
    model.mean.assign(d, 0.0);
    model.scale.assign(d, 0.0);
    for (auto i : train)
        for (std::size_t f = 0; f < d; ++f) model.mean[f] += feats[i][f];
    for (auto& m : model.mean) m /= static_cast<double>(train.size());
    for (auto i : train)
        for (std::size_t f = 0; f < d; ++f) model.scale[f] += std::pow(feats[i][f] - model.mean[f], 2);
    for (auto& s : model.scale) {
        s = std::sqrt(s / static_cast<double>(train.size()));
        if (s < 1e-12) s = 1.0;
    }

    // Design matrix with a trailing bias column.
    const auto n = static_cast<Eigen::Index>(train.size());
    const auto dd = static_cast<Eigen::Index>(d);
    Eigen::MatrixXd X(n, dd + 1);
    Eigen::VectorXd y(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto i = train[static_cast<std::size_t>(r)];
        for (Eigen::Index f = 0; f < dd; ++f) X(r, f) = (feats[i][f] - model.mean[f]) / model.scale[f];
        X(r, dd) = 1.0;
        y[r] = examples[i].label;
    }
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(dd + 1);
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(dd + 1, cfg.ridge * static_cast<double>(n));
    penalty[dd] = 0.0;

    TrainReport report;
    for (int it = 0; it < cfg.max_newton_steps; ++it) {
        Eigen::VectorXd p = (X * beta).unaryExpr([](double t) { return sigmoid(t); });
        Eigen::VectorXd g = X.transpose() * (p - y) + penalty.cwiseProduct(beta);
        Eigen::VectorXd s = p.cwiseProduct((1.0 - p.array()).matrix()).cwiseMax(1e-10);
        Eigen::MatrixXd H = X.transpose() * s.asDiagonal() * X;
        H.diagonal() += penalty + Eigen::VectorXd::Constant(dd + 1, 1e-10);
        const Eigen::VectorXd step = H.ldlt().solve(g);
        beta -= step;
        report.newton_steps = it + 1;
        if (step.cwiseAbs().maxCoeff() < 1e-10) break;
    }

    model.weights.assign(beta.data(), beta.data() + dd);
    model.bias = beta[dd];
    double loss = 0.0;
    for (Eigen::Index r = 0; r < n; ++r) loss += soft_cross_entropy(sigmoid(X.row(r).dot(beta)), y[r]);
    model.train_loss = loss / static_cast<double>(n);

    std::vector<double> val_scores;
    std::vector<bool> val_pos;
    double val_loss = 0.0;
    for (auto i : val) {
        const double p = model.score_features(feats[i]);
        val_scores.push_back(p);
        val_pos.push_back(examples[i].label > 0.5);
        val_loss += soft_cross_entropy(p, examples[i].label);
    }
    report.validation_auc = roc_auc(val_scores, val_pos);
    report.validation_loss = val_loss / static_cast<double>(val.size());
    model.validation_auc = report.validation_auc;

    json meta{{"version", HarmonyModel::kVersion},
              {"features", harmony_feature_names()},
              {"input_size", HarmonyModel::kInputSize},
              {"ridge", cfg.ridge},
              {"max_newton_steps", cfg.max_newton_steps},
              {"validation_fraction", cfg.validation_fraction},
              {"seed", cfg.seed}};
    model.config_hash = sha256_hex(meta.dump());

    report.model = std::move(model);
    report.train_count = train.size();
    report.validation_count = val.size();
    return report;
}

std::vector<ScoredExample> load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read manifest " + path.string());
    const auto base = path.parent_path();
    std::vector<ScoredExample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) {
            const auto b = c.find_first_not_of(" \t\r");
            const auto e = c.find_last_not_of(" \t\r");
            cols.push_back(b == std::string::npos ? "" : c.substr(b, e - b + 1));
        }
        if (cols.size() != 3) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected image,mask,label");
        }
        ScoredExample ex;
        const std::filesystem::path img = cols[0], msk = cols[1];
        ex.image = load_image(img.is_absolute() ? img : base / img);
        ex.mask = load_mask(msk.is_absolute() ? msk : base / msk);
        try {
            ex.label = std::stod(cols[2]);
        } catch (const std::exception&) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": bad label '" + cols[2] + "'");
        }
        ex.id = cols[0];
        out.push_back(std::move(ex));
    }
    return out;
}

ScriptedEvaluator::ScriptedEvaluator(std::vector<double> scores) : scores_(std::move(scores)) {
    if (scores_.empty()) throw ConfigError("scripted evaluator needs at least one score");
    for (double s : scores_) {
        if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("scripted scores must lie in [0,1]");
    }
}

ScriptedEvaluator ScriptedEvaluator::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw EvaluatorUnavailable("scripted score file not found: " + path.string());
    std::vector<double> scores;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
        try {
            scores.push_back(std::stod(line));
        } catch (const std::exception&) {
            throw ConfigError("bad score line '" + line + "' in " + path.string());
        }
    }
    return ScriptedEvaluator(std::move(scores));
}

double ScriptedEvaluator::score(const RasterImage&, const ForegroundMask&) {
    const double s = scores_[std::min(next_, scores_.size() - 1)];
    ++next_;
    return s;
}

}  // namespace harmonia
