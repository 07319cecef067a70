#include "harmonia/diffusion/toy_backend.hpp"

#include "harmonia/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string_view>

namespace harmonia::diffusion {

namespace {

constexpr const char* kBos = "<bos>";
constexpr const char* kEos = "<eos>";

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
    std::uint64_t h = 1469598103934665603ULL ^ seed;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

// Uniform in [-1, 1] from raw engine bits (portable across standard libraries).
double symmetric_uniform(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

Eigen::MatrixXd random_matrix(int rows, int cols, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = scale * symmetric_uniform(rng);
    return m;
}

void softmax_rows(Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp().matrix();
        m.row(r) /= m.row(r).sum();
    }
}

// 16x16 grid -> 8x8 grid by 2x2 averaging (rows are pixels, row-major grid).
Eigen::MatrixXd pool2(const Eigen::MatrixXd& m, int side) {
    const int half = side / 2;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(half * half, m.cols());
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) out.row((y / 2) * half + x / 2) += 0.25 * m.row(y * side + x);
    return out;
}

Eigen::MatrixXd upsample2(const Eigen::MatrixXd& m, int side) {
    const int half = side / 2;
    Eigen::MatrixXd out(side * side, m.cols());
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) out.row(y * side + x) = m.row((y / 2) * half + x / 2);
    return out;
}

// Adjoint of upsample2: sums each 2x2 block.
Eigen::MatrixXd upsample2_adjoint(const Eigen::MatrixXd& m, int side) {
    const int half = side / 2;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(half * half, m.cols());
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) out.row((y / 2) * half + x / 2) += m.row(y * side + x);
    return out;
}

int block_of(int coord, int extent, int side) { return static_cast<int>(static_cast<long>(coord) * side / extent); }

const std::map<std::string, std::array<double, 3>, std::less<>>& color_lexicon() {
    static const std::map<std::string, std::array<double, 3>, std::less<>> lexicon{
        {"bright", {0.8, 0.8, 0.8}},       {"overbright", {1.0, 1.0, 1.0}},  {"overexposed", {1.0, 1.0, 1.0}},
        {"sunny", {0.7, 0.6, 0.3}},        {"light", {0.5, 0.5, 0.5}},       {"vivid", {0.4, 0.3, 0.2}},
        {"midday", {0.5, 0.5, 0.4}},       {"noon", {0.5, 0.5, 0.4}},        {"daylight", {0.4, 0.4, 0.4}},
        {"dark", {-0.8, -0.8, -0.8}},      {"dusky", {-0.7, -0.7, -0.6}},    {"dim", {-0.6, -0.6, -0.6}},
        {"dusk", {-0.5, -0.6, -0.5}},      {"shadowy", {-0.6, -0.6, -0.5}},  {"underexposed", {-1.0, -1.0, -1.0}},
        {"night", {-0.9, -0.8, -0.5}},     {"overcast", {-0.3, -0.3, -0.2}}, {"gloomy", {-0.5, -0.5, -0.4}},
        {"cloudy", {-0.2, -0.2, -0.1}},    {"shade", {-0.4, -0.4, -0.3}},    {"evening", {-0.3, -0.4, -0.4}},
        {"warm", {0.6, 0.2, -0.5}},        {"orange", {0.8, 0.3, -0.6}},     {"golden", {0.6, 0.4, -0.5}},
        {"yellow", {0.5, 0.5, -0.6}},      {"red", {0.8, -0.3, -0.3}},       {"pink", {0.6, -0.1, 0.2}},
        {"sunset", {0.7, 0.1, -0.4}},      {"sunrise", {0.6, 0.3, -0.2}},    {"autumn", {0.5, 0.1, -0.5}},
        {"summer", {0.3, 0.3, 0.0}},       {"morning", {0.2, 0.2, 0.1}},     {"cool", {-0.5, 0.0, 0.6}},
        {"cold", {-0.5, -0.1, 0.6}},       {"blue", {-0.5, 0.0, 0.7}},       {"bluish", {-0.4, 0.0, 0.6}},
        {"winter", {-0.2, 0.0, 0.4}},      {"snowy", {0.3, 0.3, 0.5}},       {"green", {-0.3, 0.5, -0.3}},
        {"spring", {-0.1, 0.4, -0.1}},     {"foggy", {0.2, 0.2, 0.25}},      {"hazy", {0.2, 0.2, 0.2}},
        {"misty", {0.1, 0.15, 0.25}},      {"rainy", {-0.3, -0.2, 0.0}},     {"stormy", {-0.5, -0.4, -0.2}},
        {"neutral", {0.0, 0.0, 0.0}},      {"pale", {0.3, 0.3, 0.3}},        {"muted", {-0.1, -0.1, -0.1}},
    };
    return lexicon;
}

}  // namespace

ToyBackend::ToyBackend(ToyBackendOptions options) : options_(options) {
    if (options_.latent_side < 4 || options_.latent_side % 2 != 0) throw ConfigError("toy latent side must be even");
    if (options_.embedding_dim <= 3) throw ConfigError("toy embedding_dim must exceed 3");
    if (!(options_.key_scale > 0.0)) throw ConfigError("toy key_scale must be positive");
    const int key_in = options_.embedding_dim - 3;
    const int kd = options_.key_dim;
    for (int l = 0; l < kCrossLayers; ++l) {
        auto& layer = cross_[l];
        layer.side = l < 2 ? options_.latent_side : options_.latent_side / 2;
        layer.query_weights = random_matrix(kd, kFeatureDim, options_.weight_seed + 101 * (l + 1),
                                            1.0 / std::sqrt(static_cast<double>(kFeatureDim)));
        layer.key_weights = random_matrix(kd, key_in, options_.weight_seed + 211 * (l + 1),
                                          std::sqrt(3.0 / key_in) / options_.key_scale);
    }
    self_query_weights_ = random_matrix(kd, kFeatureDim, options_.weight_seed + 997, 1.0);
    value_map_ << 1, 0, 0, 0, 1, 0, 0, 0, 1, 0.299, 0.587, 0.114;

    // Neutral session: flat grey reference.
    const int side = options_.latent_side;
    prepare(RasterImage(side, side, 0.5f));
    residual_.clear();
    reference_size_ = {};
}

LatentShape ToyBackend::latent_shape() const { return {4, options_.latent_side, options_.latent_side}; }

void ToyBackend::prepare(const RasterImage& reference) {
    const int side = options_.latent_side;
    const int w = reference.width();
    const int h = reference.height();
    if (w < side || h < side) throw ConfigError("toy backend needs images of at least the latent side");

    Eigen::MatrixXd means = Eigen::MatrixXd::Zero(side * side, 3);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(side * side);
    for (int y = 0; y < h; ++y) {
        const int by = block_of(y, h, side);
        for (int x = 0; x < w; ++x) {
            const int p = by * side + block_of(x, w, side);
            for (int c = 0; c < 3; ++c) means(p, c) += reference.at(y, x, c);
            counts[p] += 1.0;
        }
    }
    for (int p = 0; p < side * side; ++p) means.row(p) /= counts[p];

    reference_size_ = reference.size();
    residual_.assign(reference.data().size(), 0.0);
    for (int y = 0; y < h; ++y) {
        const int by = block_of(y, h, side);
        for (int x = 0; x < w; ++x) {
            const int p = by * side + block_of(x, w, side);
            for (int c = 0; c < 3; ++c) {
                residual_[(static_cast<std::size_t>(y) * w + x) * 3 + c] = reference.at(y, x, c) - means(p, c);
            }
        }
    }

    const Eigen::RowVector3d global = means.colwise().mean();
    features_.resize(side * side, kFeatureDim);
    const double global_luma = luma601(global[0], global[1], global[2]);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const int p = y * side + x;
            const double fx = 2.0 * (x + 0.5) / side - 1.0;
            const double fy = 2.0 * (y + 0.5) / side - 1.0;
            for (int c = 0; c < 3; ++c) features_(p, c) = 4.0 * (means(p, c) - global[c]);
            features_(p, 3) = 4.0 * (luma601(means(p, 0), means(p, 1), means(p, 2)) - global_luma);
            features_(p, 4) = fx;
            features_(p, 5) = fy;
            features_(p, 6) = fx * fy;
            features_(p, 7) = 1.0;
        }
    }
    rebuild_queries();
}

void ToyBackend::set_query_features(const Eigen::MatrixXd& features) {
    const int pixels = options_.latent_side * options_.latent_side;
    if (features.rows() != pixels || features.cols() != kFeatureDim) {
        throw ConfigError("query features must be pixels x " + std::to_string(kFeatureDim));
    }
    features_ = features;
    rebuild_queries();
}

void ToyBackend::rebuild_queries() {
    const int side = options_.latent_side;
    const Eigen::MatrixXd pooled = pool2(features_, side);
    for (auto& layer : cross_) {
        const Eigen::MatrixXd& f = layer.side == side ? features_ : pooled;
        layer.queries = options_.query_gain * f * layer.query_weights.transpose();
    }
    const Eigen::MatrixXd q = features_ * self_query_weights_.transpose();
    self_probs_ = q * q.transpose() * (options_.self_temperature / (options_.key_dim * kFeatureDim));
    softmax_rows(self_probs_);
}

Latent ToyBackend::encode(const RasterImage& image) const {
    const int side = options_.latent_side;
    const int w = image.width();
    const int h = image.height();
    if (w < side || h < side) throw ConfigError("image smaller than the toy latent grid");
    Latent z(latent_shape(), 0);
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(side * side);
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(side * side, 3);
    for (int y = 0; y < h; ++y) {
        const int by = block_of(y, h, side);
        for (int x = 0; x < w; ++x) {
            const int p = by * side + block_of(x, w, side);
            for (int c = 0; c < 3; ++c) sums(p, c) += image.at(y, x, c);
            counts[p] += 1.0;
        }
    }
    const int pixels = side * side;
    for (int p = 0; p < pixels; ++p) {
        const Eigen::RowVector3d m = sums.row(p) / counts[p];
        for (int c = 0; c < 3; ++c) z.values[c * pixels + p] = 2.0 * m[c] - 1.0;
        z.values[3 * pixels + p] = 2.0 * luma601(m[0], m[1], m[2]) - 1.0;
    }
    return z;
}

RasterImage ToyBackend::decode(const Latent& latent) const {
    if (reference_size_.width == 0) throw BackendUnavailable("toy backend decode before prepare()");
    if (!(latent.shape == latent_shape())) throw BackendNumericsError("latent shape mismatch");
    if (!latent.finite()) throw BackendNumericsError("non-finite latent in decode");
    const int side = options_.latent_side;
    const int pixels = side * side;
    const int w = reference_size_.width;
    const int h = reference_size_.height;
    RasterImage out(w, h);
    for (int y = 0; y < h; ++y) {
        const int by = block_of(y, h, side);
        for (int x = 0; x < w; ++x) {
            const int p = by * side + block_of(x, w, side);
            for (int c = 0; c < 3; ++c) {
                const double base = 0.5 * (latent.values[c * pixels + p] + 1.0);
                const double v = base + residual_[(static_cast<std::size_t>(y) * w + x) * 3 + c];
                out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return out;
}

Latent ToyBackend::decode_vjp(const Latent& latent, const ImageGradient& grad) const {
    if (reference_size_.width == 0) throw BackendUnavailable("toy backend decode before prepare()");
    const int side = options_.latent_side;
    const int pixels = side * side;
    const int w = reference_size_.width;
    const int h = reference_size_.height;
    if (grad.size() != static_cast<std::size_t>(w) * h * 3) throw BackendNumericsError("gradient shape mismatch");
    Latent g(latent.shape, latent.step);
    for (int y = 0; y < h; ++y) {
        const int by = block_of(y, h, side);
        for (int x = 0; x < w; ++x) {
            const int p = by * side + block_of(x, w, side);
            for (int c = 0; c < 3; ++c) {
                g.values[c * pixels + p] += 0.5 * grad[(static_cast<std::size_t>(y) * w + x) * 3 + c];
            }
        }
    }
    return g;
}

std::array<double, 3> ToyBackend::word_color(const std::string& word) {
    const auto& lex = color_lexicon();
    if (auto it = lex.find(word); it != lex.end()) return it->second;
    const std::uint64_t h = fnv1a(word, 0x9e3779b97f4a7c15ULL);
    std::mt19937_64 rng(h);
    return {0.1 * symmetric_uniform(rng), 0.1 * symmetric_uniform(rng), 0.1 * symmetric_uniform(rng)};
}

PromptTokens ToyBackend::embed_text(const std::vector<std::string>& words, const std::vector<TokenTag>& tags) const {
    if (words.size() != tags.size()) throw ConfigError("words and tags differ in length");
    PromptTokens t;
    t.words.push_back(kBos);
    t.tags.push_back(TokenTag::special);
    for (std::size_t i = 0; i < words.size(); ++i) {
        t.words.push_back(words[i]);
        t.tags.push_back(tags[i]);
    }
    t.words.push_back(kEos);
    t.tags.push_back(TokenTag::special);

    const int dim = options_.embedding_dim;
    t.embeddings = Eigen::MatrixXd::Zero(t.size(), dim);
    for (int j = 0; j < t.size(); ++j) {
        std::mt19937_64 rng(fnv1a(t.words[j], options_.weight_seed));
        for (int d = 3; d < dim; ++d) t.embeddings(j, d) = options_.key_scale * symmetric_uniform(rng);
        if (t.tags[j] == TokenTag::fore_cond || t.tags[j] == TokenTag::back_cond) {
            const auto col = word_color(t.words[j]);
            for (int c = 0; c < 3; ++c) t.embeddings(j, c) = col[c];
        }
    }
    return t;
}

PromptTokens ToyBackend::null_tokens() const {
    PromptTokens t = embed_text({}, {});
    t.tags.assign(t.size(), TokenTag::null);
    return t;
}

void ToyBackend::check_tokens(const PromptTokens& tokens) const {
    if (tokens.embeddings.cols() != options_.embedding_dim || tokens.embeddings.rows() != tokens.size() ||
        tokens.size() == 0) {
        throw BackendNumericsError("token embedding shape mismatch");
    }
}

double ToyBackend::step_sharpness(int step) const {
    return 1.0 + 0.5 * (1.0 - static_cast<double>(step) / schedule_.steps());
}

double ToyBackend::sqrt_one_minus_alpha(int step) const { return std::sqrt(1.0 - schedule_.alpha_bar(step)); }

Eigen::VectorXd ToyBackend::bias_for(const PromptTokens& tokens) const {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(tokens.size());
    for (int j = 0; j < tokens.size(); ++j) {
        if (tokens.words[j] == kBos) b[j] = options_.sink_bias;
    }
    return b;
}

Eigen::MatrixXd ToyBackend::logits(const CrossLayer& layer, int step, const PromptTokens& tokens) const {
    const Eigen::MatrixXd keys = tokens.embeddings.rightCols(options_.embedding_dim - 3) * layer.key_weights.transpose();
    const double scale = step_sharpness(step) / std::sqrt(static_cast<double>(options_.key_dim));
    Eigen::MatrixXd l = scale * layer.queries * keys.transpose();
    l.rowwise() += bias_for(tokens).transpose();
    return l;
}

Latent ToyBackend::predict_branch(const Latent& latent, int step, const PromptTokens& tokens, Branch branch,
                                  AttentionController* controller) const {
    if (!(latent.shape == latent_shape())) throw BackendNumericsError("latent shape mismatch");
    if (step < 1 || step > schedule_.steps()) throw BackendNumericsError("step out of range");
    check_tokens(tokens);
    const int side = options_.latent_side;
    const int pixels = side * side;
    const double c = sqrt_one_minus_alpha(step);
    const Eigen::Map<const Eigen::MatrixXd> z(latent.values.data(), pixels, 4);

    Eigen::MatrixXd sz;
    if (controller) {
        Eigen::MatrixXd probs = self_probs_;
        controller->on_attention({step, 0, branch, AttentionKind::self, side}, probs);
        sz = probs * z;
    } else {
        sz = self_probs_ * z;
    }

    const Eigen::MatrixXd colors = tokens.embeddings.leftCols(3);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(pixels, 3);
    for (int l = 0; l < kCrossLayers; ++l) {
        const auto& layer = cross_[l];
        Eigen::MatrixXd probs = logits(layer, step, tokens);
        softmax_rows(probs);
        if (controller) controller->on_attention({step, l, branch, AttentionKind::cross, layer.side}, probs);
        const Eigen::MatrixXd o = probs * colors;
        out += layer.side == side ? o : upsample2(o, side);
    }
    out /= kCrossLayers;

    const double b = options_.self_blend;
    Latent eps(latent.shape, step);
    Eigen::Map<Eigen::MatrixXd> e(eps.values.data(), pixels, 4);
    e = c * ((1.0 - b) * z + b * sz) - options_.text_strength * c * out * value_map_.transpose();
    if (!eps.finite()) throw BackendNumericsError("non-finite noise prediction");
    return eps;
}

Eigen::MatrixXd ToyBackend::predict_branch_vjp(const Latent& latent, int step, const PromptTokens& tokens,
                                               const Latent& grad_eps) const {
    check_tokens(tokens);
    if (!(grad_eps.shape == latent_shape())) throw BackendNumericsError("gradient shape mismatch");
    (void)latent;
    const int side = options_.latent_side;
    const int pixels = side * side;
    const double c = sqrt_one_minus_alpha(step);
    const Eigen::Map<const Eigen::MatrixXd> g(grad_eps.values.data(), pixels, 4);
    // d/d(out) where out is the layer-mean colour output (pixels x 3).
    const Eigen::MatrixXd g_out = (-options_.text_strength * c / kCrossLayers) * g * value_map_;

    const Eigen::MatrixXd colors = tokens.embeddings.leftCols(3);
    const int kd = options_.key_dim;
    const double scale = step_sharpness(step) / std::sqrt(static_cast<double>(kd));
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(tokens.size(), options_.embedding_dim);
    for (const auto& layer : cross_) {
        Eigen::MatrixXd probs = logits(layer, step, tokens);
        softmax_rows(probs);
        const Eigen::MatrixXd go = layer.side == side ? g_out : upsample2_adjoint(g_out, side);
        grad.leftCols(3) += probs.transpose() * go;
        const Eigen::MatrixXd gp = go * colors.transpose();  // d/d(probs)
        const Eigen::VectorXd row_dot = (probs.array() * gp.array()).rowwise().sum();
        const Eigen::MatrixXd gl = probs.array() * (gp.colwise() - row_dot).array();
        grad.rightCols(options_.embedding_dim - 3) += scale * gl.transpose() * layer.queries * layer.key_weights;
    }
    return grad;
}

Eigen::MatrixXd ToyBackend::cross_attention(const Latent& latent, int step, const PromptTokens& tokens) const {
    (void)latent;
    check_tokens(tokens);
    Eigen::MatrixXd sum;
    for (int l = 0; l < 2; ++l) {
        Eigen::MatrixXd probs = logits(cross_[l], step, tokens);
        softmax_rows(probs);
        if (l == 0) {
            sum = probs;
        } else {
            sum += probs;
        }
    }
    return sum / 2.0;
}

Eigen::MatrixXd ToyBackend::cross_attention_vjp(const Latent& latent, int step, const PromptTokens& tokens,
                                                const Eigen::MatrixXd& grad_maps) const {
    (void)latent;
    check_tokens(tokens);
    const int pixels = options_.latent_side * options_.latent_side;
    if (grad_maps.rows() != pixels || grad_maps.cols() != tokens.size()) {
        throw BackendNumericsError("attention gradient shape mismatch");
    }
    const double scale = step_sharpness(step) / std::sqrt(static_cast<double>(options_.key_dim));
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(tokens.size(), options_.embedding_dim);
    for (int l = 0; l < 2; ++l) {
        const auto& layer = cross_[l];
        Eigen::MatrixXd probs = logits(layer, step, tokens);
        softmax_rows(probs);
        const Eigen::MatrixXd gp = 0.5 * grad_maps;
        const Eigen::VectorXd row_dot = (probs.array() * gp.array()).rowwise().sum();
        const Eigen::MatrixXd gl = probs.array() * (gp.colwise() - row_dot).array();
        grad.rightCols(options_.embedding_dim - 3) += scale * gl.transpose() * layer.queries * layer.key_weights;
    }
    return grad;
}

}  // namespace harmonia::diffusion
