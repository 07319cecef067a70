#pragma once

#include "harmonia/imagecore.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace harmonia {

// -- Decisions -------------------------------------------------------------------

enum class DecisionKind { Continue, Regenerate, Conclude };

const char* to_string(DecisionKind kind);
DecisionKind decision_kind_from_string(const std::string& name);

struct Decision {
    DecisionKind kind = DecisionKind::Continue;
    std::optional<int> revert_to;  // set for Regenerate

    friend bool operator==(const Decision&, const Decision&) = default;
};

struct DecideConfig {
    int max_iterations = 10;
    int max_regenerations = 2;
};

/// Rules, in order:
///   history length >= max_iterations             -> Conclude
///   last three strictly decreasing, budget left   -> Regenerate(best_index)
///   last three strictly decreasing, budget spent  -> Conclude
///   otherwise                                     -> Continue
/// Throws ConfigError on an empty history.
Decision decide(const std::vector<double>& score_history, int best_index, int regen_count,
                const DecideConfig& cfg = {});

/// argmax, ties to the lowest index. Throws ConfigError when empty.
int select_initial(const std::vector<double>& scores);

// -- Harmony classifier --------------------------------------------------------------

/// Region-contrast features between foreground and background in Lab.
std::vector<double> harmony_features(const RasterImage& image, const ForegroundMask& mask);
const std::vector<std::string>& harmony_feature_names();

struct HarmonyModel {
    static constexpr int kVersion = 1;
    static constexpr int kInputSize = 64;

    std::vector<double> mean;     // feature standardization
    std::vector<double> scale;
    std::vector<double> weights;
    double bias = 0.0;
    std::string config_hash;
    double validation_auc = 0.0;
    double train_loss = 0.0;

    /// Probability of the harmonious class.
    double score(const RasterImage& image, const ForegroundMask& mask) const;
    double score_features(const std::vector<double>& features) const;

    void save(const std::filesystem::path& path) const;
    /// Throws EvaluatorUnavailable when missing or unreadable.
    static HarmonyModel load(const std::filesystem::path& path);
};

struct ScoredExample {
    RasterImage image;
    ForegroundMask mask;
    double label = 0.0;  // one of 0.1, 0.2, ..., 1.0
    std::string id;
};

struct TrainConfig {
    double ridge = 1e-2;
    int max_newton_steps = 50;
    double validation_fraction = 0.2;
    std::uint64_t seed = 7;
};

struct TrainReport {
    HarmonyModel model;
    std::size_t train_count = 0;
    std::size_t validation_count = 0;
    double validation_auc = 0.0;
    double validation_loss = 0.0;
    int newton_steps = 0;
};

bool on_label_grid(double label);

/// Soft-label logistic regression by Newton / IRLS on a stratified seeded
/// split. Throws LabelDegeneracyError unless labels fall on both sides of 0.5
/// with at least two distinct examples per side.
TrainReport train_evaluator(const std::vector<ScoredExample>& examples, const TrainConfig& cfg = {});

/// Lines `image_path,mask_path,label`, relative paths resolved against the
/// manifest's directory. '#' starts a comment.
std::vector<ScoredExample> load_manifest(const std::filesystem::path& path);

/// Mann-Whitney AUC of `scores` against binary `positive`; ties count half.
double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

// -- Pluggable evaluators ---------------------------------------------------------------

class HarmonyEvaluator {
public:
    virtual ~HarmonyEvaluator() = default;
    virtual std::string id() const = 0;
    virtual double score(const RasterImage& image, const ForegroundMask& mask) = 0;
};

/// Hands out a canned score sequence; the last value repeats once exhausted.
class ScriptedEvaluator final : public HarmonyEvaluator {
public:
    explicit ScriptedEvaluator(std::vector<double> scores);
    /// One score per line.
    static ScriptedEvaluator from_file(const std::filesystem::path& path);

    std::string id() const override { return "scripted"; }
    double score(const RasterImage& image, const ForegroundMask& mask) override;
    std::size_t calls() const noexcept { return next_; }

private:
    std::vector<double> scores_;
    std::size_t next_ = 0;
};

class ModelEvaluator final : public HarmonyEvaluator {
public:
    explicit ModelEvaluator(HarmonyModel model) : model_(std::move(model)) {}
    std::string id() const override { return "model:" + model_.config_hash.substr(0, 12); }
    double score(const RasterImage& image, const ForegroundMask& mask) override { return model_.score(image, mask); }
    const HarmonyModel& model() const noexcept { return model_; }

private:
    HarmonyModel model_;
};

}  // namespace harmonia
