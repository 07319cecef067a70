#pragma once

#include <Eigen/Dense>

#include <map>
#include <memory>
#include <vector>

namespace harmonia::diffusion {

enum class Branch { conditional, unconditional };

enum class AttentionKind { cross, self };

struct AttentionSite {
    int step = 0;
    int layer = 0;
    Branch branch = Branch::conditional;
    AttentionKind kind = AttentionKind::cross;
    int resolution = 0;  // side length of the layer's spatial grid
};

/// Hooks fired at every attention layer of a noise prediction, in a fixed
/// order. Implementations may read or replace the attention probabilities
/// (rows are query pixels); they never see value projections.
class AttentionController {
public:
    virtual ~AttentionController() = default;
    virtual void on_attention(const AttentionSite& site, Eigen::MatrixXd& probs) = 0;
};

struct LayerMaps {
    int layer = 0;
    int resolution = 0;
    Eigen::MatrixXd probs;
};

/// Conditional-branch attention captured at one schedule index.
struct AttentionRecord {
    std::vector<LayerMaps> cross;
    std::vector<LayerMaps> self;

    /// Mean over cross-attention layers at `resolution` (pixels x tokens).
    Eigen::MatrixXd aggregated_cross(int resolution) const;
    const LayerMaps* find(AttentionKind kind, int layer) const;
};

class AttentionStore {
public:
    void put(int step, AttentionKind kind, LayerMaps maps);
    const AttentionRecord* at(int step) const;
    bool contains(int step) const { return records_.count(step) != 0; }
    std::size_t size() const noexcept { return records_.size(); }
    const std::map<int, AttentionRecord>& records() const noexcept { return records_; }
    void clear() { records_.clear(); }

private:
    std::map<int, AttentionRecord> records_;
};

/// Records conditional-branch maps into a store; never modifies them.
class RecordingController final : public AttentionController {
public:
    explicit RecordingController(AttentionStore& store) : store_(store) {}
    void on_attention(const AttentionSite& site, Eigen::MatrixXd& probs) override;

private:
    AttentionStore& store_;
};

/// Runs several controllers in sequence on every site.
class ControllerChain final : public AttentionController {
public:
    void add(AttentionController* controller) { chain_.push_back(controller); }
    void on_attention(const AttentionSite& site, Eigen::MatrixXd& probs) override;

private:
    std::vector<AttentionController*> chain_;
};

}  // namespace harmonia::diffusion
