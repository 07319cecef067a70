#include "harmonia/diffusion/attention.hpp"

#include "harmonia/errors.hpp"

namespace harmonia::diffusion {

Eigen::MatrixXd AttentionRecord::aggregated_cross(int resolution) const {
    Eigen::MatrixXd sum;
    int n = 0;
    for (const auto& maps : cross) {
        if (maps.resolution != resolution) continue;
        if (n == 0) {
            sum = maps.probs;
        } else {
            sum += maps.probs;
        }
        ++n;
    }
    if (n == 0) throw RecordMismatchError("no cross-attention at resolution " + std::to_string(resolution));
    return sum / n;
}

const LayerMaps* AttentionRecord::find(AttentionKind kind, int layer) const {
    const auto& list = kind == AttentionKind::cross ? cross : self;
    for (const auto& maps : list) {
        if (maps.layer == layer) return &maps;
    }
    return nullptr;
}

void AttentionStore::put(int step, AttentionKind kind, LayerMaps maps) {
    auto& record = records_[step];
    auto& list = kind == AttentionKind::cross ? record.cross : record.self;
    for (auto& existing : list) {
        if (existing.layer == maps.layer) {
            existing = std::move(maps);
            return;
        }
    }
    list.push_back(std::move(maps));
}

const AttentionRecord* AttentionStore::at(int step) const {
    auto it = records_.find(step);
    return it == records_.end() ? nullptr : &it->second;
}

void RecordingController::on_attention(const AttentionSite& site, Eigen::MatrixXd& probs) {
    if (site.branch != Branch::conditional) return;
    store_.put(site.step, site.kind, LayerMaps{site.layer, site.resolution, probs});
}

void ControllerChain::on_attention(const AttentionSite& site, Eigen::MatrixXd& probs) {
    for (auto* c : chain_) c->on_attention(site, probs);
}

}  // namespace harmonia::diffusion
