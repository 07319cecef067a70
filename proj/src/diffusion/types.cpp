#include "harmonia/diffusion/types.hpp"

#include "harmonia/errors.hpp"

#include <cmath>

namespace harmonia::diffusion {

const char* to_string(TokenTag tag) {
    switch (tag) {
        case TokenTag::special: return "special";
        case TokenTag::object: return "object";
        case TokenTag::fore_cond: return "fore_cond";
        case TokenTag::back_cond: return "back_cond";
        case TokenTag::filler: return "filler";
        case TokenTag::null: return "null";
    }
    return "unknown";
}

std::vector<int> PromptTokens::positions(TokenTag tag) const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i) {
        if (tags[i] == tag) out.push_back(i);
    }
    return out;
}

TaggedWords assemble_prompt(const std::vector<std::string>& object_words,
                            const std::vector<std::string>& condition_words, TokenTag condition_tag,
                            const PromptLayout& layout) {
    TaggedWords out;
    auto push = [&](const std::string& w, TokenTag t) {
        out.words.push_back(w);
        out.tags.push_back(t);
    };
    auto push_object = [&] {
        for (const auto& w : object_words) push(w, TokenTag::object);
    };
    auto push_condition = [&] {
        if (condition_words.empty()) return;
        if (layout.formal) push("in", TokenTag::filler);
        for (const auto& w : condition_words) push(w, condition_tag);
        if (layout.formal) push("light", TokenTag::filler);
    };

    if (layout.formal) {
        for (const char* w : {"a", "photo", "of", "a"}) push(w, TokenTag::filler);
    }
    if (layout.condition_first) {
        push_condition();
        push_object();
    } else {
        push_object();
        push_condition();
    }
    return out;
}

DdimSchedule::DdimSchedule(int steps, int train_steps, double beta_start, double beta_end)
    : steps_(steps), train_steps_(train_steps) {
    if (steps < 2) throw ConfigError("diffusion steps must be >= 2");
    if (train_steps < steps) throw ConfigError("train_steps must be >= steps");
    alphas_cumprod_.resize(train_steps);
    const double s0 = std::sqrt(beta_start);
    const double s1 = std::sqrt(beta_end);
    double prod = 1.0;
    for (int i = 0; i < train_steps; ++i) {
        const double s = s0 + (s1 - s0) * i / (train_steps - 1);
        prod *= 1.0 - s * s;
        alphas_cumprod_[i] = prod;
    }
}

int DdimSchedule::timestep(int k) const {
    if (k < 1 || k > steps_) throw ConfigError("schedule index out of range");
    return (k - 1) * (train_steps_ / steps_) + 1;
}

double DdimSchedule::alpha_bar(int k) const {
    if (k == 0) return 1.0;
    return alphas_cumprod_[timestep(k)];
}

}  // namespace harmonia::diffusion
