#pragma once

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace harmonia::replay {

struct Card {
    int index = 0;
    std::string role;
    int input_index = -1;
    nlohmann::json description;
    std::optional<double> score;
};

struct AppliedDecision {
    int after_iteration = 0;
    std::string kind;
    nlohmann::json revert_to;
    std::string source;
};

/// What a client can know about a run from its events alone.
struct View {
    std::vector<Card> cards;
    std::vector<AppliedDecision> decisions;
    std::string status = "queued";
    std::optional<int> best_index;
    long last_seq = 0;
};

/// Throws std::runtime_error on a gap, a repeat or an unknown kind.
View fold(const nlohmann::json& events);

/// The same projection taken from run.json.
View project(const nlohmann::json& run);

bool operator==(const Card&, const Card&);
bool operator==(const AppliedDecision&, const AppliedDecision&);
bool same_state(const View& a, const View& b, std::string* why = nullptr);

}  // namespace harmonia::replay
