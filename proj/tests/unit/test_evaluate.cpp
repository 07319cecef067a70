#include "harmonia/errors.hpp"
#include "harmonia/evaluate.hpp"
#include "harmonia/fixtures.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace harmonia;

using oracle::reference_decide;

TEST(Decide, SpecExamples) {
    EXPECT_EQ(decide({0.5, 0.6, 0.7}, 2, 0).kind, DecisionKind::Continue);
    const Decision d = decide({0.7, 0.6, 0.5}, 0, 0);
    EXPECT_EQ(d.kind, DecisionKind::Regenerate);
    EXPECT_EQ(d.revert_to, 0);
    EXPECT_EQ(decide({0.7, 0.6, 0.65}, 0, 0).kind, DecisionKind::Continue);
}

TEST(Decide, EqualScoresAreNotDecreasing) {
    EXPECT_EQ(decide({0.7, 0.7, 0.5}, 0, 0).kind, DecisionKind::Continue);
    EXPECT_EQ(decide({0.7, 0.5, 0.5}, 0, 0).kind, DecisionKind::Continue);
}

TEST(Decide, BudgetAndCap) {
    EXPECT_EQ(decide({0.7, 0.6, 0.5}, 0, 2).kind, DecisionKind::Conclude);
    std::vector<double> up(10);
    for (int i = 0; i < 10; ++i) up[i] = 0.05 * i;
    EXPECT_EQ(decide(up, 9, 0).kind, DecisionKind::Conclude);
    up.pop_back();
    EXPECT_EQ(decide(up, 8, 0).kind, DecisionKind::Continue);
    EXPECT_THROW(decide({}, 0, 0), ConfigError);
}

TEST(Decide, MatchesReferenceOnRandomHistories) {
    std::mt19937_64 rng(42);
    std::uniform_int_distribution<int> len(1, 12), regen(0, 3), level(0, 6);
    const DecideConfig cfg;
    for (int trial = 0; trial < 5000; ++trial) {
        std::vector<double> s(len(rng));
        for (auto& v : s) v = level(rng) / 6.0;  // coarse levels make ties common
        const int best = select_initial(s);
        const int r = regen(rng);
        ASSERT_EQ(decide(s, best, r, cfg), reference_decide(s, best, r, cfg));
    }
}

TEST(SelectInitial, ArgmaxLowestTie) {
    EXPECT_EQ(select_initial({0.2, 0.9, 0.5}), 1);
    EXPECT_EQ(select_initial({0.5, 0.5}), 0);
    EXPECT_EQ(select_initial({0.1, 0.3, 0.3}), 1);
    EXPECT_THROW(select_initial({}), ConfigError);
}

TEST(SelectInitial, MatchesReference) {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> len(1, 12), level(0, 4);
    for (int trial = 0; trial < 2000; ++trial) {
        std::vector<double> s(len(rng));
        for (auto& v : s) v = level(rng) / 4.0;
        ASSERT_EQ(select_initial(s), oracle::reference_select_initial(s));
    }
}

TEST(SelectInitial, AffineInvariant) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> s(1 + trial % 6);
        for (auto& v : s) v = std::round(u(rng) * 5) / 5;
        const double a = 0.1 + 3 * u(rng), b = u(rng) - 0.5;
        std::vector<double> t = s;
        for (auto& v : t) v = a * v + b;
        EXPECT_EQ(select_initial(s), select_initial(t));
    }
}

TEST(Scripted, SequenceThenHoldsLast) {
    ScriptedEvaluator ev({0.2, 0.4});
    const auto c = fixtures::evaluator_example(32, 0.0, 1);
    EXPECT_EQ(ev.score(c.image, c.mask), 0.2);
    EXPECT_EQ(ev.score(c.image, c.mask), 0.4);
    EXPECT_EQ(ev.score(c.image, c.mask), 0.4);
    EXPECT_THROW(ScriptedEvaluator({}), ConfigError);
    EXPECT_THROW(ScriptedEvaluator({1.5}), ConfigError);
}

TEST(RocAuc, KnownValues) {
    EXPECT_DOUBLE_EQ(roc_auc({0.1, 0.2, 0.8, 0.9}, {false, false, true, true}), 1.0);
    EXPECT_DOUBLE_EQ(roc_auc({0.9, 0.8, 0.2, 0.1}, {false, false, true, true}), 0.0);
    EXPECT_DOUBLE_EQ(roc_auc({0.5, 0.5}, {false, true}), 0.5);
    // 3 positives x 2 negatives, 0.3 loses twice, 0.6 wins once and ties once, 0.9 wins twice.
    EXPECT_DOUBLE_EQ(roc_auc({0.3, 0.6, 0.9, 0.4, 0.6}, {true, true, true, false, false}), 3.5 / 6.0);
}

TEST(LabelGrid, TenRanks) {
    for (int r = 1; r <= 10; ++r) EXPECT_TRUE(on_label_grid(r / 10.0));
    EXPECT_FALSE(on_label_grid(0.0));
    EXPECT_FALSE(on_label_grid(0.55));
    EXPECT_FALSE(on_label_grid(1.1));
}

TEST(Train, DuplicatedSingleExampleIsDegenerate) {
    auto ex = fixtures::evaluator_example(32, 0.1, 3);
    ex.label = 0.9;
    std::vector<ScoredExample> set(20, ex);
    EXPECT_THROW(train_evaluator(set), LabelDegeneracyError);
}

TEST(Train, OffGridLabelRejected) {
    auto set = fixtures::evaluator_examples(10, 32, 1);
    set[0].label = 0.55;
    EXPECT_THROW(train_evaluator(set), ConfigError);
}

TEST(Train, SeparatesFixtureAndScoresInRange) {
    const auto set = fixtures::evaluator_examples(200, 64, 11);
    const TrainReport rep = train_evaluator(set);
    EXPECT_EQ(rep.train_count + rep.validation_count, 200u);
    EXPECT_GT(rep.validation_auc, 0.7);
    for (const auto& ex : set) {
        const double s = rep.model.score(ex.image, ex.mask);
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 1.0);
    }
    // Deterministic for fixed data and seed.
    const TrainReport again = train_evaluator(set);
    EXPECT_EQ(again.model.weights, rep.model.weights);
    EXPECT_EQ(again.model.config_hash, rep.model.config_hash);
}

TEST(Train, NaturalOutscoresJittered) {
    const auto train = fixtures::evaluator_examples(200, 64, 11);
    const HarmonyModel model = train_evaluator(train).model;
    double natural = 0.0, jittered = 0.0;
    const int n = 30;
    for (int i = 0; i < n; ++i) {
        const auto clean = fixtures::evaluator_example(64, 0.0, 9000 + i);
        const auto shifted = fixtures::evaluator_example(64, 0.8, 9000 + i);
        natural += model.score(clean.image, clean.mask);
        jittered += model.score(shifted.image, shifted.mask);
    }
    EXPECT_GT(natural / n, jittered / n);
}

TEST(Model, SaveLoadRoundtrip) {
    const auto set = fixtures::evaluator_examples(40, 32, 2);
    const HarmonyModel m = train_evaluator(set).model;
    const auto path = std::filesystem::temp_directory_path() / "harmonia_model_roundtrip.json";
    m.save(path);
    const HarmonyModel back = HarmonyModel::load(path);
    EXPECT_EQ(back.config_hash, m.config_hash);
    for (const auto& ex : set) EXPECT_NEAR(back.score(ex.image, ex.mask), m.score(ex.image, ex.mask), 1e-12);
    std::filesystem::remove(path);
    EXPECT_THROW(HarmonyModel::load(path), EvaluatorUnavailable);
}

TEST(Model, InferenceIsDeterministic) {
    const auto set = fixtures::evaluator_examples(40, 32, 2);
    const HarmonyModel m = train_evaluator(set).model;
    EXPECT_EQ(m.score(set[3].image, set[3].mask), m.score(set[3].image, set[3].mask));
}

TEST(Manifest, ParsesRelativePaths) {
    const auto dir = std::filesystem::temp_directory_path() / "harmonia_manifest_test";
    std::filesystem::create_directories(dir);
    const auto ex = fixtures::evaluator_example(16, 0.3, 4);
    save_png(ex.image, dir / "a.png");
    save_mask_png(ex.mask, dir / "a_mask.png");
    {
        std::ofstream out(dir / "m.csv");
        out << "# comment\n a.png , a_mask.png , 0.7\n\n";
    }
    const auto set = load_manifest(dir / "m.csv");
    ASSERT_EQ(set.size(), 1u);
    EXPECT_DOUBLE_EQ(set[0].label, 0.7);
    EXPECT_EQ(set[0].mask, ex.mask);
    {
        std::ofstream out(dir / "bad.csv");
        out << "a.png,0.7\n";
    }
    EXPECT_THROW(load_manifest(dir / "bad.csv"), ConfigError);
    std::filesystem::remove_all(dir);
}
