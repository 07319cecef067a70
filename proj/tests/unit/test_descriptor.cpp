#include "harmonia/descriptor.hpp"
#include "harmonia/errors.hpp"
#include "support/synthetic.hpp"

#include <gtest/gtest.h>
#include <httplib.h>
#include <json.hpp>

#include <fstream>
#include <thread>

using namespace harmonia;
using Words = std::vector<std::string>;

namespace {

struct ParseCase {
    const char* raw;
    Words object, fore, back;
};

// Hand-checked expected triples.
const ParseCase kParseCases[] = {
    {"object: dog | foreground: overbright | background: dusky warm", {"dog"}, {"overbright"}, {"dusky", "warm"}},
    {R"({"object": "bird", "foreground": "bright orange", "background": "sunset blue"})",
     {"bird"}, {"bright", "orange"}, {"sunset", "blue"}},
    {R"(["bird", "bright orange", "sunset blue"])", {"bird"}, {"bright", "orange"}, {"sunset", "blue"}},
    {"Object: Cat\nForeground: cold, bluish\nBackground: golden hour", {"cat"}, {"cold", "bluish"}, {"golden", "hour"}},
    {"p_Obj = car; p_ForeCond = midday sunny; p_BackCond = night", {"car"}, {"midday", "sunny"}, {"night"}},
    {"{'object': 'horse', 'foreground': 'overcast', 'background': 'warm sunset'}",
     {"horse"}, {"overcast"}, {"warm", "sunset"}},
    {"person, bright daylight, dim evening", {"person"}, {"bright", "daylight"}, {"dim", "evening"}},
    {"Sure! Here is the answer: object: tree | foreground: spring green | background: autumn orange.",
     {"tree"}, {"spring", "green"}, {"autumn", "orange"}},
    {"The object is a dog. The foreground is bright and sunny, while the background appears dusky.",
     {"dog"}, {"bright", "sunny"}, {"dusky"}},
    {"The image shows a lamp. Foreground looks warm yellow; background looks cool blue.",
     {"lamp"}, {"warm", "yellow"}, {"cool", "blue"}},
};

class FailingProvider final : public DescriptionProvider {
public:
    std::string id() const override { return "failing"; }
    std::vector<std::string> describe(const std::string&, const RasterImage&, const ForegroundMask&, int) override {
        ++calls;
        throw std::runtime_error("connection refused");
    }
    int calls = 0;
};

CompositeCase small_case() { return synth::split_composite(32, {0.9, 0.9, 0.9}, {0.2, 0.2, 0.3}); }

}  // namespace

TEST(ParseVlmResponse, FixtureSet) {
    for (const auto& c : kParseCases) {
        SCOPED_TRACE(c.raw);
        auto d = parse_vlm_response(c.raw);
        EXPECT_EQ(d.object_words, c.object);
        EXPECT_EQ(d.fore_condition, c.fore);
        EXPECT_EQ(d.back_condition, c.back);
        EXPECT_EQ(d.raw_response, c.raw);
    }
}

TEST(ParseVlmResponse, Idempotent) {
    for (const auto& c : kParseCases) {
        auto once = parse_vlm_response(c.raw);
        auto twice = parse_vlm_response(once.format());
        EXPECT_TRUE(once.same_words(twice)) << c.raw;
    }
}

TEST(ParseVlmResponse, ExactFormat) {
    auto d = parse_vlm_response("object: dog | foreground: overbright | background: dusky warm");
    EXPECT_EQ(d.format(), "object: dog | foreground: overbright | background: dusky warm");
}

TEST(ParseVlmResponse, TwoFieldsThrow) {
    try {
        parse_vlm_response("object: dog | foreground: overbright");
        FAIL() << "expected DescriptionParseError";
    } catch (const DescriptionParseError& e) {
        EXPECT_EQ(e.raw(), "object: dog | foreground: overbright");
    }
}

TEST(ParseVlmResponse, ProseWithoutFieldsThrows) {
    EXPECT_THROW(parse_vlm_response("I cannot help with that request, sorry about it."), DescriptionParseError);
    EXPECT_THROW(parse_vlm_response("   "), DescriptionParseError);
}

TEST(NormalizeWords, CapsAndFilters) {
    EXPECT_EQ(normalize_words("  The BRIGHT, sunny-ish  day and warm light glow"),
              (Words{"bright", "sunny-ish", "day", "warm"}));
    EXPECT_EQ(normalize_words("123 !!"), Words{});
}

TEST(BuildTaskPrompt, DefaultContainsInstructionAndScope) {
    auto p = build_task_prompt();
    EXPECT_NE(p.find("Please describe the imaging condition of both the foreground object and background"),
              std::string::npos);
    for (const char* s : {"weather", "season", "time", "color tone"}) EXPECT_NE(p.find(s), std::string::npos) << s;
    EXPECT_NE(p.find("object: <noun> | foreground: <words> | background: <words>"), std::string::npos);
}

TEST(BuildTaskPrompt, EmptyScopeOmitsClause) {
    auto p = build_task_prompt(PromptConfig{{}});
    EXPECT_EQ(p.find("Only use words about"), std::string::npos);
    EXPECT_EQ(p.find("weather"), std::string::npos);
}

TEST(BuildTaskPrompt, SingleScope) {
    auto p = build_task_prompt(PromptConfig{{"color tone"}});
    EXPECT_NE(p.find("Only use words about color tone, etc."), std::string::npos);
    EXPECT_EQ(p.find("weather"), std::string::npos);
}

TEST(GenerateDescriptions, ScriptedPassthrough) {
    ScriptedProvider p({"object: dog | foreground: overbright | background: dusky warm"});
    auto out = generate_descriptions(small_case(), p, {.k = 1});
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0].format(), "object: dog | foreground: overbright | background: dusky warm");
    EXPECT_EQ(out[0].provider_id, "scripted");
}

TEST(GenerateDescriptions, DeterministicForSeed) {
    const Words lines{"object: bird | foreground: bright orange | background: sunset blue",
                      "object: bird | foreground: warm | background: cool",
                      "object: bird | foreground: overbright | background: dim",
                      "object: bird | foreground: golden | background: night"};
    ScriptedProvider a(lines, 7);
    ScriptedProvider b(lines, 7);
    auto da = generate_descriptions(small_case(), a);
    auto db = generate_descriptions(small_case(), b);
    ASSERT_EQ(da.size(), 3u);
    ASSERT_EQ(da.size(), db.size());
    for (std::size_t i = 0; i < da.size(); ++i) {
        EXPECT_EQ(da[i].format(), db[i].format());
        EXPECT_EQ(da[i].raw_response, db[i].raw_response);
    }
    EXPECT_EQ(da[0].format(), parse_vlm_response(lines[7 % 4]).format());
}

TEST(GenerateDescriptions, ScriptedFromFileSkipsComments) {
    auto path = std::filesystem::temp_directory_path() / "harmonia_scripted.txt";
    {
        std::ofstream out(path);
        out << "# comment\n\nobject: cup | foreground: warm | background: blue\n";
    }
    auto p = ScriptedProvider::from_file(path);
    auto out = generate_descriptions(small_case(), p, {.k = 1});
    EXPECT_EQ(out[0].object_words, Words{"cup"});
}

TEST(GenerateDescriptions, DuplicatesRequestedOnceThenAccepted) {
    ScriptedProvider p({"object: dog | foreground: warm | background: cool"});
    auto out = generate_descriptions(small_case(), p, {.k = 3});
    EXPECT_EQ(out.size(), 3u);
    EXPECT_EQ(p.calls(), 2u);
}

TEST(GenerateDescriptions, DuplicateReplacedWhenFreshAvailable) {
    ScriptedProvider p({"object: dog | foreground: warm | background: cool",
                        "object: dog | foreground: warm | background: cool",
                        "object: dog | foreground: bright | background: dim"});
    auto out = generate_descriptions(small_case(), p, {.k = 2});
    ASSERT_EQ(out.size(), 2u);
    EXPECT_FALSE(out[0].same_words(out[1]));
}

TEST(GenerateDescriptions, ProviderFailureAfterRetries) {
    FailingProvider p;
    EXPECT_THROW(generate_descriptions(small_case(), p), ProviderUnavailable);
    EXPECT_EQ(p.calls, 3);
}

TEST(GenerateDescriptions, AllUnparseable) {
    ScriptedProvider p({"no idea", "sorry"});
    EXPECT_THROW(generate_descriptions(small_case(), p, {.k = 2}), DescriptionParseError);
}

TEST(HttpProvider, GenericFormatAgainstLocalServer) {
    httplib::Server server;
    std::string seen_auth;
    int seen_k = 0;
    bool had_images = false;
    server.Post("/describe", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        auto body = nlohmann::json::parse(req.body);
        seen_k = body["k"].get<int>();
        had_images = !body["image_png_b64"].get<std::string>().empty() &&
                     !body["mask_png_b64"].get<std::string>().empty();
        nlohmann::json reply = {{"responses", nlohmann::json::array()}};
        const char* backs[] = {"cool", "dim", "night", "blue"};
        for (int i = 0; i < seen_k; ++i) {
            reply["responses"].push_back(std::string("object: dog | foreground: warm | background: ") + backs[i % 4]);
        }
        res.set_content(reply.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    HttpProviderConfig cfg;
    cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/describe";
    cfg.api_key = "secret";
    HttpProvider provider(cfg);
    std::vector<ConditionDescription> out;
    EXPECT_NO_THROW(out = generate_descriptions(small_case(), provider, {.k = 2}));
    server.stop();
    t.join();

    EXPECT_EQ(seen_auth, "Bearer secret");
    EXPECT_EQ(seen_k, 2);
    EXPECT_TRUE(had_images);
    ASSERT_EQ(out.size(), 2u);
    EXPECT_EQ(out[0].provider_id, "http");
}

TEST(HttpProvider, UnreachableIsProviderUnavailable) {
    HttpProviderConfig cfg;
    cfg.endpoint = "http://127.0.0.1:9/describe";
    cfg.timeout_s = 1;
    HttpProvider provider(cfg);
    EXPECT_THROW(generate_descriptions(small_case(), provider, {.k = 1, .max_attempts = 1}), ProviderUnavailable);
}
