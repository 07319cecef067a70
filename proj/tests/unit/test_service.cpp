#include "harmonia/errors.hpp"
#include "harmonia/fixtures.hpp"
#include "harmonia/service.hpp"
#include "support/replay.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

using namespace harmonia;
using namespace harmonia::service;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fixtures::CaseSpec& dusky_lawn() { return fixtures::bundled_cases().at(0); }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

struct CaseBytes {
    std::string image;
    std::string mask;
};

CaseBytes case_bytes(const fs::path& scratch, int mask_width = 0) {
    const CompositeCase c = fixtures::render_case(dusky_lawn());
    fs::create_directories(scratch);
    save_png(c.image, scratch / "image.png");
    ForegroundMask m = c.mask;
    if (mask_width) m = resize_nearest(c.mask, {mask_width, c.mask.height()});
    save_mask_png(m, scratch / "mask.png");
    return {slurp(scratch / "image.png"), slurp(scratch / "mask.png")};
}

std::span<const std::uint8_t> span_of(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

json small_layer(std::vector<double> scores = {0.3, 0.4, 0.5, 0.6, 0.7, 0.8}) {
    return {{"working_size", 64},
            {"descriptor", {{"k", 2}, {"provider", {{"kind", "scripted"}, {"responses", dusky_lawn().descriptions}}}}},
            {"evaluator", {{"kind", "scripted"}, {"scores", scores}}},
            {"run", {{"max_iterations", 3}}},
            {"luts", {{"enabled", true}, {"size", 9}}}};
}

class ServiceTest : public ::testing::Test {
protected:
    fs::path root;
    CaseBytes bytes;

    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        root = fs::temp_directory_path() / ("harmonia_service_" + std::string(info->name()));
        fs::remove_all(root);
        bytes = case_bytes(root / "input");
    }
    void TearDown() override { fs::remove_all(root); }

    ServiceConfig config(int sessions = 1) {
        ServiceConfig c;
        c.root = root / "runs";
        c.max_sessions = sessions;
        c.base_layers = {small_layer()};
        return c;
    }

    std::string submit(JobService& svc, json overrides = json::object()) {
        return svc.submit(span_of(bytes.image), span_of(bytes.mask), overrides);
    }
};

std::string wait_status(const JobService& svc, const std::string& id, std::initializer_list<const char*> want,
                        double timeout_s = 60.0) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
    while (std::chrono::steady_clock::now() < deadline) {
        const std::string s = svc.job(id)["status"];
        for (const char* w : want) {
            if (s == w) return s;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    return svc.job(id)["status"];
}

json events_json(const std::vector<RunEvent>& events) {
    json out = json::array();
    for (const auto& e : events) out.push_back({{"seq", e.seq}, {"kind", e.kind}, {"payload", e.payload}});
    return out;
}

json read_jsonl(const fs::path& p) {
    json out = json::array();
    std::ifstream in(p);
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) out.push_back(json::parse(line));
    }
    return out;
}

}  // namespace

TEST(JobStatusTransitions, OnlyListedEdgesAreAllowed) {
    const std::vector<JobStatus> all = {JobStatus::queued,    JobStatus::running, JobStatus::awaiting_human,
                                        JobStatus::concluded, JobStatus::failed,  JobStatus::cancelled};
    int allowed = 0;
    for (auto a : all) {
        EXPECT_EQ(job_status_from_string(to_string(a)), a);
        for (auto b : all) {
            if (!transition_allowed(a, b)) continue;
            ++allowed;
            EXPECT_FALSE(is_terminal(a)) << to_string(a);
        }
    }
    EXPECT_EQ(allowed, 2 + 4 + 3);
    EXPECT_TRUE(transition_allowed(JobStatus::awaiting_human, JobStatus::running));
    EXPECT_FALSE(transition_allowed(JobStatus::queued, JobStatus::awaiting_human));
}

TEST(Sse, FrameFormat) {
    const RunEvent e{7, "iteration_done", {{"index", 2}}};
    EXPECT_EQ(format_sse("job-1", e),
              "id: 7\nevent: iteration_done\ndata: {\"job_id\":\"job-1\",\"kind\":\"iteration_done\","
              "\"payload\":{\"index\":2},\"seq\":7}\n\n");
}

TEST_F(ServiceTest, JobRunsAndEventLogMatchesRunRecord) {
    JobService svc(config());
    svc.start();
    const std::string id = submit(svc);
    EXPECT_EQ(wait_status(svc, id, {"concluded", "failed"}), "concluded");

    const json job = svc.job(id);
    EXPECT_GT(job["iterations"].get<int>(), 0);
    EXPECT_FALSE(job["best_index"].is_null());
    EXPECT_FALSE(job["interactive"].get<bool>());

    const json in_memory = events_json(svc.events_after(id, 0));
    const json on_disk = read_jsonl(svc.config().root / "jobs" / id / "events.jsonl");
    ASSERT_EQ(on_disk.size(), in_memory.size());
    for (std::size_t i = 0; i < on_disk.size(); ++i) {
        EXPECT_EQ(on_disk[i]["job_id"], id);
        EXPECT_EQ(on_disk[i]["seq"], in_memory[i]["seq"]);
        EXPECT_EQ(on_disk[i]["kind"], in_memory[i]["kind"]);
    }
    EXPECT_EQ(in_memory.back()["kind"], "concluded");

    const json run = json::parse(slurp(svc.artifact(id, "run", "")));
    std::string why;
    EXPECT_TRUE(replay::same_state(replay::fold(in_memory), replay::project(run), &why)) << why;
    EXPECT_EQ(run["events"], in_memory);
    EXPECT_EQ(run["best_index"], job["best_index"]);

    EXPECT_TRUE(fs::is_regular_file(svc.artifact(id, "final", "")));
    EXPECT_TRUE(fs::is_regular_file(svc.artifact(id, "iter", "0")));
    EXPECT_TRUE(fs::is_regular_file(svc.artifact(id, "lut", "0")));
    EXPECT_TRUE(fs::is_regular_file(svc.artifact(id, "attn", "0", "50")));
    EXPECT_THROW(svc.artifact(id, "iter", "99"), NotFound);
    EXPECT_THROW(svc.artifact(id, "iter", "../x"), NotFound);
    EXPECT_THROW(svc.artifact(id, "config", "0"), NotFound);
    EXPECT_THROW(svc.job("job-missing"), NotFound);

    EXPECT_THROW(svc.cancel(id), Conflict);
    EXPECT_THROW(svc.decide(id, {DecisionKind::Conclude, std::nullopt}), Conflict);
}

TEST_F(ServiceTest, RejectsBadInputAtSubmit) {
    JobService svc(config());
    svc.start();
    const CaseBytes wrong = case_bytes(root / "wrong", 100);
    try {
        svc.submit(span_of(bytes.image), span_of(wrong.mask), json::object());
        FAIL() << "mask of another size accepted";
    } catch (const Error& e) {
        EXPECT_EQ(error_code_name(e.code()), "MASK_SHAPE");
    }
    try {
        svc.submit(span_of(std::string("not a png")), span_of(bytes.mask), json::object());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(error_code_name(e.code()), "IMAGE_DECODE");
    }
    EXPECT_THROW(submit(svc, json{{"refine", {{"weight", 3}}}}), ConfigError);
    EXPECT_THROW(submit(svc, json::array()), ConfigError);
    EXPECT_TRUE(svc.list()["jobs"].empty());
}

TEST_F(ServiceTest, InteractiveDecisionsDriveTheRun) {
    JobService svc(config());
    svc.start();
    const std::string id = submit(svc, json{{"run", {{"interactive", true}}}});
    EXPECT_TRUE(svc.job(id)["interactive"].get<bool>());
    ASSERT_EQ(wait_status(svc, id, {"awaiting_human", "failed"}), "awaiting_human");

    svc.decide(id, {DecisionKind::Continue, std::nullopt});
    EXPECT_THROW(svc.decide(id, {DecisionKind::Continue, std::nullopt}), Conflict);
    ASSERT_EQ(wait_status(svc, id, {"awaiting_human", "failed"}), "awaiting_human");

    ConditionDescription mine = parse_vlm_response("object: dog | foreground: bright noon | background: dim evening");
    mine.provider_id = "human";
    svc.decide(id, {DecisionKind::Regenerate, mine});
    ASSERT_EQ(wait_status(svc, id, {"awaiting_human", "failed"}), "awaiting_human");
    svc.decide(id, {DecisionKind::Conclude, std::nullopt});
    ASSERT_EQ(wait_status(svc, id, {"concluded", "failed"}), "concluded");

    const json run = json::parse(slurp(svc.artifact(id, "run", "")));
    std::vector<std::string> applied;
    for (const auto& d : run["decisions"]) {
        if (d["source"] == "human") applied.push_back(d["applied"]["kind"]);
    }
    EXPECT_EQ(applied, (std::vector<std::string>{"continue", "regenerate", "conclude"}));
    bool used = false;
    for (const auto& it : run["iterations"]) {
        const json& d = it["description"];
        used |= d["text"] == mine.format() && d["provider"] == "human";
    }
    EXPECT_TRUE(used);
    int awaiting = 0;
    for (const auto& e : svc.events_after(id, 0)) awaiting += e.kind == "awaiting_human";
    EXPECT_EQ(awaiting, 3);
}

TEST_F(ServiceTest, CancelQueuedAndAwaiting) {
    JobService svc(config(1));
    svc.start();
    const std::string first = submit(svc, json{{"run", {{"interactive", true}}}});
    const std::string second = submit(svc);
    ASSERT_EQ(wait_status(svc, first, {"awaiting_human", "failed"}), "awaiting_human");
    // One session: the second job waits behind the first.
    EXPECT_EQ(svc.job(second)["status"], "queued");

    svc.cancel(second);
    EXPECT_EQ(svc.job(second)["status"], "cancelled");
    EXPECT_EQ(svc.job(second)["error"]["code"], "CANCELLED");
    EXPECT_EQ(svc.events_after(second, 0).back().kind, "failed");

    svc.cancel(first);
    EXPECT_EQ(wait_status(svc, first, {"cancelled", "failed", "concluded"}), "cancelled");
    const auto events = svc.events_after(first, 0);
    EXPECT_EQ(events.back().kind, "failed");
    EXPECT_EQ(events.back().payload["code"], "CANCELLED");
}

TEST_F(ServiceTest, SessionsRunConcurrentlyUpToTheLimit) {
    JobService svc(config(2));
    svc.start();
    const std::string a = submit(svc, json{{"run", {{"interactive", true}}}});
    const std::string b = submit(svc, json{{"run", {{"interactive", true}}}});
    const std::string c = submit(svc, json{{"run", {{"interactive", true}}}});
    EXPECT_EQ(wait_status(svc, a, {"awaiting_human"}), "awaiting_human");
    EXPECT_EQ(wait_status(svc, b, {"awaiting_human"}), "awaiting_human");
    std::this_thread::sleep_for(std::chrono::milliseconds(200));
    EXPECT_EQ(svc.job(c)["status"], "queued");
    svc.decide(a, {DecisionKind::Conclude, std::nullopt});
    EXPECT_EQ(wait_status(svc, c, {"awaiting_human"}), "awaiting_human");
    for (const auto& id : {b, c}) svc.cancel(id);
}

TEST_F(ServiceTest, RestartMarksInterruptedAndRequeues) {
    std::string awaiting, queued, done;
    {
        JobService svc(config(1));
        svc.start();
        done = submit(svc);
        ASSERT_EQ(wait_status(svc, done, {"concluded"}), "concluded");
        awaiting = submit(svc, json{{"run", {{"interactive", true}}}});
        queued = submit(svc);
        ASSERT_EQ(wait_status(svc, awaiting, {"awaiting_human"}), "awaiting_human");
        svc.stop();
    }
    const long done_seq = read_jsonl(root / "runs" / "jobs" / done / "events.jsonl").size();
    // A torn trailing line, as a crash mid-append would leave.
    {
        std::ofstream out(root / "runs" / "jobs" / done / "events.jsonl", std::ios::app);
        out << "{\"job_id\":\"" << done << "\",\"seq\":";
    }

    JobService svc(config(1));
    svc.start();
    const json list = svc.list()["jobs"];
    ASSERT_EQ(list.size(), 3u);
    EXPECT_EQ(list[0]["job_id"], done);

    EXPECT_EQ(svc.job(done)["status"], "concluded");
    EXPECT_EQ(svc.job(done)["last_seq"], done_seq);

    const json a = svc.job(awaiting);
    EXPECT_EQ(a["status"], "failed");
    EXPECT_EQ(a["error"]["code"], "INTERRUPTED");
    const auto events = svc.events_after(awaiting, 0);
    for (std::size_t i = 0; i < events.size(); ++i) EXPECT_EQ(events[i].seq, static_cast<long>(i) + 1);
    EXPECT_EQ(events.back().kind, "failed");
    EXPECT_EQ(events.back().payload["code"], "INTERRUPTED");
    EXPECT_EQ(events[events.size() - 2].kind, "awaiting_human");

    EXPECT_EQ(wait_status(svc, queued, {"concluded", "failed"}), "concluded");
    const std::string fresh = submit(svc);
    EXPECT_NE(fresh, done);
    EXPECT_NE(fresh, queued);
    EXPECT_EQ(wait_status(svc, fresh, {"concluded", "failed"}), "concluded");
}

TEST_F(ServiceTest, SetupFailureIsReportedAsFailedEvent) {
    ServiceConfig c = config();
    c.base_layers.push_back(json{{"descriptor", {{"provider", {{"kind", "http"}, {"endpoint", "http://127.0.0.1:1"}}}}}});
    JobService svc(c);
    svc.start();
    const std::string id = submit(svc);
    EXPECT_EQ(wait_status(svc, id, {"failed", "concluded"}), "failed");
    EXPECT_EQ(svc.job(id)["error"]["code"], "PROVIDER_UNAVAILABLE");
    EXPECT_EQ(svc.events_after(id, 0).back().kind, "failed");
}

// -- HTTP ---------------------------------------------------------------------------------

namespace {

struct Sse {
    std::vector<json> events;
    std::string buffer;

    // Returns the number of complete frames parsed from `chunk`.
    int feed(const char* data, std::size_t n) {
        buffer.append(data, n);
        int frames = 0;
        for (std::size_t end; (end = buffer.find("\n\n")) != std::string::npos;) {
            const std::string frame = buffer.substr(0, end);
            buffer.erase(0, end + 2);
            std::istringstream lines(frame);
            for (std::string line; std::getline(lines, line);) {
                if (line.rfind("data: ", 0) == 0) {
                    events.push_back(json::parse(line.substr(6)));
                    ++frames;
                }
            }
        }
        return frames;
    }
};

httplib::MultipartFormDataItems form(const CaseBytes& b, const std::string& config = {}, bool interactive = false) {
    httplib::MultipartFormDataItems items = {{"image", b.image, "image.png", "image/png"},
                                             {"mask", b.mask, "mask.png", "image/png"}};
    if (!config.empty()) items.push_back({"config", config, "", "application/json"});
    if (interactive) items.push_back({"interactive", "true", "", "text/plain"});
    return items;
}

}  // namespace

class HttpTest : public ServiceTest {
protected:
    std::unique_ptr<JobService> svc;
    std::unique_ptr<HttpServer> server;
    int port = 0;

    void SetUp() override {
        ServiceTest::SetUp();
        svc = std::make_unique<JobService>(config());
        svc->start();
        server = std::make_unique<HttpServer>(*svc);
        port = server->start("127.0.0.1", 0);
    }
    void TearDown() override {
        server->stop();
        svc->stop();
        ServiceTest::TearDown();
    }
    httplib::Client client() {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(30, 0);
        return c;
    }
};

TEST_F(HttpTest, SubmitValidatesAndReportsErrorCodes) {
    auto c = client();
    EXPECT_EQ(c.Get("/health")->status, 200);

    const CaseBytes wrong = case_bytes(root / "wrong", 100);
    auto bad = c.Post("/jobs", form({bytes.image, wrong.mask}));
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);
    EXPECT_EQ(json::parse(bad->body)["error"]["code"], "MASK_SHAPE");

    auto bad_cfg = c.Post("/jobs", form(bytes, R"({"run": {"max_iterations": "many"}})"));
    EXPECT_EQ(bad_cfg->status, 400);
    EXPECT_EQ(json::parse(bad_cfg->body)["error"]["code"], "CONFIG");

    auto missing = c.Post("/jobs", httplib::MultipartFormDataItems{{"image", bytes.image, "i.png", "image/png"}});
    EXPECT_EQ(missing->status, 400);

    EXPECT_EQ(c.Get("/jobs/job-nope")->status, 404);
    EXPECT_EQ(json::parse(c.Get("/jobs/job-nope")->body)["error"]["code"], "NOT_FOUND");

    auto ok = c.Post("/jobs", form(bytes, "", true));
    ASSERT_EQ(ok->status, 202);
    const std::string id = json::parse(ok->body)["job_id"];
    EXPECT_TRUE(json::parse(c.Get("/jobs/" + id)->body)["interactive"].get<bool>());
    EXPECT_EQ(json::parse(c.Get("/jobs")->body)["jobs"].size(), 1u);

    ASSERT_EQ(wait_status(*svc, id, {"awaiting_human"}), "awaiting_human");
    EXPECT_EQ(c.Post("/jobs/" + id + "/decision", R"({"kind": "Sideways"})", "application/json")->status, 400);
    EXPECT_EQ(c.Post("/jobs/" + id + "/decision", "{", "application/json")->status, 400);
    auto regen = c.Post("/jobs/" + id + "/decision",
                        R"({"kind": "Regenerate", "description": "object: dog | foreground: under a grey sky | background: under a grey sky"})",
                        "application/json");
    EXPECT_EQ(regen->status, 200);
    EXPECT_EQ(c.Post("/jobs/" + id + "/decision", R"({"kind": "Conclude"})", "application/json")->status, 409);
    ASSERT_EQ(wait_status(*svc, id, {"awaiting_human"}), "awaiting_human");
    EXPECT_EQ(c.Post("/jobs/" + id + "/cancel", "", "application/json")->status, 200);
    EXPECT_EQ(wait_status(*svc, id, {"cancelled"}), "cancelled");
    EXPECT_EQ(c.Post("/jobs/" + id + "/cancel", "", "application/json")->status, 409);
}

TEST_F(HttpTest, EventStreamResumesWithoutGapsOrRepeats) {
    auto c = client();
    auto res = c.Post("/jobs", form(bytes));
    ASSERT_EQ(res->status, 202);
    const std::string id = json::parse(res->body)["job_id"];

    // Disconnect after every 2 events while the job runs, resume from the last seq seen.
    Sse sse;
    long last = 0;
    for (int round = 0; round < 200; ++round) {
        int seen = 0;
        Sse chunked;
        const std::string path = "/jobs/" + id + "/events" + (round % 2 ? "?last_seq=" + std::to_string(last) : "");
        httplib::Headers headers;
        if (round % 2 == 0 && last > 0) headers.emplace("Last-Event-ID", std::to_string(last));
        auto r = c.Get(path, headers, [&](const char* data, std::size_t n) {
            seen += chunked.feed(data, n);
            return seen < 2;
        });
        for (auto& e : chunked.events) sse.events.push_back(e);
        if (!chunked.events.empty()) last = chunked.events.back()["seq"];
        if (r && r->status == 200) break;  // server closed the stream: job is terminal
    }
    ASSERT_FALSE(sse.events.empty());
    EXPECT_EQ(sse.events.back()["kind"], "concluded");
    for (std::size_t i = 0; i < sse.events.size(); ++i) {
        ASSERT_EQ(sse.events[i]["seq"], static_cast<long>(i) + 1) << "gap or repeat at " << i;
        EXPECT_EQ(sse.events[i]["job_id"], id);
    }
    const json disk = read_jsonl(root / "runs" / "jobs" / id / "events.jsonl");
    EXPECT_EQ(json(sse.events), disk);

    // A full replay after the end returns the same log and closes.
    Sse replayed;
    auto r = c.Get("/jobs/" + id + "/events", [&](const char* d, std::size_t n) {
        replayed.feed(d, n);
        return true;
    });
    ASSERT_TRUE(r);
    EXPECT_EQ(json(replayed.events), disk);
    EXPECT_EQ(c.Get("/jobs/" + id + "/events?last_seq=-3")->status, 400);
}

TEST_F(HttpTest, ArtifactsAreServedByteForByte) {
    auto c = client();
    const std::string id = json::parse(c.Post("/jobs", form(bytes))->body)["job_id"];
    ASSERT_EQ(wait_status(*svc, id, {"concluded", "failed"}), "concluded");
    const fs::path run = root / "runs" / "jobs" / id / "run";
    const std::vector<std::pair<std::string, fs::path>> cases = {
        {"run", run / "run.json"},
        {"final", run / "final.png"},
        {"iter/0", run / "iter_0.png"},
        {"lut/0", run / "lut_0.cube"},
        {"attn/0/50", run / "attn_0" / "step_50.png"},
    };
    for (const auto& [suffix, file] : cases) {
        auto r = c.Get("/jobs/" + id + "/artifacts/" + suffix);
        ASSERT_TRUE(r);
        ASSERT_EQ(r->status, 200) << suffix;
        EXPECT_EQ(r->body, slurp(file)) << suffix;
    }
    EXPECT_EQ(c.Get("/jobs/" + id + "/artifacts/iter/77")->status, 404);
    EXPECT_EQ(c.Get("/jobs/" + id + "/artifacts/config")->status, 404);
}
