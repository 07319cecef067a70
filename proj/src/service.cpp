#include "harmonia/service.hpp"

#include "harmonia/config.hpp"
#include "harmonia/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

namespace harmonia::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string now_iso() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << text;
        out.flush();
        if (!out) throw IoError("cannot write " + path.string());
    }
    fs::rename(tmp, path);
}

bool all_digits(const std::string& s) {
    return !s.empty() && s.size() < 10 &&
           std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

}  // namespace

ServiceConfig ServiceConfig::from_env() {
    ServiceConfig c;
    if (const char* v = std::getenv("HARMONIA_HOST"); v && *v) c.host = v;
    if (const char* v = std::getenv("HARMONIA_PORT"); v && *v) c.port = std::atoi(v);
    if (const char* v = std::getenv("HARMONIA_RUN_ROOT"); v && *v) c.root = v;
    if (const char* v = std::getenv("HARMONIA_MAX_SESSIONS"); v && *v) c.max_sessions = std::max(1, std::atoi(v));
    return c;
}

const char* to_string(JobStatus s) {
    switch (s) {
        case JobStatus::queued: return "queued";
        case JobStatus::running: return "running";
        case JobStatus::awaiting_human: return "awaiting_human";
        case JobStatus::concluded: return "concluded";
        case JobStatus::failed: return "failed";
        case JobStatus::cancelled: return "cancelled";
    }
    return "failed";
}

JobStatus job_status_from_string(const std::string& s) {
    for (auto v : {JobStatus::queued, JobStatus::running, JobStatus::awaiting_human, JobStatus::concluded,
                   JobStatus::failed, JobStatus::cancelled}) {
        if (s == to_string(v)) return v;
    }
    throw ConfigError("unknown job status " + s);
}

bool is_terminal(JobStatus s) {
    return s == JobStatus::concluded || s == JobStatus::failed || s == JobStatus::cancelled;
}

bool transition_allowed(JobStatus from, JobStatus to) {
    switch (from) {
        case JobStatus::queued: return to == JobStatus::running || to == JobStatus::cancelled;
        case JobStatus::running: return to == JobStatus::awaiting_human || is_terminal(to);
        case JobStatus::awaiting_human: return to == JobStatus::running || to == JobStatus::failed ||
                                               to == JobStatus::cancelled;
        default: return false;
    }
}

json event_to_json(const std::string& job_id, const RunEvent& e) {
    return {{"job_id", job_id}, {"seq", e.seq}, {"kind", e.kind}, {"payload", e.payload}};
}

std::string format_sse(const std::string& job_id, const RunEvent& e) {
    return "id: " + std::to_string(e.seq) + "\nevent: " + e.kind + "\ndata: " + event_to_json(job_id, e).dump() +
           "\n\n";
}

// -- Job state ------------------------------------------------------------------------------

struct JobService::Job {
    std::string id;
    JobStatus status = JobStatus::queued;
    json overrides = json::object();
    json config;
    std::string created_at;
    std::string updated_at;
    std::optional<std::pair<std::string, std::string>> error;  // code, message
    std::optional<int> best_index;
    std::optional<double> best_score;
    int iterations = 0;
    std::vector<RunEvent> events;
    std::optional<HumanDecision> decision;
    bool cancel_requested = false;
    bool interrupted = false;
    mutable std::mutex m;
    mutable std::condition_variable cv;

    json to_json_locked() const {
        json j = {{"job_id", id},
                  {"status", to_string(status)},
                  {"created_at", created_at},
                  {"updated_at", updated_at},
                  {"overrides", overrides},
                  {"config", config},
                  {"iterations", iterations},
                  {"last_seq", events.empty() ? 0 : events.back().seq},
                  {"interactive", config.value("/run/interactive"_json_pointer, false)}};
        j["best_index"] = best_index ? json(*best_index) : json(nullptr);
        j["best_score"] = best_score ? json(*best_score) : json(nullptr);
        j["error"] = error ? json{{"code", error->first}, {"message", error->second}} : json(nullptr);
        return j;
    }
};

class JobService::Observer final : public RunObserver {
public:
    Observer(JobService& svc, std::shared_ptr<Job> job) : svc_(svc), job_(std::move(job)) {}

    void on_event(const HarmonizationRun&, const RunEvent& event) override {
        if (svc_.stopping_) {
            std::lock_guard lk(job_->m);
            job_->interrupted = true;
            return;
        }
        if (event.kind == "awaiting_human") svc_.set_status(*job_, JobStatus::awaiting_human);
        svc_.append_event(*job_, event);
    }

    void on_iteration(const HarmonizationRun& run, const IterationResult&) override {
        std::lock_guard lk(job_->m);
        job_->iterations = static_cast<int>(run.iterations.size());
        job_->best_index = run.best_index;
        job_->best_score = run.best_index ? run.iterations[*run.best_index].score : std::nullopt;
        job_->updated_at = now_iso();
        svc_.write_job(*job_);
    }

    std::optional<HumanDecision> await_decision(const HarmonizationRun&, const Decision&) override {
        std::unique_lock lk(job_->m);
        while (!job_->decision && !job_->cancel_requested) {
            if (svc_.stopping_) {
                job_->interrupted = true;
                return std::nullopt;
            }
            job_->cv.wait_for(lk, std::chrono::milliseconds(200));
        }
        if (job_->cancel_requested) return std::nullopt;
        HumanDecision d = *job_->decision;
        job_->decision.reset();
        return d;
    }

    bool cancelled() const override {
        std::lock_guard lk(job_->m);
        if (svc_.stopping_) job_->interrupted = true;
        return job_->cancel_requested || svc_.stopping_;
    }

private:
    JobService& svc_;
    std::shared_ptr<Job> job_;
};

JobService::JobService(ServiceConfig cfg) : cfg_(std::move(cfg)) {}

JobService::~JobService() { stop(); }

fs::path JobService::job_dir(const std::string& id) const { return cfg_.root / "jobs" / id; }

void JobService::write_job(const Job& job) const {
    write_atomic(job_dir(job.id) / "job.json", job.to_json_locked().dump(2) + "\n");
}

void JobService::write_index() const {
    write_atomic(cfg_.root / "index.json", json{{"jobs", order_}}.dump(2) + "\n");
}

std::string JobService::new_id() {
    static thread_local std::mt19937_64 rng{std::random_device{}()};
    std::ostringstream s;
    s << "job-" << std::setw(6) << std::setfill('0') << ++counter_ << '-' << std::hex << std::setw(6)
      << (rng() & 0xffffff);
    return s.str();
}

void JobService::append_event(Job& job, RunEvent e) {
    std::lock_guard lk(job.m);
    e.seq = job.events.empty() ? 1 : job.events.back().seq + 1;
    {
        std::ofstream out(job_dir(job.id) / "events.jsonl", std::ios::app | std::ios::binary);
        out << event_to_json(job.id, e).dump() << '\n';
        out.flush();
        if (!out) throw IoError("cannot append event for " + job.id);
    }
    job.events.push_back(std::move(e));
    job.cv.notify_all();
}

void JobService::set_status(Job& job, JobStatus s, std::optional<std::pair<std::string, std::string>> error) {
    std::lock_guard lk(job.m);
    if (job.status == s) return;
    if (!transition_allowed(job.status, s)) {
        spdlog::warn("job {}: ignoring status change {} -> {}", job.id, to_string(job.status), to_string(s));
        return;
    }
    job.status = s;
    if (error) job.error = error;
    job.updated_at = now_iso();
    write_job(job);
    job.cv.notify_all();
}

std::shared_ptr<JobService::Job> JobService::find(const std::string& id) const {
    std::lock_guard lk(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw NotFound("no job " + id);
    return it->second;
}

void JobService::start() {
    std::lock_guard lk(mu_);
    if (started_) return;
    stopping_ = false;
    fs::create_directories(cfg_.root / "jobs");
    std::vector<std::string> ids;
    if (fs::exists(cfg_.root / "index.json")) {
        try {
            std::ifstream in(cfg_.root / "index.json");
            ids = json::parse(in).at("jobs").get<std::vector<std::string>>();
        } catch (const std::exception& e) {
            spdlog::error("index.json unreadable ({}); rebuilding from job directories", e.what());
        }
    }
    // Job directories missing from the index (crash between writes) are picked up too.
    std::vector<std::string> on_disk;
    for (const auto& d : fs::directory_iterator(cfg_.root / "jobs")) {
        if (d.is_directory() && fs::exists(d.path() / "job.json")) on_disk.push_back(d.path().filename().string());
    }
    std::sort(on_disk.begin(), on_disk.end());
    for (const auto& id : on_disk) {
        if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
    }

    for (const auto& id : ids) {
        const fs::path dir = job_dir(id);
        auto job = std::make_shared<Job>();
        try {
            std::ifstream in(dir / "job.json");
            const json j = json::parse(in);
            job->id = id;
            job->status = job_status_from_string(j.at("status"));
            job->overrides = j.value("overrides", json::object());
            job->config = j.at("config");
            job->created_at = j.value("created_at", "");
            job->updated_at = j.value("updated_at", "");
            if (j.contains("error") && j["error"].is_object()) {
                job->error = std::pair{j["error"]["code"].get<std::string>(), j["error"]["message"].get<std::string>()};
            }
            if (j.contains("best_index") && !j["best_index"].is_null()) job->best_index = j["best_index"].get<int>();
            if (j.contains("best_score") && !j["best_score"].is_null()) job->best_score = j["best_score"].get<double>();
            job->iterations = j.value("iterations", 0);
        } catch (const std::exception& e) {
            spdlog::error("job {}: unreadable job.json ({}); skipped", id, e.what());
            continue;
        }
        std::ifstream ev(dir / "events.jsonl");
        for (std::string line; std::getline(ev, line);) {
            try {
                const json e = json::parse(line);
                const long seq = e.at("seq");
                if (seq != static_cast<long>(job->events.size()) + 1) break;
                job->events.push_back({seq, e.at("kind"), e.at("payload")});
            } catch (const std::exception&) {
                break;  // torn last line
            }
        }
        if (const auto dash = id.find('-'); dash != std::string::npos) {
            counter_ = std::max<std::uint64_t>(counter_, std::strtoull(id.c_str() + dash + 1, nullptr, 10));
        }
        jobs_[id] = job;
        order_.push_back(id);
        if (job->status == JobStatus::queued) {
            queue_.push_back(id);
        } else if (job->status == JobStatus::running || job->status == JobStatus::awaiting_human) {
            const std::string msg = "service restarted while the job was " + std::string(to_string(job->status));
            job->status = JobStatus::failed;
            job->error = std::pair{std::string("INTERRUPTED"), msg};
            job->updated_at = now_iso();
            write_job(*job);
            RunEvent failed{0, "failed", {{"code", "INTERRUPTED"}, {"message", msg}, {"stage", nullptr}}};
            // append_event takes the job lock; mu_ is held but the job is not shared yet.
            append_event(*job, std::move(failed));
            spdlog::warn("job {}: {}", id, msg);
        }
    }
    write_index();
    started_ = true;
    for (int i = 0; i < std::max(1, cfg_.max_sessions); ++i) workers_.emplace_back([this] { worker(); });
    spdlog::info("job service started: {} jobs, {} queued, {} sessions", jobs_.size(), queue_.size(),
                 cfg_.max_sessions);
}

void JobService::stop() {
    {
        std::lock_guard lk(mu_);
        if (!started_) return;
        stopping_ = true;
    }
    queue_cv_.notify_all();
    {
        std::lock_guard lk(mu_);
        for (auto& [id, job] : jobs_) job->cv.notify_all();
    }
    for (auto& t : workers_) t.join();
    workers_.clear();
    std::lock_guard lk(mu_);
    started_ = false;
}

std::string JobService::submit(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> mask_bytes,
                               const json& overrides) {
    const RasterImage image = decode_image(image_bytes);
    const ForegroundMask mask = decode_mask(mask_bytes);
    validate_case(image, mask);
    if (!overrides.is_object()) throw ConfigError("config overrides must be a JSON object");
    std::vector<json> layers = cfg_.base_layers;
    layers.push_back(overrides);
    const HarmoniaConfig hc = resolve_config(layers);
    if (hc.provider.kind == "scripted") (void)make_provider(hc);

    auto job = std::make_shared<Job>();
    job->overrides = overrides;
    job->config = hc.resolved;
    job->created_at = job->updated_at = now_iso();
    {
        std::lock_guard lk(mu_);
        job->id = new_id();
        const fs::path dir = job_dir(job->id);
        fs::create_directories(dir);
        save_png(image, dir / "image.png");
        save_mask_png(mask, dir / "mask.png");
        std::ofstream(dir / "events.jsonl", std::ios::binary).flush();
        write_job(*job);
        jobs_[job->id] = job;
        order_.push_back(job->id);
        write_index();
        queue_.push_back(job->id);
    }
    queue_cv_.notify_one();
    spdlog::info("job {} queued", job->id);
    return job->id;
}

json JobService::job(const std::string& id) const {
    auto j = find(id);
    std::lock_guard lk(j->m);
    return j->to_json_locked();
}

json JobService::list() const {
    std::vector<std::shared_ptr<Job>> all;
    {
        std::lock_guard lk(mu_);
        for (const auto& id : order_) all.push_back(jobs_.at(id));
    }
    json out = json::array();
    for (const auto& j : all) {
        std::lock_guard lk(j->m);
        out.push_back({{"job_id", j->id},
                       {"status", to_string(j->status)},
                       {"created_at", j->created_at},
                       {"iterations", j->iterations},
                       {"last_seq", j->events.empty() ? 0 : j->events.back().seq}});
    }
    return {{"jobs", out}};
}

std::vector<RunEvent> JobService::events_after(const std::string& id, long after, bool* terminal) const {
    auto j = find(id);
    std::lock_guard lk(j->m);
    std::vector<RunEvent> out;
    for (const auto& e : j->events) {
        if (e.seq > after) out.push_back(e);
    }
    if (terminal) *terminal = is_terminal(j->status);
    return out;
}

void JobService::wait_events(const std::string& id, long after, std::chrono::milliseconds timeout) const {
    auto j = find(id);
    std::unique_lock lk(j->m);
    j->cv.wait_for(lk, timeout, [&] {
        return stopping_ || is_terminal(j->status) || (!j->events.empty() && j->events.back().seq > after);
    });
}

void JobService::decide(const std::string& id, const HumanDecision& decision) {
    auto j = find(id);
    {
        std::lock_guard lk(j->m);
        if (j->status != JobStatus::awaiting_human || j->decision) {
            throw Conflict("job " + id + " is " + to_string(j->status) + ", not awaiting a decision");
        }
        j->decision = decision;
    }
    set_status(*j, JobStatus::running);
    j->cv.notify_all();
}

void JobService::cancel(const std::string& id) {
    auto j = find(id);
    bool was_queued = false;
    {
        std::lock_guard lk(j->m);
        if (is_terminal(j->status)) throw Conflict("job " + id + " already " + to_string(j->status));
        j->cancel_requested = true;
        was_queued = j->status == JobStatus::queued;
    }
    if (was_queued) {
        {
            std::lock_guard lk(mu_);
            queue_.erase(std::remove(queue_.begin(), queue_.end(), id), queue_.end());
        }
        append_event(*j, {0, "failed", {{"code", "CANCELLED"}, {"message", "cancelled"}, {"stage", nullptr}}});
        set_status(*j, JobStatus::cancelled, std::pair{std::string("CANCELLED"), std::string("cancelled")});
    }
    j->cv.notify_all();
}

fs::path JobService::artifact(const std::string& id, const std::string& kind, const std::string& k,
                              const std::string& step) const {
    (void)find(id);
    const fs::path run = job_dir(id) / "run";
    fs::path p;
    if (kind == "run") {
        p = run / "run.json";
    } else if (kind == "final") {
        p = run / "final.png";
    } else if (!all_digits(k)) {
        throw NotFound("bad artifact index");
    } else if (kind == "iter") {
        p = run / ("iter_" + k + ".png");
    } else if (kind == "lut") {
        p = run / ("lut_" + k + ".cube");
    } else if (kind == "attn" && all_digits(step)) {
        p = run / ("attn_" + k) / ("step_" + step + ".png");
    } else {
        throw NotFound("unknown artifact kind " + kind);
    }
    if (!fs::is_regular_file(p)) throw NotFound("artifact not found");
    return p;
}

// -- Workers -----------------------------------------------------------------------------

void JobService::worker() {
    while (true) {
        std::shared_ptr<Job> job;
        {
            std::unique_lock lk(mu_);
            queue_cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
            if (stopping_) return;
            const std::string id = queue_.front();
            queue_.pop_front();
            job = jobs_.at(id);
        }
        {
            std::lock_guard lk(job->m);
            if (job->status != JobStatus::queued) continue;
        }
        try {
            execute(job);
        } catch (const std::exception& e) {
            spdlog::error("job {}: {}", job->id, e.what());
        }
    }
}

void JobService::execute(const std::shared_ptr<Job>& job) {
    set_status(*job, JobStatus::running);
    spdlog::info("job {} running", job->id);
    const fs::path dir = job_dir(job->id);

    auto fail_setup = [&](const std::string& code, const std::string& message) {
        append_event(*job, {0, "failed", {{"code", code}, {"message", message}, {"stage", "setup"}}});
        set_status(*job, JobStatus::failed, std::pair{code, message});
        spdlog::warn("job {} failed: {} {}", job->id, code, message);
    };

    HarmoniaConfig hc;
    std::unique_ptr<diffusion::DiffusionBackend> backend;
    std::unique_ptr<DescriptionProvider> provider;
    std::unique_ptr<HarmonyEvaluator> evaluator;
    RunContext ctx;
    CompositeCase composite;
    try {
        hc = resolve_config({job->config});
        composite = load_case(dir / "image.png", dir / "mask.png", job->id);
        backend = diffusion::make_backend(hc.backend);
        provider = make_provider(hc);
        evaluator = make_evaluator(hc, ctx.warnings);
        auto loaded = load_edge_detector(hc.run.iteration.preserve.edge_plugin, hc.run.iteration.preserve.sobel_mode);
        ctx.deep = loaded.detector;
        for (auto& w : loaded.warnings) ctx.warnings.push_back(std::move(w));
    } catch (const Error& e) {
        fail_setup(std::string(error_code_name(e.code())), e.what());
        return;
    } catch (const std::exception& e) {
        fail_setup("INTERNAL", e.what());
        return;
    }

    Observer observer(*this, job);
    ctx.backend = backend.get();
    ctx.provider = provider.get();
    ctx.evaluator = evaluator.get();
    ctx.observer = &observer;
    ctx.config_snapshot = hc.resolved;
    ctx.run_dir = dir / "run";
    const HarmonizationRun run = run_harmonization(composite, hc.run_config(), ctx);

    {
        std::lock_guard lk(job->m);
        if (job->interrupted) {
            spdlog::warn("job {} interrupted by shutdown", job->id);
            return;
        }
        job->iterations = static_cast<int>(run.iterations.size());
        job->best_index = run.best_index;
        job->best_score = run.best_index ? run.iterations[*run.best_index].score : std::nullopt;
    }
    switch (run.status) {
        case RunStatus::concluded: set_status(*job, JobStatus::concluded); break;
        case RunStatus::cancelled:
            set_status(*job, JobStatus::cancelled, std::pair{std::string("CANCELLED"), std::string("cancelled")});
            break;
        default: set_status(*job, JobStatus::failed, std::pair{run.failure_code, run.failure}); break;
    }
    spdlog::info("job {} {}", job->id, to_string(run.status));
}

}  // namespace harmonia::service
