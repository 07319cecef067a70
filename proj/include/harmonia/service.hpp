#pragma once

#include "harmonia/harmonize.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace harmonia::service {

class NotFound : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Conflict : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ServiceConfig {
    std::filesystem::path root = "harmonia-runs";
    std::string host = "127.0.0.1";
    int port = 8470;
    int max_sessions = 1;
    /// Config layers applied under each job's own overrides.
    std::vector<nlohmann::json> base_layers;

    /// HARMONIA_HOST, HARMONIA_PORT, HARMONIA_RUN_ROOT, HARMONIA_MAX_SESSIONS.
    static ServiceConfig from_env();
};

enum class JobStatus { queued, running, awaiting_human, concluded, failed, cancelled };

const char* to_string(JobStatus s);
JobStatus job_status_from_string(const std::string& s);
bool is_terminal(JobStatus s);
/// queued -> running -> {awaiting_human <-> running} -> {concluded | failed | cancelled};
/// a queued job may also be cancelled.
bool transition_allowed(JobStatus from, JobStatus to);

nlohmann::json event_to_json(const std::string& job_id, const RunEvent& e);
/// `id:`, `event:` and `data:` lines followed by a blank line.
std::string format_sse(const std::string& job_id, const RunEvent& e);

/// Owns the job index, worker sessions and per-job event logs.
///
/// Layout under root: index.json, jobs/<id>/{job.json, events.jsonl,
/// image.png, mask.png, run/}. Each event is appended to events.jsonl and
/// flushed before any subscriber can see it.
class JobService {
public:
    explicit JobService(ServiceConfig cfg);
    ~JobService();
    JobService(const JobService&) = delete;
    JobService& operator=(const JobService&) = delete;

    /// Recovers persisted jobs, then starts max_sessions workers. Queued jobs
    /// are requeued; jobs found running or awaiting a decision are marked
    /// failed with code INTERRUPTED.
    void start();
    /// Stops workers. In-flight jobs are left as they are on disk, so the
    /// next start() reports them like a crash would.
    void stop();

    /// Validates and queues a job. Throws harmonia::Error (bad input or config).
    std::string submit(std::span<const std::uint8_t> image, std::span<const std::uint8_t> mask,
                       const nlohmann::json& overrides);

    nlohmann::json job(const std::string& id) const;
    nlohmann::json list() const;

    /// Events with seq > after. `terminal` reports whether the job can emit no more.
    std::vector<RunEvent> events_after(const std::string& id, long after, bool* terminal = nullptr) const;
    /// Blocks until an event past `after` exists, the job is terminal, or the timeout passes.
    void wait_events(const std::string& id, long after, std::chrono::milliseconds timeout) const;

    /// Throws Conflict unless the job is awaiting a decision.
    void decide(const std::string& id, const HumanDecision& decision);
    /// Throws Conflict when the job already ended.
    void cancel(const std::string& id);

    /// kind: iter | attn | lut | run | final. Throws NotFound.
    std::filesystem::path artifact(const std::string& id, const std::string& kind, const std::string& k,
                                   const std::string& step = {}) const;

    bool stopping() const noexcept { return stopping_; }
    const ServiceConfig& config() const noexcept { return cfg_; }

private:
    struct Job;
    class Observer;

    std::shared_ptr<Job> find(const std::string& id) const;
    void worker();
    void execute(const std::shared_ptr<Job>& job);
    void append_event(Job& job, RunEvent e);
    void set_status(Job& job, JobStatus s, std::optional<std::pair<std::string, std::string>> error = {});
    void write_job(const Job& job) const;
    void write_index() const;
    std::filesystem::path job_dir(const std::string& id) const;
    std::string new_id();

    ServiceConfig cfg_;
    mutable std::mutex mu_;
    std::condition_variable queue_cv_;
    std::map<std::string, std::shared_ptr<Job>> jobs_;
    std::vector<std::string> order_;
    std::deque<std::string> queue_;
    std::vector<std::thread> workers_;
    std::atomic<bool> stopping_{false};
    bool started_ = false;
    std::uint64_t counter_ = 0;
};

/// HTTP front end over a JobService.
class HttpServer {
public:
    explicit HttpServer(JobService& service);
    ~HttpServer();

    /// Binds and serves on a background thread; port 0 picks a free one.
    /// Returns the bound port. Throws IoError when binding fails.
    int start(const std::string& host, int port);
    void stop();
    /// Blocks until stop() is called from elsewhere.
    void wait();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace harmonia::service
