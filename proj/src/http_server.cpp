#include "harmonia/errors.hpp"
#include "harmonia/service.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <sstream>

namespace harmonia::service {

using nlohmann::json;

namespace {

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    res.status = status;
    res.set_content(json{{"error", {{"code", code}, {"message", message}}}}.dump(), "application/json");
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::span<const std::uint8_t> bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

bool truthy(const std::string& v) { return v == "1" || v == "true" || v == "yes" || v == "on"; }

// Maps service and domain exceptions onto HTTP statuses.
template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
    try {
        fn();
    } catch (const NotFound& e) {
        send_error(res, 404, "NOT_FOUND", e.what());
    } catch (const Conflict& e) {
        send_error(res, 409, "CONFLICT", e.what());
    } catch (const Error& e) {
        send_error(res, 400, std::string(error_code_name(e.code())), e.what());
    } catch (const json::exception& e) {
        send_error(res, 400, "BAD_REQUEST", e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, "INTERNAL", e.what());
    }
}

HumanDecision parse_decision(const std::string& body) {
    const json j = json::parse(body);
    if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) {
        throw ConfigError("decision needs a string 'kind'");
    }
    HumanDecision d;
    d.kind = decision_kind_from_string(j["kind"]);
    for (const char* key : {"description", "new_description"}) {
        if (!j.contains(key) || j[key].is_null()) continue;
        ConditionDescription c = j[key].is_string() ? parse_vlm_response(j[key].get<std::string>())
                                                    : description_from_json(j[key]);
        c.provider_id = "human";
        c.raw_response.clear();
        d.description = std::move(c);
    }
    return d;
}

}  // namespace

struct HttpServer::Impl {
    JobService& svc;
    httplib::Server server;
    std::thread thread;

    explicit Impl(JobService& s) : svc(s) { routes(); }

    void routes() {
        server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, {{"status", "ok"}});
        });

        server.Post("/jobs", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                if (!req.is_multipart_form_data() || !req.has_file("image") || !req.has_file("mask")) {
                    send_error(res, 400, "BAD_REQUEST", "multipart fields 'image' and 'mask' are required");
                    return;
                }
                json overrides = json::object();
                if (req.has_file("config")) {
                    const std::string text = req.get_file_value("config").content;
                    if (!text.empty()) overrides = json::parse(text);
                }
                if (req.has_file("interactive") && truthy(req.get_file_value("interactive").content)) {
                    overrides["run"]["interactive"] = true;
                }
                const std::string id = svc.submit(bytes(req.get_file_value("image").content),
                                                  bytes(req.get_file_value("mask").content), overrides);
                send_json(res, 202, {{"job_id", id}, {"status", "queued"}});
            });
        });

        server.Get("/jobs", [this](const httplib::Request&, httplib::Response& res) {
            guarded(res, [&] { send_json(res, 200, svc.list()); });
        });

        server.Get(R"(/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { send_json(res, 200, svc.job(req.matches[1])); });
        });

        server.Get(R"(/jobs/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { stream_events(req, res); });
        });

        server.Post(R"(/jobs/([^/]+)/decision)", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const std::string id = req.matches[1];
                (void)svc.job(id);
                HumanDecision d;
                try {
                    d = parse_decision(req.body);
                } catch (const Error& e) {
                    send_error(res, 400, "BAD_DECISION", e.what());
                    return;
                } catch (const json::exception& e) {
                    send_error(res, 400, "BAD_DECISION", e.what());
                    return;
                }
                svc.decide(id, d);
                send_json(res, 200, svc.job(id));
            });
        });

        server.Post(R"(/jobs/([^/]+)/cancel)", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                svc.cancel(req.matches[1]);
                send_json(res, 200, svc.job(req.matches[1]));
            });
        });

        server.Get(R"(/jobs/([^/]+)/artifacts/(iter|lut)/(\d+))",
                   [this](const httplib::Request& req, httplib::Response& res) {
                       guarded(res, [&] {
                           const std::string kind = req.matches[2];
                           send_file(res, svc.artifact(req.matches[1], kind, req.matches[3]),
                                     kind == "iter" ? "image/png" : "text/plain");
                       });
                   });

        server.Get(R"(/jobs/([^/]+)/artifacts/attn/(\d+)/(\d+))",
                   [this](const httplib::Request& req, httplib::Response& res) {
                       guarded(res, [&] {
                           send_file(res, svc.artifact(req.matches[1], "attn", req.matches[2], req.matches[3]),
                                     "image/png");
                       });
                   });

        server.Get(R"(/jobs/([^/]+)/artifacts/(run|final))",
                   [this](const httplib::Request& req, httplib::Response& res) {
                       guarded(res, [&] {
                           const std::string kind = req.matches[2];
                           send_file(res, svc.artifact(req.matches[1], kind, ""),
                                     kind == "run" ? "application/json" : "image/png");
                       });
                   });
    }

    static void send_file(httplib::Response& res, const std::filesystem::path& p, const char* type) {
        res.status = 200;
        res.set_content(read_file(p), type);
    }

    void stream_events(const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        (void)svc.job(id);
        long after = 0;
        if (req.has_param("last_seq")) {
            after = std::stol(req.get_param_value("last_seq"));
        } else if (req.has_header("Last-Event-ID")) {
            after = std::stol(req.get_header_value("Last-Event-ID"));
        }
        if (after < 0) throw ConfigError("last_seq must be >= 0");
        res.set_header("Cache-Control", "no-cache");
        res.set_header("X-Accel-Buffering", "no");
        JobService* service = &svc;
        res.set_chunked_content_provider(
            "text/event-stream", [service, id, cursor = after, idle = 0](std::size_t, httplib::DataSink& sink) mutable {
                bool terminal = false;
                const auto events = service->events_after(id, cursor, &terminal);
                for (const auto& e : events) {
                    const std::string chunk = format_sse(id, e);
                    if (!sink.write(chunk.data(), chunk.size())) return false;
                    cursor = e.seq;
                }
                if (!events.empty()) {
                    idle = 0;
                    return true;
                }
                if (terminal || service->stopping()) {
                    sink.done();
                    return true;
                }
                service->wait_events(id, cursor, std::chrono::milliseconds(500));
                if (++idle >= 30) {
                    idle = 0;
                    static const std::string keepalive = ": keepalive\n\n";
                    if (!sink.write(keepalive.data(), keepalive.size())) return false;
                }
                return true;
            });
    }
};

HttpServer::HttpServer(JobService& service) : impl_(std::make_unique<Impl>(service)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
        if (bound < 0) throw IoError("cannot bind " + host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        throw IoError("cannot bind " + host + ":" + std::to_string(port));
    }
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    spdlog::info("listening on {}:{}", host, bound);
    return bound;
}

void HttpServer::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

void HttpServer::wait() {
    if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace harmonia::service
