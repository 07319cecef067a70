#include "harmonia/config.hpp"
#include "harmonia/errors.hpp"
#include "harmonia/evaluate.hpp"
#include "harmonia/fixtures.hpp"
#include "harmonia/harmonize.hpp"
#include "harmonia/luts.hpp"
#include "harmonia/preserve.hpp"
#include "harmonia/service.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <thread>

using namespace harmonia;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitProvider = 3;
constexpr int kExitBackend = 4;
constexpr int kExitInternal = 5;

int exit_code_for(std::string_view code) {
    if (code == "IO" || code == "CONFIG" || code == "IMAGE_DECODE" || code == "MASK_SHAPE" ||
        code == "DEGENERATE_MASK" || code == "MASK_OVERLAP" || code == "LABEL_DEGENERACY" ||
        code == "LENGTH_MISMATCH" || code == "RECORD_MISMATCH") {
        return kExitInput;
    }
    if (code == "PROVIDER_UNAVAILABLE" || code == "DESCRIPTION_PARSE") return kExitProvider;
    if (code == "BACKEND_UNAVAILABLE" || code == "BACKEND_NUMERICS" || code == "DEGENERATE_ATTENTION" ||
        code == "REFINEMENT_DIVERGED" || code == "NO_CONDITION_TOKENS" || code == "EVALUATOR_UNAVAILABLE") {
        return kExitBackend;
    }
    return kExitInternal;
}

struct ConfigFlags {
    std::string config_file;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    bool interactive = false;
    bool painterly = false;

    void add_to(CLI::App* app) {
        app->add_option("--config", config_file, "JSON config file");
        app->add_option("--set", sets, "Override a config key, e.g. run.max_iterations=4");
        app->add_option("--seed", seed, "Seed for every stochastic choice");
    }

    // defaults < file < flags
    std::vector<json> layers() const {
        std::vector<json> out;
        if (!config_file.empty()) out.push_back(load_config_file(config_file));
        json flags = json::object();
        for (const auto& s : sets) flags = merge_config(flags, parse_override(s));
        if (seed) flags["seed"] = *seed;
        if (interactive) flags["run"]["interactive"] = true;
        if (painterly) flags["preserve"]["painterly"] = true;
        out.push_back(flags);
        return out;
    }
};

std::optional<ConditionDescription> read_triple(const std::string& text) {
    if (text.find(':') == std::string::npos) return std::nullopt;
    ConditionDescription d = parse_vlm_response(text);
    d.provider_id = "human";
    d.raw_response.clear();
    return d;
}

// Prompts on stderr, reads decisions from stdin. An empty line or EOF takes the proposal.
class TerminalHuman final : public RunObserver {
public:
    std::optional<HumanDecision> await_decision(const HarmonizationRun& run, const Decision& proposal) override {
        std::cerr << "\niterations so far: " << run.iterations.size();
        if (run.best_index) std::cerr << ", best #" << *run.best_index;
        std::cerr << "\nproposal: " << to_string(proposal.kind)
                  << "\n[c]ontinue, [r]egenerate [object: .. | foreground: .. | background: ..], "
                     "[q] conclude, [x] cancel, enter accepts > "
                  << std::flush;
        std::string line;
        while (true) {
            if (!std::getline(std::cin, line)) return HumanDecision{proposal.kind, std::nullopt};
            const std::string head = line.substr(0, line.find(' '));
            const std::string rest = line.size() > head.size() ? line.substr(head.size() + 1) : "";
            try {
                if (head.empty()) return HumanDecision{proposal.kind, std::nullopt};
                if (head == "c" || head == "continue") return HumanDecision{DecisionKind::Continue, std::nullopt};
                if (head == "q" || head == "conclude") return HumanDecision{DecisionKind::Conclude, std::nullopt};
                if (head == "x" || head == "cancel") return std::nullopt;
                if (head == "r" || head == "regenerate") return HumanDecision{DecisionKind::Regenerate, read_triple(rest)};
            } catch (const Error& e) {
                std::cerr << e.what() << "\n";
            }
            std::cerr << "? " << std::flush;
        }
    }

    void on_iteration(const HarmonizationRun&, const IterationResult& it) override {
        std::cerr << "iteration " << it.index << " (" << it.role << ")";
        if (it.score) std::cerr << " score " << std::fixed << std::setprecision(4) << *it.score;
        std::cerr << "  " << it.description.format() << "\n";
    }
};

struct Session {
    HarmoniaConfig cfg;
    std::unique_ptr<diffusion::DiffusionBackend> backend;
    std::unique_ptr<DescriptionProvider> provider;
    std::unique_ptr<HarmonyEvaluator> evaluator;
    RunContext ctx;

    explicit Session(HarmoniaConfig c) : cfg(std::move(c)) {
        backend = diffusion::make_backend(cfg.backend);
        provider = make_provider(cfg);
        evaluator = make_evaluator(cfg, ctx.warnings);
        auto loaded = load_edge_detector(cfg.run.iteration.preserve.edge_plugin, cfg.run.iteration.preserve.sobel_mode);
        ctx.deep = loaded.detector;
        for (auto& w : loaded.warnings) ctx.warnings.push_back(std::move(w));
        ctx.backend = backend.get();
        ctx.provider = provider.get();
        ctx.evaluator = evaluator.get();
        ctx.config_snapshot = cfg.resolved;
        for (const auto& w : ctx.warnings) spdlog::warn("{}", w);
    }
};

void print_outcome(const HarmonizationRun& run, const fs::path& dir) {
    std::cout << "status: " << to_string(run.status) << "\n";
    if (run.best_index) {
        std::cout << "best: iteration " << *run.best_index;
        if (const auto& s = run.iterations[*run.best_index].score) std::cout << " score " << *s;
        std::cout << "\n";
    }
    if (run.status == RunStatus::failed) std::cout << "failure: " << run.failure_code << " " << run.failure << "\n";
    std::cout << "output: " << (dir / "final.png").string() << "\n";
}

int run_status_exit(const HarmonizationRun& run) {
    if (run.status == RunStatus::concluded) return 0;
    if (run.status == RunStatus::cancelled) return 1;
    return exit_code_for(run.failure_code);
}

// A scripted provider without responses reads descriptions.txt from the case directory.
std::vector<json> with_case_script(std::vector<json> layers, const fs::path& case_dir) {
    const HarmoniaConfig probe = resolve_config(layers);
    const fs::path script = case_dir / "descriptions.txt";
    if (probe.provider.kind == "scripted" && probe.provider.responses.empty() &&
        probe.provider.responses_file.empty() && fs::exists(script)) {
        layers.push_back({{"descriptor", {{"provider", {{"responses_file", script.string()}}}}}});
    }
    return layers;
}

// -- run ----------------------------------------------------------------------------------

int cmd_run(const ConfigFlags& flags, const std::string& image, const std::vector<std::string>& masks,
            std::string out) {
    const HarmoniaConfig cfg = resolve_config(with_case_script(flags.layers(), fs::path(image).parent_path()));
    if (masks.empty()) throw IoError("at least one --mask is required");
    if (out.empty()) out = "runs/" + fs::path(image).stem().string();
    const fs::path dir(out);

    std::optional<CompositeCase> single;
    if (masks.size() == 1) single = load_case(image, masks[0], fs::path(image).stem().string());
    fs::create_directories(dir);
    Session s(cfg);
    TerminalHuman human;
    s.ctx.observer = &human;
    s.ctx.run_dir = dir;
    if (single) {
        const CompositeCase& c = *single;
        const HarmonizationRun run = run_harmonization(c, cfg.run_config(), s.ctx);
        print_outcome(run, dir);
        return run_status_exit(run);
    }
    std::vector<ForegroundMask> ms;
    for (const auto& m : masks) ms.push_back(load_mask(m));
    const MultiResult r = harmonize_multi(load_image(image), ms, cfg.run_config(), s.ctx);
    save_png(r.final_image, dir / "final.png");
    int code = 0;
    for (std::size_t i = 0; i < r.runs.size(); ++i) {
        std::cout << "instance " << i << ": ";
        print_outcome(r.runs[i], dir / ("instance_" + std::to_string(i)));
        if (!code) code = run_status_exit(r.runs[i]);
    }
    std::cout << "combined: " << (dir / "final.png").string() << "\n";
    return code;
}

// -- batch --------------------------------------------------------------------------------

struct BatchRow {
    std::string case_id;
    std::string status;
    int iterations = 0;
    std::optional<double> score;
    double seconds = 0.0;
    std::string error;
};

int cmd_batch(const ConfigFlags& flags, const fs::path& cases_dir, const fs::path& out, int jobs) {
    const std::vector<json> base = flags.layers();
    (void)resolve_config(base);
    std::vector<fs::path> cases;
    for (const auto& e : fs::directory_iterator(cases_dir)) {
        if (e.is_directory() && fs::exists(e.path() / "image.png")) cases.push_back(e.path());
    }
    std::sort(cases.begin(), cases.end());
    if (cases.empty()) throw IoError("no cases under " + cases_dir.string());

    std::vector<BatchRow> rows(cases.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i; (i = next++) < cases.size();) {
            BatchRow& row = rows[i];
            row.case_id = cases[i].filename().string();
            const auto t0 = std::chrono::steady_clock::now();
            try {
                const HarmoniaConfig cfg = resolve_config(with_case_script(base, cases[i]));
                Session s(cfg);
                s.ctx.run_dir = out / row.case_id;
                fs::create_directories(s.ctx.run_dir);
                const CompositeCase c = load_case(cases[i] / "image.png", cases[i] / "mask.png", row.case_id);
                const HarmonizationRun run = run_harmonization(c, cfg.run_config(), s.ctx);
                row.status = to_string(run.status);
                row.iterations = static_cast<int>(run.iterations.size());
                if (run.best_index) row.score = run.iterations[*run.best_index].score;
                row.error = run.failure_code;
            } catch (const Error& e) {
                row.status = "failed";
                row.error = std::string(error_code_name(e.code()));
                spdlog::error("{}: {}", row.case_id, e.what());
            } catch (const std::exception& e) {
                row.status = "failed";
                row.error = "INTERNAL";
                spdlog::error("{}: {}", row.case_id, e.what());
            }
            row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < std::max(1, jobs); ++j) pool.emplace_back(work);
    for (auto& t : pool) t.join();

    fs::create_directories(out);
    std::ofstream csv(out / "summary.csv");
    csv << "case,status,iterations,final_score,runtime_s,error\n";
    std::printf("%-20s %-10s %10s %12s %10s\n", "case", "status", "iterations", "final_score", "runtime_s");
    int failed = 0;
    for (const auto& r : rows) {
        const std::string score = r.score ? std::to_string(*r.score) : "-";
        std::printf("%-20s %-10s %10d %12s %10.2f\n", r.case_id.c_str(), r.status.c_str(), r.iterations,
                    score.c_str(), r.seconds);
        csv << r.case_id << ',' << r.status << ',' << r.iterations << ',' << (r.score ? score : "") << ','
            << r.seconds << ',' << r.error << '\n';
        failed += r.status != "concluded";
    }
    std::cout << "summary: " << (out / "summary.csv").string() << "\n";
    return failed ? 1 : 0;
}

// -- train-evaluator ------------------------------------------------------------------------

int cmd_train(const fs::path& manifest, const fs::path& out, const TrainConfig& tc) {
    const auto examples = load_manifest(manifest);
    const TrainReport r = train_evaluator(examples, tc);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    r.model.save(out);
    const json metrics = {{"model", out.string()},
                          {"config_hash", r.model.config_hash},
                          {"examples", examples.size()},
                          {"train_count", r.train_count},
                          {"validation_count", r.validation_count},
                          {"validation_auc", r.validation_auc},
                          {"validation_loss", r.validation_loss},
                          {"newton_steps", r.newton_steps}};
    std::ofstream(out.string() + ".metrics.json") << metrics.dump(2) << "\n";
    std::cout << metrics.dump(2) << "\n";
    return 0;
}

// -- luts ---------------------------------------------------------------------------------

ForegroundMask mask_or_full(const std::string& path, const RasterImage& image) {
    if (!path.empty()) return load_mask(path);
    return ForegroundMask(image.width(), image.height(), 1);
}

int cmd_luts_fit(const std::string& from, const std::string& to, const std::string& mask, const fs::path& out,
                 const LutFitConfig& cfg) {
    const RasterImage a = load_image(from);
    const RasterImage b = load_image(to);
    const LutFit fit = fit_lut(a, b, mask_or_full(mask, a), cfg);
    export_lut(fit.lut, out, fs::path(to).stem().string());
    std::cout << json{{"lut", out.string()},
                      {"size", fit.lut.size},
                      {"lambda_used", fit.lambda_used},
                      {"pixels", fit.pixels},
                      {"occupied_cells", fit.occupied_cells},
                      {"mean_abs_residual", fit.mean_abs_residual}}
                     .dump(2)
              << "\n";
    return 0;
}

int cmd_luts_apply(const std::string& image, const std::string& lut, const std::string& mask, const fs::path& out) {
    const RasterImage img = load_image(image);
    const Lut3D l = import_lut(lut);
    save_png(mask.empty() ? apply_lut(img, l) : apply_lut(img, l, load_mask(mask)), out);
    std::cout << out.string() << "\n";
    return 0;
}

int cmd_luts_export(const fs::path& run_dir, std::optional<int> iteration, const fs::path& out) {
    std::ifstream in(run_dir / "run.json");
    if (!in) throw IoError("no run.json in " + run_dir.string());
    const json run = json::parse(in);
    int k = 0;
    if (iteration) {
        k = *iteration;
    } else if (!run["best_index"].is_null()) {
        k = run["best_index"];
    } else {
        throw ConfigError("run has no best iteration; pass --iteration");
    }
    const fs::path src = run_dir / ("lut_" + std::to_string(k) + ".cube");
    if (!fs::exists(src)) throw IoError("no LUT for iteration " + std::to_string(k));
    export_lut(import_lut(src), out, run.value("case_id", std::string("harmonia")) + " iteration " + std::to_string(k));
    std::cout << out.string() << "\n";
    return 0;
}

// -- serve --------------------------------------------------------------------------------

int cmd_serve(const ConfigFlags& flags, service::ServiceConfig sc) {
    sc.base_layers = flags.layers();
    (void)resolve_config(sc.base_layers);

    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    service::JobService svc(sc);
    svc.start();
    service::HttpServer http(svc);
    const int port = http.start(sc.host, sc.port);
    std::cout << "listening on http://" << sc.host << ":" << port << std::endl;

    int sig = 0;
    sigwait(&set, &sig);
    spdlog::info("signal {}: shutting down", sig);
    http.stop();
    svc.stop();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    auto logger = spdlog::stderr_color_mt("harmonia");
    spdlog::set_default_logger(logger);
    if (const char* lvl = std::getenv("HARMONIA_LOG"); lvl && *lvl) spdlog::set_level(spdlog::level::from_str(lvl));

    CLI::App app{"harmonia: iterative zero-shot image harmonization"};
    app.require_subcommand(1);

    ConfigFlags flags;
    std::string image, out;
    std::vector<std::string> masks;
    auto* run = app.add_subcommand("run", "Harmonize one composite");
    flags.add_to(run);
    run->add_option("--image", image, "Composite image")->required();
    run->add_option("--mask", masks, "Foreground mask (repeat for several instances)")->required();
    run->add_flag("--interactive", flags.interactive, "Ask for each decision on the terminal");
    run->add_flag("--painterly", flags.painterly, "Partial self-attention injection");
    run->add_option("--out", out, "Run directory (default runs/<image stem>)");

    std::string cases_dir;
    int jobs = 1;
    auto* batch = app.add_subcommand("batch", "Harmonize every case in a directory");
    flags.add_to(batch);
    batch->add_option("--cases-dir", cases_dir, "Directory of <case>/{image,mask}.png")->required();
    batch->add_option("--out", out, "Output root")->default_val("batch-runs");
    batch->add_option("--jobs", jobs, "Cases run in parallel")->default_val(1)->check(CLI::Range(1, 64));

    std::string manifest;
    TrainConfig tc;
    auto* train = app.add_subcommand("train-evaluator", "Train the harmony evaluator");
    train->add_option("--manifest", manifest, "CSV of image,mask,label")->required();
    train->add_option("--out", out, "Model file")->default_val("evaluator.json");
    train->add_option("--seed", tc.seed, "Validation split seed")->default_val(7);
    train->add_option("--validation-fraction", tc.validation_fraction)->default_val(0.2);
    train->add_option("--ridge", tc.ridge)->default_val(1e-2);

    auto* luts = app.add_subcommand("luts", "3D LUT tools");
    luts->require_subcommand(1);
    std::string from, to, lut_mask, lut_path, run_dir;
    std::optional<int> iteration;
    LutFitConfig lfc;
    auto* fit = luts->add_subcommand("fit", "Fit a LUT mapping one image onto another");
    fit->add_option("--from", from)->required();
    fit->add_option("--to", to)->required();
    fit->add_option("--mask", lut_mask, "Restrict the fit to this mask");
    fit->add_option("--out", out)->required();
    fit->add_option("--size", lfc.size)->default_val(17)->check(CLI::Range(2, 65));
    fit->add_option("--lambda", lfc.lambda)->default_val(0.01);
    auto* apply = luts->add_subcommand("apply", "Apply a .cube LUT to an image");
    apply->add_option("--image", image)->required();
    apply->add_option("--lut", lut_path)->required();
    apply->add_option("--mask", lut_mask, "Apply only inside this mask");
    apply->add_option("--out", out)->required();
    auto* exp = luts->add_subcommand("export", "Export a run's LUT as .cube");
    exp->add_option("--run", run_dir, "Run directory")->required();
    exp->add_option("--iteration", iteration, "Iteration (default: best)");
    exp->add_option("--out", out)->required();

    service::ServiceConfig sc = service::ServiceConfig::from_env();
    auto* serve = app.add_subcommand("serve", "Run the HTTP job service");
    flags.add_to(serve);
    serve->add_option("--host", sc.host)->capture_default_str();
    serve->add_option("--port", sc.port)->capture_default_str();
    serve->add_option("--root", sc.root, "Run root directory")->capture_default_str();
    serve->add_option("--max-sessions", sc.max_sessions)->capture_default_str()->check(CLI::Range(1, 64));

    std::string fixtures_out;
    auto* fx = app.add_subcommand("make-fixtures", "Write the bundled fixture set");
    fx->add_option("--out", fixtures_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitInput;
    }

    try {
        if (*run) return cmd_run(flags, image, masks, out);
        if (*batch) return cmd_batch(flags, cases_dir, out, jobs);
        if (*train) return cmd_train(manifest, out, tc);
        if (*fit) return cmd_luts_fit(from, to, lut_mask, out, lfc);
        if (*apply) return cmd_luts_apply(image, lut_path, lut_mask, out);
        if (*exp) return cmd_luts_export(run_dir, iteration, out);
        if (*serve) return cmd_serve(flags, sc);
        if (*fx) {
            fixtures::write_fixture_set(fixtures_out);
            std::cout << fixtures_out << "\n";
            return 0;
        }
    } catch (const Error& e) {
        const std::string_view code = error_code_name(e.code());
        std::cerr << "error " << code << ": " << e.what() << "\n";
        return exit_code_for(code);
    } catch (const std::exception& e) {
        std::cerr << "error INTERNAL: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitInternal;
}
