#include "patchlens/cli.hpp"

#include <csignal>
#include <fstream>
#include <iomanip>
#include <iterator>

#include <CLI11.hpp>

#include "patchlens/errors.hpp"
#include "patchlens/experiments.hpp"
#include "patchlens/http_server.hpp"
#include "patchlens/log.hpp"
#include "patchlens/service.hpp"

namespace patchlens {

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out << text;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const InputError*>(&e) || dynamic_cast<const IndexError*>(&e) ||
        dynamic_cast<const SessionExpired*>(&e))
        return kExitInput;
    if (dynamic_cast<const CapabilityError*>(&e) || dynamic_cast<const QueueSaturated*>(&e)) return kExitModel;
    return kExitInternal;
}

HttpServer* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

struct CommonOptions {
    std::string config;
    std::string model;
    std::string precision = "f32";
    bool deterministic = false;
    std::uint64_t seed = 0;
};

ServiceConfig service_config(const CommonOptions& o) {
    ServiceConfig c = o.config.empty() ? ServiceConfig{} : ServiceConfig::from_file(o.config);
    c.apply_env();
    if (!o.model.empty()) c.default_model = o.model;
    c.precision = parse_precision(o.precision);
    c.deterministic = c.deterministic || o.deterministic;
    if (o.seed != 0) c.seed = o.seed;
    c.validate();
    return c;
}

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config, "Service config file (JSON)");
    cmd->add_option("--model", o.model, "Model id: toy, toy:<seed>, a configured id, or a checkpoint directory");
    cmd->add_option("--capture-precision", o.precision, "Activation capture precision")->check(CLI::IsMember({"f32", "f16"}));
    cmd->add_flag("--deterministic", o.deterministic, "Sequential session ids");
    cmd->add_option("--seed", o.seed, "Seed for toy models and random baselines");
}

}  // namespace

int run_cli(const std::vector<std::string>& args_in, std::ostream& out, std::ostream& err) {
    CLI::App app{"patchlens: head and patch attribution for vision-language models"};
    app.name("patchlens");
    app.require_subcommand(1);
    std::string log_level = "warn";
    app.add_option("--log-level", log_level, "debug, info, warn or error");

    // analyze
    CommonOptions an_common;
    std::string an_image, an_question, an_context, an_policy = "top-k", an_target, an_out = "analyze-out";
    int an_top_k = 0;
    int an_max_new = 0;
    bool an_shared = false;
    auto* analyze = app.add_subcommand("analyze", "Analyze one image + question (or text prompt)");
    add_common(analyze, an_common);
    analyze->add_option("--image", an_image, "Image file");
    analyze->add_option("--question", an_question, "Question")->required();
    analyze->add_option("--context", an_context, "Text placed before the question (text mode)");
    analyze->add_option("--top-k", an_top_k, "Heads to report (default 10, capped at the head count)");
    analyze->add_option("--heads-policy", an_policy, "top-k, all, or a list like 1_2,0_3");
    analyze->add_option("--target", an_target, "Attribute this word instead of the predicted token");
    analyze->add_flag("--shared-scale", an_shared, "Scale both heatmaps to one range");
    analyze->add_option("--max-new-tokens", an_max_new, "Greedy answer length");
    analyze->add_option("--out", an_out, "Output directory");

    // experiment
    auto* experiment = app.add_subcommand("experiment", "Evidence pipelines");
    experiment->require_subcommand(1);
    CommonOptions ex_common;
    std::string ex_pipeline = "tqa", ex_annotations, ex_out = "report", ex_heatmaps, ex_question;
    int ex_top_k = 10, ex_top_positions = 20;
    bool ex_no_gate = false;
    std::string ex_policy = "top-k";
    auto* run = experiment->add_subcommand("run", "Run a pipeline over an annotation file");
    add_common(run, ex_common);
    run->add_option("--pipeline", ex_pipeline, "tqa, vqa or alt")->check(CLI::IsMember({"tqa", "vqa", "alt"}));
    run->add_option("--annotations", ex_annotations, "Annotation file")->required();
    run->add_option("--out", ex_out, "Output prefix: writes <prefix>.json and <prefix>.csv");
    run->add_option("--top-k", ex_top_k, "Heads per case");
    run->add_option("--heads-policy", ex_policy, "Only top-k is supported for experiments")
        ->check(CLI::IsMember({"top-k"}));
    run->add_option("--top-positions", ex_top_positions, "Visual positions per case");
    run->add_flag("--no-gate", ex_no_gate, "Keep cases whose answer differs from the annotation");
    run->add_option("--heatmaps", ex_heatmaps, "Directory for per-case heatmaps (vqa)");
    run->add_option("--question", ex_question, "Alternate question template (alt)");

    std::string mc_out;
    int mc_n = 20;
    std::uint64_t mc_seed = 0;
    int mc_size = 96;
    auto* make_cases = experiment->add_subcommand("make-cases", "Write synthetic stub cases");
    make_cases->add_option("--out", mc_out, "Directory")->required();
    make_cases->add_option("--n", mc_n, "Number of cases");
    make_cases->add_option("--seed", mc_seed, "Seed");
    make_cases->add_option("--image-size", mc_size, "Image side in pixels");

    // compare-heads
    std::vector<std::string> ch_profiles;
    int ch_k = 10;
    std::string ch_out;
    auto* compare = app.add_subcommand("compare-heads", "Top-k head overlap between report profiles");
    compare->add_option("--profiles", ch_profiles, "Evidence report JSON files")->required()->expected(2, -1);
    compare->add_option("--k", ch_k, "Top-k");
    compare->add_option("--out", ch_out, "Write the comparison JSON here");

    // report
    std::string rp_input, rp_out;
    auto* report = app.add_subcommand("report", "Render an evidence report to CSV and head-grid figures");
    report->add_option("--input", rp_input, "Evidence report JSON")->required();
    report->add_option("--out", rp_out, "Output prefix (default: input without extension)");

    // serve
    CommonOptions sv_common;
    std::string sv_host;
    int sv_port = -1;
    std::string sv_heatmaps;
    auto* serve = app.add_subcommand("serve", "Start the HTTP service");
    add_common(serve, sv_common);
    serve->add_option("--host", sv_host, "Bind address");
    serve->add_option("--port", sv_port, "Port (0 = any free port)");
    serve->add_option("--heatmap-dir", sv_heatmaps, "Where heatmap images are written and served from");

    std::vector<std::string> argv_rev(args_in.rbegin(), args_in.rend());
    if (!argv_rev.empty()) argv_rev.pop_back();
    try {
        app.parse(argv_rev);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kExitOk : kExitInput;
    }

    try {
        set_log_level(parse_log_level(log_level));

        if (*analyze) {
            auto cfg = service_config(an_common);
            cfg.heatmap_dir = an_out;
            Service service(cfg);
            AnalyzeRequest req;
            if (!an_image.empty()) req.image = read_bytes(an_image);
            req.question = an_question;
            req.context = an_context;
            if (an_top_k != 0) req.top_k = an_top_k;
            req.heads_policy = an_policy;
            req.shared_scale = an_shared;
            if (!an_target.empty()) req.target_token = an_target;
            if (an_max_new > 0) req.max_new_tokens = an_max_new;
            const auto result = service.analyze(req);
            auto j = analyze_response_json(result);
            write_text(std::filesystem::path(an_out) / "analyze.json", j.dump(2) + "\n");
            out << "answer: " << result.answer << '\n';
            out << "forward passes: traced " << result.traced_passes << ", generation " << result.generation_passes
                << '\n';
            out << "top heads:";
            for (const auto& h : result.session->attribution.top_heads)
                out << ' ' << h.label() << " (" << std::fixed << std::setprecision(3)
                    << result.session->attribution.share(h) << ')';
            out << '\n' << "wrote " << (std::filesystem::path(an_out) / "analyze.json").string() << '\n';
            return kExitOk;
        }

        if (*make_cases) {
            const auto path = make_stub_cases(mc_out, mc_n, mc_seed, mc_size);
            out << "wrote " << mc_n << " cases to " << path.string() << '\n';
            return kExitOk;
        }

        if (*run) {
            auto cfg = service_config(ex_common);
            ModelRegistry registry(cfg);
            const auto bundle = registry.get(cfg.default_model);
            const auto ingest = ingest_annotations(ex_annotations);
            for (const auto& issue : ingest.errors)
                err << ex_annotations << ':' << issue.line << ": " << issue.reason << '\n';
            for (const auto& w : ingest.warnings) err << ex_annotations << ": warning: " << w << '\n';
            if (ingest.cases.empty()) throw InputError("no usable annotation records in " + ex_annotations);

            ExperimentConfig ec;
            ec.top_heads = ex_top_k;
            ec.top_positions = ex_top_positions;
            ec.correctness_gate = !ex_no_gate;
            ec.seed = cfg.seed;
            ec.precision = cfg.precision;
            if (!ex_heatmaps.empty()) ec.heatmap_dir = ex_heatmaps;
            EvidenceReport rep;
            if (ex_pipeline == "tqa") {
                rep = run_tqa_evidence(ingest.cases, *bundle, ec);
            } else if (ex_pipeline == "vqa") {
                rep = run_vqa_evidence(ingest.cases, *bundle, ec);
            } else {
                rep = run_alt_question_probe(ingest.cases, *bundle, ec,
                                             ex_question.empty() ? bundle->templates.alt_question : ex_question);
            }
            write_report(rep, ex_out);
            out << rep.pipeline() << ": " << rep.included() << " of " << rep.ingested() << " cases included";
            for (const auto& [reason, n] : rep.exclusions()) out << "; " << n << " excluded (" << reason << ')';
            out << '\n' << "wrote " << ex_out << ".json and " << ex_out << ".csv\n";
            return kExitOk;
        }

        if (*compare) {
            if (ch_k < 1) throw InputError("--k must be positive");
            std::map<std::string, HeadGrid> profiles;
            std::vector<std::string> names;
            for (const auto& path : ch_profiles) {
                const auto rep = EvidenceReport::from_json(read_json_file(path));
                if (!rep.profile()) throw InputError(path + " has no head profile");
                std::string name = rep.model_id().empty() ? std::filesystem::path(path).stem().string() : rep.model_id();
                if (profiles.count(name)) name += " (" + std::filesystem::path(path).stem().string() + ")";
                if (profiles.count(name)) name = path;
                profiles.emplace(name, *rep.profile());
            }
            const auto cmp = compare_models(profiles, ch_k);
            for (const auto& p : cmp.pairs)
                out << "overlap " << p.a << " vs " << p.b << " (top-" << cmp.k << "): " << p.overlap << '\n';
            if (!ch_out.empty()) write_text(ch_out, cmp.to_json().dump(2) + "\n");
            return kExitOk;
        }

        if (*report) {
            const auto rep = EvidenceReport::from_json(read_json_file(rp_input));
            std::filesystem::path prefix = rp_out.empty() ? std::filesystem::path(rp_input).replace_extension("")
                                                          : std::filesystem::path(rp_out);
            write_text(prefix.string() + ".csv", rep.to_csv());
            if (rep.profile()) {
                write_head_grid_png(*rep.profile(), prefix.string() + "_heads.png");
                write_text(prefix.string() + "_heads.csv", head_grid_csv(*rep.profile()));
            }
            out << rep.pipeline() << " (" << rep.model_id() << "), " << rep.included() << '/' << rep.ingested()
                << " cases\n";
            for (const auto& s : rep.statistics()) {
                out << "  " << std::left << std::setw(36) << s.name << ' ';
                if (s.count == 0)
                    out << "unavailable";
                else
                    out << std::setprecision(6) << s.value << "  (n=" << s.count << ')';
                out << '\n';
            }
            out << "wrote " << prefix.string() << ".csv\n";
            return kExitOk;
        }

        if (*serve) {
            auto cfg = service_config(sv_common);
            if (!sv_host.empty()) cfg.host = sv_host;
            if (sv_port >= 0) cfg.port = sv_port;
            if (!sv_heatmaps.empty()) cfg.heatmap_dir = sv_heatmaps;
            cfg.validate();
            auto service = std::make_shared<Service>(cfg);
            service->models().get(cfg.default_model);
            HttpServer server(service);
            const int port = server.bind(cfg.host, cfg.port);
            out << "listening on http://" << cfg.host << ':' << port << '\n' << std::flush;
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            server.listen();
            g_server = nullptr;
            return kExitOk;
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
    return kExitInternal;
}

}  // namespace patchlens
