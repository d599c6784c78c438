// empcause: command-line front end over the experiment harness.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/error.hpp"
#include "empcause/common/text.hpp"
#include "empcause/harness.hpp"

namespace fs = std::filesystem;
using namespace empcause;

namespace {

struct Globals {
    std::string config;
    std::optional<std::string> mode;
    std::optional<std::uint64_t> seed;
    std::string log_level = "info";
};

json load_raw(const std::string &path) {
    if (path.empty())
        throw PreconditionError("--config is required for this command");
    return json::parse(read_file(path));
}

harness::ExperimentConfig make_config(const Globals &g, json raw) {
    if (g.mode)
        raw["mode"] = *g.mode;
    if (g.seed)
        raw["seed"] = *g.seed;
    return harness::ExperimentConfig::from_json(raw, fs::absolute(g.config).parent_path());
}

void print_result(const harness::RunResult &r) {
    fmt::print("run directory: {}\n", r.run_dir.string());
    for (const auto &s : r.manifest.stages)
        fmt::print("  {:<17} {}\n", s.at("name").get<std::string>(), s.at("status").get<std::string>());
    fmt::print("network calls: {}\n", r.network_calls);
}

std::vector<metrics::MetricReport> load_run_reports(const fs::path &run_dir) {
    std::vector<metrics::MetricReport> reports;
    const fs::path dir = run_dir / "metrics";
    if (!fs::is_directory(dir))
        throw PreconditionError(fmt::format("{} has no metrics/ directory (run the evaluate stage)", run_dir.string()));
    std::vector<fs::path> files;
    for (const auto &e : fs::directory_iterator(dir))
        if (e.path().extension() == ".json" && e.path().filename() != "summary.json")
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto &f : files)
        reports.push_back(metrics::metric_report_from_json(json::parse(read_file(f))));
    return reports;
}

std::string run_method_name(const fs::path &run_dir) {
    const fs::path manifest = run_dir / "manifest.json";
    if (fs::exists(manifest)) {
        json m = json::parse(read_file(manifest), nullptr, false);
        if (m.is_object() && m.contains("experiment_id"))
            return m.at("experiment_id").get<std::string>();
    }
    return run_dir.filename().string();
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Causality-aware empathetic response generation: data preparation, prompting, training and evaluation"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Experiment config (JSON)");
    app.add_option("--mode", g.mode, "LLM mode override: live, record or replay");
    app.add_option("--seed", g.seed, "Seed override");
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error")->capture_default_str();

    // One subcommand per stage; each runs against the run directory named by the config.
    struct StageCommand {
        CLI::App *app;
        std::string stage;
    };
    std::vector<StageCommand> stages;
    const std::vector<std::pair<std::string, std::string>> stage_help = {
        {"prepare-data", "Load, split and sample the corpus"},
        {"build-index", "Embed the training situations"},
        {"select-examples", "Retrieve the top-k few-shot examples per test sample"},
        {"infer-knowledge", "Infer commonsense knowledge for test samples and examples"},
        {"reason-causality", "Build prompts and query the LLM"},
        {"train-t5", "Train the causality-aware encoder-decoder"},
        {"generate", "Produce responses"},
        {"evaluate", "Score generated responses"},
    };
    std::string variant, checkpoint, metrics_list, generations, out_dir;
    for (const auto &[name, help] : stage_help) {
        auto *sub = app.add_subcommand(name, help);
        if (name == "train-t5")
            sub->add_option("--variant", variant, "base, causality_user or causality_user_sys");
        if (name == "generate")
            sub->add_option("--checkpoint", checkpoint, "T5 checkpoint directory");
        if (name == "evaluate") {
            sub->add_option("--metrics", metrics_list, "Comma-separated metric ids");
            sub->add_option("--generations", generations, "Score this generations file instead of the run's");
            sub->add_option("--out", out_dir, "Where to write reports when scoring a standalone file");
        }
        stages.push_back({sub, name});
    }

    auto *run_cmd = app.add_subcommand("run", "Run every stage the config declares");

    std::string first, second, first_id, second_id, ab_out, key_path;
    std::uint64_t ab_seed = 0;
    std::size_t items = 0;
    auto *ab = app.add_subcommand("export-ab", "Build a blind A/B rating bundle from two generation files");
    ab->add_option("--first", first, "Generations of the first method")->required();
    ab->add_option("--second", second, "Generations of the second method")->required();
    ab->add_option("--first-id", first_id, "Method id of the first file")->required();
    ab->add_option("--second-id", second_id, "Method id of the second file")->required();
    ab->add_option("--items", items, "Number of items to export")->required();
    ab->add_option("--seed", ab_seed, "Shuffle seed")->required();
    ab->add_option("--out", ab_out, "Bundle directory (bundle.jsonl, rubric.txt)")->required();
    ab->add_option("--key", key_path, "Key file path, outside the bundle directory")->required();

    std::vector<std::string> run_dirs;
    std::string layout = "all";
    auto *report = app.add_subcommand("report", "Tabulate the metrics of one or more run directories");
    report->add_option("--run", run_dirs, "Run directory (repeatable)")->required();
    report->add_option("--layout", layout, "all, llm, t5 or human-proxy")->capture_default_str();

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(g.log_level));

    try {
        if (run_cmd->parsed()) {
            auto config = make_config(g, load_raw(g.config));
            print_result(harness::run_experiment(config));
            return 0;
        }
        for (const auto &s : stages) {
            if (!s.app->parsed())
                continue;
            if (s.stage == "evaluate" && !generations.empty()) {
                json raw = g.config.empty() ? json{{"experiment_id", "standalone"}, {"out_dir", "."}} : load_raw(g.config);
                auto config = make_config(g, raw);
                if (!metrics_list.empty())
                    config.metrics = text::split(metrics_list, ",");
                auto backends = harness::make_backends(config);
                auto records = harness::load_generations(generations);
                std::vector<std::string> names;
                for (const auto &m : config.metrics)
                    if (m != "ppl")
                        names.push_back(m);
                auto reports = harness::evaluate(records, names, backends, config.max_parallel);
                if (!out_dir.empty())
                    for (const auto &r : reports)
                        write_file_atomic(fs::path(out_dir) / (r.metric_id + ".json"), metrics::to_json(r).dump(2) + "\n");
                std::vector<harness::MethodReports> table{{fs::path(generations).stem().string(), reports}};
                std::cout << harness::render_report(table);
                return 0;
            }
            json raw = load_raw(g.config);
            if (!variant.empty())
                raw["variant"] = variant;
            if (!checkpoint.empty())
                raw["t5"]["checkpoint"] = fs::absolute(checkpoint).string();
            if (!metrics_list.empty())
                raw["metrics"] = text::split(metrics_list, ",");
            auto config = make_config(g, raw);
            print_result(harness::run_stage(config, s.stage));
            return 0;
        }
        if (ab->parsed()) {
            auto a = harness::load_generations(first);
            auto b = harness::load_generations(second);
            auto bundle = harness::export_ab(a, b, first_id, second_id, ab_seed, items);
            harness::write_ab(bundle, ab_out, key_path);
            fmt::print("{} items written to {}; key in {}\n", bundle.items.size(), ab_out, key_path);
            return 0;
        }
        if (report->parsed()) {
            std::vector<harness::MethodReports> methods;
            for (const auto &d : run_dirs)
                methods.push_back({run_method_name(d), load_run_reports(d)});
            std::cout << harness::render_report(methods, layout);
            return 0;
        }
    } catch (const StageError &e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const std::exception &e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
