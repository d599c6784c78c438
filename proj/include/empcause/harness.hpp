#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "empcause/common/jsonl.hpp"
#include "empcause/common/transport.hpp"
#include "empcause/corpus.hpp"
#include "empcause/knowledge.hpp"
#include "empcause/llmclient.hpp"
#include "empcause/metrics.hpp"
#include "empcause/prompting.hpp"
#include "empcause/raters.hpp"
#include "empcause/selection.hpp"

namespace empcause::harness {

enum class Pipeline { chatgpt, t5 };

std::string_view to_string(Pipeline pipeline);

/// Stage names, in execution order.
inline constexpr std::string_view kStageNames[] = {"prepare-data",     "build-index", "select-examples", "infer-knowledge",
                                                   "reason-causality", "train-t5",    "generate",        "evaluate"};

/// Declarative experiment description, parsed from JSON. Relative paths are resolved
/// against the directory of the config file.
struct ExperimentConfig {
    std::string experiment_id;
    Pipeline pipeline = Pipeline::chatgpt;
    std::string variant = "causality"; // causality|baseline, or a T5 variant name
    std::size_t k = 2;
    corpus::SampleMode test_mode = corpus::SampleMode::single_turn;
    std::size_t sample_count = 20;
    std::uint64_t seed = 13;
    llm::Mode mode = llm::Mode::replay;
    std::size_t max_parallel = 4;
    std::vector<std::string> stages;
    std::vector<std::string> metrics;
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> cache_dir;
    std::filesystem::path base_dir;
    json data = json::object();
    json knowledge = json::object();
    json embedder = json::object();
    json llm = json::object();
    json t5 = json::object();
    json raters = json::object();
    json raw = json::object(); // the config as written

    static ExperimentConfig load(const std::filesystem::path &path);
    static ExperimentConfig from_json(const json &j, const std::filesystem::path &base_dir);

    std::filesystem::path resolve(const std::string &path) const;
    bool has_stage(std::string_view stage) const;
};

/// Backends an experiment uses. Replay mode installs an offline transport, so any
/// attempt to reach the network fails instead of silently succeeding.
struct Backends {
    std::shared_ptr<CountingTransport> transport;
    std::shared_ptr<ContentCache> cache;
    std::shared_ptr<knowledge::KnowledgeService> knowledge;
    std::shared_ptr<selection::Embedder> embedder;
    std::shared_ptr<llm::ChatClient> chat;
    std::shared_ptr<llm::RecordingStore> recordings;
    std::shared_ptr<raters::BertScorer> bertscore;
    std::shared_ptr<raters::EmotionRater> emotion;
    raters::EpitomeRaters epitome;

    /// Identifiers of every configured backend, for manifests and digests.
    json ids() const;
};

struct RunOptions {
    /// Replaces the HTTP transport (tests use scripted local responders).
    std::shared_ptr<Transport> transport;
    /// Chat credential; overrides the llm.api_key_env variable.
    std::optional<std::string> api_key;
};

Backends make_backends(const ExperimentConfig &config, const RunOptions &options = {});

/// One generated response plus everything needed to score and trace it.
struct GenerationRecord {
    std::string sample_id;
    std::string emotion;
    std::string context;
    std::string reference;
    std::string response;
    std::optional<prompting::ReasonedOutput> reasoned;
    std::string request_key;
};

json to_json(const GenerationRecord &record);
GenerationRecord generation_from_json(const json &j);
std::vector<GenerationRecord> load_generations(const std::filesystem::path &path);

struct RunManifest {
    std::string experiment_id;
    json config;
    json seeds;
    json backends;
    json inputs;  // path -> sha256
    json outputs; // run-relative path -> sha256
    json stages;  // [{name, status, error?}]
};

json to_json(const RunManifest &manifest);

struct RunResult {
    RunManifest manifest;
    std::filesystem::path run_dir;
    std::size_t network_calls = 0;
};

/// Runs the configured stages in order, persisting each stage's products under
/// out_dir and writing manifest.json after every stage. A failing stage raises
/// StageError after recording its status; earlier outputs stay on disk.
RunResult run_experiment(const ExperimentConfig &config, const RunOptions &options = {});

/// Runs a single stage against the products already in out_dir.
RunResult run_stage(const ExperimentConfig &config, std::string_view stage, const RunOptions &options = {});

/// Scores generated/reference pairs with the requested metric ids:
/// f1, bleu, distinct, bertscore, coherence, emoacc, epitome.
std::vector<metrics::MetricReport> evaluate(std::span<const GenerationRecord> records, std::span<const std::string> metric_names,
                                            Backends &backends, std::size_t max_parallel = 1);

// ---- human A/B export --------------------------------------------------------------

struct ABItem {
    std::string item_id;
    std::string sample_id;
    std::string context;
    std::string response_a;
    std::string response_b;
    bool shuffled = false; // true when slot A holds the second method
};

struct ABBundle {
    std::vector<ABItem> items;
    std::string method_first;
    std::string method_second;
    std::string rubric;
};

/// The rating instructions shown to workers.
const std::string &ab_rubric();

/// Pairs two generation files by sample id. Ids must match exactly; otherwise the
/// error lists the symmetric difference. item_count selects a seeded subset (0 = all).
ABBundle export_ab(std::span<const GenerationRecord> first, std::span<const GenerationRecord> second, const std::string &method_first,
                   const std::string &method_second, std::uint64_t seed, std::size_t item_count = 0);

/// Writes the worker-facing bundle.jsonl and rubric.txt into dir, and the key file
/// (slot to method mapping) to key_path, which must lie outside dir.
void write_ab(const ABBundle &bundle, const std::filesystem::path &dir, const std::filesystem::path &key_path);

// ---- reporting ------------------------------------------------------------------

struct MethodReports {
    std::string method;
    std::vector<metrics::MetricReport> reports;
};

/// Lower is better for these metric ids; higher for all others.
bool lower_is_better(std::string_view metric_id);

/// Aligned plain-text table: methods as rows, metric ids as columns (per the layout),
/// best value per column in **bold**. Ties bold every best cell and add a footnote.
/// Layouts: "all" (every metric seen, first-seen order), "llm", "t5", "human-proxy".
std::string render_report(std::span<const MethodReports> methods, const std::string &layout_id = "all");

} // namespace empcause::harness
