#include "empcause/harness.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <unordered_map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/error.hpp"
#include "empcause/common/hash.hpp"
#include "empcause/common/parallel.hpp"
#include "empcause/common/random.hpp"
#include "empcause/common/text.hpp"
#include "empcause/t5/checkpoint.hpp"
#include "empcause/t5/training.hpp"

namespace empcause::harness {

namespace fs = std::filesystem;

std::string_view to_string(Pipeline pipeline) { return pipeline == Pipeline::chatgpt ? "chatgpt" : "t5"; }

namespace {

Pipeline pipeline_from_string(std::string_view name) {
    if (name == "chatgpt")
        return Pipeline::chatgpt;
    if (name == "t5")
        return Pipeline::t5;
    throw ValidationError(fmt::format("unknown pipeline '{}' (expected chatgpt or t5)", name));
}

bool known_stage(std::string_view name) {
    return std::find(std::begin(kStageNames), std::end(kStageNames), name) != std::end(kStageNames);
}

bool t5_uses_sys(const std::string &variant) { return t5::uses_sys_causality(t5::variant_from_string(variant)); }

std::vector<std::string> default_stages(Pipeline pipeline, const std::string &variant, const json &t5_section) {
    if (pipeline == Pipeline::chatgpt) {
        if (prompting::variant_from_string(variant) == prompting::Variant::baseline)
            return {"prepare-data", "build-index", "select-examples", "reason-causality", "generate", "evaluate"};
        return {"prepare-data", "build-index", "select-examples", "infer-knowledge", "reason-causality", "generate", "evaluate"};
    }
    std::vector<std::string> stages{"prepare-data"};
    if (t5_uses_sys(variant)) {
        stages.push_back("build-index");
        stages.push_back("select-examples");
    }
    if (t5::variant_from_string(variant) != t5::Variant::base)
        stages.push_back("infer-knowledge");
    if (t5_uses_sys(variant))
        stages.push_back("reason-causality");
    if (!t5_section.contains("checkpoint"))
        stages.push_back("train-t5");
    stages.push_back("generate");
    stages.push_back("evaluate");
    return stages;
}

std::vector<std::string> default_metrics(Pipeline pipeline) {
    if (pipeline == Pipeline::chatgpt)
        return {"bleu", "f1"};
    return {"ppl", "bleu", "distinct"};
}

json section(const json &j, const char *key) {
    if (!j.contains(key))
        return json::object();
    if (!j.at(key).is_object())
        throw ValidationError(fmt::format("config field '{}' must be an object", key));
    return j.at(key);
}

} // namespace

ExperimentConfig ExperimentConfig::from_json(const json &j, const fs::path &base_dir) {
    if (!j.is_object())
        throw ValidationError("experiment config must be a JSON object");
    ExperimentConfig c;
    c.raw = j;
    c.base_dir = base_dir;
    try {
        c.experiment_id = j.at("experiment_id").get<std::string>();
        if (c.experiment_id.empty())
            throw ValidationError("experiment_id is empty");
        c.pipeline = pipeline_from_string(j.value("pipeline", "chatgpt"));
        c.variant = j.value("variant", c.pipeline == Pipeline::chatgpt ? "causality" : "causality_user_sys");
        if (c.pipeline == Pipeline::chatgpt)
            (void)prompting::variant_from_string(c.variant);
        else
            (void)t5::variant_from_string(c.variant);
        c.k = j.value("k", c.k);
        c.test_mode = corpus::sample_mode_from_string(j.value("test_mode", "single_turn"));
        c.sample_count = j.value("sample_count", c.sample_count);
        c.seed = j.value("seed", c.seed);
        c.mode = llm::mode_from_string(j.value("mode", "replay"));
        c.max_parallel = std::max<std::size_t>(1, j.value("max_parallel", c.max_parallel));
        c.out_dir = j.at("out_dir").get<std::string>();
        if (j.contains("cache_dir"))
            c.cache_dir = j.at("cache_dir").get<std::string>();
        c.data = section(j, "data");
        c.knowledge = section(j, "knowledge");
        c.embedder = section(j, "embedder");
        c.llm = section(j, "llm");
        c.t5 = section(j, "t5");
        c.raters = section(j, "raters");
        c.stages = j.contains("stages") ? j.at("stages").get<std::vector<std::string>>() : default_stages(c.pipeline, c.variant, c.t5);
        c.metrics = j.contains("metrics") ? j.at("metrics").get<std::vector<std::string>>() : default_metrics(c.pipeline);
    } catch (const json::exception &e) {
        throw ValidationError(fmt::format("experiment config: {}", e.what()));
    }
    for (const auto &s : c.stages)
        if (!known_stage(s))
            throw ValidationError(fmt::format("unknown stage '{}'", s));
    c.out_dir = c.resolve(c.out_dir.string());
    if (c.cache_dir)
        c.cache_dir = c.resolve(c.cache_dir->string());
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path &path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error &e) {
        throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return from_json(j, fs::absolute(path).parent_path());
}

fs::path ExperimentConfig::resolve(const std::string &path) const {
    fs::path p(path);
    if (p.is_absolute())
        return p.lexically_normal();
    return (base_dir / p).lexically_normal();
}

bool ExperimentConfig::has_stage(std::string_view stage) const {
    return std::find(stages.begin(), stages.end(), stage) != stages.end();
}

// ---- backends ---------------------------------------------------------------------

namespace {

std::string kind_of(const json &s, const char *what) {
    if (!s.contains("kind"))
        throw ValidationError(fmt::format("{} backend needs a 'kind'", what));
    return s.at("kind").get<std::string>();
}

RetryPolicy retry_from(const json &s) {
    RetryPolicy r;
    r.max_attempts = s.value("max_attempts", r.max_attempts);
    return r;
}

void require_reachable(const ExperimentConfig &c, const char *what, bool cached) {
    if (c.mode == llm::Mode::replay && !cached)
        throw PreconditionError(
            fmt::format("{} backend of kind 'server' cannot be resolved in replay mode; use a fixture or set cache_dir", what));
}

raters::ServerConfig rater_server(const json &s, std::size_t max_parallel) {
    raters::ServerConfig sc;
    sc.backend_id = s.at("backend_id").get<std::string>();
    sc.endpoint = s.at("endpoint").get<std::string>();
    sc.retry = retry_from(s);
    sc.max_parallel = s.value("max_parallel", max_parallel);
    return sc;
}

} // namespace

Backends make_backends(const ExperimentConfig &c, const RunOptions &options) {
    Backends b;
    std::shared_ptr<Transport> inner = options.transport;
    if (!inner) {
        if (c.mode == llm::Mode::replay)
            inner = std::make_shared<OfflineTransport>();
        else
            inner = std::make_shared<HttpTransport>();
    }
    b.transport = std::make_shared<CountingTransport>(inner);
    b.cache = c.cache_dir ? std::make_shared<ContentCache>(*c.cache_dir) : std::make_shared<ContentCache>();

    try {
        if (!c.knowledge.empty()) {
            const auto &s = c.knowledge;
            const std::string kind = kind_of(s, "knowledge");
            std::shared_ptr<knowledge::KnowledgeBackend> backend;
            if (kind == "fixture") {
                backend = knowledge::FixtureKnowledgeBackend::load(c.resolve(s.at("path").get<std::string>()), s.value("backend_id", ""));
            } else if (kind == "server") {
                require_reachable(c, "knowledge", c.cache_dir.has_value());
                knowledge::ModelServerConfig mc;
                mc.backend_id = s.at("backend_id").get<std::string>();
                mc.endpoint = s.at("endpoint").get<std::string>();
                mc.decode_params = s.value("decode_params", json::object());
                mc.retry = retry_from(s);
                mc.max_parallel = s.value("max_parallel", c.max_parallel);
                backend = std::make_shared<knowledge::ModelServerKnowledgeBackend>(mc, b.transport);
            } else {
                throw ValidationError(fmt::format("unknown knowledge backend kind '{}'", kind));
            }
            b.knowledge = std::make_shared<knowledge::KnowledgeService>(backend, b.cache,
                                                                         s.value("max_phrases", knowledge::kDefaultMaxPhrases));
        }
        if (!c.embedder.empty()) {
            const auto &s = c.embedder;
            const std::string kind = kind_of(s, "embedder");
            if (kind == "fixture") {
                b.embedder = selection::FixtureEmbedder::load(c.resolve(s.at("path").get<std::string>()), s.at("backend_id").get<std::string>());
            } else if (kind == "hashing") {
                b.embedder = std::make_shared<selection::HashingEmbedder>(s.value("dim", std::size_t{256}));
            } else if (kind == "server") {
                require_reachable(c, "embedder", c.cache_dir.has_value());
                selection::EmbeddingServerConfig ec;
                ec.backend_id = s.at("backend_id").get<std::string>();
                ec.endpoint = s.at("endpoint").get<std::string>();
                ec.dim = s.at("dim").get<std::size_t>();
                ec.retry = retry_from(s);
                ec.max_parallel = s.value("max_parallel", c.max_parallel);
                b.embedder = std::make_shared<selection::ServerEmbedder>(ec, b.transport);
            } else {
                throw ValidationError(fmt::format("unknown embedder kind '{}'", kind));
            }
        }
        if (!c.llm.empty()) {
            const auto &s = c.llm;
            if (s.contains("recordings"))
                b.recordings = std::make_shared<llm::RecordingStore>(c.resolve(s.at("recordings").get<std::string>()));
            else if (c.mode == llm::Mode::replay)
                throw PreconditionError("replay mode needs llm.recordings");
            else
                b.recordings = std::make_shared<llm::RecordingStore>();
            llm::ClientConfig cc;
            cc.endpoint = s.value("endpoint", cc.endpoint);
            cc.api_key_env = s.value("api_key_env", cc.api_key_env);
            cc.api_key = options.api_key;
            cc.retry = retry_from(s);
            cc.max_parallel = s.value("max_parallel", c.max_parallel);
            b.chat = std::make_shared<llm::ChatClient>(cc, c.mode, b.transport, b.recordings);
        }
        if (c.raters.contains("bertscore")) {
            const json &s = c.raters.at("bertscore");
            const std::string kind = kind_of(s, "bertscore");
            if (kind == "fixture") {
                b.bertscore = raters::FixtureBertScorer::load(c.resolve(s.at("path").get<std::string>()), s.at("backend_id").get<std::string>());
            } else if (kind == "hashed") {
                b.bertscore = std::make_shared<raters::EmbeddingBertScorer>(
                    std::make_shared<raters::HashedTokenEmbedder>(s.value("dim", std::size_t{64})));
            } else if (kind == "server") {
                require_reachable(c, "bertscore", false);
                b.bertscore = std::make_shared<raters::EmbeddingBertScorer>(
                    std::make_shared<raters::ServerTokenEmbedder>(rater_server(s, c.max_parallel), b.transport));
            } else {
                throw ValidationError(fmt::format("unknown bertscore kind '{}'", kind));
            }
        }
        if (c.raters.contains("emotion")) {
            const json &s = c.raters.at("emotion");
            const std::string kind = kind_of(s, "emotion rater");
            if (kind == "fixture") {
                b.emotion = raters::FixtureEmotionRater::load(c.resolve(s.at("path").get<std::string>()), s.at("backend_id").get<std::string>());
            } else if (kind == "server") {
                require_reachable(c, "emotion rater", false);
                b.emotion = std::make_shared<raters::ServerEmotionRater>(rater_server(s, c.max_parallel), b.transport);
            } else {
                throw ValidationError(fmt::format("unknown emotion rater kind '{}'", kind));
            }
        }
        if (c.raters.contains("epitome")) {
            const json &s = c.raters.at("epitome");
            const std::string kind = kind_of(s, "epitome rater");
            auto make = [&](raters::Mechanism m) -> std::shared_ptr<raters::MechanismRater> {
                if (kind == "fixture")
                    return raters::FixtureMechanismRater::load(c.resolve(s.at("path").get<std::string>()), s.at("backend_id").get<std::string>(), m);
                if (kind == "server") {
                    require_reachable(c, "epitome rater", false);
                    return std::make_shared<raters::ServerMechanismRater>(rater_server(s, c.max_parallel), m, b.transport);
                }
                throw ValidationError(fmt::format("unknown epitome rater kind '{}'", kind));
            };
            b.epitome = {make(raters::Mechanism::interpretation), make(raters::Mechanism::exploration),
                         make(raters::Mechanism::emotional_reaction)};
        }
    } catch (const json::exception &e) {
        throw ValidationError(fmt::format("backend config: {}", e.what()));
    }
    return b;
}

json Backends::ids() const {
    json j = json::object();
    if (knowledge)
        j["knowledge"] = knowledge->backend().backend_id();
    if (embedder)
        j["embedder"] = embedder->backend_id();
    if (bertscore)
        j["bertscore"] = bertscore->backend_id();
    if (emotion)
        j["emotion"] = emotion->backend_id();
    if (epitome.ip)
        j["epitome"] = epitome.ip->backend_id();
    return j;
}

// ---- generation records --------------------------------------------------------------

json to_json(const GenerationRecord &r) {
    json j = {{"sample_id", r.sample_id}, {"emotion", r.emotion},   {"context", r.context},
              {"reference", r.reference}, {"response", r.response}, {"request_key", r.request_key}};
    if (r.reasoned)
        j["reasoned"] = prompting::to_json(*r.reasoned);
    return j;
}

GenerationRecord generation_from_json(const json &j) {
    GenerationRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.emotion = j.value("emotion", "");
    r.context = j.value("context", "");
    r.reference = j.value("reference", "");
    r.response = j.at("response").get<std::string>();
    r.request_key = j.value("request_key", "");
    if (j.contains("reasoned"))
        r.reasoned = prompting::reasoned_from_json(j.at("reasoned"));
    return r;
}

std::vector<GenerationRecord> load_generations(const fs::path &path) {
    std::vector<GenerationRecord> out;
    for (const auto &line : read_jsonl(path)) {
        try {
            out.push_back(generation_from_json(line.value));
        } catch (const json::exception &e) {
            throw ValidationError(fmt::format("{}:{}: {}", path.string(), line.line, e.what()));
        }
    }
    return out;
}

json to_json(const RunManifest &m) {
    return {{"experiment_id", m.experiment_id}, {"config", m.config},   {"seeds", m.seeds},  {"backends", m.backends},
            {"inputs", m.inputs},               {"outputs", m.outputs}, {"stages", m.stages}};
}

// ---- evaluation ------------------------------------------------------------------

std::vector<metrics::MetricReport> evaluate(std::span<const GenerationRecord> records, std::span<const std::string> names,
                                            Backends &backends, std::size_t max_parallel) {
    if (records.empty())
        throw PreconditionError("nothing to evaluate: no generation records");
    std::vector<metrics::ScoredPair> pairs;
    for (const auto &r : records)
        pairs.push_back({r.sample_id, r.response, r.reference, r.context});

    std::vector<metrics::MetricReport> out;
    auto append = [&](std::vector<metrics::MetricReport> more) {
        for (auto &m : more)
            out.push_back(std::move(m));
    };
    for (const auto &name : names) {
        if (name == "f1") {
            append(metrics::overlap_f1_reports(pairs, metrics::StopwordList::load_default()));
        } else if (name == "bleu") {
            for (std::size_t n : {2, 3, 4})
                out.push_back(metrics::bleu_report(pairs, n));
        } else if (name.size() == 5 && name.starts_with("bleu") && name[4] >= '1' && name[4] <= '4') {
            out.push_back(metrics::bleu_report(pairs, static_cast<std::size_t>(name[4] - '0')));
        } else if (name == "distinct") {
            out.push_back(metrics::distinct_report(pairs, 1));
            out.push_back(metrics::distinct_report(pairs, 2));
        } else if (name == "distinct1" || name == "distinct2") {
            out.push_back(metrics::distinct_report(pairs, static_cast<std::size_t>(name.back() - '0')));
        } else if (name == "bertscore" || name == "coherence") {
            if (!backends.bertscore)
                throw PreconditionError(fmt::format("metric '{}' needs raters.bertscore", name));
            append(raters::bert_score(pairs, *backends.bertscore,
                                      name == "bertscore" ? raters::BertTarget::reference : raters::BertTarget::context, max_parallel));
        } else if (name == "emoacc") {
            if (!backends.emotion)
                throw PreconditionError("metric 'emoacc' needs raters.emotion");
            std::vector<raters::LabeledResponse> labeled;
            for (const auto &r : records)
                labeled.push_back({r.sample_id, r.response, r.emotion});
            out.push_back(raters::emoacc(labeled, *backends.emotion, max_parallel));
        } else if (name == "epitome") {
            if (!backends.epitome.ip)
                throw PreconditionError("metric 'epitome' needs raters.epitome");
            append(raters::epitome(pairs, backends.epitome, max_parallel));
        } else if (name == "ppl") {
            throw PreconditionError("metric 'ppl' needs a T5 checkpoint and is computed by the t5 pipeline's evaluate stage");
        } else {
            throw PreconditionError(fmt::format("unknown metric '{}'", name));
        }
    }
    return out;
}

// ---- run directory --------------------------------------------------------------

namespace {

constexpr const char *kTrainFile = "data/train.jsonl";
constexpr const char *kValidFile = "data/valid.jsonl";
constexpr const char *kTestFile = "data/test.jsonl";
constexpr const char *kSamplesFile = "data/samples.jsonl";
constexpr const char *kIndexMeta = "index/meta.json";
constexpr const char *kIndexFile = "index/situations.jsonl";
constexpr const char *kSelectionFile = "selection.jsonl";
constexpr const char *kTestKnowledge = "knowledge/test.jsonl";
constexpr const char *kExampleKnowledge = "knowledge/examples.jsonl";
constexpr const char *kTrainKnowledge = "knowledge/train.jsonl";
constexpr const char *kValidKnowledge = "knowledge/valid.jsonl";
constexpr const char *kPromptsFile = "prompts.jsonl";
constexpr const char *kReasonedFile = "reasoned.jsonl";
constexpr const char *kTrainLog = "t5/train_log.jsonl";
constexpr const char *kFinalCheckpoint = "t5/final_checkpoint.txt";
constexpr const char *kGenerationsFile = "generations.jsonl";
constexpr const char *kSummaryFile = "metrics/summary.json";
constexpr const char *kReportFile = "report.txt";
constexpr const char *kManifestFile = "manifest.json";
constexpr const char *kTimestampsFile = "timestamps.json";

struct Run {
    const ExperimentConfig &config;
    Backends backends;
    fs::path dir;
    RunManifest manifest;
    json timestamps = json::object();

    fs::path path(std::string_view rel) const { return dir / fs::path(rel); }

    /// Artifact produced by an earlier stage.
    fs::path input(std::string_view rel, std::string_view producer) const {
        fs::path p = path(rel);
        if (!fs::exists(p))
            throw PreconditionError(fmt::format("run artifact missing: {} (produced by stage '{}')", p.string(), producer));
        return p;
    }

    template <class T>
    T &require(const std::shared_ptr<T> &backend, const char *name) const {
        if (!backend)
            throw PreconditionError(fmt::format("experiment config declares no '{}' backend", name));
        return *backend;
    }
};

void write_json(const fs::path &path, const json &j) { write_file_atomic(path, j.dump(2) + "\n"); }

corpus::EmotionInventory load_emotions(const ExperimentConfig &c) {
    if (c.data.contains("emotions"))
        return corpus::EmotionInventory::load(c.resolve(c.data.at("emotions").get<std::string>()));
    return corpus::EmotionInventory::load(prompting::asset_dir() / "emotions" / "empatheticdialogues-32.txt");
}

std::vector<corpus::Conversation> load_conversations(const fs::path &path, const corpus::EmotionInventory &emotions) {
    auto loaded = corpus::load_dataset(path, emotions);
    for (const auto &d : loaded.diagnostics)
        spdlog::warn("{}:{}: {} {}", path.string(), d.line, d.conversation_id, d.message);
    if (loaded.has_errors())
        throw ValidationError(fmt::format("{} has invalid records", path.string()));
    return std::move(loaded.conversations);
}

std::map<std::string, const corpus::Conversation *> by_id(const std::vector<corpus::Conversation> &convs) {
    std::map<std::string, const corpus::Conversation *> m;
    for (const auto &c : convs)
        m[c.id] = &c;
    return m;
}

json pair_to_json(const knowledge::InferencePair &p) { return json::array({knowledge::to_json(p.first), knowledge::to_json(p.second)}); }

knowledge::InferencePair pair_from_json(const json &j) {
    return {knowledge::inference_set_from_json(j.at(0)), knowledge::inference_set_from_json(j.at(1))};
}

/// JSONL keyed by `key_field`; every record must carry it.
std::map<std::string, json> keyed_records(const fs::path &path, const char *key_field) {
    std::map<std::string, json> out;
    for (auto &line : read_jsonl(path)) {
        std::string key = line.value.at(key_field).get<std::string>();
        out[key] = std::move(line.value);
    }
    return out;
}

/// Hashes of every regular file under dir except the manifest and timestamps.
json hash_tree(const fs::path &dir) {
    json out = json::object();
    if (!fs::exists(dir))
        return out;
    for (const auto &entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file())
            continue;
        std::string rel = fs::relative(entry.path(), dir).generic_string();
        if (rel == kManifestFile || rel == kTimestampsFile)
            continue;
        out[rel] = sha256_hex(read_file(entry.path()));
    }
    return out;
}

void hash_input(json &inputs, const ExperimentConfig &c, const std::string &rel) {
    fs::path p = c.resolve(rel);
    if (fs::is_regular_file(p))
        inputs[rel] = sha256_hex(read_file(p));
    else if (fs::is_directory(p))
        for (auto &[k, v] : hash_tree(p).items())
            inputs[rel + "/" + k] = v;
    else
        inputs[rel] = "missing";
}

json input_hashes(const ExperimentConfig &c) {
    json inputs = json::object();
    for (const auto &[key, value] : c.data.items())
        if (value.is_string() && key != "split")
            hash_input(inputs, c, value.get<std::string>());
    for (const json *s : {&c.knowledge, &c.embedder})
        if (s->contains("path"))
            hash_input(inputs, c, s->at("path").get<std::string>());
    if (c.llm.contains("recordings"))
        hash_input(inputs, c, c.llm.at("recordings").get<std::string>());
    if (c.llm.contains("templates"))
        hash_input(inputs, c, c.llm.at("templates").get<std::string>());
    for (const auto &[name, s] : c.raters.items())
        if (s.contains("path"))
            hash_input(inputs, c, s.at("path").get<std::string>());
    if (c.t5.contains("checkpoint"))
        hash_input(inputs, c, c.t5.at("checkpoint").get<std::string>());
    return inputs;
}

void write_manifest(Run &run) {
    run.manifest.outputs = hash_tree(run.dir);
    write_json(run.path(kManifestFile), to_json(run.manifest));
    write_json(run.path(kTimestampsFile), run.timestamps);
}

Run open_run(const ExperimentConfig &c, const RunOptions &options, bool fresh) {
    Run run{c, make_backends(c, options), c.out_dir, {}, json::object()};
    fs::create_directories(run.dir);
    run.manifest.experiment_id = c.experiment_id;
    run.manifest.config = c.raw;
    json seeds = {{"experiment", c.seed}};
    if (c.t5.contains("config") && c.t5.at("config").contains("seed"))
        seeds["t5"] = c.t5.at("config").at("seed");
    run.manifest.seeds = seeds;
    json backends = run.backends.ids();
    if (!c.llm.empty()) {
        backends["llm"] = c.llm.value("model", "gpt-3.5-turbo");
        backends["llm_temperature"] = c.llm.value("temperature", 0.0);
    }
    run.manifest.backends = backends;
    run.manifest.inputs = input_hashes(c);
    run.manifest.stages = json::array();
    if (!fresh) {
        // Keep the history of earlier single-stage invocations.
        if (fs::exists(run.path(kManifestFile))) {
            json old = json::parse(read_file(run.path(kManifestFile)), nullptr, false);
            if (old.is_object() && old.contains("stages"))
                run.manifest.stages = old.at("stages");
        }
        if (fs::exists(run.path(kTimestampsFile))) {
            json old = json::parse(read_file(run.path(kTimestampsFile)), nullptr, false);
            if (old.is_object())
                run.timestamps = old;
        }
    }
    return run;
}

void set_stage_status(Run &run, std::string_view stage, const std::string &status, const std::string &error) {
    json entry = {{"name", stage}, {"status", status}};
    if (!error.empty())
        entry["error"] = error;
    for (auto &s : run.manifest.stages) {
        if (s.at("name") == stage) {
            s = entry;
            return;
        }
    }
    run.manifest.stages.push_back(entry);
}

// ---- stages ---------------------------------------------------------------------

void stage_prepare_data(Run &run) {
    const auto &c = run.config;
    auto emotions = load_emotions(c);
    std::vector<corpus::Conversation> train, valid, test;
    if (c.data.contains("conversations")) {
        auto all = load_conversations(c.resolve(c.data.at("conversations").get<std::string>()), emotions);
        auto split = corpus::split(std::move(all), corpus::SplitRatios::parse(c.data.value("split", "8:1:1")), c.seed);
        train = std::move(split.train);
        valid = std::move(split.valid);
        test = std::move(split.test);
    } else if (c.data.contains("train") && c.data.contains("test")) {
        train = load_conversations(c.resolve(c.data.at("train").get<std::string>()), emotions);
        test = load_conversations(c.resolve(c.data.at("test").get<std::string>()), emotions);
        if (c.data.contains("valid"))
            valid = load_conversations(c.resolve(c.data.at("valid").get<std::string>()), emotions);
    } else {
        throw PreconditionError("data needs either 'conversations' or 'train' and 'test'");
    }
    corpus::save_dataset(run.path(kTrainFile), train);
    corpus::save_dataset(run.path(kValidFile), valid);
    corpus::save_dataset(run.path(kTestFile), test);

    auto samples = corpus::make_test_samples(test, c.test_mode);
    samples = corpus::subsample(samples, c.sample_count, c.seed);
    if (samples.empty())
        throw ValidationError("no test samples could be cut from the test split");
    std::sort(samples.begin(), samples.end(), [](const auto &a, const auto &b) { return a.sample_id() < b.sample_id(); });
    if (samples.size() < c.sample_count)
        spdlog::warn("only {} test samples available, {} requested", samples.size(), c.sample_count);
    corpus::save_test_samples(run.path(kSamplesFile), samples);
    spdlog::info("prepare-data: {} train, {} valid, {} test conversations; {} samples", train.size(), valid.size(), test.size(),
                 samples.size());
}

selection::IndexOptions index_options(const ExperimentConfig &c) {
    selection::IndexOptions o;
    o.use_full_context = c.embedder.value("use_full_context", false);
    o.max_parallel = c.max_parallel;
    return o;
}

void stage_build_index(Run &run) {
    auto emotions = load_emotions(run.config);
    auto train = load_conversations(run.input(kTrainFile, "prepare-data"), emotions);
    auto &embedder = run.require(run.backends.embedder, "embedder");
    auto index = selection::build_index(train, embedder, run.backends.cache.get(), index_options(run.config));
    std::vector<json> lines;
    for (std::size_t i = 0; i < index.size(); ++i)
        lines.push_back({{"id", index.id(i)}, {"vector", index.vector(i).values}});
    write_jsonl(run.path(kIndexFile), lines);
    write_json(run.path(kIndexMeta), {{"backend_id", index.backend_id()},
                                      {"dim", index.dim()},
                                      {"count", index.size()},
                                      {"use_full_context", index_options(run.config).use_full_context}});
}

selection::EmbeddingIndex load_index(const Run &run) {
    json meta = json::parse(read_file(run.input(kIndexMeta, "build-index")));
    selection::EmbeddingIndex index(meta.at("backend_id").get<std::string>(), meta.at("dim").get<std::size_t>());
    for (const auto &line : read_jsonl(run.input(kIndexFile, "build-index")))
        index.add(line.value.at("id").get<std::string>(), {line.value.at("vector").get<std::vector<double>>()});
    return index;
}

void stage_select_examples(Run &run) {
    const auto &c = run.config;
    auto samples = corpus::load_test_samples(run.input(kSamplesFile, "prepare-data"));
    auto index = load_index(run);
    auto &embedder = run.require(run.backends.embedder, "embedder");
    if (embedder.backend_id() != index.backend_id())
        throw PreconditionError(fmt::format("index was built with '{}' but the configured embedder is '{}'", index.backend_id(),
                                            embedder.backend_id()));
    const bool full = index_options(c).use_full_context;
    std::vector<selection::RankedCandidates> ranked(samples.size());
    parallel_for(samples.size(), c.max_parallel, [&](std::size_t i) {
        const auto &s = samples[i];
        std::string query = full ? corpus::render_turns(s.context) : s.situation;
        auto q = selection::embed(query, embedder, run.backends.cache.get());
        ranked[i] = selection::top_k(s.sample_id(), q, index, c.k);
    });
    std::vector<json> lines;
    for (const auto &r : ranked)
        lines.push_back(selection::to_json(r));
    write_jsonl(run.path(kSelectionFile), lines);
}

bool needs_user_knowledge(const ExperimentConfig &c) {
    if (c.pipeline == Pipeline::chatgpt)
        return prompting::variant_from_string(c.variant) == prompting::Variant::causality;
    return t5::uses_user_causality(t5::variant_from_string(c.variant)) || t5::uses_sys_causality(t5::variant_from_string(c.variant));
}

/// User and sys bundles for the longest cut of each conversation.
std::vector<json> conversation_knowledge(Run &run, const std::vector<const corpus::Conversation *> &convs, bool user, bool sys) {
    auto &ks = run.require(run.backends.knowledge, "knowledge");
    std::vector<json> out(convs.size());
    parallel_for(convs.size(), run.config.max_parallel, [&](std::size_t i) {
        const auto &conv = *convs[i];
        auto cut = corpus::longest_cut(conv);
        if (!cut)
            throw PreconditionError(fmt::format("conversation '{}' has no user turn followed by a sys turn", conv.id));
        json j = {{"conversation_id", conv.id}};
        if (user)
            j["user"] = pair_to_json(ks.user_bundle(cut->last_user_turn().text));
        if (sys)
            j["sys"] = pair_to_json(ks.sys_bundle(cut->reference.text));
        out[i] = std::move(j);
    });
    return out;
}

void stage_infer_knowledge(Run &run) {
    const auto &c = run.config;
    if (!needs_user_knowledge(c)) {
        spdlog::info("infer-knowledge: variant '{}' uses no knowledge", c.variant);
        return;
    }
    auto &ks = run.require(run.backends.knowledge, "knowledge");
    auto samples = corpus::load_test_samples(run.input(kSamplesFile, "prepare-data"));
    std::vector<json> test(samples.size());
    parallel_for(samples.size(), c.max_parallel, [&](std::size_t i) {
        test[i] = {{"sample_id", samples[i].sample_id()}, {"user", pair_to_json(ks.user_bundle(samples[i].last_user_turn().text))}};
    });
    write_jsonl(run.path(kTestKnowledge), test);

    auto emotions = load_emotions(c);
    auto train = load_conversations(run.input(kTrainFile, "prepare-data"), emotions);
    auto train_by_id = by_id(train);

    // Knowledge for the selected few-shot examples.
    if (fs::exists(run.path(kSelectionFile))) {
        std::set<std::string> ids;
        for (const auto &line : read_jsonl(run.path(kSelectionFile)))
            for (const auto &e : selection::ranked_from_json(line.value).entries)
                ids.insert(e.conversation_id);
        std::vector<const corpus::Conversation *> convs;
        for (const auto &id : ids) {
            auto it = train_by_id.find(id);
            if (it == train_by_id.end())
                throw ValidationError(fmt::format("selected example '{}' is not in the training split", id));
            convs.push_back(it->second);
        }
        write_jsonl(run.path(kExampleKnowledge), conversation_knowledge(run, convs, true, true));
    }

    if (c.pipeline == Pipeline::t5) {
        const auto variant = t5::variant_from_string(c.variant);
        const bool user = t5::uses_user_causality(variant), sys = t5::uses_sys_causality(variant);
        auto valid = load_conversations(run.input(kValidFile, "prepare-data"), emotions);
        for (auto [convs, file] : {std::pair{&train, kTrainKnowledge}, std::pair{&valid, kValidKnowledge}}) {
            std::vector<const corpus::Conversation *> usable;
            for (const auto &conv : *convs)
                if (corpus::longest_cut(conv))
                    usable.push_back(&conv);
            write_jsonl(run.path(file), conversation_knowledge(run, usable, user, sys));
        }
    }
}

std::string intro_id(const ExperimentConfig &c, prompting::Variant variant) {
    return c.llm.value("intro_id", prompting::default_intro_id(variant));
}

void stage_reason_causality(Run &run) {
    const auto &c = run.config;
    const prompting::Variant variant =
        c.pipeline == Pipeline::chatgpt ? prompting::variant_from_string(c.variant) : prompting::Variant::causality;
    const bool causality = variant == prompting::Variant::causality;
    auto &chat = run.require(run.backends.chat, "llm");
    auto templates = c.llm.contains("templates") ? prompting::TemplateLibrary::load(c.resolve(c.llm.at("templates").get<std::string>()))
                                                 : prompting::TemplateLibrary::load_default();
    const std::string intro = intro_id(c, variant);
    const auto layout = llm::message_layout_from_string(c.llm.value("layout", "single_user"));
    const std::string model = c.llm.value("model", "gpt-3.5-turbo");
    const double temperature = c.llm.value("temperature", 0.0);

    auto samples = corpus::load_test_samples(run.input(kSamplesFile, "prepare-data"));
    auto emotions = load_emotions(c);
    auto train = load_conversations(run.input(kTrainFile, "prepare-data"), emotions);
    auto train_by_id = by_id(train);
    auto selection = keyed_records(run.input(kSelectionFile, "select-examples"), "query_id");
    std::map<std::string, json> test_knowledge, example_knowledge;
    if (causality) {
        test_knowledge = keyed_records(run.input(kTestKnowledge, "infer-knowledge"), "sample_id");
        if (c.k > 0)
            example_knowledge = keyed_records(run.input(kExampleKnowledge, "infer-knowledge"), "conversation_id");
    }

    auto find = [](const std::map<std::string, json> &m, const std::string &key, const char *what) -> const json & {
        auto it = m.find(key);
        if (it == m.end())
            throw PreconditionError(fmt::format("no {} for '{}'", what, key));
        return it->second;
    };

    std::vector<json> prompts(samples.size()), reasoned(samples.size());
    parallel_for(samples.size(), c.max_parallel, [&](std::size_t i) {
        const auto &s = samples[i];
        const std::string id = s.sample_id();
        auto ranked = selection::ranked_from_json(find(selection, id, "selection"));
        std::vector<prompting::FewShotExample> fewshots;
        for (const auto &e : ranked.entries) {
            auto it = train_by_id.find(e.conversation_id);
            if (it == train_by_id.end())
                throw ValidationError(fmt::format("selected example '{}' is not in the training split", e.conversation_id));
            if (causality) {
                const json &k = find(example_knowledge, e.conversation_id, "example knowledge");
                fewshots.push_back(prompting::build_fewshot(*it->second, pair_from_json(k.at("user")), pair_from_json(k.at("sys"))));
            } else {
                fewshots.push_back(prompting::build_raw_example(*it->second));
            }
        }
        std::optional<prompting::UserKnowledge> tk;
        if (causality)
            tk = prompting::user_knowledge(pair_from_json(find(test_knowledge, id, "test knowledge").at("user")));
        prompting::PromptOptions po;
        po.k = c.k;
        po.allow_zero_shot = c.k == 0;
        auto bundle = prompting::build_prompt(templates, intro, std::move(fewshots), s.context, tk, variant, po);
        const std::string prompt = prompting::render(bundle);
        auto request = llm::make_request(prompt, bundle.introduction, layout, model, temperature);
        auto transcript = chat.complete(request);

        prompts[i] = {{"sample_id", id}, {"intro_id", intro}, {"request_key", transcript.request_key}, {"prompt", prompt},
                      {"bundle", prompting::to_json(bundle)}};
        json r = {{"sample_id", id}, {"request_key", transcript.request_key}, {"raw", transcript.reply}};
        try {
            auto out = prompting::parse_reasoned(transcript.reply);
            for (const auto &w : out.warnings)
                spdlog::warn("{}: {}", id, w);
            r["reasoned"] = prompting::to_json(out);
        } catch (const ParseError &e) {
            spdlog::warn("{}: unparseable reply: {}", id, e.what());
            r["parse_error"] = e.what();
        }
        reasoned[i] = std::move(r);
    });
    write_jsonl(run.path(kPromptsFile), prompts);
    write_jsonl(run.path(kReasonedFile), reasoned);
}

/// Parsed LLM outputs by sample id; samples whose reply failed to parse are absent.
std::map<std::string, std::pair<prompting::ReasonedOutput, std::string>> load_reasoned(const Run &run) {
    std::map<std::string, std::pair<prompting::ReasonedOutput, std::string>> out;
    for (const auto &line : read_jsonl(run.input(kReasonedFile, "reason-causality"))) {
        const json &j = line.value;
        if (!j.contains("reasoned"))
            continue;
        auto r = prompting::reasoned_from_json(j.at("reasoned"));
        r.raw = j.value("raw", "");
        out[j.at("sample_id").get<std::string>()] = {std::move(r), j.value("request_key", "")};
    }
    return out;
}

t5::Variant t5_variant(const ExperimentConfig &c) { return t5::variant_from_string(c.variant); }

/// Training example assembled from stored knowledge rather than live inference, so
/// train-t5 can be rerun from the run directory alone.
t5::T5Example stored_training_example(const corpus::Conversation &conv, const corpus::EmotionInventory &emotions, const json *know,
                                      t5::Variant variant) {
    auto cut = corpus::longest_cut(conv);
    t5::T5Example ex;
    ex.id = conv.id;
    ex.context = corpus::render_turns(cut->context);
    ex.response = cut->reference.text;
    ex.emotion = static_cast<int>(emotions.index_of(conv.emotion));
    if (t5::uses_user_causality(variant) || t5::uses_sys_causality(variant)) {
        if (!know)
            throw PreconditionError(fmt::format("no stored knowledge for '{}'", conv.id));
        if (t5::uses_user_causality(variant))
            ex.user_causality = t5::user_causality_text(prompting::user_knowledge(pair_from_json(know->at("user"))));
        if (t5::uses_sys_causality(variant))
            ex.sys_causality = t5::sys_causality_text(prompting::sys_knowledge(pair_from_json(know->at("sys"))));
    }
    return ex;
}

std::vector<t5::T5Example> stored_training_set(const Run &run, const char *conv_file, const char *know_file,
                                               const corpus::EmotionInventory &emotions) {
    const auto variant = t5_variant(run.config);
    auto convs = load_conversations(run.input(conv_file, "prepare-data"), emotions);
    std::map<std::string, json> know;
    if (variant != t5::Variant::base)
        know = keyed_records(run.input(know_file, "infer-knowledge"), "conversation_id");
    std::vector<t5::T5Example> out;
    for (const auto &conv : convs) {
        if (!corpus::longest_cut(conv))
            continue;
        auto it = know.find(conv.id);
        out.push_back(stored_training_example(conv, emotions, it == know.end() ? nullptr : &it->second, variant));
    }
    return out;
}

void stage_train_t5(Run &run) {
    const auto &c = run.config;
    auto emotions = load_emotions(c);
    auto train_text = stored_training_set(run, kTrainFile, kTrainKnowledge, emotions);
    auto valid_text = stored_training_set(run, kValidFile, kValidKnowledge, emotions);

    t5::ModelConfig mc = t5::model_config_from_json(c.t5.value("config", json::object()));
    mc.variant = t5_variant(c);
    mc.emotion_count = emotions.size();

    std::vector<std::string> texts;
    for (const auto &ex : train_text)
        for (const auto *s : {&ex.context, &ex.user_causality, &ex.sys_causality, &ex.response})
            if (!s->empty())
                texts.push_back(*s);
    auto vocab = t5::Vocabulary::build(texts, c.t5.value("min_count", std::size_t{1}), c.t5.value("max_vocab", std::size_t{0}));
    mc.vocab_id.clear();
    mc.vocab_size = 0;
    auto model = t5::initialize_model(mc, vocab);

    std::vector<t5::TokenizedExample> train, valid;
    for (const auto &ex : train_text)
        train.push_back(t5::tokenize(ex, model->vocab(), model->config()));
    for (const auto &ex : valid_text)
        valid.push_back(t5::tokenize(ex, model->vocab(), model->config()));

    t5::TrainOptions opts;
    if (c.t5.contains("epochs"))
        opts.epochs = c.t5.at("epochs").get<std::size_t>();
    if (c.t5.contains("max_steps"))
        opts.max_steps = c.t5.at("max_steps").get<std::size_t>();
    opts.checkpoint_dir = c.t5.contains("checkpoint_dir") ? c.resolve(c.t5.at("checkpoint_dir").get<std::string>()) : run.path("t5/checkpoints");
    auto result = t5::train(*model, train, valid, opts);
    if (result.checkpoints.empty())
        throw Error("training produced no checkpoint");

    std::vector<json> log;
    for (const auto &e : result.epochs)
        log.push_back(t5::to_json(e));
    write_jsonl(run.path(kTrainLog), log);
    fs::path final = result.checkpoints.back();
    std::string rel = fs::relative(final, run.dir).generic_string();
    write_file_atomic(run.path(kFinalCheckpoint), (rel.starts_with("..") ? final.generic_string() : rel) + "\n");
}

fs::path checkpoint_dir(const Run &run) {
    if (run.config.t5.contains("checkpoint"))
        return run.config.resolve(run.config.t5.at("checkpoint").get<std::string>());
    if (!fs::exists(run.path(kFinalCheckpoint)))
        throw PreconditionError(fmt::format("no T5 checkpoint: set t5.checkpoint or run train-t5 (missing {})", run.path(kFinalCheckpoint).string()));
    fs::path p(text::trim(read_file(run.path(kFinalCheckpoint))));
    return p.is_absolute() ? p : run.dir / p;
}

struct TestSet {
    std::vector<corpus::TestSample> samples;
    std::vector<t5::TokenizedExample> examples;
    std::vector<std::optional<prompting::ReasonedOutput>> reasoned;
};

/// Test samples as model inputs. Samples whose sys causality could not be reasoned
/// are dropped with a warning.
TestSet t5_test_set(const Run &run, const t5::T5Model &model) {
    const auto &c = run.config;
    const auto variant = model.config().variant;
    if (variant != t5_variant(c))
        throw PreconditionError(fmt::format("checkpoint variant {} does not match experiment variant {}", t5::to_string(variant), c.variant));
    auto emotions = load_emotions(c);
    auto samples = corpus::load_test_samples(run.input(kSamplesFile, "prepare-data"));
    std::map<std::string, json> test_knowledge;
    if (t5::uses_user_causality(variant))
        test_knowledge = keyed_records(run.input(kTestKnowledge, "infer-knowledge"), "sample_id");
    std::map<std::string, std::pair<prompting::ReasonedOutput, std::string>> reasoned;
    if (t5::uses_sys_causality(variant))
        reasoned = load_reasoned(run);

    TestSet set;
    for (const auto &s : samples) {
        const std::string id = s.sample_id();
        t5::T5Example ex;
        ex.id = id;
        ex.context = corpus::render_turns(s.context);
        ex.response = s.reference.text;
        ex.emotion = static_cast<int>(emotions.index_of(s.emotion));
        if (t5::uses_user_causality(variant)) {
            auto it = test_knowledge.find(id);
            if (it == test_knowledge.end())
                throw PreconditionError(fmt::format("no test knowledge for '{}'", id));
            ex.user_causality = t5::user_causality_text(prompting::user_knowledge(pair_from_json(it->second.at("user"))));
        }
        std::optional<prompting::ReasonedOutput> r;
        if (t5::uses_sys_causality(variant)) {
            auto it = reasoned.find(id);
            if (it == reasoned.end()) {
                spdlog::warn("{}: no parsed sys causality, sample skipped", id);
                continue;
            }
            r = it->second.first;
            ex.sys_causality = t5::sys_causality_text({r->sys_intent, r->sys_react});
        }
        set.samples.push_back(s);
        set.examples.push_back(t5::tokenize(ex, model.vocab(), model.config()));
        set.reasoned.push_back(std::move(r));
    }
    return set;
}

void stage_generate(Run &run) {
    const auto &c = run.config;
    std::vector<GenerationRecord> records;
    if (c.pipeline == Pipeline::chatgpt) {
        auto samples = corpus::load_test_samples(run.input(kSamplesFile, "prepare-data"));
        auto reasoned = load_reasoned(run);
        for (const auto &s : samples) {
            auto it = reasoned.find(s.sample_id());
            if (it == reasoned.end()) {
                spdlog::warn("{}: reply did not parse, no generation", s.sample_id());
                continue;
            }
            records.push_back({s.sample_id(), s.emotion, corpus::render_turns(s.context), s.reference.text, it->second.first.response,
                               it->second.first, it->second.second});
        }
    } else {
        auto model = t5::load_checkpoint(checkpoint_dir(run));
        auto set = t5_test_set(run, *model);
        t5::DecodeParams params = model->config().decode;
        if (c.t5.contains("decode")) {
            params.top_k = c.t5.at("decode").value("top_k", params.top_k);
            params.temperature = c.t5.at("decode").value("temperature", params.temperature);
        }
        records.resize(set.samples.size());
        parallel_for(set.samples.size(), c.max_parallel, [&](std::size_t i) {
            const auto &s = set.samples[i];
            Rng rng(c.seed + i);
            records[i] = {s.sample_id(), s.emotion, corpus::render_turns(s.context), s.reference.text,
                          model->generate_text(set.examples[i], params, rng), set.reasoned[i], ""};
        });
    }
    if (records.empty())
        throw ValidationError("no sample produced a generation");
    std::vector<json> lines;
    for (const auto &r : records)
        lines.push_back(to_json(r));
    write_jsonl(run.path(kGenerationsFile), lines);
}

metrics::MetricReport t5_perplexity(const Run &run) {
    auto model = t5::load_checkpoint(checkpoint_dir(run));
    auto set = t5_test_set(run, *model);
    std::vector<std::pair<std::string, std::pair<double, std::size_t>>> per_sample;
    for (const auto &ex : set.examples) {
        auto s = model->score(ex);
        per_sample.push_back({ex.id, {s.nll, s.tokens}});
    }
    return metrics::perplexity_report(std::move(per_sample), {{"metric", "perplexity"},
                                                              {"tokenizer", model->vocab().id()},
                                                              {"teacher_forced", true},
                                                              {"includes_eos", true}});
}

void stage_evaluate(Run &run) {
    const auto &c = run.config;
    auto records = load_generations(run.input(kGenerationsFile, "generate"));
    std::vector<std::string> names;
    bool ppl = false;
    for (const auto &m : c.metrics) {
        if (m == "ppl")
            ppl = true;
        else
            names.push_back(m);
    }
    if (ppl && c.pipeline != Pipeline::t5)
        throw PreconditionError("metric 'ppl' is only defined for the t5 pipeline");
    std::vector<metrics::MetricReport> reports;
    if (ppl)
        reports.push_back(t5_perplexity(run));
    for (auto &r : evaluate(records, names, run.backends, c.max_parallel))
        reports.push_back(std::move(r));

    json summary = json::object();
    for (const auto &r : reports) {
        write_json(run.path(fmt::format("metrics/{}.json", r.metric_id)), metrics::to_json(r));
        summary[r.metric_id] = r.corpus_value;
    }
    write_json(run.path(kSummaryFile), summary);
    std::vector<MethodReports> table{{c.experiment_id, reports}};
    write_file_atomic(run.path(kReportFile), render_report(table, c.raw.value("report_layout", "all")));
}

void dispatch(Run &run, std::string_view stage) {
    if (stage == "prepare-data")
        stage_prepare_data(run);
    else if (stage == "build-index")
        stage_build_index(run);
    else if (stage == "select-examples")
        stage_select_examples(run);
    else if (stage == "infer-knowledge")
        stage_infer_knowledge(run);
    else if (stage == "reason-causality")
        stage_reason_causality(run);
    else if (stage == "train-t5")
        stage_train_t5(run);
    else if (stage == "generate")
        stage_generate(run);
    else if (stage == "evaluate")
        stage_evaluate(run);
    else
        throw PreconditionError(fmt::format("unknown stage '{}'", stage));
}

void execute(Run &run, std::string_view stage) {
    json &ts = run.timestamps[std::string(stage)];
    ts = {{"started_at", llm::utc_timestamp()}};
    spdlog::info("stage {}", stage);
    try {
        dispatch(run, stage);
    } catch (const std::exception &e) {
        ts["failed_at"] = llm::utc_timestamp();
        set_stage_status(run, stage, "failed", e.what());
        write_manifest(run);
        throw StageError(std::string(stage), e.what());
    }
    ts["finished_at"] = llm::utc_timestamp();
    set_stage_status(run, stage, "ok", "");
    write_manifest(run);
}

} // namespace

RunResult run_experiment(const ExperimentConfig &config, const RunOptions &options) {
    Run run = open_run(config, options, true);
    for (const auto &stage : config.stages)
        execute(run, stage);
    return {run.manifest, run.dir, run.backends.transport->calls()};
}

RunResult run_stage(const ExperimentConfig &config, std::string_view stage, const RunOptions &options) {
    if (!known_stage(stage))
        throw PreconditionError(fmt::format("unknown stage '{}'", stage));
    Run run = open_run(config, options, false);
    execute(run, stage);
    return {run.manifest, run.dir, run.backends.transport->calls()};
}

// ---- A/B export ------------------------------------------------------------------

const std::string &ab_rubric() {
    static const std::string rubric =
        "Each item shows a short conversation and two candidate replies, A and B.\n"
        "Compare the replies on each aspect separately and answer A, B, or Tie.\n"
        "\n"
        "Empathy: which reply shows more understanding of how the speaker feels.\n"
        "Coherence: which reply fits the conversation better and stays on topic.\n"
        "Informativeness: which reply gives more relevant content.\n"
        "\n"
        "The order of A and B is random and carries no meaning.\n";
    return rubric;
}

ABBundle export_ab(std::span<const GenerationRecord> first, std::span<const GenerationRecord> second, const std::string &method_first,
                   const std::string &method_second, std::uint64_t seed, std::size_t item_count) {
    if (method_first.empty() || method_second.empty() || method_first == method_second)
        throw PreconditionError("export_ab needs two distinct, non-empty method ids");
    std::map<std::string, const GenerationRecord *> a, b;
    for (const auto &r : first)
        if (!a.emplace(r.sample_id, &r).second)
            throw ValidationError(fmt::format("duplicate sample id '{}' in {}", r.sample_id, method_first));
    for (const auto &r : second)
        if (!b.emplace(r.sample_id, &r).second)
            throw ValidationError(fmt::format("duplicate sample id '{}' in {}", r.sample_id, method_second));

    std::vector<std::string> only_a, only_b;
    for (const auto &[id, r] : a)
        if (!b.count(id))
            only_a.push_back(id);
    for (const auto &[id, r] : b)
        if (!a.count(id))
            only_b.push_back(id);
    if (!only_a.empty() || !only_b.empty())
        throw ValidationError(fmt::format("sample ids differ: only in {}: [{}]; only in {}: [{}]", method_first, text::join(only_a, ", "),
                                          method_second, text::join(only_b, ", ")));
    if (a.empty())
        throw PreconditionError("export_ab over empty response files");

    std::vector<std::string> ids;
    for (const auto &[id, r] : a)
        ids.push_back(id);
    Rng rng(seed);
    if (item_count > 0 && item_count < ids.size()) {
        rng.shuffle(ids);
        ids.resize(item_count);
        std::sort(ids.begin(), ids.end());
    } else if (item_count > ids.size()) {
        throw PreconditionError(fmt::format("{} items requested but only {} samples are shared", item_count, ids.size()));
    }

    ABBundle bundle;
    bundle.method_first = method_first;
    bundle.method_second = method_second;
    bundle.rubric = ab_rubric();
    std::size_t n = 0;
    for (const auto &id : ids) {
        const auto &ra = *a.at(id);
        const auto &rb = *b.at(id);
        if (ra.context != rb.context)
            spdlog::warn("{}: contexts differ between the two files; using the first", id);
        ABItem item;
        item.item_id = fmt::format("item-{:04d}", ++n);
        item.sample_id = id;
        item.context = ra.context;
        item.shuffled = rng.below(2) == 1;
        item.response_a = item.shuffled ? rb.response : ra.response;
        item.response_b = item.shuffled ? ra.response : rb.response;
        bundle.items.push_back(std::move(item));
    }
    return bundle;
}

void write_ab(const ABBundle &bundle, const fs::path &dir, const fs::path &key_path) {
    const fs::path d = fs::weakly_canonical(fs::absolute(dir));
    const fs::path k = fs::weakly_canonical(fs::absolute(key_path));
    auto [mismatch, rest] = std::mismatch(d.begin(), d.end(), k.begin(), k.end());
    if (mismatch == d.end())
        throw PreconditionError(fmt::format("the key file must live outside the bundle directory {}", d.string()));

    std::vector<json> items, keys;
    for (const auto &it : bundle.items) {
        items.push_back({{"item_id", it.item_id}, {"context", it.context}, {"response_A", it.response_a}, {"response_B", it.response_b}});
        keys.push_back({{"item_id", it.item_id},
                        {"sample_id", it.sample_id},
                        {"A", it.shuffled ? bundle.method_second : bundle.method_first},
                        {"B", it.shuffled ? bundle.method_first : bundle.method_second},
                        {"shuffled", it.shuffled}});
    }
    const std::string worker = to_jsonl(items);
    for (const auto *m : {&bundle.method_first, &bundle.method_second})
        if (worker.find(*m) != std::string::npos || bundle.rubric.find(*m) != std::string::npos)
            throw ValidationError(fmt::format("method id '{}' appears in the worker-facing bundle", *m));
    write_file_atomic(dir / "bundle.jsonl", worker);
    write_file_atomic(dir / "rubric.txt", bundle.rubric);
    write_jsonl(key_path, keys);
}

// ---- reporting ------------------------------------------------------------------

bool lower_is_better(std::string_view metric_id) { return metric_id == "ppl"; }

namespace {

std::vector<std::string> layout_columns(std::span<const MethodReports> methods, const std::string &layout_id) {
    static const std::map<std::string, std::vector<std::string>> layouts = {
        {"llm", {"bleu2", "bleu3", "bleu4", "bertscore_p", "bertscore_r", "bertscore_f", "f1"}},
        {"t5", {"ppl", "bleu2", "bleu4", "distinct1", "distinct2", "bertscore_f", "emoacc"}},
        {"human-proxy", {"emoacc", "epitome_ip", "epitome_ex", "epitome_er", "coherence_f"}},
    };
    if (auto it = layouts.find(layout_id); it != layouts.end())
        return it->second;
    if (layout_id != "all")
        spdlog::warn("unknown report layout '{}', showing all metrics", layout_id);
    std::vector<std::string> cols;
    for (const auto &m : methods)
        for (const auto &r : m.reports)
            if (std::find(cols.begin(), cols.end(), r.metric_id) == cols.end())
                cols.push_back(r.metric_id);
    return cols;
}

} // namespace

std::string render_report(std::span<const MethodReports> methods, const std::string &layout_id) {
    const auto cols = layout_columns(methods, layout_id);
    // cells[row][col]; empty optional means the method lacks that metric.
    std::vector<std::vector<std::optional<std::string>>> values(methods.size(), std::vector<std::optional<std::string>>(cols.size()));
    for (std::size_t r = 0; r < methods.size(); ++r) {
        for (const auto &rep : methods[r].reports) {
            auto it = std::find(cols.begin(), cols.end(), rep.metric_id);
            if (it == cols.end())
                continue;
            std::size_t c = static_cast<std::size_t>(it - cols.begin());
            values[r][c] = fmt::format("{:.2f}", rep.corpus_value);
        }
    }

    // Best is decided on the printed value, so cells that read the same tie.
    std::vector<std::vector<std::string>> cells(methods.size(), std::vector<std::string>(cols.size(), "-"));
    std::vector<std::string> tied;
    for (std::size_t c = 0; c < cols.size(); ++c) {
        std::optional<std::size_t> best;
        std::size_t present = 0;
        for (std::size_t r = 0; r < methods.size(); ++r) {
            if (!values[r][c])
                continue;
            ++present;
            double v = std::stod(*values[r][c]);
            if (!best || (lower_is_better(cols[c]) ? v < std::stod(*values[*best][c]) : v > std::stod(*values[*best][c])))
                best = r;
        }
        std::size_t winners = 0;
        for (std::size_t r = 0; r < methods.size(); ++r) {
            if (!values[r][c])
                continue;
            const bool win = present > 1 && *values[r][c] == *values[*best][c];
            winners += win ? 1 : 0;
            cells[r][c] = win ? "**" + *values[r][c] + "**" : *values[r][c];
        }
        if (winners > 1)
            tied.push_back(cols[c]);
    }

    std::vector<std::size_t> width(cols.size() + 1, 0);
    width[0] = std::string_view("method").size();
    for (const auto &m : methods)
        width[0] = std::max(width[0], m.method.size());
    for (std::size_t c = 0; c < cols.size(); ++c) {
        width[c + 1] = cols[c].size();
        for (std::size_t r = 0; r < methods.size(); ++r)
            width[c + 1] = std::max(width[c + 1], cells[r][c].size());
    }

    std::string out = fmt::format("{:<{}}", "method", width[0]);
    for (std::size_t c = 0; c < cols.size(); ++c)
        out += fmt::format(" | {:>{}}", cols[c], width[c + 1]);
    out += "\n" + std::string(width[0], '-');
    for (std::size_t c = 0; c < cols.size(); ++c)
        out += "-+-" + std::string(width[c + 1], '-');
    out += "\n";
    for (std::size_t r = 0; r < methods.size(); ++r) {
        out += fmt::format("{:<{}}", methods[r].method, width[0]);
        for (std::size_t c = 0; c < cols.size(); ++c)
            out += fmt::format(" | {:>{}}", cells[r][c], width[c + 1]);
        out += "\n";
    }
    if (!tied.empty())
        out += fmt::format("\n* tied best values are all bolded in: {}\n", text::join(tied, ", "));
    return out;
}

} // namespace empcause::harness
