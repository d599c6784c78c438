// make_fixtures: regenerates the offline demo data under data/demo.
//
// Writes the synthetic corpus, the lexicon knowledge fixture and the experiment
// configs, then runs every config in record mode against the scripted local
// responder so replay runs find their transcripts. Rater fixtures are recorded last,
// over the texts those runs produced.

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/hash.hpp"
#include "empcause/common/text.hpp"
#include "empcause/harness.hpp"
#include "synth.hpp"

namespace fs = std::filesystem;
using namespace empcause;

namespace {

constexpr const char *kKnowledgeBackend = "lexicon-rules-v1";
constexpr const char *kBertscoreBackend = "hashed-token-v1-d64";
constexpr const char *kEmotionBackend = "emotion-lexicon-v1";
constexpr const char *kEpitomeBackend = "epitome-rules-v1";

json base_config(const std::string &id) {
    return {
        {"experiment_id", id},
        {"mode", "replay"},
        {"seed", 13},
        {"k", 2},
        {"test_mode", "single_turn"},
        {"sample_count", 20},
        {"max_parallel", 4},
        {"out_dir", "../../../runs/" + id},
        {"data", {{"conversations", "../corpus.jsonl"}, {"split", "8:1:1"}}},
        {"knowledge", {{"kind", "fixture"}, {"path", "../knowledge.jsonl"}, {"backend_id", kKnowledgeBackend}}},
        {"embedder", {{"kind", "hashing"}, {"dim", 256}}},
        {"llm", {{"model", "gpt-3.5-turbo"}, {"temperature", 0.0}, {"layout", "single_user"}, {"recordings", "../recordings.jsonl"}}},
        {"raters",
         {{"bertscore", {{"kind", "fixture"}, {"path", "../raters/bertscore.jsonl"}, {"backend_id", kBertscoreBackend}}},
          {"emotion", {{"kind", "fixture"}, {"path", "../raters/emotion.jsonl"}, {"backend_id", kEmotionBackend}}},
          {"epitome", {{"kind", "fixture"}, {"path", "../raters/epitome.jsonl"}, {"backend_id", kEpitomeBackend}}}}},
    };
}

std::map<std::string, json> demo_configs() {
    std::map<std::string, json> out;
    for (std::size_t k : {2, 4}) {
        for (std::string mode : {"single_turn", "multi_turn"}) {
            std::string id = fmt::format("chatgpt-causality-k{}-{}", k, mode == "single_turn" ? "single" : "multi");
            json c = base_config(id);
            c["pipeline"] = "chatgpt";
            c["variant"] = "causality";
            c["k"] = k;
            c["test_mode"] = mode;
            c["metrics"] = {"bleu", "f1", "bertscore"};
            c["report_layout"] = "llm";
            out[id] = c;
        }
    }
    {
        json c = base_config("chatgpt-baseline-k2-single");
        c["pipeline"] = "chatgpt";
        c["variant"] = "baseline";
        c["metrics"] = {"bleu", "f1", "bertscore"};
        c["report_layout"] = "llm";
        out["chatgpt-baseline-k2-single"] = c;
    }
    for (std::string variant : {"base", "causality_user", "causality_user_sys"}) {
        std::string id = "t5-" + variant;
        std::replace(id.begin(), id.end(), '_', '-');
        json c = base_config(id);
        c["pipeline"] = "t5";
        c["variant"] = variant;
        c["t5"] = {{"config", {{"preset", "tiny"}, {"epochs", 3}, {"seed", 42}}}, {"decode", {{"top_k", 20}, {"temperature", 0.2}}}};
        c["metrics"] = {"ppl", "bleu", "distinct", "bertscore", "emoacc", "epitome", "coherence"};
        c["report_layout"] = "t5";
        out[id] = c;
    }
    return out;
}

/// OpenAI-shaped responder backed by the scripted reply generator.
std::shared_ptr<Transport> scripted_transport() {
    return std::make_shared<FunctionTransport>([](const HttpRequest &req) {
        json body = json::parse(req.body);
        std::vector<std::string> parts;
        for (const auto &m : body.at("messages"))
            parts.push_back(m.at("content").get<std::string>());
        const std::string prompt = text::join(parts, "\n\n");
        const std::size_t style = std::stoul(sha256_hex(prompt).substr(0, 8), nullptr, 16) % synth::kReplyStyles;
        json reply = {{"model", body.at("model")},
                      {"choices", json::array({{{"index", 0}, {"message", {{"role", "assistant"}, {"content", synth::scripted_reply(prompt, style)}}}}})}};
        return HttpResponse{200, reply.dump()};
    });
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Regenerate the offline demo fixtures"};
    std::string out_dir = "data/demo";
    std::size_t conversations = 250;
    app.add_option("--out", out_dir, "Output directory")->capture_default_str();
    app.add_option("--conversations", conversations, "Corpus size")->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    const fs::path out = fs::absolute(out_dir);
    const fs::path scratch = fs::temp_directory_path() / "empcause-fixture-runs";
    fs::remove_all(scratch);
    fs::create_directories(out / "configs");

    synth::CorpusOptions co;
    co.conversations = conversations;
    auto corpus = synth::make_corpus(co);
    corpus::save_dataset(out / "corpus.jsonl", corpus);
    knowledge::save_fixture(out / "knowledge.jsonl", synth::lexicon_fixture(corpus, kKnowledgeBackend));
    spdlog::info("{} conversations, knowledge fixture written", corpus.size());

    fs::remove(out / "recordings.jsonl");
    harness::RunOptions options;
    options.transport = scripted_transport();
    options.api_key = "scripted-local";

    std::vector<harness::GenerationRecord> generated;
    for (const auto &[id, config] : demo_configs()) {
        write_file_atomic(out / "configs" / (id + ".json"), config.dump(2) + "\n");
        json rec = config;
        rec["mode"] = "record";
        rec["out_dir"] = (scratch / id).string();
        rec.erase("raters");
        auto exp = harness::ExperimentConfig::from_json(rec, out / "configs");
        exp.stages.erase(std::remove(exp.stages.begin(), exp.stages.end(), "evaluate"), exp.stages.end());
        auto result = harness::run_experiment(exp, options);
        auto records = harness::load_generations(result.run_dir / "generations.jsonl");
        spdlog::info("{}: {} generations, {} scripted calls", id, records.size(), result.network_calls);
        generated.insert(generated.end(), records.begin(), records.end());
    }

    // Rater fixtures over every (response, reference/context) pair seen.
    raters::EmbeddingBertScorer scorer(std::make_shared<raters::HashedTokenEmbedder>(64));
    std::vector<raters::BertScoreRecord> bert;
    std::vector<json> emotion;
    std::vector<raters::EpitomeFixtureRecord> epitome;
    std::set<std::string> bert_seen, text_seen;
    for (const auto &r : generated) {
        for (const auto *target : {&r.reference, &r.context}) {
            auto key = raters::FixtureBertScorer::key(r.response, *target);
            if (bert_seen.insert(key).second)
                bert.push_back({r.response, *target, scorer.score(r.response, *target)});
        }
        const std::string text = text::collapse_whitespace(r.response);
        if (!text_seen.insert(text).second)
            continue;
        std::string label = synth::detect_emotion(r.response);
        emotion.push_back({{"text", text}, {"label", label.empty() ? "none" : label}});
        epitome.push_back({text, synth::rule_epitome(r.response)});
    }
    // anchor pair for the exploration levels
    for (std::string anchor : {"Are you feeling terrified right now?", "What happened?"})
        if (text_seen.insert(anchor).second)
            epitome.push_back({anchor, synth::rule_epitome(anchor)});
    raters::save_bertscore_fixture(out / "raters" / "bertscore.jsonl", bert);
    write_jsonl(out / "raters" / "emotion.jsonl", emotion);
    raters::save_epitome_fixture(out / "raters" / "epitome.jsonl", epitome);
    spdlog::info("rater fixtures: {} bertscore pairs, {} texts", bert.size(), text_seen.size());
    fs::remove_all(scratch);
    return 0;
}
