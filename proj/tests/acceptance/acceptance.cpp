// Acceptance checks. Prints one PASS/FAIL line per criterion (10 may SKIP) and
// exits non-zero when any criterion fails. Tolerances are fixed below.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "demo_config.hpp"
#include "empcause/common/error.hpp"
#include "empcause/common/random.hpp"
#include "empcause/common/text.hpp"
#include "empcause/harness.hpp"
#include "empcause/llmclient.hpp"
#include "empcause/metrics.hpp"
#include "empcause/prompting.hpp"
#include "empcause/selection.hpp"
#include "empcause/t5/model.hpp"
#include "empcause/t5/training.hpp"
#include "fd_check.hpp"
#include "golden_inputs.hpp"
#include "metric_oracles.hpp"
#include "synth.hpp"
#include "test_support.hpp"

using namespace empcause;
namespace et = empcause::testing;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kBleuTol = 1e-9;
constexpr double kF1Tol = 1e-12;
constexpr double kC1Seconds = 30;
constexpr double kC5Seconds = 60;
constexpr double kSoftmaxTol = 1e-6;
constexpr double kLossTol = 1e-9;
constexpr double kSumTol = 1e-12;
constexpr double kGradRelTol = 1e-3;
constexpr double kLossRatio = 0.70;
constexpr double kC8Seconds = 15 * 60;
constexpr double kPplRelTol = 1e-3;
constexpr std::size_t kGenerateCap = 40;

struct Outcome {
    enum Status { pass, fail, skip } status = pass;
    std::string detail;
};

Outcome fail(std::string d) { return {Outcome::fail, std::move(d)}; }
Outcome pass(std::string d) { return {Outcome::pass, std::move(d)}; }

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<metrics::ScoredPair> to_pairs(const std::vector<std::pair<std::string, std::string>> &raw) {
    std::vector<metrics::ScoredPair> out;
    for (std::size_t i = 0; i < raw.size(); ++i)
        out.push_back({"s" + std::to_string(i), raw[i].first, raw[i].second, ""});
    return out;
}

// ---- 1 ----
Outcome metric_oracles() {
    auto t0 = Clock::now();
    Rng rng(20240601);
    for (int t = 0; t < 100; ++t) {
        auto raw = et::toy_corpus(rng, 20, 30);
        auto pairs = to_pairs(raw);
        for (std::size_t n : {2u, 3u, 4u}) {
            double got = metrics::bleu_n(pairs, n), want = 100.0 * et::oracle_bleu(raw, n);
            if (std::abs(got - want) > kBleuTol)
                return fail(fmt::format("corpus {} bleu{}: {} vs oracle {}", t, n, got, want));
        }
        std::vector<std::string> responses;
        for (const auto &p : raw)
            responses.push_back(p.first);
        for (std::size_t n : {1u, 2u}) {
            auto [u, total] = et::oracle_distinct_counts(responses, n);
            double want = 100.0 * static_cast<double>(u) / static_cast<double>(total);
            if (metrics::distinct_n(responses, n) != want)
                return fail(fmt::format("corpus {} distinct{} mismatch", t, n));
        }
    }
    metrics::StopwordList sw("acceptance", {"my", "the"});
    auto same = metrics::overlap_f1("I feel great today", "I feel great today", sw);
    auto disjoint = metrics::overlap_f1("apples oranges", "cars trucks", sw);
    auto hand = metrics::overlap_f1("passed my exam happily", "passed the exam", sw);
    if (std::abs(same.f1 - 1.0) > kF1Tol || disjoint.f1 != 0.0)
        return fail("identical/disjoint F1 wrong");
    if (std::abs(hand.precision - 2.0 / 3.0) > kF1Tol || std::abs(hand.recall - 1.0) > kF1Tol || std::abs(hand.f1 - 0.8) > kF1Tol)
        return fail(fmt::format("hand F1 P={} R={} F1={}", hand.precision, hand.recall, hand.f1));
    double s = seconds_since(t0);
    if (s >= kC1Seconds)
        return fail(fmt::format("took {:.1f}s", s));
    return pass(fmt::format("100 corpora, bleu2-4 and distinct1-2 match, F1 hand examples, {:.2f}s", s));
}

// ---- 2 ----
Outcome bleu_zero() {
    std::vector<metrics::ScoredPair> pairs = {{"a", "i am so happy for you", "i am very happy for you", ""},
                                              {"b", "that is great news", "that is bad news", ""}};
    double b4 = metrics::bleu_n(pairs, 4);
    if (fmt::format("{:.2f}", b4) != "0.00" || b4 != 0.0)
        return fail(fmt::format("bleu4 = {}", b4));
    return pass("bleu4 = 0.00 with no shared 4-grams");
}

// ---- 3 ----
Outcome golden_prompts() {
    auto golden = [](const char *name) { return read_file(et::source_dir() / "tests" / "golden" / "v1" / name); };
    std::string causal = prompting::render(et::golden_bundle(prompting::Variant::causality));
    if (causal != golden("causality-k2.txt"))
        return fail("causality render differs from tests/golden/v1/causality-k2.txt");
    std::string base = prompting::render(et::golden_bundle(prompting::Variant::baseline));
    if (base != golden("baseline-k2.txt"))
        return fail("baseline render differs from tests/golden/v1/baseline-k2.txt");
    for (auto label : prompting::kKnowledgeLabels)
        if (base.find(label) != std::string::npos)
            return fail(fmt::format("baseline contains '{}'", label));
    return pass("causality golden byte-identical, baseline has no knowledge labels");
}

// ---- 4 ----
Outcome parser() {
    auto lines = read_jsonl(et::demo_dir() / "recordings.jsonl");
    if (lines.size() < 50)
        return fail(fmt::format("only {} recorded transcripts", lines.size()));
    for (const auto &line : lines) {
        auto t = llm::transcript_from_json(line.value);
        try {
            auto out = prompting::parse_reasoned(t.reply);
            if (out.response.empty())
                return fail(fmt::format("empty response for {}", t.request_key));
        } catch (const ParseError &e) {
            return fail(fmt::format("transcript {} failed: {}", t.request_key, e.what()));
        }
    }
    Rng rng(4);
    const std::vector<std::string> words = {"to", "help", "comfort", "be", "kind", "happy", "worried", "calm", "listen", "them"};
    auto phrase = [&] {
        std::string p = words[rng.below(words.size())];
        for (std::size_t n = rng.below(3); n > 0; --n)
            p += " " + words[rng.below(words.size())];
        return p;
    };
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<std::string> intent(1 + rng.below(5)), react(1 + rng.below(5));
        for (auto &p : intent)
            p = phrase();
        for (auto &p : react)
            p = phrase();
        std::string response = "I hear you, " + phrase() + ". How are you holding up?";
        auto out = prompting::parse_reasoned(prompting::format_reply(intent, react, response));
        if (out.sys_intent != intent || out.sys_react != react || out.response != response)
            return fail(fmt::format("round trip {} failed", trial));
    }
    return pass(fmt::format("{}/{} recorded transcripts parse, 1000 synthetic replies round-trip", lines.size(), lines.size()));
}

// ---- 5 ----
std::map<std::string, std::string> snapshot(const fs::path &dir) {
    std::map<std::string, std::string> out;
    for (const auto &e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file())
            continue;
        std::string rel = fs::relative(e.path(), dir).generic_string();
        if (rel == "timestamps.json")
            continue; // wall-clock stage times, kept apart on purpose
        std::string content = read_file(e.path());
        if (rel == "manifest.json") {
            // the only run-specific field is the output directory itself
            json m = json::parse(content);
            m["config"].erase("out_dir");
            content = m.dump();
        }
        out[rel] = std::move(content);
    }
    return out;
}

Outcome offline_run() {
    auto t0 = Clock::now();
    et::TempDir a("accept-a"), b("accept-b");
    auto ra = harness::run_experiment(et::demo_config("chatgpt-causality-k2-single", a.path()));
    auto rb = harness::run_experiment(et::demo_config("chatgpt-causality-k2-single", b.path()));
    double s = seconds_since(t0);
    if (ra.network_calls != 0 || rb.network_calls != 0)
        return fail(fmt::format("{} + {} network calls", ra.network_calls, rb.network_calls));
    auto sa = snapshot(a.path()), sb = snapshot(b.path());
    if (sa.size() != sb.size())
        return fail("runs produced different file sets");
    for (const auto &[name, content] : sa)
        if (!sb.count(name) || sb.at(name) != content)
            return fail(fmt::format("{} differs between runs", name));
    auto gens = harness::load_generations(a / "generations.jsonl");
    if (gens.size() != 20)
        return fail(fmt::format("{} generations, expected 20", gens.size()));
    if (s >= kC5Seconds)
        return fail(fmt::format("two runs took {:.1f}s", s));
    return pass(fmt::format("20 samples, 0 network calls, {} files identical, {:.2f}s for two runs", sa.size(), s));
}

// ---- 6 ----
Outcome top_k() {
    Rng rng(6);
    const std::size_t dim = 16;
    selection::EmbeddingIndex index("acceptance", dim);
    std::vector<std::pair<std::string, std::vector<double>>> rows;
    for (std::size_t i = 0; i < 1000; ++i) {
        std::vector<double> v(dim);
        if (i >= 10 && rng.below(5) == 0) {
            v = rows[rng.below(rows.size())].second; // exact duplicate: a tie broken by id
        } else {
            for (auto &x : v)
                x = rng.normal();
        }
        std::string id = fmt::format("c{:04d}", rng.below(100000) * 1000 + i);
        rows.emplace_back(id, v);
        index.add(id, {v});
    }
    std::vector<double> q(dim);
    for (auto &x : q)
        x = rng.normal();

    // brute force: plain loops, then a full argsort
    auto cosine = [&](const std::vector<double> &v) {
        double dot = 0, nq = 0, nv = 0;
        for (std::size_t d = 0; d < dim; ++d) {
            dot += q[d] * v[d];
            nq += q[d] * q[d];
            nv += v[d] * v[d];
        }
        return dot / (std::sqrt(nq) * std::sqrt(nv));
    };
    std::vector<double> sims(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        sims[i] = cosine(rows[i].second);
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        if (sims[x] != sims[y])
            return sims[x] > sims[y];
        return rows[x].first < rows[y].first;
    });

    std::size_t ties = 0;
    for (std::size_t i = 1; i < order.size(); ++i)
        ties += sims[order[i]] == sims[order[i - 1]];
    if (ties == 0)
        return fail("synthetic set has no ties; the tie-break is untested");

    for (std::size_t k : {1u, 2u, 4u, 6u, 1000u, 2000u}) {
        auto got = selection::top_k("q", {q}, index, k);
        std::size_t want = std::min<std::size_t>(k, rows.size());
        if (got.entries.size() != want || got.clamped != (k > rows.size()))
            return fail(fmt::format("k={} returned {} entries", k, got.entries.size()));
        for (std::size_t i = 0; i < want; ++i) {
            const auto &e = got.entries[i];
            if (e.conversation_id != rows[order[i]].first || std::abs(e.similarity - sims[order[i]]) > 1e-12)
                return fail(fmt::format("k={} rank {}: {} vs {}", k, i, e.conversation_id, rows[order[i]].first));
        }
    }
    return pass(fmt::format("1000 embeddings ({} exact ties), k in 1,2,4,6,1000,2000 match argsort", ties));
}

// ---- 7 ----
struct TinySetup {
    corpus::EmotionInventory emotions;
    std::vector<corpus::Conversation> convs;
    std::shared_ptr<knowledge::KnowledgeService> knowledge;
};

TinySetup tiny_setup(std::size_t conversations) {
    TinySetup s;
    s.emotions = corpus::EmotionInventory::load(prompting::asset_dir() / "emotions" / "empatheticdialogues-32.txt");
    synth::CorpusOptions opts;
    opts.conversations = conversations;
    opts.seed = 7;
    opts.id_prefix = "acc";
    s.convs = synth::make_corpus(opts);
    auto backend = std::make_shared<knowledge::FixtureKnowledgeBackend>("lexicon-rules-v1", synth::lexicon_fixture(s.convs, "lexicon-rules-v1"));
    s.knowledge = std::make_shared<knowledge::KnowledgeService>(backend, std::make_shared<ContentCache>());
    return s;
}

std::vector<t5::T5Example> examples(const TinySetup &s, std::size_t from, std::size_t to, t5::Variant v) {
    std::vector<t5::T5Example> out;
    for (std::size_t i = from; i < to; ++i)
        out.push_back(t5::make_training_example(s.convs[i], s.emotions, *s.knowledge, v));
    return out;
}

t5::Vocabulary vocab_of(std::span<const t5::T5Example> exs) {
    std::vector<std::string> texts;
    for (const auto &e : exs)
        for (const auto *t : {&e.context, &e.user_causality, &e.sys_causality, &e.response})
            if (!t->empty())
                texts.push_back(*t);
    return t5::Vocabulary::build(texts);
}

std::vector<t5::TokenizedExample> tokenize_all(std::span<const t5::T5Example> exs, const t5::T5Model &m) {
    std::vector<t5::TokenizedExample> out;
    for (const auto &e : exs)
        out.push_back(t5::tokenize(e, m.vocab(), m.config()));
    return out;
}

Outcome model_math() {
    std::vector<std::string> notes;
    // (a) classifier outputs are distributions
    auto setup = tiny_setup(40);
    auto exs = examples(setup, 0, 40, t5::Variant::causality_user_sys);
    auto cfg = t5::ModelConfig::tiny();
    cfg.variant = t5::Variant::causality_user_sys;
    cfg.emotion_count = setup.emotions.size();
    cfg.seed = 17;
    t5::T5Model model(cfg, vocab_of(exs));
    Rng rng(7);
    const int v = static_cast<int>(model.vocab().size());
    double worst = 0;
    for (int t = 0; t < 1000; ++t) {
        t5::TokenizedExample ex;
        ex.id = "rand" + std::to_string(t);
        auto seq = [&] {
            std::vector<int> ids(1 + rng.below(30));
            for (auto &id : ids)
                id = 4 + static_cast<int>(rng.below(static_cast<std::size_t>(v - 4)));
            return ids;
        };
        ex.context = seq();
        ex.user = seq();
        ex.sys = seq();
        auto p = model.emotion_distribution(ex);
        double sum = 0;
        for (double x : p) {
            if (!(x >= 0.0))
                return fail("(a) negative or NaN probability");
            sum += x;
        }
        worst = std::max(worst, std::abs(sum - 1.0));
    }
    if (worst > kSoftmaxTol)
        return fail(fmt::format("(a) distribution sums off by {}", worst));
    notes.push_back(fmt::format("(a) max |sum-1| {:.1e}", worst));

    // (b) loss values
    t5::Matrix half(1, 2);
    half << 0.5, 0.5;
    std::vector<int> l0 = {0};
    t5::Matrix uniform32 = t5::Matrix::Constant(1, 32, 1.0 / 32);
    t5::Matrix certain = t5::Matrix::Zero(1, 3);
    certain(0, 0) = 1.0;
    t5::Matrix zeros4 = t5::Matrix::Zero(1, 4);
    std::vector<int> ref = {2};
    if (std::abs(t5::emotion_loss(half, l0) - std::log(2.0)) > kLossTol || std::abs(t5::emotion_loss(uniform32, l0) - std::log(32.0)) > kLossTol ||
        t5::emotion_loss(certain, l0) != 0.0 || std::abs(t5::gen_loss(zeros4, ref) - std::log(4.0)) > kLossTol)
        return fail("(b) loss values");
    notes.push_back("(b) ln2 ln32 ln4 0");

    // (c) total == l_emotion + l_gen over 50 steps
    auto data = tokenize_all(exs, model);
    t5::TrainOptions opts;
    opts.epochs = 100;
    opts.max_steps = 50;
    double worst_sum = 0;
    std::size_t steps = 0;
    opts.on_step = [&](const t5::StepLog &s) {
        ++steps;
        worst_sum = std::max(worst_sum, std::abs(s.loss.total - (s.loss.l_emotion + s.loss.l_gen)) / std::max(1.0, std::abs(s.loss.total)));
    };
    t5::train(model, data, {}, opts);
    if (steps != 50 || worst_sum > kSumTol)
        return fail(fmt::format("(c) {} steps, worst |total - parts| {}", steps, worst_sum));
    notes.push_back("(c) 50 steps exact");

    // (d) finite differences on a smaller model
    auto small = cfg;
    small.d_model = 16;
    small.d_ff = 32;
    small.num_heads = 2;
    small.num_encoder_layers = 1;
    small.num_decoder_layers = 1;
    t5::T5Model fd_model(small, vocab_of(exs));
    auto fd_data = tokenize_all(exs, fd_model);
    std::span<const t5::TokenizedExample> batch(fd_data.data(), 2);
    for (const char *name : {"fusion.weight", "fusion.bias", "emotion_head.weight"}) {
        auto r = et::check_gradient(fd_model, name, batch);
        if (r.checked == 0 || r.max_relative_error > kGradRelTol)
            return fail(fmt::format("(d) {}: {} entries, max rel err {}", name, r.checked, r.max_relative_error));
        notes.push_back(fmt::format("(d) {} rel {:.1e}", name, r.max_relative_error));
    }
    return pass(text::join(notes, ", "));
}

// ---- 8 ----
Outcome tiny_training() {
    auto t0 = Clock::now();
    auto setup = tiny_setup(250);
    const auto v = t5::Variant::causality_user_sys;
    auto train_text = examples(setup, 0, 200, v);
    auto held_text = examples(setup, 200, 250, v);
    auto cfg = t5::ModelConfig::tiny();
    cfg.variant = v;
    cfg.emotion_count = setup.emotions.size();
    cfg.epochs = 3;
    cfg.seed = 42;
    t5::T5Model model(cfg, vocab_of(train_text));
    auto train = tokenize_all(train_text, model);
    auto held = tokenize_all(held_text, model);

    auto result = t5::train(model, train, {});
    if (result.epochs.size() != 3)
        return fail(fmt::format("{} epochs ran", result.epochs.size()));
    const double first = result.epochs.front().mean_total;
    const double final_loss = t5::mean_loss(model, train).total;

    std::vector<std::size_t> counts(cfg.emotion_count, 0);
    for (const auto &e : train)
        ++counts[static_cast<std::size_t>(e.emotion)];
    const int majority = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    double baseline = 0;
    for (const auto &e : held)
        baseline += e.emotion == majority;
    baseline /= static_cast<double>(held.size());
    const double acc = t5::emotion_accuracy(model, held);

    t5::DecodeParams greedy{20, 0.0};
    std::size_t longest = 0;
    for (const auto &e : held) {
        Rng r1(1), r2(2);
        auto g1 = model.generate(e, greedy, r1), g2 = model.generate(e, greedy, r2);
        if (g1 != g2)
            return fail(fmt::format("greedy generation differs for {}", e.id));
        longest = std::max(longest, g1.size());
    }
    const double s = seconds_since(t0);
    std::string detail = fmt::format("first-epoch mean {:.3f}, final {:.3f} ({:.0f}%), held-out acc {:.2f} vs majority {:.2f}, "
                                     "longest generation {}, {:.0f}s",
                                     first, final_loss, 100 * final_loss / first, acc, baseline, longest, s);
    if (final_loss >= kLossRatio * first)
        return fail("loss did not drop enough: " + detail);
    if (!(acc > baseline))
        return fail("emotion accuracy at or below majority baseline: " + detail);
    if (longest > kGenerateCap || model.config().max_generate_len != kGenerateCap)
        return fail("generation cap: " + detail);
    if (s >= kC8Seconds)
        return fail("too slow: " + detail);
    return pass(detail);
}

// ---- 9 ----
Outcome uniform_ppl() {
    auto setup = tiny_setup(30);
    auto exs = examples(setup, 0, 30, t5::Variant::base);
    auto vocab = vocab_of(exs);
    auto cfg = t5::ModelConfig::tiny();
    cfg.variant = t5::Variant::base;
    std::vector<t5::TokenizedExample> data;
    for (const auto &e : exs)
        data.push_back(t5::tokenize(e, vocab, cfg));
    t5::UniformScorer u(vocab.size());
    double ppl = t5::perplexity(u, data);
    double rel = std::abs(ppl - static_cast<double>(vocab.size())) / static_cast<double>(vocab.size());
    if (rel > kPplRelTol)
        return fail(fmt::format("PPL {} for vocabulary {}", ppl, vocab.size()));
    return pass(fmt::format("PPL {:.4f} for vocabulary {}", ppl, vocab.size()));
}

// ---- 10 ----
Outcome live_run() {
    const char *key = std::getenv("OPENAI_API_KEY");
    if (!key || !*key)
        return {Outcome::skip, "OPENAI_API_KEY not set"};
    et::TempDir dir("accept-live");
    json overrides = {{"mode", "record"},
                      {"sample_count", 10},
                      {"metrics", {"bleu", "f1"}},
                      {"llm", {{"recordings", (dir / "recordings.jsonl").string()}, {"temperature", 0.0}}}};
    auto c = et::demo_config("chatgpt-causality-k2-single", dir / "run", overrides);
    auto r = harness::run_experiment(c);
    auto gens = harness::load_generations(dir / "run" / "generations.jsonl");
    std::size_t parsed = 0;
    for (const auto &g : gens)
        parsed += g.reasoned.has_value() && !g.response.empty();
    auto recorded = read_jsonl(dir / "recordings.jsonl").size();
    if (gens.size() != 10 || parsed != 10 || recorded < 10)
        return fail(fmt::format("{} generations, {} parsed, {} recorded", gens.size(), parsed, recorded));
    return pass(fmt::format("10 live completions parsed and recorded, {} network calls", r.network_calls));
}

} // namespace

int main() {
    spdlog::set_level(spdlog::level::warn);
    const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
        {1, metric_oracles}, {2, bleu_zero}, {3, golden_prompts}, {4, parser},      {5, offline_run},
        {6, top_k},          {7, model_math}, {8, tiny_training}, {9, uniform_ppl}, {10, live_run},
    };
    int failures = 0;
    for (const auto &[n, check] : criteria) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception &e) {
            o = fail(std::string("exception: ") + e.what());
        }
        const char *status = o.status == Outcome::pass ? "PASS" : o.status == Outcome::skip ? "SKIP" : "FAIL";
        failures += o.status == Outcome::fail;
        std::cout << fmt::format("criterion {:>2}: {} - {}", n, status, o.detail) << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
