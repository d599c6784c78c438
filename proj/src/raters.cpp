#include "empcause/raters.hpp"

#include <cmath>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/error.hpp"
#include "empcause/common/hash.hpp"
#include "empcause/common/random.hpp"
#include "empcause/common/text.hpp"

namespace empcause::raters {

namespace fs = std::filesystem;

namespace {

json post_to_server(const ServerConfig &config, Transport &transport, Semaphore &in_flight, const json &body) {
    HttpRequest request{config.endpoint, body.dump(), {}, std::chrono::milliseconds(60000)};
    SemaphoreGuard guard(in_flight);
    HttpResponse response;
    try {
        response = post_with_retries(transport, request, config.retry).first;
    } catch (const TransportError &e) {
        throw BackendError(fmt::format("rater '{}' unreachable: {}", config.backend_id, e.what()));
    }
    if (response.status != 200)
        throw BackendError(fmt::format("rater '{}' returned HTTP {}", config.backend_id, response.status));
    try {
        return json::parse(response.body);
    } catch (const json::exception &e) {
        throw BackendError(fmt::format("rater '{}' sent a malformed reply: {}", config.backend_id, e.what()));
    }
}

double vector_cosine(const std::vector<double> &a, const std::vector<double> &b) {
    if (a.size() != b.size())
        throw PreconditionError(fmt::format("token vector dimensions differ ({} vs {})", a.size(), b.size()));
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0)
        return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

metrics::MetricReport rater_report(std::string id, std::vector<std::pair<std::string, double>> values, json config) {
    return metrics::mean_report(std::move(id), std::move(values), 1.0, std::move(config));
}

} // namespace

Prf bertscore_from_embeddings(std::span<const std::vector<double>> candidate, std::span<const std::vector<double>> reference) {
    if (candidate.empty() || reference.empty())
        throw PreconditionError("BERTScore needs at least one token on each side");
    std::vector<double> best_ref(reference.size(), -1.0);
    double precision = 0.0;
    for (const auto &c : candidate) {
        double best = -1.0;
        for (std::size_t j = 0; j < reference.size(); ++j) {
            double s = vector_cosine(c, reference[j]);
            best = std::max(best, s);
            best_ref[j] = std::max(best_ref[j], s);
        }
        precision += best;
    }
    precision /= static_cast<double>(candidate.size());
    double recall = 0.0;
    for (double s : best_ref)
        recall += s;
    recall /= static_cast<double>(reference.size());
    double f = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    return {precision, recall, f};
}

ServerTokenEmbedder::ServerTokenEmbedder(ServerConfig config, std::shared_ptr<Transport> transport)
    : config_(std::move(config)), transport_(std::move(transport)), in_flight_(config_.max_parallel) {}

std::vector<std::vector<double>> ServerTokenEmbedder::embed_tokens(const std::string &text) {
    json reply = post_to_server(config_, *transport_, in_flight_, {{"text", text}});
    try {
        return reply.at("vectors").get<std::vector<std::vector<double>>>();
    } catch (const json::exception &e) {
        throw BackendError(fmt::format("rater '{}' reply lacks token vectors: {}", config_.backend_id, e.what()));
    }
}

HashedTokenEmbedder::HashedTokenEmbedder(std::size_t dim) : dim_(dim), backend_id_(fmt::format("hashed-token-v1-d{}", dim)) {
    if (dim == 0)
        throw PreconditionError("token embedding dimension must be positive");
}

std::vector<std::vector<double>> HashedTokenEmbedder::embed_tokens(const std::string &text) {
    std::vector<std::vector<double>> out;
    for (const auto &token : text::word_tokens(text)) {
        if (text::is_punctuation_token(token))
            continue;
        Rng rng(fnv1a(token));
        std::vector<double> v(dim_);
        double norm = 0.0;
        for (auto &x : v) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto &x : v)
            x /= norm;
        out.push_back(std::move(v));
    }
    return out;
}

Prf EmbeddingBertScorer::score(const std::string &candidate, const std::string &reference) {
    auto c = embedder_->embed_tokens(candidate);
    auto r = embedder_->embed_tokens(reference);
    if (c.empty() || r.empty())
        return {};
    return bertscore_from_embeddings(c, r);
}

FixtureBertScorer::FixtureBertScorer(std::string backend_id, std::unordered_map<std::string, Prf> records)
    : backend_id_(std::move(backend_id)), records_(std::move(records)) {}

std::string FixtureBertScorer::key(const std::string &candidate, const std::string &reference) {
    return sha256_hex(canonical_dump(json::array({text::collapse_whitespace(candidate), text::collapse_whitespace(reference)})));
}

std::unique_ptr<FixtureBertScorer> FixtureBertScorer::load(const fs::path &path, std::string backend_id) {
    std::unordered_map<std::string, Prf> records;
    for (const auto &line : read_jsonl(path)) {
        try {
            const auto &v = line.value;
            records[key(v.at("candidate").get<std::string>(), v.at("reference").get<std::string>())] =
                Prf{v.at("p").get<double>(), v.at("r").get<double>(), v.at("f").get<double>()};
        } catch (const json::exception &e) {
            throw ValidationError(fmt::format("{}:{}: malformed BERTScore record: {}", path.string(), line.line, e.what()));
        }
    }
    return std::make_unique<FixtureBertScorer>(std::move(backend_id), std::move(records));
}

Prf FixtureBertScorer::score(const std::string &candidate, const std::string &reference) {
    auto k = key(candidate, reference);
    auto it = records_.find(k);
    if (it == records_.end())
        throw ReplayMissError(fmt::format("no recorded BERTScore for candidate '{}'", candidate), k);
    return it->second;
}

void save_bertscore_fixture(const fs::path &path, std::span<const BertScoreRecord> records) {
    std::vector<json> lines;
    for (const auto &r : records)
        lines.push_back({{"candidate", r.candidate}, {"reference", r.reference}, {"p", r.score.precision}, {"r", r.score.recall},
                         {"f", r.score.f}});
    write_jsonl(path, lines);
}

std::vector<metrics::MetricReport> bert_score(std::span<const metrics::ScoredPair> pairs, BertScorer &scorer, BertTarget target,
                                              std::size_t max_parallel) {
    if (pairs.empty())
        throw PreconditionError("BERTScore over an empty corpus");
    std::vector<Prf> scores(pairs.size());
    parallel_for(pairs.size(), max_parallel, [&](std::size_t i) {
        const auto &p = pairs[i];
        const std::string &against = target == BertTarget::context ? p.context : p.reference;
        if (text::trim(against).empty())
            throw PreconditionError(fmt::format("pair '{}' has no {} to score against", p.sample_id,
                                                target == BertTarget::context ? "context" : "reference"));
        scores[i] = scorer.score(p.generated, against);
    });
    std::string prefix = target == BertTarget::context ? "coherence" : "bertscore";
    std::vector<std::pair<std::string, double>> ps, rs, fs_;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        ps.emplace_back(pairs[i].sample_id, scores[i].precision);
        rs.emplace_back(pairs[i].sample_id, scores[i].recall);
        fs_.emplace_back(pairs[i].sample_id, scores[i].f);
    }
    json config = {{"metric", prefix}, {"backend", scorer.backend_id()}, {"target", target == BertTarget::context ? "context" : "reference"}};
    std::vector<metrics::MetricReport> out;
    out.push_back(rater_report(prefix + "_p", std::move(ps), config));
    out.push_back(rater_report(prefix + "_r", std::move(rs), config));
    out.push_back(rater_report(prefix + "_f", std::move(fs_), config));
    return out;
}

FixtureEmotionRater::FixtureEmotionRater(std::string backend_id, std::unordered_map<std::string, std::string> labels)
    : backend_id_(std::move(backend_id)), labels_(std::move(labels)) {}

std::unique_ptr<FixtureEmotionRater> FixtureEmotionRater::load(const fs::path &path, std::string backend_id) {
    std::unordered_map<std::string, std::string> labels;
    for (const auto &line : read_jsonl(path)) {
        try {
            labels[text::collapse_whitespace(line.value.at("text").get<std::string>())] = line.value.at("label").get<std::string>();
        } catch (const json::exception &e) {
            throw ValidationError(fmt::format("{}:{}: malformed emotion record: {}", path.string(), line.line, e.what()));
        }
    }
    return std::make_unique<FixtureEmotionRater>(std::move(backend_id), std::move(labels));
}

std::string FixtureEmotionRater::predict(const std::string &text) {
    auto key = text::collapse_whitespace(text);
    auto it = labels_.find(key);
    if (it == labels_.end())
        throw ReplayMissError(fmt::format("no recorded emotion prediction for '{}'", key), sha256_hex(key));
    return it->second;
}

ServerEmotionRater::ServerEmotionRater(ServerConfig config, std::shared_ptr<Transport> transport)
    : config_(std::move(config)), transport_(std::move(transport)), in_flight_(config_.max_parallel) {}

std::string ServerEmotionRater::predict(const std::string &text) {
    json reply = post_to_server(config_, *transport_, in_flight_, {{"text", text}});
    try {
        return reply.at("label").get<std::string>();
    } catch (const json::exception &e) {
        throw BackendError(fmt::format("rater '{}' reply lacks a label: {}", config_.backend_id, e.what()));
    }
}

metrics::MetricReport emoacc(std::span<const LabeledResponse> responses, EmotionRater &rater, std::size_t max_parallel) {
    if (responses.empty())
        throw PreconditionError("emotion accuracy over an empty response set");
    std::vector<double> hits(responses.size());
    parallel_for(responses.size(), max_parallel, [&](std::size_t i) {
        hits[i] = rater.predict(responses[i].response) == responses[i].gold_label ? 1.0 : 0.0;
    });
    std::vector<std::pair<std::string, double>> values;
    for (std::size_t i = 0; i < responses.size(); ++i)
        values.emplace_back(responses[i].sample_id, hits[i]);
    return rater_report("emoacc", std::move(values), {{"metric", "emoacc"}, {"backend", rater.backend_id()}});
}

std::string_view short_name(Mechanism m) {
    switch (m) {
    case Mechanism::interpretation:
        return "ip";
    case Mechanism::exploration:
        return "ex";
    case Mechanism::emotional_reaction:
        return "er";
    }
    return "?";
}

int EpitomeRating::get(Mechanism m) const {
    switch (m) {
    case Mechanism::interpretation:
        return ip;
    case Mechanism::exploration:
        return ex;
    case Mechanism::emotional_reaction:
        return er;
    }
    return 0;
}

FixtureMechanismRater::FixtureMechanismRater(std::string backend_id, Mechanism mechanism, std::unordered_map<std::string, int> levels)
    : backend_id_(std::move(backend_id)), mechanism_(mechanism), levels_(std::move(levels)) {}

std::unique_ptr<FixtureMechanismRater> FixtureMechanismRater::load(const fs::path &path, std::string backend_id, Mechanism mechanism) {
    std::unordered_map<std::string, int> levels;
    for (const auto &line : read_jsonl(path)) {
        try {
            levels[text::collapse_whitespace(line.value.at("text").get<std::string>())] =
                line.value.at(std::string(short_name(mechanism))).get<int>();
        } catch (const json::exception &e) {
            throw ValidationError(fmt::format("{}:{}: malformed EPITOME record: {}", path.string(), line.line, e.what()));
        }
    }
    return std::make_unique<FixtureMechanismRater>(std::move(backend_id), mechanism, std::move(levels));
}

int FixtureMechanismRater::rate(const std::string &, const std::string &response) {
    auto key = text::collapse_whitespace(response);
    auto it = levels_.find(key);
    if (it == levels_.end())
        throw ReplayMissError(fmt::format("no recorded {} rating for '{}'", short_name(mechanism_), key), sha256_hex(key));
    return it->second;
}

ServerMechanismRater::ServerMechanismRater(ServerConfig config, Mechanism mechanism, std::shared_ptr<Transport> transport)
    : config_(std::move(config)), mechanism_(mechanism), transport_(std::move(transport)), in_flight_(config_.max_parallel) {}

int ServerMechanismRater::rate(const std::string &context, const std::string &response) {
    json reply = post_to_server(config_, *transport_, in_flight_,
                                {{"context", context}, {"response", response}, {"mechanism", short_name(mechanism_)}});
    try {
        return reply.at("level").get<int>();
    } catch (const json::exception &e) {
        throw BackendError(fmt::format("rater '{}' reply lacks a level: {}", config_.backend_id, e.what()));
    }
}

MechanismRater &EpitomeRaters::get(Mechanism m) const {
    const auto &r = m == Mechanism::interpretation ? ip : m == Mechanism::exploration ? ex : er;
    if (!r)
        throw PreconditionError(fmt::format("no rater configured for mechanism {}", short_name(m)));
    return *r;
}

void save_epitome_fixture(const fs::path &path, std::span<const EpitomeFixtureRecord> records) {
    std::vector<json> lines;
    for (const auto &r : records)
        lines.push_back({{"text", r.text}, {"ip", r.rating.ip}, {"ex", r.rating.ex}, {"er", r.rating.er}});
    write_jsonl(path, lines);
}

std::vector<metrics::MetricReport> epitome(std::span<const metrics::ScoredPair> pairs, const EpitomeRaters &raters,
                                           std::size_t max_parallel) {
    if (pairs.empty())
        throw PreconditionError("EPITOME over an empty response set");
    std::vector<metrics::MetricReport> out;
    for (Mechanism m : kMechanisms) {
        MechanismRater &rater = raters.get(m);
        std::vector<int> levels(pairs.size());
        parallel_for(pairs.size(), max_parallel, [&](std::size_t i) { levels[i] = rater.rate(pairs[i].context, pairs[i].generated); });
        std::vector<std::string> bad;
        std::vector<std::pair<std::string, double>> values;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            if (levels[i] < 0 || levels[i] > 2)
                bad.push_back(fmt::format("{}={}", pairs[i].sample_id, levels[i]));
            values.emplace_back(pairs[i].sample_id, static_cast<double>(levels[i]));
        }
        if (!bad.empty())
            throw ValidationError(fmt::format("rater '{}' ({}) produced levels outside {{0,1,2}}: {}", rater.backend_id(), short_name(m),
                                              text::join(bad, ", ")));
        out.push_back(rater_report(fmt::format("epitome_{}", short_name(m)), std::move(values),
                                   {{"metric", "epitome"}, {"mechanism", short_name(m)}, {"backend", rater.backend_id()}}));
    }
    return out;
}

} // namespace empcause::raters
