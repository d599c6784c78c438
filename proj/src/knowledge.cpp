#include "empcause/knowledge.hpp"

#include <unordered_set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/error.hpp"
#include "empcause/common/hash.hpp"
#include "empcause/common/text.hpp"

namespace empcause::knowledge {

namespace fs = std::filesystem;

std::string_view to_string(Relation relation) {
    switch (relation) {
    case Relation::xWant:
        return "xWant";
    case Relation::xReact:
        return "xReact";
    case Relation::xIntent:
        return "xIntent";
    }
    return "?";
}

Relation relation_from_string(std::string_view name) {
    if (name == "xWant")
        return Relation::xWant;
    if (name == "xReact")
        return Relation::xReact;
    if (name == "xIntent")
        return Relation::xIntent;
    throw PreconditionError(fmt::format("unsupported relation '{}' (expected xWant, xReact or xIntent)", name));
}

json to_json(const InferenceSet &s) {
    return {{"source_text", s.source_text},
            {"relation", to_string(s.relation)},
            {"phrases", s.phrases},
            {"backend_id", s.backend_id},
            {"decode_params", s.decode_params}};
}

InferenceSet inference_set_from_json(const json &r) {
    InferenceSet s;
    s.source_text = r.at("source_text").get<std::string>();
    s.relation = relation_from_string(r.at("relation").get<std::string>());
    s.phrases = r.at("phrases").get<std::vector<std::string>>();
    s.backend_id = r.value("backend_id", std::string{});
    s.decode_params = r.value("decode_params", json::object());
    return s;
}

std::string normalize_text(std::string_view text) { return text::collapse_whitespace(text); }

std::vector<std::string> normalize_phrases(std::span<const std::string> raw, std::size_t max_phrases) {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto &phrase : raw) {
        std::string p = text::collapse_whitespace(phrase);
        while (!p.empty() && p.back() == '.')
            p.pop_back();
        p = text::trim(p);
        if (p.empty())
            continue;
        if (!seen.insert(text::to_lower(p)).second)
            continue;
        out.push_back(std::move(p));
        if (out.size() == max_phrases)
            break;
    }
    return out;
}

std::string inference_key(std::string_view text, Relation relation, std::string_view backend_id, const json &decode_params) {
    json material = {{"text", normalize_text(text)},
                     {"relation", to_string(relation)},
                     {"backend_id", backend_id},
                     {"decode_params", decode_params.is_null() ? json::object() : decode_params}};
    return sha256_hex(canonical_dump(material));
}

FixtureKnowledgeBackend::FixtureKnowledgeBackend(std::string backend_id, std::vector<InferenceSet> records)
    : backend_id_(std::move(backend_id)) {
    for (auto &r : records)
        records_[inference_key(r.source_text, r.relation, backend_id_, decode_params_)] = std::move(r.phrases);
}

std::unique_ptr<FixtureKnowledgeBackend> FixtureKnowledgeBackend::load(const fs::path &path, std::string backend_id) {
    std::vector<InferenceSet> records;
    for (const auto &line : read_jsonl(path)) {
        InferenceSet s;
        try {
            s = inference_set_from_json(line.value);
        } catch (const json::exception &e) {
            throw ValidationError(fmt::format("{}:{}: malformed fixture record: {}", path.string(), line.line, e.what()));
        }
        if (backend_id.empty())
            backend_id = s.backend_id;
        else if (!s.backend_id.empty() && s.backend_id != backend_id)
            throw ValidationError(fmt::format("{}:{}: fixture mixes backend ids '{}' and '{}'", path.string(), line.line, backend_id,
                                              s.backend_id));
        std::string expected = inference_key(s.source_text, s.relation, backend_id, json::object());
        if (line.value.contains("key") && line.value["key"] != expected)
            spdlog::warn("{}:{}: fixture key does not match its content; using the recomputed key", path.string(), line.line);
        records.push_back(std::move(s));
    }
    if (backend_id.empty())
        backend_id = "fixture:" + path.filename().string();
    return std::make_unique<FixtureKnowledgeBackend>(std::move(backend_id), std::move(records));
}

std::vector<std::string> FixtureKnowledgeBackend::query(const std::string &text, Relation relation, std::size_t) {
    auto it = records_.find(inference_key(text, relation, backend_id_, decode_params_));
    if (it == records_.end())
        throw BackendError(fmt::format("fixture backend '{}' has no {} record for \"{}\"", backend_id_, to_string(relation), text));
    return it->second;
}

void save_fixture(const fs::path &path, std::span<const InferenceSet> sets) {
    std::vector<json> records;
    for (const auto &s : sets) {
        records.push_back({{"key", inference_key(s.source_text, s.relation, s.backend_id, json::object())},
                           {"source_text", s.source_text},
                           {"relation", to_string(s.relation)},
                           {"phrases", s.phrases},
                           {"backend_id", s.backend_id}});
    }
    write_jsonl(path, records);
}

ModelServerKnowledgeBackend::ModelServerKnowledgeBackend(ModelServerConfig config, std::shared_ptr<Transport> transport)
    : config_(std::move(config)), transport_(std::move(transport)), in_flight_(config_.max_parallel) {
    if (config_.endpoint.empty())
        throw PreconditionError("model-server knowledge backend needs an endpoint");
    if (config_.backend_id.empty())
        config_.backend_id = "model_server:" + config_.endpoint;
}

std::vector<std::string> ModelServerKnowledgeBackend::query(const std::string &text, Relation relation, std::size_t max_phrases) {
    json body = {{"text", text}, {"relation", to_string(relation)}, {"max_phrases", max_phrases}};
    if (!config_.decode_params.empty())
        body["decode_params"] = config_.decode_params;
    HttpRequest request{config_.endpoint, body.dump(), {}, std::chrono::milliseconds(60000)};

    SemaphoreGuard guard(in_flight_);
    HttpResponse response;
    try {
        response = post_with_retries(*transport_, request, config_.retry).first;
    } catch (const TransportError &e) {
        throw BackendError(fmt::format("knowledge backend '{}' unreachable: {}", config_.backend_id, e.what()));
    }
    if (response.status != 200)
        throw BackendError(fmt::format("knowledge backend '{}' returned HTTP {}: {}", config_.backend_id, response.status, response.body));
    try {
        return json::parse(response.body).at("phrases").get<std::vector<std::string>>();
    } catch (const json::exception &e) {
        throw BackendError(fmt::format("knowledge backend '{}' sent a malformed reply: {}", config_.backend_id, e.what()));
    }
}

std::optional<InferenceSet> InferenceCache::get(const std::string &key) const {
    auto value = store_->get(key);
    if (!value)
        return std::nullopt;
    try {
        return inference_set_from_json(*value);
    } catch (const std::exception &e) {
        spdlog::warn("cache entry {} does not hold an inference set: {}", key, e.what());
        return std::nullopt;
    }
}

void InferenceCache::put(const std::string &key, const InferenceSet &set) { store_->put(key, to_json(set)); }

KnowledgeService::KnowledgeService(std::shared_ptr<KnowledgeBackend> backend, std::shared_ptr<ContentCache> cache, std::size_t max_phrases)
    : backend_(std::move(backend)), cache_(cache ? std::move(cache) : std::make_shared<ContentCache>()), max_phrases_(max_phrases) {
    if (!backend_)
        throw PreconditionError("knowledge service needs a backend");
    if (max_phrases_ < 1)
        throw PreconditionError("max_phrases must be at least 1");
}

InferenceSet KnowledgeService::infer(const std::string &text, Relation relation, std::optional<std::size_t> max_phrases) {
    const std::size_t limit = max_phrases.value_or(max_phrases_);
    if (limit < 1)
        throw PreconditionError("max_phrases must be at least 1");
    if (text::trim(text).empty())
        throw PreconditionError(fmt::format("cannot infer {} for empty text", to_string(relation)));

    const std::string key = inference_key(text, relation, backend_->backend_id(), backend_->decode_params());
    if (auto cached = cache_.get(key); cached && !cached->phrases.empty()) {
        if (cached->phrases.size() > limit)
            cached->phrases.resize(limit);
        return *cached;
    }

    ++backend_queries_;
    auto raw = backend_->query(normalize_text(text), relation, limit);
    InferenceSet set;
    set.source_text = normalize_text(text);
    set.relation = relation;
    set.phrases = normalize_phrases(raw, limit);
    set.backend_id = backend_->backend_id();
    set.decode_params = backend_->decode_params();
    if (set.phrases.empty())
        throw BackendError(fmt::format("knowledge backend '{}' produced no usable {} phrases for \"{}\"", set.backend_id,
                                       to_string(relation), set.source_text));
    cache_.put(key, set);
    return set;
}

InferencePair KnowledgeService::bundle(const std::string &text, Relation a, Relation b, std::string_view side) {
    auto one = [&](Relation r) {
        try {
            return infer(text, r);
        } catch (const BackendError &e) {
            throw BackendError(fmt::format("{} {} inference failed: {}", side, to_string(r), e.what()));
        } catch (const PreconditionError &e) {
            throw PreconditionError(fmt::format("{} {} inference: {}", side, to_string(r), e.what()));
        }
    };
    InferencePair pair{one(a), one(b)};
    if (pair.first.backend_id != pair.second.backend_id)
        throw Error("inference pair mixes backends");
    return pair;
}

InferencePair KnowledgeService::user_bundle(const std::string &context_tail) {
    return bundle(context_tail, Relation::xWant, Relation::xReact, "user");
}

InferencePair KnowledgeService::sys_bundle(const std::string &response_text) {
    return bundle(response_text, Relation::xIntent, Relation::xReact, "sys");
}

} // namespace empcause::knowledge
