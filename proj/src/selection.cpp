#include "empcause/selection.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/error.hpp"
#include "empcause/common/hash.hpp"
#include "empcause/common/text.hpp"

namespace empcause::selection {

namespace fs = std::filesystem;

FixtureEmbedder::FixtureEmbedder(std::string backend_id, std::size_t dim, std::unordered_map<std::string, std::vector<double>> vectors)
    : backend_id_(std::move(backend_id)), dim_(dim), vectors_(std::move(vectors)) {}

std::unique_ptr<FixtureEmbedder> FixtureEmbedder::load(const fs::path &path, std::string backend_id) {
    std::unordered_map<std::string, std::vector<double>> vectors;
    std::size_t dim = 0;
    for (const auto &line : read_jsonl(path)) {
        try {
            auto vec = line.value.at("vector").get<std::vector<double>>();
            if (dim == 0)
                dim = vec.size();
            if (vec.size() != dim)
                throw ValidationError(fmt::format("{}:{}: vector has dim {}, expected {}", path.string(), line.line, vec.size(), dim));
            vectors[text::collapse_whitespace(line.value.at("text").get<std::string>())] = std::move(vec);
        } catch (const json::exception &e) {
            throw ValidationError(fmt::format("{}:{}: malformed embedding record: {}", path.string(), line.line, e.what()));
        }
    }
    if (backend_id.empty())
        backend_id = "fixture:" + path.filename().string();
    return std::make_unique<FixtureEmbedder>(std::move(backend_id), dim, std::move(vectors));
}

std::vector<double> FixtureEmbedder::compute(const std::string &text) {
    auto it = vectors_.find(text::collapse_whitespace(text));
    if (it == vectors_.end())
        throw BackendError(fmt::format("embedding fixture '{}' has no vector for \"{}\"", backend_id_, text));
    return it->second;
}

void save_embedding_fixture(const fs::path &path, const std::vector<std::pair<std::string, Embedding>> &records) {
    std::vector<json> lines;
    for (const auto &[text, e] : records)
        lines.push_back({{"text", text}, {"vector", e.values}});
    write_jsonl(path, lines);
}

ServerEmbedder::ServerEmbedder(EmbeddingServerConfig config, std::shared_ptr<Transport> transport)
    : config_(std::move(config)), transport_(std::move(transport)), in_flight_(config_.max_parallel) {
    if (config_.dim == 0)
        throw PreconditionError("embedding server backend must declare its dimension");
    if (config_.backend_id.empty())
        config_.backend_id = "embed_server:" + config_.endpoint;
}

std::vector<double> ServerEmbedder::compute(const std::string &text) {
    HttpRequest request{config_.endpoint, json{{"text", text}}.dump(), {}, std::chrono::milliseconds(60000)};
    SemaphoreGuard guard(in_flight_);
    HttpResponse response;
    try {
        response = post_with_retries(*transport_, request, config_.retry).first;
    } catch (const TransportError &e) {
        throw BackendError(fmt::format("embedder '{}' unreachable: {}", config_.backend_id, e.what()));
    }
    if (response.status != 200)
        throw BackendError(fmt::format("embedder '{}' returned HTTP {}", config_.backend_id, response.status));
    try {
        return json::parse(response.body).at("vector").get<std::vector<double>>();
    } catch (const json::exception &e) {
        throw BackendError(fmt::format("embedder '{}' sent a malformed reply: {}", config_.backend_id, e.what()));
    }
}

HashingEmbedder::HashingEmbedder(std::size_t dim) : dim_(dim), backend_id_(fmt::format("hashed-bow-v1-d{}", dim)) {
    if (dim_ == 0)
        throw PreconditionError("hashing embedder needs a positive dimension");
}

std::vector<double> HashingEmbedder::compute(const std::string &text) {
    std::vector<double> v(dim_, 0.0);
    for (const auto &token : text::word_tokens(text)) {
        if (text::is_punctuation_token(token))
            continue;
        std::uint64_t h = 1469598103934665603ULL; // FNV-1a
        for (unsigned char c : token) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        v[h % dim_] += (h >> 63) ? -1.0 : 1.0;
    }
    return v;
}

Embedding embed(const std::string &input, Embedder &embedder, ContentCache *cache) {
    std::string text = text::collapse_whitespace(input);
    if (text.empty())
        throw PreconditionError("cannot embed empty text");
    std::string key = sha256_hex(canonical_dump(json{{"embedder", embedder.backend_id()}, {"text", text}}));
    if (cache) {
        if (auto hit = cache->get(key)) {
            auto values = hit->get<std::vector<double>>();
            if (values.size() == embedder.dim())
                return {std::move(values)};
        }
    }
    Embedding e{embedder.compute(text)};
    if (e.dim() != embedder.dim())
        throw BackendError(fmt::format("embedder '{}' returned dim {}, declared {}", embedder.backend_id(), e.dim(), embedder.dim()));
    if (!std::all_of(e.values.begin(), e.values.end(), [](double x) { return std::isfinite(x); }))
        throw BackendError(fmt::format("embedder '{}' returned a non-finite value", embedder.backend_id()));
    if (cache)
        cache->put(key, e.values);
    return e;
}

namespace {

double dot(const std::vector<double> &a, const std::vector<double> &b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a[i] * b[i];
    return s;
}

double l2(const std::vector<double> &a) { return std::sqrt(dot(a, a)); }

double cosine_with_norms(const std::vector<double> &a, double na, const std::vector<double> &b, double nb) {
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

} // namespace

double cosine(const Embedding &a, const Embedding &b) {
    if (a.dim() != b.dim())
        throw PreconditionError(fmt::format("cosine of vectors with dims {} and {}", a.dim(), b.dim()));
    double na = l2(a.values), nb = l2(b.values);
    if (na == 0.0 || nb == 0.0)
        throw PreconditionError("cosine similarity is undefined for a zero vector");
    return cosine_with_norms(a.values, na, b.values, nb);
}

json to_json(const RankedCandidates &r) {
    json entries = json::array();
    for (const auto &e : r.entries)
        entries.push_back({{"conversation_id", e.conversation_id}, {"similarity", e.similarity}});
    return {{"query_id", r.query_id}, {"k", r.k}, {"clamped", r.clamped}, {"entries", entries}};
}

RankedCandidates ranked_from_json(const json &j) {
    RankedCandidates r;
    r.query_id = j.at("query_id").get<std::string>();
    r.k = j.at("k").get<std::size_t>();
    r.clamped = j.value("clamped", false);
    for (const auto &e : j.at("entries"))
        r.entries.push_back({e.at("conversation_id").get<std::string>(), e.at("similarity").get<double>()});
    return r;
}

void EmbeddingIndex::add(std::string id, Embedding vector) {
    if (vector.dim() != dim_)
        throw PreconditionError(fmt::format("index '{}' expects dim {}, got {}", backend_id_, dim_, vector.dim()));
    double n = l2(vector.values);
    if (n == 0.0)
        throw PreconditionError(fmt::format("embedding for '{}' is the zero vector", id));
    ids_.push_back(std::move(id));
    vectors_.push_back(std::move(vector));
    norms_.push_back(n);
}

namespace {

static_assert(std::endian::native == std::endian::little, "index I/O assumes a little-endian host");

constexpr char kMagic[8] = {'E', 'M', 'P', 'I', 'D', 'X', '0', '1'};

template <class T>
void put(std::string &out, T value) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));
}

void put_string(std::string &out, const std::string &s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

struct Reader {
    const std::string &data;
    std::size_t pos = 0;

    template <class T>
    T get() {
        if (pos + sizeof(T) > data.size())
            throw ValidationError("embedding index is truncated");
        T value;
        std::memcpy(&value, data.data() + pos, sizeof(T));
        pos += sizeof(T);
        return value;
    }
    std::string get_string() {
        auto n = get<std::uint32_t>();
        if (pos + n > data.size())
            throw ValidationError("embedding index is truncated");
        std::string s = data.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace

void EmbeddingIndex::save(const fs::path &path) const {
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
    put<std::uint64_t>(out, ids_.size());
    put_string(out, backend_id_);
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        put_string(out, ids_[i]);
        for (double x : vectors_[i].values)
            put<double>(out, x);
    }
    write_file_atomic(path, out);
}

EmbeddingIndex EmbeddingIndex::load(const fs::path &path) {
    std::string data = read_file(path);
    if (data.size() < sizeof(kMagic) || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0)
        throw ValidationError(fmt::format("'{}' is not an embedding index", path.string()));
    Reader r{data, sizeof(kMagic)};
    auto dim = r.get<std::uint32_t>();
    auto count = r.get<std::uint64_t>();
    EmbeddingIndex index(r.get_string(), dim);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string id = r.get_string();
        Embedding e;
        e.values.resize(dim);
        for (auto &x : e.values)
            x = r.get<double>();
        index.add(std::move(id), std::move(e));
    }
    if (r.pos != data.size())
        throw ValidationError(fmt::format("'{}' has trailing bytes", path.string()));
    return index;
}

std::string selection_text(const corpus::Conversation &c, const IndexOptions &options) {
    if (options.use_full_context)
        return corpus::render_turns(c.utterances, "", " ");
    if (text::trim(c.situation).empty())
        throw PreconditionError(fmt::format("conversation '{}' has no situation annotation to embed", c.id));
    return c.situation;
}

EmbeddingIndex build_index(std::span<const corpus::Conversation> train, Embedder &embedder, ContentCache *cache,
                           const IndexOptions &options) {
    std::vector<Embedding> vectors(train.size());
    parallel_for(train.size(), options.max_parallel,
                 [&](std::size_t i) { vectors[i] = embed(selection_text(train[i], options), embedder, cache); });
    EmbeddingIndex index(embedder.backend_id(), embedder.dim());
    for (std::size_t i = 0; i < train.size(); ++i)
        index.add(train[i].id, std::move(vectors[i]));
    return index;
}

RankedCandidates top_k(const std::string &query_id, const Embedding &query, const EmbeddingIndex &index, std::size_t k) {
    if (k < 1)
        throw PreconditionError("top_k needs k >= 1");
    if (index.empty())
        throw PreconditionError("top_k over an empty index");
    if (query.dim() != index.dim())
        throw PreconditionError(fmt::format("query dim {} does not match index dim {}", query.dim(), index.dim()));
    double qn = l2(query.values);
    if (qn == 0.0)
        throw PreconditionError("query embedding is the zero vector");

    std::vector<RankedEntry> all(index.size());
    for (std::size_t i = 0; i < index.size(); ++i)
        all[i] = {index.id(i), cosine_with_norms(query.values, qn, index.vector(i).values, index.norm(i))};

    RankedCandidates out;
    out.query_id = query_id;
    out.k = k;
    std::size_t take = k;
    if (k > all.size()) {
        spdlog::warn("top_k: k={} exceeds the {} indexed candidates; clamping", k, all.size());
        out.clamped = true;
        take = all.size();
    }
    auto better = [](const RankedEntry &a, const RankedEntry &b) {
        if (a.similarity != b.similarity)
            return a.similarity > b.similarity;
        return a.conversation_id < b.conversation_id;
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), better);
    all.resize(take);
    out.entries = std::move(all);
    return out;
}

} // namespace empcause::selection
