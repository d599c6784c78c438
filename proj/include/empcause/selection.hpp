#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "empcause/common/jsonl.hpp"
#include "empcause/common/parallel.hpp"
#include "empcause/common/transport.hpp"
#include "empcause/content_cache.hpp"
#include "empcause/corpus.hpp"

namespace empcause::selection {

struct Embedding {
    std::vector<double> values;

    std::size_t dim() const { return values.size(); }
    bool operator==(const Embedding &) const = default;
};

/// Sentence encoder used to compare situations.
class Embedder {
  public:
    virtual ~Embedder() = default;
    virtual const std::string &backend_id() const = 0;
    virtual std::size_t dim() const = 0;
    virtual std::vector<double> compute(const std::string &text) = 0;
};

/// Recorded vectors from a line-delimited JSON file of {text, vector}.
class FixtureEmbedder final : public Embedder {
  public:
    FixtureEmbedder(std::string backend_id, std::size_t dim, std::unordered_map<std::string, std::vector<double>> vectors);
    static std::unique_ptr<FixtureEmbedder> load(const std::filesystem::path &path, std::string backend_id);

    const std::string &backend_id() const override { return backend_id_; }
    std::size_t dim() const override { return dim_; }
    std::vector<double> compute(const std::string &text) override;

  private:
    std::string backend_id_;
    std::size_t dim_;
    std::unordered_map<std::string, std::vector<double>> vectors_;
};

void save_embedding_fixture(const std::filesystem::path &path, const std::vector<std::pair<std::string, Embedding>> &records);

struct EmbeddingServerConfig {
    std::string backend_id;
    std::string endpoint; // POST {text} -> {vector}
    std::size_t dim = 0;
    RetryPolicy retry;
    std::size_t max_parallel = 4;
};

class ServerEmbedder final : public Embedder {
  public:
    ServerEmbedder(EmbeddingServerConfig config, std::shared_ptr<Transport> transport);

    const std::string &backend_id() const override { return config_.backend_id; }
    std::size_t dim() const override { return config_.dim; }
    std::vector<double> compute(const std::string &text) override;

  private:
    EmbeddingServerConfig config_;
    std::shared_ptr<Transport> transport_;
    Semaphore in_flight_;
};

/// Offline bag-of-words encoder: each lowercased token is hashed into a signed
/// bucket. Deterministic and dependency free, but carries no learned semantics.
class HashingEmbedder final : public Embedder {
  public:
    explicit HashingEmbedder(std::size_t dim = 256);

    const std::string &backend_id() const override { return backend_id_; }
    std::size_t dim() const override { return dim_; }
    std::vector<double> compute(const std::string &text) override;

  private:
    std::size_t dim_;
    std::string backend_id_;
};

/// Validated, cached embedding of a non-empty text. The cache key covers
/// (backend_id, normalized text).
Embedding embed(const std::string &text, Embedder &embedder, ContentCache *cache = nullptr);

/// Cosine similarity clamped to [-1, 1]. Throws on dimension mismatch or a zero vector.
double cosine(const Embedding &a, const Embedding &b);

struct RankedEntry {
    std::string conversation_id;
    double similarity = 0.0;

    bool operator==(const RankedEntry &) const = default;
};

struct RankedCandidates {
    std::string query_id;
    std::size_t k = 0; // as requested
    std::vector<RankedEntry> entries;
    bool clamped = false;
};

json to_json(const RankedCandidates &ranked);
RankedCandidates ranked_from_json(const json &record);

/// Precomputed situation embeddings of the training conversations.
///
/// Binary layout (little-endian): magic "EMPIDX01", u32 dim, u64 count,
/// u32 backend-id length + bytes, then per record u32 id length + bytes followed by
/// dim float64 values.
class EmbeddingIndex {
  public:
    EmbeddingIndex() = default;
    EmbeddingIndex(std::string backend_id, std::size_t dim) : backend_id_(std::move(backend_id)), dim_(dim) {}

    void add(std::string id, Embedding vector);

    const std::string &backend_id() const { return backend_id_; }
    std::size_t dim() const { return dim_; }
    std::size_t size() const { return ids_.size(); }
    bool empty() const { return ids_.empty(); }
    const std::string &id(std::size_t i) const { return ids_[i]; }
    const Embedding &vector(std::size_t i) const { return vectors_[i]; }
    double norm(std::size_t i) const { return norms_[i]; }

    void save(const std::filesystem::path &path) const;
    static EmbeddingIndex load(const std::filesystem::path &path);

  private:
    std::string backend_id_;
    std::size_t dim_ = 0;
    std::vector<std::string> ids_;
    std::vector<Embedding> vectors_;
    std::vector<double> norms_;
};

struct IndexOptions {
    /// Embed the rendered dialogue instead of the situation annotation.
    bool use_full_context = false;
    std::size_t max_parallel = 4;
};

std::string selection_text(const corpus::Conversation &conversation, const IndexOptions &options);

EmbeddingIndex build_index(std::span<const corpus::Conversation> train, Embedder &embedder, ContentCache *cache = nullptr,
                           const IndexOptions &options = {});

/// Exact top-k by cosine similarity: descending similarity, ties by ascending id.
/// k larger than the index is clamped with a warning.
RankedCandidates top_k(const std::string &query_id, const Embedding &query, const EmbeddingIndex &index, std::size_t k);

} // namespace empcause::selection
