#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "empcause/common/jsonl.hpp"
#include "empcause/common/parallel.hpp"
#include "empcause/common/transport.hpp"
#include "empcause/content_cache.hpp"

namespace empcause::knowledge {

/// Commonsense relations consumed by the pipeline. Names serialize exactly as the
/// relation tags ("xWant", "xReact", "xIntent").
enum class Relation { xWant, xReact, xIntent };

std::string_view to_string(Relation relation);
Relation relation_from_string(std::string_view name);

struct InferenceSet {
    std::string source_text;
    Relation relation = Relation::xWant;
    std::vector<std::string> phrases;
    std::string backend_id;
    json decode_params = json::object();

    bool operator==(const InferenceSet &) const = default;
};

json to_json(const InferenceSet &set);
InferenceSet inference_set_from_json(const json &record);

inline constexpr std::size_t kDefaultMaxPhrases = 5;

/// Cache/fixture key normalization: trim and collapse internal whitespace.
std::string normalize_text(std::string_view text);

/// Trims each phrase, strips terminal periods, drops empties, removes case-insensitive
/// duplicates keeping the first spelling, and truncates to max_phrases.
std::vector<std::string> normalize_phrases(std::span<const std::string> raw, std::size_t max_phrases);

/// Content hash of (normalized text, relation, backend_id, decode_params).
std::string inference_key(std::string_view text, Relation relation, std::string_view backend_id, const json &decode_params);

enum class BackendKind { model_server, fixture };

/// The commonsense generator: given an event text and a relation, emits short phrases.
class KnowledgeBackend {
  public:
    virtual ~KnowledgeBackend() = default;
    virtual const std::string &backend_id() const = 0;
    virtual BackendKind kind() const = 0;
    virtual const json &decode_params() const = 0;
    /// Raw phrases, before normalization. Throws BackendError on failure.
    virtual std::vector<std::string> query(const std::string &text, Relation relation, std::size_t max_phrases) = 0;
};

/// Replays recorded inferences from a line-delimited JSON file of
/// {key, source_text, relation, phrases, backend_id}. Never touches the network.
class FixtureKnowledgeBackend final : public KnowledgeBackend {
  public:
    FixtureKnowledgeBackend(std::string backend_id, std::vector<InferenceSet> records);
    static std::unique_ptr<FixtureKnowledgeBackend> load(const std::filesystem::path &path, std::string backend_id = {});

    const std::string &backend_id() const override { return backend_id_; }
    BackendKind kind() const override { return BackendKind::fixture; }
    const json &decode_params() const override { return decode_params_; }
    std::vector<std::string> query(const std::string &text, Relation relation, std::size_t max_phrases) override;

    std::size_t size() const { return records_.size(); }

  private:
    std::string backend_id_;
    json decode_params_ = json::object();
    std::unordered_map<std::string, std::vector<std::string>> records_;
};

/// Writes fixture records in the format FixtureKnowledgeBackend reads.
void save_fixture(const std::filesystem::path &path, std::span<const InferenceSet> sets);

struct ModelServerConfig {
    std::string backend_id;
    std::string endpoint; // e.g. http://127.0.0.1:8500/infer
    json decode_params = json::object();
    RetryPolicy retry;
    std::size_t max_parallel = 4;
};

/// Queries a local inference server: POST {text, relation, max_phrases} and expects
/// {"phrases": [...]}.
class ModelServerKnowledgeBackend final : public KnowledgeBackend {
  public:
    ModelServerKnowledgeBackend(ModelServerConfig config, std::shared_ptr<Transport> transport);

    const std::string &backend_id() const override { return config_.backend_id; }
    BackendKind kind() const override { return BackendKind::model_server; }
    const json &decode_params() const override { return config_.decode_params; }
    std::vector<std::string> query(const std::string &text, Relation relation, std::size_t max_phrases) override;

  private:
    ModelServerConfig config_;
    std::shared_ptr<Transport> transport_;
    Semaphore in_flight_;
};

/// Typed view over a ContentCache for InferenceSets.
class InferenceCache {
  public:
    explicit InferenceCache(std::shared_ptr<ContentCache> store) : store_(std::move(store)) {}
    std::optional<InferenceSet> get(const std::string &key) const;
    void put(const std::string &key, const InferenceSet &set);

  private:
    std::shared_ptr<ContentCache> store_;
};

struct InferencePair {
    InferenceSet first;
    InferenceSet second;
};

/// Cached access to a knowledge backend.
class KnowledgeService {
  public:
    KnowledgeService(std::shared_ptr<KnowledgeBackend> backend, std::shared_ptr<ContentCache> cache,
                     std::size_t max_phrases = kDefaultMaxPhrases);

    /// Normalized, truncated inferences for (text, relation). Served from the cache
    /// when present; otherwise the backend is queried and the result cached. Empty
    /// backend output is an error, never an empty set.
    InferenceSet infer(const std::string &text, Relation relation, std::optional<std::size_t> max_phrases = std::nullopt);

    /// (xWant, xReact) for the user's final utterance.
    InferencePair user_bundle(const std::string &context_tail);
    /// (xIntent, xReact) for a ground-truth sys response.
    InferencePair sys_bundle(const std::string &response_text);

    const KnowledgeBackend &backend() const { return *backend_; }
    std::size_t backend_queries() const { return backend_queries_.load(); }

  private:
    InferencePair bundle(const std::string &text, Relation a, Relation b, std::string_view side);

    std::shared_ptr<KnowledgeBackend> backend_;
    InferenceCache cache_;
    std::size_t max_phrases_;
    std::atomic<std::size_t> backend_queries_{0};
};

} // namespace empcause::knowledge
