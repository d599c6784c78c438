#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "empcause/common/jsonl.hpp"
#include "empcause/common/parallel.hpp"
#include "empcause/common/transport.hpp"
#include "empcause/metrics.hpp"

namespace empcause::raters {

struct ServerConfig {
    std::string backend_id;
    std::string endpoint;
    RetryPolicy retry;
    std::size_t max_parallel = 4;
};

// ---- BERTScore ----------------------------------------------------------------

struct Prf {
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

/// Greedy-matching score over token embeddings: each candidate token is matched to
/// its most similar reference token (precision) and vice versa (recall).
Prf bertscore_from_embeddings(std::span<const std::vector<double>> candidate, std::span<const std::vector<double>> reference);

/// Produces one vector per token of a text.
class TokenEmbedder {
  public:
    virtual ~TokenEmbedder() = default;
    virtual const std::string &backend_id() const = 0;
    virtual std::vector<std::vector<double>> embed_tokens(const std::string &text) = 0;
};

/// POST {text} -> {"vectors": [[...], ...]} from a local encoder server.
class ServerTokenEmbedder final : public TokenEmbedder {
  public:
    ServerTokenEmbedder(ServerConfig config, std::shared_ptr<Transport> transport);
    const std::string &backend_id() const override { return config_.backend_id; }
    std::vector<std::vector<double>> embed_tokens(const std::string &text) override;

  private:
    ServerConfig config_;
    std::shared_ptr<Transport> transport_;
    Semaphore in_flight_;
};

/// Offline stand-in: every word token maps to a fixed pseudo-random unit vector
/// seeded by its hash. Matches are exact-token only, so scores track lexical overlap.
class HashedTokenEmbedder final : public TokenEmbedder {
  public:
    explicit HashedTokenEmbedder(std::size_t dim = 64);
    const std::string &backend_id() const override { return backend_id_; }
    std::vector<std::vector<double>> embed_tokens(const std::string &text) override;

  private:
    std::size_t dim_;
    std::string backend_id_;
};

class BertScorer {
  public:
    virtual ~BertScorer() = default;
    virtual const std::string &backend_id() const = 0;
    virtual Prf score(const std::string &candidate, const std::string &reference) = 0;
};

class EmbeddingBertScorer final : public BertScorer {
  public:
    explicit EmbeddingBertScorer(std::shared_ptr<TokenEmbedder> embedder) : embedder_(std::move(embedder)) {}
    const std::string &backend_id() const override { return embedder_->backend_id(); }
    Prf score(const std::string &candidate, const std::string &reference) override;

  private:
    std::shared_ptr<TokenEmbedder> embedder_;
};

/// Recorded scores from line-delimited {candidate, reference, p, r, f}. A pair that
/// was never recorded raises ReplayMissError.
class FixtureBertScorer final : public BertScorer {
  public:
    FixtureBertScorer(std::string backend_id, std::unordered_map<std::string, Prf> records);
    static std::unique_ptr<FixtureBertScorer> load(const std::filesystem::path &path, std::string backend_id);

    const std::string &backend_id() const override { return backend_id_; }
    Prf score(const std::string &candidate, const std::string &reference) override;

    static std::string key(const std::string &candidate, const std::string &reference);

  private:
    std::string backend_id_;
    std::unordered_map<std::string, Prf> records_;
};

struct BertScoreRecord {
    std::string candidate;
    std::string reference;
    Prf score;
};
void save_bertscore_fixture(const std::filesystem::path &path, std::span<const BertScoreRecord> records);

enum class BertTarget { reference, context };

/// Per-pair P/R/F and corpus means. With BertTarget::context the generated text is
/// compared against the dialogue context (coherence) instead of the reference.
/// Report ids are bertscore_{p,r,f} or coherence_{p,r,f}; values in [0, 1].
std::vector<metrics::MetricReport> bert_score(std::span<const metrics::ScoredPair> pairs, BertScorer &scorer,
                                              BertTarget target = BertTarget::reference, std::size_t max_parallel = 1);

// ---- Emotion accuracy -------------------------------------------------------------

class EmotionRater {
  public:
    virtual ~EmotionRater() = default;
    virtual const std::string &backend_id() const = 0;
    virtual std::string predict(const std::string &text) = 0;
};

/// Recorded predictions from line-delimited {text, label}.
class FixtureEmotionRater final : public EmotionRater {
  public:
    FixtureEmotionRater(std::string backend_id, std::unordered_map<std::string, std::string> labels);
    static std::unique_ptr<FixtureEmotionRater> load(const std::filesystem::path &path, std::string backend_id);
    const std::string &backend_id() const override { return backend_id_; }
    std::string predict(const std::string &text) override;

  private:
    std::string backend_id_;
    std::unordered_map<std::string, std::string> labels_;
};

/// POST {text} -> {"label": ...}.
class ServerEmotionRater final : public EmotionRater {
  public:
    ServerEmotionRater(ServerConfig config, std::shared_ptr<Transport> transport);
    const std::string &backend_id() const override { return config_.backend_id; }
    std::string predict(const std::string &text) override;

  private:
    ServerConfig config_;
    std::shared_ptr<Transport> transport_;
    Semaphore in_flight_;
};

struct LabeledResponse {
    std::string sample_id;
    std::string response;
    std::string gold_label;
};

/// Fraction of responses whose predicted emotion equals the gold label (scale 1).
metrics::MetricReport emoacc(std::span<const LabeledResponse> responses, EmotionRater &rater, std::size_t max_parallel = 1);

// ---- EPITOME --------------------------------------------------------------------

enum class Mechanism { interpretation, exploration, emotional_reaction };
inline constexpr std::array<Mechanism, 3> kMechanisms{Mechanism::interpretation, Mechanism::exploration,
                                                      Mechanism::emotional_reaction};
std::string_view short_name(Mechanism mechanism); // "ip", "ex", "er"

struct EpitomeRating {
    int ip = 0;
    int ex = 0;
    int er = 0;

    int get(Mechanism m) const;
};

/// One rater per mechanism; each returns an integer level for (seeker context, response).
class MechanismRater {
  public:
    virtual ~MechanismRater() = default;
    virtual const std::string &backend_id() const = 0;
    virtual int rate(const std::string &context, const std::string &response) = 0;
};

/// Recorded levels from line-delimited {text, ip, ex, er}; serves one mechanism.
class FixtureMechanismRater final : public MechanismRater {
  public:
    FixtureMechanismRater(std::string backend_id, Mechanism mechanism, std::unordered_map<std::string, int> levels);
    static std::unique_ptr<FixtureMechanismRater> load(const std::filesystem::path &path, std::string backend_id,
                                                       Mechanism mechanism);
    const std::string &backend_id() const override { return backend_id_; }
    int rate(const std::string &context, const std::string &response) override;

  private:
    std::string backend_id_;
    Mechanism mechanism_;
    std::unordered_map<std::string, int> levels_;
};

/// POST {context, response, mechanism} -> {"level": n}.
class ServerMechanismRater final : public MechanismRater {
  public:
    ServerMechanismRater(ServerConfig config, Mechanism mechanism, std::shared_ptr<Transport> transport);
    const std::string &backend_id() const override { return config_.backend_id; }
    int rate(const std::string &context, const std::string &response) override;

  private:
    ServerConfig config_;
    Mechanism mechanism_;
    std::shared_ptr<Transport> transport_;
    Semaphore in_flight_;
};

struct EpitomeRaters {
    std::shared_ptr<MechanismRater> ip;
    std::shared_ptr<MechanismRater> ex;
    std::shared_ptr<MechanismRater> er;

    MechanismRater &get(Mechanism m) const;
};

struct EpitomeFixtureRecord {
    std::string text;
    EpitomeRating rating;
};
void save_epitome_fixture(const std::filesystem::path &path, std::span<const EpitomeFixtureRecord> records);

/// Mean level per mechanism: reports epitome_ip, epitome_ex, epitome_er. Any level
/// outside {0, 1, 2} is rejected with a ValidationError naming the sample and rater.
std::vector<metrics::MetricReport> epitome(std::span<const metrics::ScoredPair> pairs, const EpitomeRaters &raters,
                                           std::size_t max_parallel = 1);

} // namespace empcause::raters
