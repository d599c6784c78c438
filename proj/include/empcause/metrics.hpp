#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "empcause/common/jsonl.hpp"

namespace empcause::metrics {

struct ScoredPair {
    std::string sample_id;
    std::string generated;
    std::string reference;
    std::string context; // used by coherence
};

json to_json(const ScoredPair &pair);
ScoredPair scored_pair_from_json(const json &j);
std::vector<ScoredPair> load_pairs(const std::filesystem::path &path);
void save_pairs(const std::filesystem::path &path, std::span<const ScoredPair> pairs);

/// How a report's corpus value is derived from its per-sample entries.
enum class Aggregation {
    mean,                   // arithmetic mean of per_sample values
    pooled_ngram_precision, // BLEU from summed per-sample n-gram statistics in `detail`
    pooled_distinct,        // unique / total over the n-grams listed in `detail`
    pooled_perplexity,      // exp(sum nll / sum tokens) over the {nll, tokens} entries in `detail`
};

std::string_view to_string(Aggregation aggregation);

struct MetricReport {
    std::string metric_id;
    double corpus_value = 0.0;
    std::vector<std::pair<std::string, double>> per_sample;
    json per_sample_detail = json::array(); // parallel to per_sample when the aggregation needs it
    Aggregation aggregation = Aggregation::mean;
    double scale = 1.0; // reported values are raw * scale
    std::string config_digest;
    json config = json::object();
};

json to_json(const MetricReport &report);
MetricReport metric_report_from_json(const json &j);

/// Recomputes corpus_value from the per-sample entries using the report's aggregation.
double recompute_corpus_value(const MetricReport &report);

/// Digest over every setting that influences a metric's number.
std::string config_digest(const json &config);

class StopwordList {
  public:
    StopwordList(std::string id, std::unordered_set<std::string> words) : id_(std::move(id)), words_(std::move(words)) {}
    static StopwordList load(const std::filesystem::path &path, std::string id);
    /// The shipped list ("en-v1").
    static StopwordList load_default();

    bool contains(const std::string &token) const { return words_.count(token) > 0; }
    const std::string &id() const { return id_; }
    std::size_t size() const { return words_.size(); }

  private:
    std::string id_;
    std::unordered_set<std::string> words_;
};

struct OverlapScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool degenerate = false; // a side was empty after stopword removal
};

/// Content tokens for overlap F1: word tokens minus punctuation and stopwords.
std::vector<std::string> content_tokens(std::string_view text, const StopwordList &stopwords);

/// Multiset word overlap between generated and reference after stopword removal.
OverlapScore overlap_f1(const std::string &generated, const std::string &reference, const StopwordList &stopwords);

/// Macro-averaged precision, recall and F1 reports (x100).
std::vector<MetricReport> overlap_f1_reports(std::span<const ScoredPair> pairs, const StopwordList &stopwords);

struct BleuStats {
    std::vector<std::size_t> matches; // clipped n-gram matches per order 1..n
    std::vector<std::size_t> totals;  // hypothesis n-grams per order 1..n
    std::size_t hypothesis_length = 0;
    std::size_t reference_length = 0;

    BleuStats &operator+=(const BleuStats &other);
};

BleuStats bleu_stats(std::span<const std::string> hypothesis, std::span<const std::string> reference, std::size_t max_order);

/// Corpus BLEU in [0, 1]: geometric mean of modified precisions with uniform weights
/// and the brevity penalty; any zero precision makes the score 0 (no smoothing).
double bleu_from_stats(const BleuStats &stats, std::size_t max_order);

/// Corpus-level BLEU-n over generated/reference pairs, reported x100.
double bleu_n(std::span<const ScoredPair> pairs, std::size_t n);
MetricReport bleu_report(std::span<const ScoredPair> pairs, std::size_t n);

/// Unique n-grams / total n-grams pooled over the responses, x100. n must be 1 or 2.
double distinct_n(std::span<const std::string> responses, std::size_t n);
MetricReport distinct_report(std::span<const ScoredPair> pairs, std::size_t n);

/// Corpus perplexity from per-sample teacher-forced (nll, tokens); per-sample values
/// are each sample's own perplexity.
MetricReport perplexity_report(std::vector<std::pair<std::string, std::pair<double, std::size_t>>> per_sample, json config);

/// Mean-aggregated report from per-sample values.
MetricReport mean_report(std::string metric_id, std::vector<std::pair<std::string, double>> per_sample, double scale, json config);

} // namespace empcause::metrics
