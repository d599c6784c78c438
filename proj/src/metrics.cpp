#include "empcause/metrics.hpp"

#include <cmath>
#include <numeric>
#include <unordered_map>

#include <fmt/format.h>

#include "empcause/common/error.hpp"
#include "empcause/common/hash.hpp"
#include "empcause/common/text.hpp"
#include "empcause/prompting.hpp"

namespace empcause::metrics {

namespace fs = std::filesystem;

json to_json(const ScoredPair &p) {
    return {{"sample_id", p.sample_id}, {"generated", p.generated}, {"reference", p.reference}, {"context", p.context}};
}

ScoredPair scored_pair_from_json(const json &j) {
    ScoredPair p{j.at("sample_id").get<std::string>(), j.at("generated").get<std::string>(), j.at("reference").get<std::string>(),
                 j.value("context", std::string{})};
    if (text::trim(p.generated).empty() || text::trim(p.reference).empty())
        throw ValidationError(fmt::format("pair '{}' has an empty generated or reference text", p.sample_id));
    return p;
}

std::vector<ScoredPair> load_pairs(const fs::path &path) {
    std::vector<ScoredPair> out;
    for (const auto &line : read_jsonl(path)) {
        try {
            out.push_back(scored_pair_from_json(line.value));
        } catch (const json::exception &e) {
            throw ValidationError(fmt::format("{}:{}: malformed pair: {}", path.string(), line.line, e.what()));
        } catch (const ValidationError &e) {
            throw ValidationError(fmt::format("{}:{}: {}", path.string(), line.line, e.what()));
        }
    }
    return out;
}

void save_pairs(const fs::path &path, std::span<const ScoredPair> pairs) {
    std::vector<json> lines;
    for (const auto &p : pairs)
        lines.push_back(to_json(p));
    write_jsonl(path, lines);
}

std::string_view to_string(Aggregation a) {
    switch (a) {
    case Aggregation::mean:
        return "mean";
    case Aggregation::pooled_ngram_precision:
        return "pooled_ngram_precision";
    case Aggregation::pooled_distinct:
        return "pooled_distinct";
    case Aggregation::pooled_perplexity:
        return "pooled_perplexity";
    }
    return "?";
}

namespace {

Aggregation aggregation_from_string(std::string_view s) {
    for (auto a : {Aggregation::mean, Aggregation::pooled_ngram_precision, Aggregation::pooled_distinct,
                   Aggregation::pooled_perplexity})
        if (to_string(a) == s)
            return a;
    throw ValidationError(fmt::format("unknown aggregation '{}'", s));
}

} // namespace

json to_json(const MetricReport &r) {
    json per_sample = json::array();
    for (const auto &[id, v] : r.per_sample)
        per_sample.push_back({{"sample_id", id}, {"value", v}});
    return {{"metric_id", r.metric_id},
            {"corpus_value", r.corpus_value},
            {"aggregation", to_string(r.aggregation)},
            {"scale", r.scale},
            {"config_digest", r.config_digest},
            {"config", r.config},
            {"per_sample", per_sample},
            {"per_sample_detail", r.per_sample_detail}};
}

MetricReport metric_report_from_json(const json &j) {
    MetricReport r;
    r.metric_id = j.at("metric_id").get<std::string>();
    r.corpus_value = j.at("corpus_value").get<double>();
    r.aggregation = aggregation_from_string(j.at("aggregation").get<std::string>());
    r.scale = j.value("scale", 1.0);
    r.config_digest = j.value("config_digest", std::string{});
    r.config = j.value("config", json::object());
    for (const auto &e : j.at("per_sample"))
        r.per_sample.emplace_back(e.at("sample_id").get<std::string>(), e.at("value").get<double>());
    r.per_sample_detail = j.value("per_sample_detail", json::array());
    return r;
}

std::string config_digest(const json &config) { return sha256_hex(canonical_dump(config)).substr(0, 16); }

StopwordList StopwordList::load(const fs::path &path, std::string id) {
    std::unordered_set<std::string> words;
    for (const auto &line : text::split(read_file(path), "\n")) {
        std::string w = text::trim(line);
        if (!w.empty() && w[0] != '#')
            words.insert(text::to_lower(w));
    }
    return {std::move(id), std::move(words)};
}

StopwordList StopwordList::load_default() { return load(prompting::asset_dir() / "stopwords" / "en-v1.txt", "en-v1"); }

std::vector<std::string> content_tokens(std::string_view s, const StopwordList &stopwords) {
    std::vector<std::string> out;
    for (auto &t : text::word_tokens(s))
        if (!text::is_punctuation_token(t) && !stopwords.contains(t))
            out.push_back(std::move(t));
    return out;
}

OverlapScore overlap_f1(const std::string &generated, const std::string &reference, const StopwordList &stopwords) {
    auto gen = content_tokens(generated, stopwords);
    auto ref = content_tokens(reference, stopwords);
    OverlapScore s;
    if (gen.empty() || ref.empty()) {
        s.degenerate = true;
        return s;
    }
    std::unordered_map<std::string, long> ref_counts;
    for (const auto &t : ref)
        ++ref_counts[t];
    long common = 0;
    for (const auto &t : gen) {
        auto it = ref_counts.find(t);
        if (it != ref_counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0)
        return s;
    s.precision = static_cast<double>(common) / static_cast<double>(gen.size());
    s.recall = static_cast<double>(common) / static_cast<double>(ref.size());
    s.f1 = 2 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

namespace {

json text_config(std::string metric) {
    return {{"metric", std::move(metric)}, {"tokenizer", text::kTokenizerId}};
}

void finalize(MetricReport &r) { r.config_digest = config_digest(r.config); }

} // namespace

MetricReport mean_report(std::string metric_id, std::vector<std::pair<std::string, double>> per_sample, double scale, json config) {
    MetricReport r;
    r.metric_id = std::move(metric_id);
    r.per_sample = std::move(per_sample);
    r.scale = scale;
    r.aggregation = Aggregation::mean;
    r.config = std::move(config);
    r.config["scale"] = scale;
    r.corpus_value = recompute_corpus_value(r);
    finalize(r);
    return r;
}

std::vector<MetricReport> overlap_f1_reports(std::span<const ScoredPair> pairs, const StopwordList &stopwords) {
    if (pairs.empty())
        throw PreconditionError("overlap F1 over an empty corpus");
    std::vector<std::pair<std::string, double>> p, r, f;
    json flags = json::array();
    for (const auto &pair : pairs) {
        auto s = overlap_f1(pair.generated, pair.reference, stopwords);
        p.emplace_back(pair.sample_id, 100.0 * s.precision);
        r.emplace_back(pair.sample_id, 100.0 * s.recall);
        f.emplace_back(pair.sample_id, 100.0 * s.f1);
        if (s.degenerate)
            flags.push_back(pair.sample_id);
    }
    json config = text_config("overlap_f1");
    config["stopwords"] = stopwords.id();
    config["punctuation"] = "dropped";
    std::vector<MetricReport> out;
    out.push_back(mean_report("f1_precision", std::move(p), 100.0, config));
    out.push_back(mean_report("f1_recall", std::move(r), 100.0, config));
    out.push_back(mean_report("f1", std::move(f), 100.0, config));
    for (auto &report : out)
        report.config["degenerate_samples"] = flags;
    return out;
}

namespace {

using NgramCounts = std::unordered_map<std::string, std::size_t>;

std::string ngram_key(std::span<const std::string> tokens, std::size_t start, std::size_t n) {
    std::string key;
    for (std::size_t i = 0; i < n; ++i) {
        if (i)
            key += '\x1f';
        key += tokens[start + i];
    }
    return key;
}

NgramCounts count_ngrams(std::span<const std::string> tokens, std::size_t n) {
    NgramCounts counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i)
        ++counts[ngram_key(tokens, i, n)];
    return counts;
}

} // namespace

BleuStats &BleuStats::operator+=(const BleuStats &o) {
    if (matches.size() < o.matches.size()) {
        matches.resize(o.matches.size(), 0);
        totals.resize(o.totals.size(), 0);
    }
    for (std::size_t i = 0; i < o.matches.size(); ++i) {
        matches[i] += o.matches[i];
        totals[i] += o.totals[i];
    }
    hypothesis_length += o.hypothesis_length;
    reference_length += o.reference_length;
    return *this;
}

BleuStats bleu_stats(std::span<const std::string> hyp, std::span<const std::string> ref, std::size_t max_order) {
    BleuStats s;
    s.matches.assign(max_order, 0);
    s.totals.assign(max_order, 0);
    s.hypothesis_length = hyp.size();
    s.reference_length = ref.size();
    for (std::size_t n = 1; n <= max_order; ++n) {
        auto hyp_counts = count_ngrams(hyp, n);
        auto ref_counts = count_ngrams(ref, n);
        for (const auto &[gram, count] : hyp_counts) {
            s.totals[n - 1] += count;
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end())
                s.matches[n - 1] += std::min(count, it->second);
        }
    }
    return s;
}

double bleu_from_stats(const BleuStats &s, std::size_t max_order) {
    if (max_order == 0 || s.matches.size() < max_order)
        throw PreconditionError("BLEU statistics do not cover the requested order");
    if (s.hypothesis_length == 0)
        return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 0; n < max_order; ++n) {
        if (s.matches[n] == 0 || s.totals[n] == 0)
            return 0.0;
        log_sum += std::log(static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]));
    }
    double c = static_cast<double>(s.hypothesis_length), r = static_cast<double>(s.reference_length);
    double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
    return bp * std::exp(log_sum / static_cast<double>(max_order));
}

namespace {

json stats_json(const BleuStats &s) {
    return {{"matches", s.matches}, {"totals", s.totals}, {"hyp_len", s.hypothesis_length}, {"ref_len", s.reference_length}};
}

BleuStats stats_from_json(const json &j) {
    BleuStats s;
    s.matches = j.at("matches").get<std::vector<std::size_t>>();
    s.totals = j.at("totals").get<std::vector<std::size_t>>();
    s.hypothesis_length = j.at("hyp_len").get<std::size_t>();
    s.reference_length = j.at("ref_len").get<std::size_t>();
    return s;
}

} // namespace

MetricReport bleu_report(std::span<const ScoredPair> pairs, std::size_t n) {
    if (n < 1)
        throw PreconditionError("BLEU order must be at least 1");
    if (pairs.empty())
        throw PreconditionError("BLEU over an empty corpus");
    MetricReport r;
    r.metric_id = fmt::format("bleu{}", n);
    r.aggregation = Aggregation::pooled_ngram_precision;
    r.scale = 100.0;
    BleuStats total;
    total.matches.assign(n, 0);
    total.totals.assign(n, 0);
    for (const auto &p : pairs) {
        auto hyp = text::word_tokens(p.generated);
        auto ref = text::word_tokens(p.reference);
        auto s = bleu_stats(hyp, ref, n);
        total += s;
        r.per_sample.emplace_back(p.sample_id, 100.0 * bleu_from_stats(s, n));
        r.per_sample_detail.push_back(stats_json(s));
    }
    r.corpus_value = 100.0 * bleu_from_stats(total, n);
    r.config = text_config("bleu");
    r.config["order"] = n;
    r.config["smoothing"] = "none";
    r.config["scale"] = 100.0;
    finalize(r);
    return r;
}

double bleu_n(std::span<const ScoredPair> pairs, std::size_t n) { return bleu_report(pairs, n).corpus_value; }

namespace {

void check_distinct_order(std::size_t n) {
    if (n != 1 && n != 2)
        throw PreconditionError(fmt::format("distinct-n supports n = 1 or 2, got {}", n));
}

} // namespace

double distinct_n(std::span<const std::string> responses, std::size_t n) {
    check_distinct_order(n);
    if (responses.empty())
        throw PreconditionError("distinct-n over an empty response set");
    std::unordered_set<std::string> unique;
    std::size_t total = 0;
    for (const auto &response : responses) {
        auto tokens = text::word_tokens(response);
        for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
            unique.insert(ngram_key(tokens, i, n));
            ++total;
        }
    }
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(unique.size()) / static_cast<double>(total);
}

MetricReport distinct_report(std::span<const ScoredPair> pairs, std::size_t n) {
    check_distinct_order(n);
    if (pairs.empty())
        throw PreconditionError("distinct-n over an empty response set");
    MetricReport r;
    r.metric_id = fmt::format("distinct{}", n);
    r.aggregation = Aggregation::pooled_distinct;
    r.scale = 100.0;
    std::vector<std::string> responses;
    for (const auto &p : pairs) {
        responses.push_back(p.generated);
        auto tokens = text::word_tokens(p.generated);
        json grams = json::array();
        for (std::size_t i = 0; i + n <= tokens.size(); ++i)
            grams.push_back(ngram_key(tokens, i, n));
        r.per_sample.emplace_back(p.sample_id, distinct_n(std::span(&p.generated, 1), n));
        r.per_sample_detail.push_back({{"ngrams", grams}});
    }
    r.corpus_value = distinct_n(responses, n);
    r.config = text_config("distinct");
    r.config["order"] = n;
    r.config["scale"] = 100.0;
    finalize(r);
    return r;
}

double recompute_corpus_value(const MetricReport &r) {
    switch (r.aggregation) {
    case Aggregation::mean: {
        if (r.per_sample.empty())
            throw PreconditionError(fmt::format("report '{}' has no per-sample values", r.metric_id));
        double sum = 0.0;
        for (const auto &[id, v] : r.per_sample)
            sum += v;
        return sum / static_cast<double>(r.per_sample.size());
    }
    case Aggregation::pooled_ngram_precision: {
        std::size_t order = r.config.at("order").get<std::size_t>();
        BleuStats total;
        total.matches.assign(order, 0);
        total.totals.assign(order, 0);
        for (const auto &d : r.per_sample_detail)
            total += stats_from_json(d);
        return r.scale * bleu_from_stats(total, order);
    }
    case Aggregation::pooled_distinct: {
        std::unordered_set<std::string> unique;
        std::size_t total = 0;
        for (const auto &d : r.per_sample_detail) {
            for (const auto &g : d.at("ngrams")) {
                unique.insert(g.get<std::string>());
                ++total;
            }
        }
        return total == 0 ? 0.0 : r.scale * static_cast<double>(unique.size()) / static_cast<double>(total);
    }
    case Aggregation::pooled_perplexity: {
        double nll = 0.0;
        std::size_t tokens = 0;
        for (const auto &d : r.per_sample_detail) {
            nll += d.at("nll").get<double>();
            tokens += d.at("tokens").get<std::size_t>();
        }
        if (tokens == 0)
            throw PreconditionError(fmt::format("report '{}' scores no tokens", r.metric_id));
        return r.scale * std::exp(nll / static_cast<double>(tokens));
    }
    }
    return 0.0;
}

MetricReport perplexity_report(std::vector<std::pair<std::string, std::pair<double, std::size_t>>> per_sample, json config) {
    MetricReport r;
    r.metric_id = "ppl";
    r.aggregation = Aggregation::pooled_perplexity;
    r.per_sample_detail = json::array();
    for (auto &[id, s] : per_sample) {
        if (s.second == 0)
            throw PreconditionError(fmt::format("sample '{}' has no scored tokens", id));
        r.per_sample.emplace_back(id, std::exp(s.first / static_cast<double>(s.second)));
        r.per_sample_detail.push_back({{"nll", s.first}, {"tokens", s.second}});
    }
    r.config = std::move(config);
    r.config["scale"] = 1.0;
    r.corpus_value = recompute_corpus_value(r);
    finalize(r);
    return r;
}

} // namespace empcause::metrics
