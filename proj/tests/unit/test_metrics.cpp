#include <gtest/gtest.h>

#include <cmath>

#include "empcause/common/error.hpp"
#include "empcause/common/text.hpp"
#include "empcause/metrics.hpp"
#include "metric_oracles.hpp"
#include "test_support.hpp"

using namespace empcause;
using namespace empcause::metrics;
namespace et = empcause::testing;

namespace {

std::vector<ScoredPair> to_pairs(const std::vector<std::pair<std::string, std::string>> &raw) {
    std::vector<ScoredPair> out;
    for (std::size_t i = 0; i < raw.size(); ++i)
        out.push_back({"s" + std::to_string(i), raw[i].first, raw[i].second, ""});
    return out;
}

StopwordList my_the() { return StopwordList("test", {"my", "the"}); }

} // namespace

TEST(OverlapF1, HandExamples) {
    auto s = overlap_f1("passed my exam happily", "passed the exam", my_the());
    EXPECT_DOUBLE_EQ(s.precision, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(s.recall, 1.0);
    EXPECT_NEAR(s.f1, 0.8, 1e-12);
    EXPECT_DOUBLE_EQ(overlap_f1("I feel great today", "I feel great today", my_the()).f1, 1.0);
    EXPECT_DOUBLE_EQ(overlap_f1("apples oranges", "cars trucks", my_the()).f1, 0.0);
}

TEST(OverlapF1, DegenerateFlagged) {
    auto s = overlap_f1("the my", "passed", my_the());
    EXPECT_TRUE(s.degenerate);
    EXPECT_EQ(s.f1, 0.0);
    std::vector<ScoredPair> pairs = {{"a", "the", "x", ""}, {"b", "x y", "x", ""}};
    auto reports = overlap_f1_reports(pairs, my_the());
    EXPECT_EQ(reports[2].config["degenerate_samples"], json::array({"a"}));
}

TEST(OverlapF1, PrecisionRecallSwapSymmetry) {
    Rng rng(8);
    auto sw = StopwordList::load_default();
    for (int t = 0; t < 200; ++t) {
        auto corpus = et::toy_corpus(rng, 1, 12);
        auto [g, r] = corpus[0];
        auto a = overlap_f1(g, r, sw), b = overlap_f1(r, g, sw);
        EXPECT_DOUBLE_EQ(a.precision, b.recall);
        EXPECT_DOUBLE_EQ(a.recall, b.precision);
        EXPECT_NEAR(a.f1, b.f1, 1e-12);
    }
}

TEST(OverlapF1, DefaultStopwordsAndMacroAverage) {
    auto sw = StopwordList::load_default();
    EXPECT_EQ(sw.id(), "en-v1");
    EXPECT_TRUE(sw.contains("the"));
    std::vector<ScoredPair> pairs = {{"a", "passed exam", "passed exam", ""}, {"b", "apples", "cars", ""}};
    auto reports = overlap_f1_reports(pairs, sw);
    ASSERT_EQ(reports.size(), 3u);
    EXPECT_EQ(reports[2].metric_id, "f1");
    EXPECT_DOUBLE_EQ(reports[2].corpus_value, 50.0);
}

TEST(Bleu, IdentityIsHundred) {
    std::vector<ScoredPair> pairs = {{"a", "i am so happy for you", "i am so happy for you", ""},
                                     {"b", "that is great news", "that is great news", ""}};
    for (std::size_t n : {1u, 2u, 3u, 4u})
        EXPECT_NEAR(bleu_n(pairs, n), 100.0, 1e-9);
}

TEST(Bleu, ZeroFourGramOverlapIsZero) {
    std::vector<ScoredPair> pairs = {{"a", "i am so happy", "i am very happy", ""}, {"b", "that is great", "that is bad", ""}};
    EXPECT_EQ(bleu_n(pairs, 4), 0.0);
    EXPECT_GT(bleu_n(pairs, 2), 0.0);
}

TEST(Bleu, ThreePairToyCorpus) {
    std::vector<std::pair<std::string, std::string>> raw = {
        {"i am so happy for you", "i am happy for you"}, {"that is great news", "that is such great news"}, {"oh no", "oh no that is sad"}};
    auto pairs = to_pairs(raw);
    for (std::size_t n : {2u, 3u, 4u})
        EXPECT_NEAR(bleu_n(pairs, n), 100.0 * et::oracle_bleu(raw, n), 1e-9) << n;
}

TEST(Bleu, MatchesBruteForceOnRandomCorpora) {
    Rng rng(101);
    for (int t = 0; t < 200; ++t) {
        auto raw = et::toy_corpus(rng, 20, 15);
        auto pairs = to_pairs(raw);
        for (std::size_t n : {1u, 2u, 3u, 4u})
            ASSERT_NEAR(bleu_n(pairs, n), 100.0 * et::oracle_bleu(raw, n), 1e-9) << "trial " << t << " n " << n;
    }
}

TEST(Bleu, Errors) {
    std::vector<ScoredPair> none;
    EXPECT_THROW(bleu_n(none, 4), PreconditionError);
    std::vector<ScoredPair> one = {{"a", "x", "x", ""}};
    EXPECT_THROW(bleu_n(one, 0), PreconditionError);
}

TEST(Distinct, HandCounts) {
    std::vector<std::string> aaa = {"a a a"};
    EXPECT_NEAR(distinct_n(aaa, 1), 100.0 / 3.0, 1e-12);
    EXPECT_NEAR(distinct_n(aaa, 2), 50.0, 1e-12);
    std::vector<std::string> unique = {"one two", "three four"};
    EXPECT_DOUBLE_EQ(distinct_n(unique, 1), 100.0);
    EXPECT_THROW(distinct_n(unique, 3), PreconditionError);
    std::vector<std::string> none;
    EXPECT_THROW(distinct_n(none, 1), PreconditionError);
}

TEST(Distinct, MatchesEnumerationAndDoublingNeverIncreases) {
    Rng rng(77);
    for (int t = 0; t < 200; ++t) {
        auto raw = et::toy_corpus(rng, 20, 15);
        std::vector<std::string> responses;
        for (const auto &p : raw)
            responses.push_back(p.first);
        auto doubled = responses;
        doubled.insert(doubled.end(), responses.begin(), responses.end());
        for (std::size_t n : {1u, 2u}) {
            auto [u, total] = et::oracle_distinct_counts(responses, n);
            double want = total == 0 ? 0.0 : 100.0 * static_cast<double>(u) / static_cast<double>(total);
            ASSERT_EQ(distinct_n(responses, n), want);
            double d = distinct_n(responses, n), dd = distinct_n(doubled, n);
            ASSERT_LE(dd, d);
            ASSERT_GE(dd, 0.0);
            ASSERT_LE(d, 100.0);
        }
    }
}

TEST(Reports, CorpusValueRecomputable) {
    Rng rng(5);
    auto sw = StopwordList::load_default();
    for (int t = 0; t < 30; ++t) {
        auto pairs = to_pairs(et::toy_corpus(rng, 20, 15));
        std::vector<MetricReport> reports = {bleu_report(pairs, 2), bleu_report(pairs, 4), distinct_report(pairs, 1),
                                             distinct_report(pairs, 2)};
        for (auto &r : overlap_f1_reports(pairs, sw))
            reports.push_back(r);
        for (const auto &r : reports) {
            ASSERT_NEAR(recompute_corpus_value(r), r.corpus_value, 1e-9) << r.metric_id;
            auto back = metric_report_from_json(to_json(r));
            ASSERT_NEAR(recompute_corpus_value(back), r.corpus_value, 1e-9) << r.metric_id;
            ASSERT_EQ(back.config_digest, r.config_digest);
        }
    }
}

TEST(Reports, PerplexityPooled) {
    std::vector<std::pair<std::string, std::pair<double, std::size_t>>> ps = {{"a", {std::log(4.0) * 2, 2}}, {"b", {std::log(16.0), 1}}};
    auto r = perplexity_report(ps, json::object());
    // exp((2 ln4 + ln16) / 3) = exp(8 ln2 / 3)
    EXPECT_NEAR(r.corpus_value, std::pow(2.0, 8.0 / 3.0), 1e-9);
    EXPECT_NEAR(r.per_sample[0].second, 4.0, 1e-9);
    EXPECT_NEAR(recompute_corpus_value(r), r.corpus_value, 1e-12);
}

TEST(Reports, DigestPinsTokenizer) {
    std::vector<ScoredPair> pairs = {{"a", "x y", "x y", ""}};
    auto r = bleu_report(pairs, 2);
    EXPECT_EQ(r.config["tokenizer"], text::kTokenizerId);
    EXPECT_EQ(r.config_digest, config_digest(r.config));
    EXPECT_NE(bleu_report(pairs, 3).config_digest, r.config_digest);
}

TEST(Pairs, JsonlRoundTrip) {
    et::TempDir dir;
    std::vector<ScoredPair> pairs = {{"a", "g", "r", "c"}};
    save_pairs(dir / "p.jsonl", pairs);
    auto back = load_pairs(dir / "p.jsonl");
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0].context, "c");
}
