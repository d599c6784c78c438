#include <gtest/gtest.h>

#include <cmath>

#include "empcause/common/error.hpp"
#include "empcause/raters.hpp"
#include "synth.hpp"
#include "test_support.hpp"

using namespace empcause;
using namespace empcause::raters;
namespace et = empcause::testing;

namespace {

/// Labels from a map; counts calls.
class MapEmotionRater final : public EmotionRater {
  public:
    explicit MapEmotionRater(std::unordered_map<std::string, std::string> m) : m_(std::move(m)) {}
    const std::string &backend_id() const override { return id_; }
    std::string predict(const std::string &text) override { return m_.at(text); }

  private:
    std::string id_ = "map";
    std::unordered_map<std::string, std::string> m_;
};

class ConstantRater final : public MechanismRater {
  public:
    explicit ConstantRater(int level) : level_(level) {}
    const std::string &backend_id() const override { return id_; }
    int rate(const std::string &, const std::string &) override { return level_; }

  private:
    std::string id_ = "constant";
    int level_;
};

} // namespace

TEST(BertScore, HandExample) {
    // candidate tokens e1, e2; reference tokens e1, (e1+e2)/sqrt2
    std::vector<std::vector<double>> cand = {{1, 0}, {0, 1}};
    std::vector<std::vector<double>> ref = {{1, 0}, {1 / std::sqrt(2.0), 1 / std::sqrt(2.0)}};
    auto s = bertscore_from_embeddings(cand, ref);
    const double h = 1 / std::sqrt(2.0);
    EXPECT_NEAR(s.precision, (1 + h) / 2, 1e-12);
    EXPECT_NEAR(s.recall, (1 + h) / 2, 1e-12);
    EXPECT_NEAR(s.f, (1 + h) / 2, 1e-12);

    std::vector<std::vector<double>> one = {{1, 0}};
    auto t = bertscore_from_embeddings(one, ref);
    EXPECT_NEAR(t.precision, 1.0, 1e-12);
    EXPECT_NEAR(t.recall, (1 + h) / 2, 1e-12);
}

TEST(BertScore, SelfSimilarity) {
    EmbeddingBertScorer scorer(std::make_shared<HashedTokenEmbedder>(64));
    auto s = scorer.score("I am so sorry for your loss", "I am so sorry for your loss");
    EXPECT_NEAR(s.precision, s.recall, 1e-6);
    EXPECT_NEAR(s.f, 1.0, 1e-9);
    EXPECT_GE(s.f + 1e-12, s.precision);
}

TEST(BertScore, FixtureReplayAndMiss) {
    et::TempDir dir;
    std::vector<BertScoreRecord> recs = {{"hello there", "hi there", {0.5, 0.6, 0.55}}};
    save_bertscore_fixture(dir / "b.jsonl", recs);
    auto f = FixtureBertScorer::load(dir / "b.jsonl", "fx");
    auto s = f->score("hello  there", "hi there");
    EXPECT_EQ(s.precision, 0.5);
    EXPECT_EQ(s.f, 0.55);
    EXPECT_THROW(f->score("hello", "hi"), ReplayMissError);
}

TEST(BertScore, CorpusMeanFromCommittedFixture) {
    auto f = FixtureBertScorer::load(et::demo_dir() / "raters" / "bertscore.jsonl", "hashed-token-v1-d64");
    auto lines = read_jsonl(et::demo_dir() / "raters" / "bertscore.jsonl");
    ASSERT_GE(lines.size(), 20u);
    std::vector<metrics::ScoredPair> pairs;
    double sum_f = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        const auto &v = lines[i].value;
        pairs.push_back({"s" + std::to_string(i), v["candidate"], v["reference"], ""});
        sum_f += v["f"].get<double>();
    }
    auto reports = bert_score(pairs, *f);
    ASSERT_EQ(reports.size(), 3u);
    EXPECT_EQ(reports[2].metric_id, "bertscore_f");
    EXPECT_NEAR(reports[2].corpus_value, sum_f / 20, 1e-12);
}

TEST(BertScore, CoherenceUsesContext) {
    EmbeddingBertScorer scorer(std::make_shared<HashedTokenEmbedder>(64));
    std::vector<metrics::ScoredPair> pairs = {{"a", "my dog is sick", "totally different words", "my dog is sick"}};
    auto coh = bert_score(pairs, scorer, BertTarget::context);
    auto ref = bert_score(pairs, scorer, BertTarget::reference);
    EXPECT_EQ(coh[2].metric_id, "coherence_f");
    EXPECT_GT(coh[2].corpus_value, ref[2].corpus_value);
}

TEST(Emoacc, FiveOfTwenty) {
    std::vector<LabeledResponse> rs;
    std::unordered_map<std::string, std::string> labels;
    for (int i = 0; i < 20; ++i) {
        std::string text = "response " + std::to_string(i);
        rs.push_back({"s" + std::to_string(i), text, "sad"});
        labels[text] = i < 5 ? "sad" : "joyful";
    }
    MapEmotionRater rater(labels);
    auto r = emoacc(rs, rater, 4);
    EXPECT_DOUBLE_EQ(r.corpus_value, 0.25);
    EXPECT_DOUBLE_EQ(r.scale, 1.0);
}

TEST(Emoacc, AllAgreeAllDisagree) {
    std::vector<LabeledResponse> rs = {{"a", "x", "sad"}, {"b", "y", "sad"}};
    MapEmotionRater agree({{"x", "sad"}, {"y", "sad"}}), disagree({{"x", "proud"}, {"y", "proud"}});
    EXPECT_DOUBLE_EQ(emoacc(rs, agree).corpus_value, 1.0);
    EXPECT_DOUBLE_EQ(emoacc(rs, disagree).corpus_value, 0.0);
}

TEST(Emoacc, FixtureMiss) {
    FixtureEmotionRater f("fx", {{"known", "sad"}});
    EXPECT_EQ(f.predict("known"), "sad");
    EXPECT_THROW(f.predict("unknown"), ReplayMissError);
}

TEST(Epitome, AllTwos) {
    EpitomeRaters r{std::make_shared<ConstantRater>(2), std::make_shared<ConstantRater>(2), std::make_shared<ConstantRater>(2)};
    std::vector<metrics::ScoredPair> pairs = {{"a", "x", "", "c"}, {"b", "y", "", "c"}};
    auto reports = epitome(pairs, r);
    ASSERT_EQ(reports.size(), 3u);
    for (const auto &rep : reports)
        EXPECT_DOUBLE_EQ(rep.corpus_value, 2.0);
    EXPECT_EQ(reports[0].metric_id, "epitome_ip");
}

TEST(Epitome, OutOfRangeRejected) {
    EpitomeRaters r{std::make_shared<ConstantRater>(1), std::make_shared<ConstantRater>(3), std::make_shared<ConstantRater>(0)};
    std::vector<metrics::ScoredPair> pairs = {{"sample-9", "x", "", "c"}};
    try {
        epitome(pairs, r);
        FAIL();
    } catch (const ValidationError &e) {
        std::string what = e.what();
        EXPECT_NE(what.find("sample-9"), std::string::npos);
        EXPECT_NE(what.find("constant"), std::string::npos);
    }
}

TEST(Epitome, FixtureMeansOnTenSamples) {
    std::vector<EpitomeFixtureRecord> recs;
    std::vector<metrics::ScoredPair> pairs;
    const int ip[] = {0, 1, 2, 0, 1, 2, 0, 1, 2, 2}, ex[] = {1, 1, 1, 1, 1, 0, 0, 0, 0, 0}, er[] = {2, 2, 2, 2, 2, 2, 2, 2, 2, 0};
    for (int i = 0; i < 10; ++i) {
        std::string text = "reply " + std::to_string(i);
        recs.push_back({text, {ip[i], ex[i], er[i]}});
        pairs.push_back({"s" + std::to_string(i), text, "", "ctx"});
    }
    et::TempDir dir;
    save_epitome_fixture(dir / "e.jsonl", recs);
    EpitomeRaters r{FixtureMechanismRater::load(dir / "e.jsonl", "fx", Mechanism::interpretation),
                    FixtureMechanismRater::load(dir / "e.jsonl", "fx", Mechanism::exploration),
                    FixtureMechanismRater::load(dir / "e.jsonl", "fx", Mechanism::emotional_reaction)};
    auto reports = epitome(pairs, r, 3);
    EXPECT_DOUBLE_EQ(reports[0].corpus_value, 1.1); // (0+1+2)*3 + 2 = 11
    EXPECT_DOUBLE_EQ(reports[1].corpus_value, 0.5);
    EXPECT_DOUBLE_EQ(reports[2].corpus_value, 1.8);
}

TEST(Epitome, ExplorationAnchorsInCommittedFixture) {
    auto ex = FixtureMechanismRater::load(et::demo_dir() / "raters" / "epitome.jsonl", "epitome-rules-v1", Mechanism::exploration);
    EXPECT_GT(ex->rate("", "Are you feeling terrified right now?"), ex->rate("", "What happened?"));
    EXPECT_GT(synth::rule_epitome("Are you feeling terrified right now?").ex, synth::rule_epitome("What happened?").ex);
}

TEST(Servers, Protocols) {
    auto t = std::make_shared<FunctionTransport>([](const HttpRequest &req) {
        auto body = json::parse(req.body);
        if (req.url.find("emotion") != std::string::npos)
            return HttpResponse{200, R"({"label":"sad"})"};
        if (req.url.find("epitome") != std::string::npos)
            return HttpResponse{200, json{{"level", body["mechanism"] == "ex" ? 2 : 1}}.dump()};
        json vectors = json::array();
        for (std::size_t i = 0; i < body["text"].get<std::string>().size() % 3 + 1; ++i)
            vectors.push_back({1.0, static_cast<double>(i)});
        return HttpResponse{200, json{{"vectors", vectors}}.dump()};
    });
    ServerConfig emo{"emo", "http://127.0.0.1:9/emotion", {}, 2};
    EXPECT_EQ(ServerEmotionRater(emo, t).predict("I lost it"), "sad");
    ServerConfig ep{"ep", "http://127.0.0.1:9/epitome", {}, 2};
    EXPECT_EQ(ServerMechanismRater(ep, Mechanism::exploration, t).rate("c", "r"), 2);
    ServerConfig bs{"bs", "http://127.0.0.1:9/tokens", {}, 2};
    EmbeddingBertScorer scorer(std::make_shared<ServerTokenEmbedder>(bs, t));
    EXPECT_GT(scorer.score("abc", "abc").f, 0.0);
}
