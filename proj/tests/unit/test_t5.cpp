#include <gtest/gtest.h>

#include <cmath>

#include "empcause/common/error.hpp"
#include "empcause/t5/checkpoint.hpp"
#include "empcause/t5/model.hpp"
#include "empcause/t5/training.hpp"
#include "fd_check.hpp"
#include "test_support.hpp"

using namespace empcause;
using namespace empcause::t5;
namespace et = empcause::testing;

namespace {

const std::vector<T5Example> &raw_examples() {
    static const std::vector<T5Example> ex = [] {
        const std::vector<std::array<std::string, 4>> rows = {
            {"I lost my job today.", "user wants to: to find a new job. user reacts to: sad.", "sys's intent: to comfort. sys reacts to: sorry.",
             "I am so sorry to hear that."},
            {"I passed my exam!", "user wants to: to celebrate. user reacts to: proud.", "sys's intent: to praise. sys reacts to: happy.",
             "That is great news, well done!"},
            {"My dog is sick.", "user wants to: to see a vet. user reacts to: worried.", "sys's intent: to help. sys reacts to: concerned.",
             "Oh no, I hope he gets better soon."},
            {"I am going to visit my parents.", "user wants to: to see them. user reacts to: excited.",
             "sys's intent: to share joy. sys reacts to: glad.", "That sounds wonderful, have fun!"},
        };
        std::vector<T5Example> out;
        for (std::size_t i = 0; i < 16; ++i) {
            const auto &r = rows[i % rows.size()];
            out.push_back({"ex" + std::to_string(i), r[0], r[1], r[2], r[3], static_cast<int>(i % rows.size())});
        }
        return out;
    }();
    return ex;
}

Vocabulary small_vocab() {
    std::vector<std::string> texts;
    for (const auto &e : raw_examples())
        for (const auto *s : {&e.context, &e.user_causality, &e.sys_causality, &e.response})
            texts.push_back(*s);
    return Vocabulary::build(texts);
}

ModelConfig micro(Variant v) {
    auto c = ModelConfig::tiny();
    c.variant = v;
    c.d_model = 16;
    c.d_ff = 32;
    c.num_heads = 2;
    c.num_encoder_layers = 1;
    c.num_decoder_layers = 1;
    c.emotion_count = 4;
    c.batch_size = 4;
    c.seed = 3;
    return c;
}

std::vector<TokenizedExample> tokenized(const T5Model &m) {
    std::vector<TokenizedExample> out;
    for (const auto &e : raw_examples())
        out.push_back(tokenize(e, m.vocab(), m.config()));
    return out;
}

} // namespace

TEST(Math, Softmax) {
    std::vector<double> logits = {0.0, std::log(2.0), std::log(4.0)};
    auto p = softmax(logits);
    EXPECT_NEAR(p[0], 1.0 / 7, 1e-12);
    EXPECT_NEAR(p[1], 2.0 / 7, 1e-12);
    EXPECT_NEAR(p[2], 4.0 / 7, 1e-12);
    std::vector<double> big = {1000.0, 1000.0};
    EXPECT_NEAR(softmax(big)[0], 0.5, 1e-12);
}

TEST(Math, SoftmaxSumsToOne) {
    Rng rng(1);
    for (int t = 0; t < 1000; ++t) {
        std::vector<double> x(1 + rng.below(40));
        for (auto &v : x)
            v = rng.normal() * 20;
        auto p = softmax(x);
        double s = 0;
        for (double v : p) {
            ASSERT_GE(v, 0.0);
            s += v;
        }
        ASSERT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Math, EmotionLossValues) {
    Matrix half(1, 2);
    half << 0.5, 0.5;
    std::vector<int> zero = {0};
    EXPECT_NEAR(emotion_loss(half, zero), std::log(2.0), 1e-12);
    Matrix uniform = Matrix::Constant(2, 32, 1.0 / 32);
    std::vector<int> labels = {3, 31};
    EXPECT_NEAR(emotion_loss(uniform, labels), std::log(32.0), 1e-12);
    Matrix certain = Matrix::Zero(1, 4);
    certain(0, 2) = 1.0;
    std::vector<int> two = {2};
    EXPECT_EQ(emotion_loss(certain, two), 0.0);
    std::vector<int> out_of_range = {4};
    EXPECT_THROW(emotion_loss(certain, out_of_range), PreconditionError);
}

TEST(Math, GenLossValues) {
    Matrix logits = Matrix::Zero(2, 4);
    std::vector<int> ref = {3, Vocabulary::kPad};
    EXPECT_NEAR(gen_loss(logits, ref), std::log(4.0), 1e-12);
    std::vector<int> all_pad = {Vocabulary::kPad, Vocabulary::kPad};
    EXPECT_EQ(gen_loss(logits, all_pad), 0.0);
    Matrix sure = Matrix::Constant(1, 4, -1e4);
    sure(0, 1) = 1e4;
    std::vector<int> one = {1};
    EXPECT_NEAR(gen_loss(sure, one), 0.0, 1e-12);
}

TEST(Model, EmotionDistributionSumsToOne) {
    T5Model model(micro(Variant::causality_user_sys), small_vocab());
    auto data = tokenized(model);
    for (const auto &ex : data) {
        auto p = model.emotion_distribution(ex);
        ASSERT_EQ(p.size(), 4u);
        double s = 0;
        for (double v : p)
            s += v;
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Model, EncodeShapesPerVariant) {
    for (Variant v : {Variant::base, Variant::causality_user, Variant::causality_user_sys}) {
        T5Model model(micro(v), small_vocab());
        auto data = tokenized(model);
        Tape tape(false);
        auto enc = model.encode(tape, std::span<const TokenizedExample>(data.data(), 2));
        ASSERT_EQ(enc.batch_size(), 2u);
        EXPECT_EQ(enc.z_c[0].rows(), data[0].context.size());
        EXPECT_EQ(enc.z_c[0].cols(), 16u);
        EXPECT_EQ(enc.z_user.has_value(), uses_user_causality(v));
        EXPECT_EQ(enc.z_sys.has_value(), uses_sys_causality(v));
        if (enc.z_user) {
            EXPECT_EQ((*enc.z_user)[1].rows(), data[1].user.size());
        }
        if (enc.z_sys) {
            EXPECT_EQ((*enc.z_sys)[1].rows(), data[1].sys.size());
        }
    }
    EXPECT_EQ(encoder_count(Variant::base), 1u);
    EXPECT_EQ(encoder_count(Variant::causality_user_sys), 3u);
}

TEST(Model, MissingCausalityTextRejected) {
    T5Model model(micro(Variant::causality_user_sys), small_vocab());
    auto ex = raw_examples()[0];
    ex.sys_causality = "  ";
    EXPECT_THROW(tokenize(ex, model.vocab(), model.config()), PreconditionError);
    T5Model base(micro(Variant::base), small_vocab());
    EXPECT_NO_THROW(tokenize(ex, base.vocab(), base.config()));
}

TEST(Model, FusionAndHeadGradientsMatchFiniteDifferences) {
    T5Model model(micro(Variant::causality_user_sys), small_vocab());
    auto data = tokenized(model);
    std::span<const TokenizedExample> batch(data.data(), 2);
    for (const char *name : {"fusion.weight", "fusion.bias", "emotion_head.weight"}) {
        auto r = et::check_gradient(model, name, batch);
        EXPECT_GT(r.checked, 0u) << name;
        EXPECT_LE(r.max_relative_error, 1e-3) << name;
    }
}

TEST(Model, TotalIsSumOfPartsDuringTraining) {
    auto cfg = micro(Variant::causality_user_sys);
    cfg.epochs = 20;
    T5Model model(cfg, small_vocab());
    auto data = tokenized(model);
    TrainOptions opts;
    opts.max_steps = 50;
    std::size_t seen = 0;
    opts.on_step = [&](const StepLog &s) {
        ++seen;
        EXPECT_NEAR(s.loss.total, s.loss.l_emotion + s.loss.l_gen, 1e-12 * std::max(1.0, s.loss.total)) << s.step;
    };
    auto result = train(model, data, {}, opts);
    EXPECT_EQ(seen, 50u);
    EXPECT_EQ(result.steps.size(), 50u);
    EXPECT_LT(result.steps.back().loss.total, result.steps.front().loss.total);
}

TEST(Model, GenerationCapAndDeterminism) {
    auto cfg = micro(Variant::causality_user_sys);
    cfg.max_generate_len = 5;
    T5Model model(cfg, small_vocab());
    auto data = tokenized(model);
    DecodeParams greedy{20, 0.0};
    Rng a(1), b(99);
    auto g1 = model.generate(data[0], greedy, a);
    auto g2 = model.generate(data[0], greedy, b);
    EXPECT_EQ(g1, g2);
    EXPECT_LE(g1.size(), 5u);
    DecodeParams sample{20, 1.0};
    Rng c(7), d(7);
    EXPECT_EQ(model.generate(data[1], sample, c), model.generate(data[1], sample, d));
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng r(s);
        auto ids = model.generate(data[2], sample, r);
        EXPECT_LE(ids.size(), 5u);
        for (int id : ids)
            EXPECT_NE(id, Vocabulary::kEos);
    }
    DecodeParams bad{20, -1.0};
    EXPECT_THROW(model.generate(data[0], bad, a), PreconditionError);
}

TEST(Model, CheckpointRoundTrip) {
    et::TempDir dir;
    T5Model model(micro(Variant::causality_user), small_vocab());
    auto data = tokenized(model);
    save_checkpoint(dir.path() / "ckpt", model, {{"note", "test"}});
    auto back = load_checkpoint(dir.path() / "ckpt");
    EXPECT_EQ(back->parameter_count(), model.parameter_count());
    EXPECT_EQ(back->evaluate(data).total, model.evaluate(data).total);
    Rng a(1), b(1);
    DecodeParams greedy{20, 0.0};
    EXPECT_EQ(back->generate(data[0], greedy, a), model.generate(data[0], greedy, b));
    EXPECT_THROW(load_checkpoint(dir.path() / "missing"), PreconditionError);
}

TEST(Perplexity, UniformScorerGivesVocabularySize) {
    auto vocab = small_vocab();
    auto cfg = micro(Variant::base);
    std::vector<TokenizedExample> data;
    for (const auto &e : raw_examples())
        data.push_back(tokenize(e, vocab, cfg));
    UniformScorer u(vocab.size());
    EXPECT_NEAR(perplexity(u, data) / static_cast<double>(vocab.size()), 1.0, 1e-9);
    UniformScorer big(32000);
    EXPECT_NEAR(perplexity(big, data), 32000.0, 32000.0 * 1e-9);
}

TEST(Vocab, EncodeDecode) {
    auto vocab = small_vocab();
    auto ids = vocab.encode("i passed my exam");
    EXPECT_EQ(vocab.decode(ids), "i passed my exam");
    EXPECT_EQ(vocab.encode("zebra")[0], Vocabulary::kUnk);
}
