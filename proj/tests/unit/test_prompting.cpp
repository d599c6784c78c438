#include <gtest/gtest.h>

#include "empcause/common/error.hpp"
#include "empcause/common/jsonl.hpp"
#include "empcause/common/random.hpp"
#include "empcause/llmclient.hpp"
#include "empcause/prompting.hpp"
#include "golden_inputs.hpp"
#include "test_support.hpp"

using namespace empcause;
using namespace empcause::prompting;
namespace et = empcause::testing;

namespace {

bool contains(const std::string &s, std::string_view needle) { return s.find(needle) != std::string::npos; }

std::string golden(const std::string &name) { return read_file(et::source_dir() / "tests" / "golden" / "v1" / name); }

} // namespace

TEST(Golden, CausalityMatchesByteForByte) {
    EXPECT_EQ(render(et::golden_bundle(Variant::causality)), golden("causality-k2.txt"));
}

TEST(Golden, BaselineMatchesAndHasNoKnowledge) {
    std::string text = render(et::golden_bundle(Variant::baseline));
    EXPECT_EQ(text, golden("baseline-k2.txt"));
    for (auto label : kKnowledgeLabels)
        EXPECT_FALSE(contains(text, label)) << label;
}

TEST(Golden, InstructionPresent) {
    std::string text = render(et::golden_bundle(Variant::causality));
    EXPECT_TRUE(contains(text, "Please generate the following three parts in the format below"));
    EXPECT_TRUE(text.rfind("Assuming that you are sys", 0) == 0);
    EXPECT_EQ(text, render(et::golden_bundle(Variant::causality)));
}

TEST(FewShot, FirstExampleKnowledgeBlock) {
    auto examples = et::golden_examples();
    std::string block = format_user_knowledge(examples[0].knowledge->user, PhraseStyle::example_block);
    EXPECT_EQ(block.rfind("user wants to: to have a good time. to talk to their mom.", 0), 0u) << block;
    EXPECT_EQ(examples[0].response, "I bet she is! I am so glad you get to see her. Mom's are awesome!");
    // duplicated phrases collapse
    EXPECT_EQ(examples[1].knowledge->user.reacts, (std::vector<std::string>{"happy", "excited", "loved"}));
}

TEST(FewShot, BlockOrderIndependentOfPairOrder) {
    auto c = et::golden_conversation("x", {"I passed!", "Well done!"});
    using knowledge::Relation;
    auto a = build_fewshot(c, {et::golden_set("I passed!", Relation::xReact, {"proud"}), et::golden_set("I passed!", Relation::xWant, {"to party"})},
                           {et::golden_set("Well done!", Relation::xIntent, {"to praise"}), et::golden_set("Well done!", Relation::xReact, {"glad"})});
    EXPECT_EQ(a.knowledge->user.wants, (std::vector<std::string>{"to party"}));
    EXPECT_EQ(a.knowledge->user.reacts, (std::vector<std::string>{"proud"}));
    EXPECT_EQ(a.knowledge->sys.intent, (std::vector<std::string>{"to praise"}));
}

TEST(FewShot, Errors) {
    using knowledge::Relation;
    auto user_only = et::golden_conversation("lonely-7", {"Hello?"});
    knowledge::InferencePair u{et::golden_set("Hello?", Relation::xWant, {"to talk"}), et::golden_set("Hello?", Relation::xReact, {"alone"})};
    knowledge::InferencePair s{et::golden_set("Hi", Relation::xIntent, {"to greet"}), et::golden_set("Hi", Relation::xReact, {"warm"})};
    try {
        build_fewshot(user_only, u, s);
        FAIL();
    } catch (const PreconditionError &e) {
        EXPECT_TRUE(contains(e.what(), "lonely-7"));
    }
    auto c = et::golden_conversation("c", {"Hello?", "Hi"});
    auto empty = s;
    empty.second.phrases.clear();
    EXPECT_THROW(build_fewshot(c, u, empty), PreconditionError);
}

TEST(BuildPrompt, KMismatchAndZero) {
    auto templates = TemplateLibrary::load_default();
    PromptOptions three;
    three.k = 3;
    EXPECT_THROW(build_prompt(templates, "causality-v1", et::golden_examples(), et::golden_test_context(), et::golden_test_knowledge(),
                              Variant::causality, three),
                 PreconditionError);
    PromptOptions zero;
    zero.k = 0;
    EXPECT_THROW(build_prompt(templates, "baseline-v1", {}, et::golden_test_context(), std::nullopt, Variant::baseline, zero),
                 PreconditionError);
    zero.allow_zero_shot = true;
    auto b = build_prompt(templates, "baseline-v1", {}, et::golden_test_context(), std::nullopt, Variant::baseline, zero);
    EXPECT_EQ(render(b), templates.get("baseline-v1") +
                             "\n\nuser: I'm so excited because I'm finally going to visit my parents next month! I didn't see them for 3 "
                             "years.\n");
}

TEST(BuildPrompt, CausalityNeedsKnowledge) {
    auto templates = TemplateLibrary::load_default();
    PromptOptions o;
    EXPECT_THROW(build_prompt(templates, "causality-v1", et::golden_examples(), et::golden_test_context(), std::nullopt,
                              Variant::causality, o),
                 PreconditionError);
    auto raw = et::golden_examples();
    raw[1].knowledge.reset();
    EXPECT_THROW(build_prompt(templates, "causality-v1", raw, et::golden_test_context(), et::golden_test_knowledge(), Variant::causality, o),
                 PreconditionError);
}

TEST(Format, PhraseStyles) {
    std::vector<std::string> p = {"a", "b  c"};
    EXPECT_EQ(format_phrases(p, PhraseStyle::inline_list), "a; b c.");
    EXPECT_EQ(format_phrases(p, PhraseStyle::example_block), "a. b c.");
}

TEST(Templates, Ids) {
    auto t = TemplateLibrary::load_default();
    EXPECT_TRUE(t.contains("causality-v1"));
    EXPECT_TRUE(t.contains("baseline-v1"));
    EXPECT_THROW(t.get("causality-v9"), Error);
}

TEST(Parse, CaseStudyReply) {
    auto out = parse_reasoned("sys's intent: to comfort; to help; to offer advice; to be supportive; to avoid bugs.\n"
                              "sys reacts to: empathetic. caring. helpful. understanding. supportive.\n"
                              "sys: I know how you feel, bugs are the worst.");
    EXPECT_EQ(out.sys_intent[0], "to comfort");
    EXPECT_EQ(out.sys_intent[1], "to help");
    EXPECT_EQ(out.sys_intent[2], "to offer advice");
    EXPECT_EQ(out.sys_react.size(), 5u);
    EXPECT_EQ(out.response, "I know how you feel, bugs are the worst.");
}

TEST(Parse, MissingLabelsKeepRaw) {
    const std::string raw = "I think you should just relax.";
    try {
        parse_reasoned(raw);
        FAIL();
    } catch (const ParseError &e) {
        EXPECT_EQ(e.raw(), raw);
    }
    EXPECT_THROW(parse_reasoned(""), ParseError);
    EXPECT_THROW(parse_reasoned("sys's intent: to help\nsys reacts to: calm"), ParseError);
}

TEST(Parse, HandWrittenCorpus) {
    auto lines = read_jsonl(et::test_data_dir() / "parser_replies.jsonl");
    ASSERT_GE(lines.size(), 15u);
    for (const auto &line : lines) {
        const auto &j = line.value;
        SCOPED_TRACE(j.at("note").get<std::string>());
        auto out = parse_reasoned(j.at("raw").get<std::string>());
        EXPECT_EQ(out.sys_intent, j.at("sys_intent").get<std::vector<std::string>>());
        EXPECT_EQ(out.sys_react, j.at("sys_react").get<std::vector<std::string>>());
        EXPECT_EQ(out.response, j.at("response").get<std::string>());
        EXPECT_EQ(out.warnings.size(), j.at("warnings").get<std::size_t>());
    }
}

TEST(Parse, RecordedCorpus) {
    auto lines = read_jsonl(et::demo_dir() / "recordings.jsonl");
    ASSERT_GE(lines.size(), 50u);
    for (const auto &line : lines) {
        auto t = llm::transcript_from_json(line.value);
        auto out = parse_reasoned(t.reply);
        EXPECT_FALSE(out.response.empty()) << t.reply;
        EXPECT_FALSE(contains(out.response, "sys")) << t.reply;
    }
}

TEST(Parse, RoundTripSyntheticReplies) {
    Rng rng(17);
    const std::vector<std::string> words = {"to", "help", "comfort", "be", "kind", "happy", "worried", "calm", "listen", "them"};
    for (int trial = 0; trial < 500; ++trial) {
        auto phrase = [&] {
            std::string p = words[rng.below(words.size())];
            for (std::size_t n = rng.below(3); n > 0; --n)
                p += " " + words[rng.below(words.size())];
            return p;
        };
        std::vector<std::string> intent(1 + rng.below(4)), react(1 + rng.below(4));
        for (auto &p : intent)
            p = phrase();
        for (auto &p : react)
            p = phrase();
        std::string response = "That sounds " + phrase() + ". Are you okay?";
        auto out = parse_reasoned(format_reply(intent, react, response));
        ASSERT_EQ(out.sys_intent, intent);
        ASSERT_EQ(out.sys_react, react);
        ASSERT_EQ(out.response, response);
    }
}

TEST(Parse, JsonRoundTrip) {
    auto out = parse_reasoned("sys's intent: to help\nsys reacts to: calm\nsys: Okay.");
    auto back = reasoned_from_json(to_json(out));
    EXPECT_EQ(back.sys_intent, out.sys_intent);
    EXPECT_EQ(back.response, out.response);
}
