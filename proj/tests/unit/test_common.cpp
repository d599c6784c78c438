#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "empcause/common/error.hpp"
#include "empcause/common/hash.hpp"
#include "empcause/common/jsonl.hpp"
#include "empcause/common/parallel.hpp"
#include "empcause/common/random.hpp"
#include "empcause/common/text.hpp"
#include "empcause/common/transport.hpp"
#include "empcause/content_cache.hpp"
#include "test_support.hpp"

using namespace empcause;
using empcause::testing::TempDir;

TEST(Hash, KnownVectors) {
    // FIPS 180-2 test vectors
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Rng, SameSeedSameSequence) {
    Rng a(99), b(99), c(100);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        auto x = a.next();
        EXPECT_EQ(x, b.next());
        differs |= x != c.next();
    }
    EXPECT_TRUE(differs);
}

TEST(Rng, BelowStaysInRange) {
    Rng r(1);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) {
        auto v = r.below(7);
        ASSERT_LT(v, 7u);
        ++hits[v];
    }
    for (int h : hits)
        EXPECT_GT(h, 800);
    EXPECT_EQ(r.below(1), 0u);
}

TEST(Rng, ShuffleIsPermutation) {
    Rng r(5);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i)
        v[i] = i;
    r.shuffle(v);
    std::set<int> s(v.begin(), v.end());
    EXPECT_EQ(s.size(), 50u);
}

TEST(Text, CollapseAndSplit) {
    EXPECT_EQ(text::collapse_whitespace("  a \t b\n\nc  "), "a b c");
    EXPECT_EQ(text::normalize_newlines("a\r\nb\rc"), "a\nb\nc");
    auto parts = text::split("a,,b", ",");
    ASSERT_EQ(parts.size(), 3u);
    EXPECT_EQ(parts[1], "");
    EXPECT_TRUE(text::iequals("Sys:", "sYS:"));
}

TEST(Text, WordTokens) {
    auto t = text::word_tokens("I'm SO happy, aren't you?!");
    std::vector<std::string> want = {"i'm", "so", "happy", ",", "aren't", "you", "?", "!"};
    EXPECT_EQ(t, want);
    EXPECT_TRUE(text::is_punctuation_token("?"));
    EXPECT_FALSE(text::is_punctuation_token("you"));
    // apostrophe only joins between word characters
    EXPECT_EQ(text::word_tokens("'tis"), (std::vector<std::string>{"'", "tis"}));
}

TEST(Jsonl, RoundTripAndLineNumbers) {
    TempDir dir;
    std::vector<json> records = {{{"a", 1}}, {{"b", "x"}}};
    write_jsonl(dir / "r.jsonl", records);
    auto lines = read_jsonl(dir / "r.jsonl");
    ASSERT_EQ(lines.size(), 2u);
    EXPECT_EQ(lines[1].line, 2u);
    EXPECT_EQ(lines[1].value, records[1]);

    std::ofstream(dir / "bad.jsonl") << "{\"a\":1}\n\n{oops\n";
    try {
        read_jsonl(dir / "bad.jsonl");
        FAIL() << "expected ValidationError";
    } catch (const ValidationError &e) {
        EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
    }
}

TEST(Jsonl, CanonicalDumpSortsKeys) {
    json a = json::parse(R"({"b":1,"a":{"d":2,"c":3}})");
    EXPECT_EQ(canonical_dump(a), R"({"a":{"c":3,"d":2},"b":1})");
}

TEST(ContentCache, PutGetAndPersistence) {
    TempDir dir;
    const std::string key = sha256_hex("k");
    {
        ContentCache cache(dir.path());
        EXPECT_FALSE(cache.get(key).has_value());
        cache.put(key, {{"v", 1}});
        EXPECT_EQ(cache.get(key)->at("v"), 1);
    }
    ContentCache reopened(dir.path());
    ASSERT_TRUE(reopened.get(key).has_value());
    EXPECT_EQ(reopened.get(key)->at("v"), 1);
}

TEST(ContentCache, CorruptEntryIsAbsent) {
    TempDir dir;
    const std::string key = sha256_hex("k2");
    {
        ContentCache cache(dir.path());
        cache.put(key, {{"v", 2}});
    }
    ContentCache cache(dir.path());
    std::ofstream(cache.entry_path(key), std::ios::app) << "garbage";
    EXPECT_FALSE(cache.get(key).has_value());
    EXPECT_EQ(cache.corrupt_reads(), 1u);
}

TEST(Parallel, ResultsIndexedByPosition) {
    std::vector<int> out(200, -1);
    parallel_for(out.size(), 8, [&](std::size_t i) { out[i] = static_cast<int>(i * i); });
    for (std::size_t i = 0; i < out.size(); ++i)
        EXPECT_EQ(out[i], static_cast<int>(i * i));
}

TEST(Parallel, RethrowsLowestFailingIndex) {
    try {
        parallel_for(10, 1, [](std::size_t i) {
            if (i >= 3)
                throw std::runtime_error("fail " + std::to_string(i));
        });
        FAIL();
    } catch (const std::runtime_error &e) {
        EXPECT_STREQ(e.what(), "fail 3");
    }
}

TEST(Transport, RetriesServerErrors) {
    int calls = 0;
    FunctionTransport t([&](const HttpRequest &) { return HttpResponse{++calls < 3 ? 503 : 200, "ok"}; });
    RetryPolicy p;
    p.initial_backoff = std::chrono::milliseconds(1);
    auto [resp, attempts] = post_with_retries(t, {"http://x/y", "{}", {}}, p);
    EXPECT_EQ(resp.status, 200);
    EXPECT_EQ(attempts, 3);
}

TEST(Transport, OfflineRefuses) {
    OfflineTransport t;
    EXPECT_ANY_THROW(t.post_json({"http://127.0.0.1:1/x", "{}", {}}));
}
