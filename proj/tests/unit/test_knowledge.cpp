#include <gtest/gtest.h>

#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "empcause/common/error.hpp"
#include "empcause/knowledge.hpp"
#include "test_support.hpp"

using namespace empcause;
using namespace empcause::knowledge;
using empcause::testing::TempDir;

namespace {

const char *kBugs = "I'm so scared of bugs! i found one in my hair yesterday and almost died.";

std::shared_ptr<KnowledgeService> reference_service(std::shared_ptr<ContentCache> cache = nullptr) {
    std::shared_ptr<KnowledgeBackend> backend = FixtureKnowledgeBackend::load(empcause::testing::test_data_dir() / "knowledge_reference.jsonl");
    return std::make_shared<KnowledgeService>(backend, cache);
}

bool has(const InferenceSet &s, const std::string &phrase) {
    return std::find(s.phrases.begin(), s.phrases.end(), phrase) != s.phrases.end();
}

/// Counts queries and answers with a fixed phrase list.
class CountingBackend final : public KnowledgeBackend {
  public:
    explicit CountingBackend(std::vector<std::string> phrases) : phrases_(std::move(phrases)) {}
    const std::string &backend_id() const override { return id_; }
    BackendKind kind() const override { return BackendKind::model_server; }
    const json &decode_params() const override { return params_; }
    std::vector<std::string> query(const std::string &, Relation, std::size_t) override {
        ++calls;
        return phrases_;
    }
    int calls = 0;

  private:
    std::string id_ = "counting";
    json params_ = {{"beams", 5}};
    std::vector<std::string> phrases_;
};

} // namespace

TEST(Normalize, TrimsStripsDedupesTruncates) {
    std::vector<std::string> raw = {" to help. ", "To Help", "", "  ..", "to comfort.", "to a", "to b", "to c", "to d"};
    auto out = normalize_phrases(raw, 5);
    std::vector<std::string> want = {"to help", "to comfort", "to a", "to b", "to c"};
    EXPECT_EQ(out, want);
    EXPECT_EQ(normalize_phrases(raw, 1).size(), 1u);
}

TEST(Key, TrailingWhitespaceInvariant) {
    EXPECT_EQ(inference_key("Thanks.", Relation::xWant, "b", {}), inference_key("Thanks.  \n", Relation::xWant, "b", {}));
    EXPECT_NE(inference_key("Thanks.", Relation::xWant, "b", {}), inference_key("Thanks.", Relation::xReact, "b", {}));
    EXPECT_NE(inference_key("Thanks.", Relation::xWant, "b", {}), inference_key("Thanks.", Relation::xWant, "c", {}));
    EXPECT_NE(inference_key("Thanks.", Relation::xWant, "b", {}), inference_key("Thanks.", Relation::xWant, "b", {{"k", 1}}));
}

TEST(Relation, NamesRoundTrip) {
    for (auto r : {Relation::xWant, Relation::xReact, Relation::xIntent})
        EXPECT_EQ(relation_from_string(to_string(r)), r);
    EXPECT_EQ(to_string(Relation::xIntent), "xIntent");
}

TEST(Service, ReferenceFixtureUserBundle) {
    auto svc = reference_service();
    auto pair = svc->user_bundle(kBugs);
    EXPECT_EQ(pair.first.relation, Relation::xWant);
    EXPECT_TRUE(has(pair.first, "to get rid of bugs"));
    EXPECT_TRUE(has(pair.first, "to run away")); // terminal period stripped
    EXPECT_TRUE(has(pair.second, "scared"));
    EXPECT_EQ(pair.first.backend_id, pair.second.backend_id);
}

TEST(Service, ReferenceFixtureSysBundles) {
    auto svc = reference_service();
    auto intents = svc->infer("Did you suffer any injuries?", Relation::xIntent);
    ASSERT_GE(intents.phrases.size(), 2u);
    EXPECT_EQ(intents.phrases[0], "to make sure they are ok");
    EXPECT_EQ(intents.phrases[1], "to know if you are ok");

    auto gun = svc->sys_bundle("That's not good. Do you own a gun?");
    EXPECT_TRUE(has(gun.second, "scared"));
    EXPECT_TRUE(has(gun.second, "worried"));

    auto mom = svc->sys_bundle("I bet she is! I am so glad you get to see her. Mom's are awesome!");
    EXPECT_TRUE(has(mom.first, "to be with her"));
    EXPECT_TRUE(has(mom.second, "happy"));
}

TEST(Service, SingleWordUtterance) {
    auto pair = reference_service()->user_bundle("Thanks.");
    EXPECT_FALSE(pair.first.phrases.empty());
    EXPECT_FALSE(pair.second.phrases.empty());
}

TEST(Service, EmptyTextIsPrecondition) {
    EXPECT_THROW(reference_service()->infer("", Relation::xWant), PreconditionError);
    EXPECT_THROW(reference_service()->infer("   ", Relation::xWant), PreconditionError);
}

TEST(Service, FixtureMissLabelsRelation) {
    try {
        reference_service()->user_bundle("never recorded");
        FAIL();
    } catch (const BackendError &e) {
        EXPECT_NE(std::string(e.what()).find("xWant"), std::string::npos) << e.what();
    }
}

TEST(Service, EmptyBackendOutputIsError) {
    auto backend = std::make_shared<CountingBackend>(std::vector<std::string>{" ", "."});
    KnowledgeService svc(backend, nullptr);
    EXPECT_THROW(svc.infer("hello", Relation::xReact), BackendError);
}

TEST(Service, CachesAcrossInstances) {
    TempDir dir;
    auto backend = std::make_shared<CountingBackend>(std::vector<std::string>{"to rest.", "to sleep"});
    {
        KnowledgeService svc(backend, std::make_shared<ContentCache>(dir.path()));
        auto a = svc.infer("I am tired", Relation::xWant);
        auto b = svc.infer("I am tired  ", Relation::xWant);
        EXPECT_EQ(a, b);
        EXPECT_EQ(backend->calls, 1);
        EXPECT_EQ(a.decode_params, json({{"beams", 5}}));
    }
    KnowledgeService again(backend, std::make_shared<ContentCache>(dir.path()));
    auto c = again.infer("I am tired", Relation::xWant);
    EXPECT_EQ(backend->calls, 1);
    EXPECT_EQ(c.phrases, (std::vector<std::string>{"to rest", "to sleep"}));
    // a smaller limit truncates the cached set
    EXPECT_EQ(again.infer("I am tired", Relation::xWant, 1).phrases.size(), 1u);
}

TEST(Cache, PutGetRoundTrip) {
    InferenceCache cache(std::make_shared<ContentCache>());
    InferenceSet s{"text", Relation::xIntent, {"to help"}, "b", {{"t", 0.5}}};
    EXPECT_FALSE(cache.get("abc").has_value());
    cache.put("abc", s);
    EXPECT_EQ(*cache.get("abc"), s);
}

TEST(Fixture, SaveLoadReplay) {
    TempDir dir;
    std::vector<InferenceSet> sets = {{"I won!", Relation::xReact, {"happy", "proud"}, "fx", {}}};
    save_fixture(dir / "f.jsonl", sets);
    auto backend = FixtureKnowledgeBackend::load(dir / "f.jsonl");
    EXPECT_EQ(backend->backend_id(), "fx");
    EXPECT_EQ(backend->query("I won!", Relation::xReact, 5), sets[0].phrases);
}

TEST(ModelServer, ScriptedProtocol) {
    json seen;
    auto transport = std::make_shared<FunctionTransport>([&](const HttpRequest &req) {
        seen = json::parse(req.body);
        return HttpResponse{200, R"({"phrases": ["to help.", "to help", "to listen"]})"};
    });
    ModelServerConfig cfg;
    cfg.endpoint = "http://127.0.0.1:9/infer";
    cfg.backend_id = "comet-test";
    auto backend = std::make_shared<ModelServerKnowledgeBackend>(cfg, transport);
    KnowledgeService svc(backend, nullptr, 5);
    auto s = svc.infer("Can I help?", Relation::xIntent);
    EXPECT_EQ(seen["relation"], "xIntent");
    EXPECT_EQ(seen["max_phrases"], 5);
    EXPECT_EQ(s.phrases, (std::vector<std::string>{"to help", "to listen"}));
}

TEST(ModelServer, RetriesThenFails) {
    int calls = 0;
    auto transport = std::make_shared<FunctionTransport>([&](const HttpRequest &) {
        ++calls;
        return HttpResponse{503, "busy"};
    });
    ModelServerConfig cfg;
    cfg.endpoint = "http://127.0.0.1:9/infer";
    cfg.retry.max_attempts = 3;
    cfg.retry.initial_backoff = std::chrono::milliseconds(1);
    ModelServerKnowledgeBackend backend(cfg, transport);
    EXPECT_THROW(backend.query("x", Relation::xWant, 5), BackendError);
    EXPECT_EQ(calls, 3);
}

TEST(ModelServer, LocalHttpServer) {
    httplib::Server server;
    server.Post("/infer", [](const httplib::Request &req, httplib::Response &res) {
        auto body = json::parse(req.body);
        json reply = {{"phrases", {"to " + body["relation"].get<std::string>(), "to rest"}}};
        res.set_content(reply.dump(), "application/json");
    });
    int port = server.bind_to_any_port("127.0.0.1");
    std::thread thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    ModelServerConfig cfg;
    cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/infer";
    auto backend = std::make_shared<ModelServerKnowledgeBackend>(cfg, std::make_shared<HttpTransport>());
    KnowledgeService svc(backend, nullptr);
    auto s = svc.infer("I need sleep", Relation::xWant);
    server.stop();
    thread.join();
    EXPECT_EQ(s.phrases, (std::vector<std::string>{"to xWant", "to rest"}));
}
