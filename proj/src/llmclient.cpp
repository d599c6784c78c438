#include "empcause/llmclient.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>

#include <fmt/chrono.h>
#include <fmt/format.h>

#include "empcause/common/error.hpp"
#include "empcause/common/hash.hpp"
#include "empcause/common/text.hpp"

namespace empcause::llm {

namespace fs = std::filesystem;

json to_json(const ChatRequest &r) {
    json messages = json::array();
    for (const auto &m : r.messages)
        messages.push_back({{"role", m.role}, {"content", m.content}});
    return {{"model", r.model_id}, {"temperature", r.temperature}, {"messages", messages}};
}

ChatRequest chat_request_from_json(const json &j) {
    ChatRequest r;
    r.model_id = j.at("model").get<std::string>();
    r.temperature = j.at("temperature").get<double>();
    for (const auto &m : j.at("messages"))
        r.messages.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
    return r;
}

std::string ChatRequest::request_key() const { return sha256_hex(canonical_dump(to_json(*this))); }

MessageLayout message_layout_from_string(std::string_view name) {
    if (name == "single_user")
        return MessageLayout::single_user;
    if (name == "system_intro")
        return MessageLayout::system_intro;
    throw PreconditionError(fmt::format("unknown message layout '{}'", name));
}

ChatRequest make_request(const std::string &prompt, const std::string &introduction, MessageLayout layout, const std::string &model_id,
                         double temperature) {
    if (temperature < 0)
        throw PreconditionError("temperature must be non-negative");
    ChatRequest r;
    r.model_id = model_id;
    r.temperature = temperature;
    if (layout == MessageLayout::single_user) {
        r.messages.push_back({"user", prompt});
        return r;
    }
    if (prompt.rfind(introduction, 0) != 0)
        throw PreconditionError("system_intro layout: prompt does not start with the introduction");
    r.messages.push_back({"system", introduction});
    r.messages.push_back({"user", text::trim(prompt.substr(introduction.size())) + "\n"});
    return r;
}

json to_json(const Transcript &t) {
    return {{"request_key", t.request_key}, {"request", to_json(t.request)}, {"reply", t.reply},
            {"latency_ms", t.latency_ms},   {"attempt_count", t.attempt_count}, {"recorded_at", t.recorded_at},
            {"provider_params", t.provider_params}};
}

Transcript transcript_from_json(const json &j) {
    Transcript t;
    t.request = chat_request_from_json(j.at("request"));
    t.request_key = j.value("request_key", t.request.request_key());
    t.reply = j.at("reply").get<std::string>();
    t.latency_ms = j.value("latency_ms", 0LL);
    t.attempt_count = j.value("attempt_count", 1);
    t.recorded_at = j.value("recorded_at", std::string{});
    t.provider_params = j.value("provider_params", json::object());
    return t;
}

std::string_view to_string(Mode mode) {
    switch (mode) {
    case Mode::live:
        return "live";
    case Mode::record:
        return "record";
    case Mode::replay:
        return "replay";
    }
    return "?";
}

Mode mode_from_string(std::string_view name) {
    if (name == "live")
        return Mode::live;
    if (name == "record")
        return Mode::record;
    if (name == "replay")
        return Mode::replay;
    throw PreconditionError(fmt::format("unknown client mode '{}' (live|record|replay)", name));
}

RecordingStore::RecordingStore(fs::path path) : path_(std::move(path)) {
    if (!fs::exists(*path_))
        return;
    for (const auto &line : read_jsonl(*path_)) {
        Transcript t;
        try {
            t = transcript_from_json(line.value);
        } catch (const json::exception &e) {
            throw ValidationError(fmt::format("{}:{}: malformed transcript: {}", path_->string(), line.line, e.what()));
        }
        if (t.request_key != t.request.request_key())
            throw ValidationError(fmt::format("{}:{}: request_key does not match the stored request", path_->string(), line.line));
        if (!by_key_.count(t.request_key))
            order_.push_back(t.request_key);
        by_key_[t.request_key] = std::move(t);
    }
}

std::optional<Transcript> RecordingStore::find(const std::string &key) const {
    std::shared_lock lock(mutex_);
    auto it = by_key_.find(key);
    if (it == by_key_.end())
        return std::nullopt;
    return it->second;
}

void RecordingStore::put(const Transcript &t) {
    std::unique_lock lock(mutex_);
    if (!by_key_.count(t.request_key))
        order_.push_back(t.request_key);
    by_key_[t.request_key] = t;
    if (!path_)
        return;
    std::vector<json> lines;
    lines.reserve(order_.size());
    for (const auto &key : order_)
        lines.push_back(to_json(by_key_.at(key)));
    write_jsonl(*path_, lines);
}

std::size_t RecordingStore::size() const {
    std::shared_lock lock(mutex_);
    return by_key_.size();
}

std::string utc_timestamp() {
    auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(now));
}

ChatClient::ChatClient(ClientConfig config, Mode mode, std::shared_ptr<Transport> transport, std::shared_ptr<RecordingStore> store)
    : config_(std::move(config)), mode_(mode), transport_(std::move(transport)),
      store_(store ? std::move(store) : std::make_shared<RecordingStore>()), in_flight_(config_.max_parallel) {
    if (mode_ != Mode::replay && !transport_)
        throw PreconditionError("live and record modes need a transport");
}

std::string ChatClient::credential() const {
    if (config_.api_key && !config_.api_key->empty())
        return *config_.api_key;
    const char *value = std::getenv(config_.api_key_env.c_str());
    if (!value || !*value)
        throw BackendError(fmt::format("authentication missing: set ${} to call {}", config_.api_key_env, config_.endpoint));
    return value;
}

Transcript ChatClient::complete(const ChatRequest &request) {
    if (request.messages.empty())
        throw PreconditionError("chat request has no messages");
    const std::string key = request.request_key();
    if (mode_ != Mode::live) {
        if (auto hit = store_->find(key))
            return *hit;
        if (mode_ == Mode::replay)
            throw ReplayMissError(fmt::format("no recording for request_key {}", key), key);
    }
    Transcript t = call_endpoint(request, key);
    if (mode_ == Mode::record)
        store_->put(t);
    return t;
}

Transcript ChatClient::call_endpoint(const ChatRequest &request, const std::string &key) {
    HttpRequest http{config_.endpoint, to_json(request).dump(), {{"Authorization", "Bearer " + credential()}}, config_.timeout};

    SemaphoreGuard guard(in_flight_);
    ++network_calls_;
    auto start = std::chrono::steady_clock::now();
    std::pair<HttpResponse, int> result;
    try {
        result = post_with_retries(*transport_, http, config_.retry);
    } catch (const TransportError &e) {
        throw BackendError(fmt::format("chat endpoint unreachable: {}", e.what()));
    }
    auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
    const auto &[response, attempts] = result;
    if (response.status == 401 || response.status == 403)
        throw BackendError(fmt::format("chat endpoint rejected the credential (HTTP {})", response.status));
    if (response.status != 200)
        throw BackendError(fmt::format("chat endpoint failed after {} attempts: HTTP {}: {}", attempts, response.status, response.body));

    Transcript t;
    t.request = request;
    t.request_key = key;
    t.latency_ms = latency.count();
    t.attempt_count = attempts;
    t.recorded_at = utc_timestamp();
    try {
        json body = json::parse(response.body);
        t.reply = body.at("choices").at(0).at("message").at("content").get<std::string>();
        for (const char *field : {"model", "system_fingerprint", "usage"})
            if (body.contains(field))
                t.provider_params[field] = body[field];
    } catch (const json::exception &e) {
        throw BackendError(fmt::format("chat endpoint sent a malformed reply: {}", e.what()));
    }
    if (text::trim(t.reply).empty())
        throw BackendError("chat endpoint returned an empty reply");
    return t;
}

} // namespace empcause::llm
