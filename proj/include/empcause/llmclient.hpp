#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "empcause/common/jsonl.hpp"
#include "empcause/common/parallel.hpp"
#include "empcause/common/transport.hpp"

namespace empcause::llm {

struct ChatMessage {
    std::string role; // system | user | assistant
    std::string content;

    bool operator==(const ChatMessage &) const = default;
};

struct ChatRequest {
    std::string model_id = "gpt-3.5-turbo";
    double temperature = 0.0;
    std::vector<ChatMessage> messages;

    /// SHA-256 over the canonical JSON of (model_id, temperature, messages).
    std::string request_key() const;
};

json to_json(const ChatRequest &request);
ChatRequest chat_request_from_json(const json &j);

enum class MessageLayout {
    single_user,  // the whole prompt as one user message
    system_intro, // introduction as a system message, the rest as a user message
};

MessageLayout message_layout_from_string(std::string_view name);

/// Builds a request from a rendered prompt. For system_intro the caller passes the
/// introduction separately and `prompt` must start with it.
ChatRequest make_request(const std::string &prompt, const std::string &introduction, MessageLayout layout,
                         const std::string &model_id, double temperature);

struct Transcript {
    ChatRequest request;
    std::string request_key;
    std::string reply;
    long long latency_ms = 0;
    int attempt_count = 1;
    std::string recorded_at; // ISO-8601 UTC
    json provider_params = json::object();
};

json to_json(const Transcript &t);
Transcript transcript_from_json(const json &j);

enum class Mode { live, record, replay };

std::string_view to_string(Mode mode);
Mode mode_from_string(std::string_view name);

/// Line-delimited JSON transcripts keyed by request_key. Appends are serialized and
/// the file is rewritten atomically; lookups take a shared lock.
class RecordingStore {
  public:
    RecordingStore() = default; // memory-only
    explicit RecordingStore(std::filesystem::path path);

    std::optional<Transcript> find(const std::string &request_key) const;
    void put(const Transcript &transcript);
    std::size_t size() const;

  private:
    std::optional<std::filesystem::path> path_;
    mutable std::shared_mutex mutex_;
    std::vector<std::string> order_;
    std::unordered_map<std::string, Transcript> by_key_;
};

struct ClientConfig {
    std::string endpoint = "https://api.openai.com/v1/chat/completions";
    std::string api_key_env = "OPENAI_API_KEY";
    /// Explicit credential; takes precedence over the environment variable.
    std::optional<std::string> api_key;
    RetryPolicy retry;
    std::size_t max_parallel = 4;
    std::chrono::milliseconds timeout{120000};
};

/// Chat-completion client with live/record/replay modes.
///
/// live: always calls the endpoint. record: serves an existing recording when one
/// matches the request_key, otherwise calls the endpoint and stores the transcript.
/// replay: serves recordings only and never touches the transport.
class ChatClient {
  public:
    ChatClient(ClientConfig config, Mode mode, std::shared_ptr<Transport> transport, std::shared_ptr<RecordingStore> store);

    Transcript complete(const ChatRequest &request);

    Mode mode() const { return mode_; }
    std::size_t network_calls() const { return network_calls_.load(); }

  private:
    Transcript call_endpoint(const ChatRequest &request, const std::string &key);
    std::string credential() const;

    ClientConfig config_;
    Mode mode_;
    std::shared_ptr<Transport> transport_;
    std::shared_ptr<RecordingStore> store_;
    Semaphore in_flight_;
    std::atomic<std::size_t> network_calls_{0};
};

/// Current time as ISO-8601 UTC with second precision.
std::string utc_timestamp();

} // namespace empcause::llm
