#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace empcause {

struct HttpRequest {
    std::string url; // scheme://host[:port]/path
    std::string body;
    std::vector<std::pair<std::string, std::string>> headers;
    std::chrono::milliseconds timeout{60000};
};

struct HttpResponse {
    int status = 0;
    std::string body;
};

/// Thrown when no HTTP response could be obtained at all (connection refused, timeout).
class TransportError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Every network operation in the library goes through this interface, which makes
/// "zero network activity" assertable by wrapping it in a CountingTransport.
class Transport {
  public:
    virtual ~Transport() = default;
    virtual HttpResponse post_json(const HttpRequest &request) = 0;
};

/// cpp-httplib backed transport (http and https).
class HttpTransport final : public Transport {
  public:
    HttpResponse post_json(const HttpRequest &request) override;
};

class CountingTransport final : public Transport {
  public:
    explicit CountingTransport(std::shared_ptr<Transport> inner) : inner_(std::move(inner)) {}
    HttpResponse post_json(const HttpRequest &request) override {
        ++calls_;
        return inner_->post_json(request);
    }
    std::size_t calls() const { return calls_.load(); }

  private:
    std::shared_ptr<Transport> inner_;
    std::atomic<std::size_t> calls_{0};
};

/// Refuses every request. Installed for replay/fixture runs.
class OfflineTransport final : public Transport {
  public:
    HttpResponse post_json(const HttpRequest &request) override;
};

/// Transport backed by a callable; used for scripted local responders.
class FunctionTransport final : public Transport {
  public:
    using Handler = std::function<HttpResponse(const HttpRequest &)>;
    explicit FunctionTransport(Handler handler) : handler_(std::move(handler)) {}
    HttpResponse post_json(const HttpRequest &request) override { return handler_(request); }

  private:
    Handler handler_;
};

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds initial_backoff{250};
    double multiplier = 2.0;
    std::chrono::milliseconds max_backoff{8000};
};

/// POSTs JSON, retrying transport failures and 429/5xx responses with exponential
/// backoff. Returns the final response and the number of attempts made. Throws
/// TransportError if every attempt failed to connect.
std::pair<HttpResponse, int> post_with_retries(Transport &transport, const HttpRequest &request, const RetryPolicy &policy);

} // namespace empcause
