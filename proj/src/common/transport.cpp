#include "empcause/common/transport.hpp"

#include <algorithm>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace empcause {

namespace {

std::pair<std::string, std::string> split_url(const std::string &url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw TransportError("URL lacks a scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos)
        return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

bool retryable(int status) { return status == 429 || status >= 500; }

} // namespace

HttpResponse HttpTransport::post_json(const HttpRequest &request) {
    auto [origin, path] = split_url(request.url);
    httplib::Client client(origin);
    auto seconds = std::chrono::duration_cast<std::chrono::seconds>(request.timeout).count();
    client.set_connection_timeout(std::max<long>(1, static_cast<long>(seconds)));
    client.set_read_timeout(std::max<long>(1, static_cast<long>(seconds)));
    httplib::Headers headers;
    for (const auto &[k, v] : request.headers)
        headers.emplace(k, v);
    auto result = client.Post(path, headers, request.body, "application/json");
    if (!result)
        throw TransportError(fmt::format("POST {} failed: {}", request.url, httplib::to_string(result.error())));
    return {result->status, result->body};
}

HttpResponse OfflineTransport::post_json(const HttpRequest &request) {
    throw TransportError("network access is disabled in offline mode (attempted POST " + request.url + ")");
}

std::pair<HttpResponse, int> post_with_retries(Transport &transport, const HttpRequest &request, const RetryPolicy &policy) {
    auto backoff = policy.initial_backoff;
    const int attempts = std::max(1, policy.max_attempts);
    std::string last_error;
    for (int attempt = 1; attempt <= attempts; ++attempt) {
        try {
            HttpResponse response = transport.post_json(request);
            if (!retryable(response.status) || attempt == attempts)
                return {response, attempt};
            last_error = fmt::format("HTTP {}", response.status);
        } catch (const TransportError &e) {
            last_error = e.what();
            if (attempt == attempts)
                throw TransportError(fmt::format("{} (after {} attempts)", last_error, attempts));
        }
        spdlog::warn("POST {} attempt {}/{} failed: {}; retrying in {} ms", request.url, attempt, attempts, last_error,
                     backoff.count());
        std::this_thread::sleep_for(backoff);
        backoff = std::min(policy.max_backoff,
                           std::chrono::milliseconds(static_cast<long long>(static_cast<double>(backoff.count()) * policy.multiplier)));
    }
    throw TransportError(last_error);
}

} // namespace empcause
