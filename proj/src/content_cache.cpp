#include "empcause/content_cache.hpp"

#include <mutex>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/error.hpp"
#include "empcause/common/hash.hpp"

namespace empcause {

namespace fs = std::filesystem;

ContentCache::ContentCache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(*dir_); }

fs::path ContentCache::entry_path(const std::string &key) const {
    if (!dir_)
        throw Error("memory-only cache has no entry paths");
    if (key.size() < 3 || key.find_first_of("/\\.") != std::string::npos)
        throw PreconditionError(fmt::format("invalid cache key '{}'", key));
    return *dir_ / key.substr(0, 2) / (key + ".json");
}

std::optional<json> ContentCache::get(const std::string &key) const {
    {
        std::shared_lock lock(mutex_);
        if (auto it = memory_.find(key); it != memory_.end())
            return it->second;
    }
    if (!dir_)
        return std::nullopt;
    fs::path path = entry_path(key);
    if (!fs::exists(path))
        return std::nullopt;

    std::string content;
    try {
        content = read_file(path);
    } catch (const Error &) {
        return std::nullopt;
    }
    auto newline = content.find('\n');
    std::string payload = newline == std::string::npos ? "" : content.substr(newline + 1);
    while (!payload.empty() && payload.back() == '\n')
        payload.pop_back();
    if (newline == std::string::npos || content.substr(0, newline) != sha256_hex(payload)) {
        ++corrupt_reads_;
        spdlog::warn("cache entry '{}' failed its checksum; treating as absent", path.string());
        return std::nullopt;
    }
    json value;
    try {
        value = json::parse(payload);
    } catch (const json::parse_error &) {
        ++corrupt_reads_;
        spdlog::warn("cache entry '{}' is not valid JSON; treating as absent", path.string());
        return std::nullopt;
    }
    std::unique_lock lock(mutex_);
    memory_[key] = value;
    return value;
}

void ContentCache::put(const std::string &key, const json &value) {
    if (dir_) {
        std::string payload = canonical_dump(value);
        write_file_atomic(entry_path(key), sha256_hex(payload) + "\n" + payload + "\n");
    }
    std::unique_lock lock(mutex_);
    memory_[key] = value;
}

} // namespace empcause
