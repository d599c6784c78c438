#pragma once

#include <atomic>
#include <filesystem>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>

#include "empcause/common/jsonl.hpp"

namespace empcause {

/// Durable key/value store for backend results (inferences, embeddings).
///
/// Each entry lives in its own file `<dir>/<key[0:2]>/<key>.json` holding a SHA-256
/// checksum line followed by the JSON payload. Entries are written through a
/// temporary file and renamed, so readers see either the old or the new record and
/// concurrent writers resolve last-writer-wins. An entry whose checksum does not
/// match is treated as absent. Without a directory the cache is memory-only.
class ContentCache {
  public:
    ContentCache() = default;
    explicit ContentCache(std::filesystem::path dir);

    std::optional<json> get(const std::string &key) const;
    void put(const std::string &key, const json &value);

    bool durable() const { return dir_.has_value(); }
    std::size_t corrupt_reads() const { return corrupt_reads_.load(); }
    std::filesystem::path entry_path(const std::string &key) const;

  private:
    std::optional<std::filesystem::path> dir_;
    mutable std::shared_mutex mutex_;
    mutable std::unordered_map<std::string, json> memory_;
    mutable std::atomic<std::size_t> corrupt_reads_{0};
};

} // namespace empcause
