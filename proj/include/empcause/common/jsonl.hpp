#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace empcause {

using nlohmann::json;

struct JsonLine {
    std::size_t line = 0; // 1-based
    json value;
};

std::string read_file(const std::filesystem::path &path);

/// Writes through a temporary sibling and renames it into place, so readers never
/// observe a partially written file.
void write_file_atomic(const std::filesystem::path &path, std::string_view content);

/// Parses line-delimited JSON. Blank lines are skipped. A malformed line throws
/// ValidationError naming the file and line number.
std::vector<JsonLine> read_jsonl(const std::filesystem::path &path);

std::string to_jsonl(const std::vector<json> &records);
void write_jsonl(const std::filesystem::path &path, const std::vector<json> &records);

/// Canonical single-line JSON (sorted keys, no spaces) used wherever bytes are hashed.
std::string canonical_dump(const json &value);

} // namespace empcause
