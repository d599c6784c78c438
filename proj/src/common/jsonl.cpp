#include "empcause/common/jsonl.hpp"

#include <fstream>
#include <sstream>
#include <system_error>
#include <atomic>
#include <unistd.h>

#include <fmt/format.h>

#include "empcause/common/error.hpp"

namespace empcause {

namespace fs = std::filesystem;

std::string read_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(fmt::format("cannot open '{}'", path.string()));
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_file_atomic(const fs::path &path, std::string_view content) {
    static std::atomic<unsigned long> counter{0};
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += fmt::format(".tmp.{}.{}", static_cast<long>(::getpid()), counter.fetch_add(1));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw Error(fmt::format("cannot write '{}'", tmp.string()));
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out)
            throw Error(fmt::format("short write to '{}'", tmp.string()));
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw Error(fmt::format("cannot move '{}' into place: {}", path.string(), ec.message()));
    }
}

std::vector<JsonLine> read_jsonl(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(fmt::format("cannot open '{}'", path.string()));
    std::vector<JsonLine> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos)
            continue;
        try {
            out.push_back({number, json::parse(line)});
        } catch (const json::parse_error &e) {
            throw ValidationError(fmt::format("{}:{}: malformed JSON: {}", path.string(), number, e.what()));
        }
    }
    return out;
}

std::string to_jsonl(const std::vector<json> &records) {
    std::string out;
    for (const auto &record : records) {
        out += record.dump(-1, ' ', false, json::error_handler_t::replace);
        out += '\n';
    }
    return out;
}

void write_jsonl(const fs::path &path, const std::vector<json> &records) { write_file_atomic(path, to_jsonl(records)); }

std::string canonical_dump(const json &value) {
    // nlohmann::json objects are std::map backed, so keys are already sorted.
    return value.dump(-1, ' ', false, json::error_handler_t::replace);
}

} // namespace empcause
