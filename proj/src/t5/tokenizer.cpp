#include "empcause/t5/tokenizer.hpp"

#include <algorithm>
#include <map>

#include <fmt/format.h>

#include "empcause/common/error.hpp"
#include "empcause/common/hash.hpp"
#include "empcause/common/jsonl.hpp"
#include "empcause/common/text.hpp"

namespace empcause::t5 {

namespace {

const std::vector<std::string> kSpecials = {"<pad>", "</s>", "<unk>", "<s>"};

} // namespace

Vocabulary::Vocabulary() : Vocabulary(kSpecials) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < kSpecials.size() || !std::equal(kSpecials.begin(), kSpecials.end(), tokens_.begin()))
        throw ValidationError("vocabulary must start with <pad> </s> <unk> <s>");
    for (std::size_t i = 0; i < tokens_.size(); ++i)
        if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
            throw ValidationError(fmt::format("duplicate vocabulary entry '{}'", tokens_[i]));
    id_ = "word-v1-" + sha256_hex(text::join(tokens_, "\n")).substr(0, 12);
}

Vocabulary Vocabulary::build(std::span<const std::string> texts, std::size_t min_count, std::size_t max_size) {
    std::map<std::string, std::size_t> counts;
    for (const auto &t : texts)
        for (auto &tok : text::word_tokens(t))
            ++counts[tok];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto &a, const auto &b) { return a.second > b.second; });
    std::vector<std::string> tokens = kSpecials;
    for (const auto &[tok, n] : ranked) {
        if (n < min_count || (max_size && tokens.size() >= max_size))
            break;
        tokens.push_back(tok);
    }
    return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::filesystem::path &path) {
    std::vector<std::string> tokens;
    for (auto &line : text::split(read_file(path), "\n"))
        if (!line.empty())
            tokens.push_back(std::move(line));
    return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path &path) const { write_file_atomic(path, text::join(tokens_, "\n") + "\n"); }

std::vector<int> Vocabulary::encode(std::string_view s, std::size_t max_len) const {
    std::vector<int> ids;
    for (const auto &tok : text::word_tokens(s)) {
        if (max_len && ids.size() >= max_len)
            break;
        ids.push_back(id_of(tok));
    }
    return ids;
}

int Vocabulary::id_of(const std::string &tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        if (id == kPad || id == kBos)
            continue;
        if (id == kEos)
            break;
        const std::string &tok = token(id);
        bool attach = tok.size() == 1 && std::string_view(".,!?;:)'").find(tok[0]) != std::string_view::npos;
        if (!out.empty() && !attach)
            out += ' ';
        out += tok;
    }
    return out;
}

} // namespace empcause::t5
