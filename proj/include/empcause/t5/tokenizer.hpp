#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace empcause::t5 {

/// Word-level vocabulary over the shared lowercase tokenizer. Ids 0..3 are
/// reserved for the special tokens.
class Vocabulary {
  public:
    static constexpr int kPad = 0;
    static constexpr int kEos = 1;
    static constexpr int kUnk = 2;
    static constexpr int kBos = 3;

    Vocabulary();
    explicit Vocabulary(std::vector<std::string> tokens);

    /// Tokens seen at least min_count times, most frequent first (ties alphabetical),
    /// capped at max_size entries including specials (0 = no cap).
    static Vocabulary build(std::span<const std::string> texts, std::size_t min_count = 1, std::size_t max_size = 0);
    static Vocabulary load(const std::filesystem::path &path);
    void save(const std::filesystem::path &path) const;

    /// Ids for a text, truncated to max_len when non-zero. No EOS is appended.
    std::vector<int> encode(std::string_view text, std::size_t max_len = 0) const;
    /// Joins tokens with spaces, dropping specials and attaching punctuation.
    std::string decode(std::span<const int> ids) const;

    int id_of(const std::string &token) const;
    const std::string &token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return tokens_.size(); }
    /// Content hash of the token list.
    const std::string &id() const { return id_; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    std::string id_;
};

} // namespace empcause::t5
