#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace empcause::text {

std::string trim(std::string_view s);
/// Trims and collapses every run of whitespace into a single space.
std::string collapse_whitespace(std::string_view s);
std::string to_lower(std::string_view s);
/// Converts CRLF and lone CR to LF.
std::string normalize_newlines(std::string_view s);

std::vector<std::string> split(std::string_view s, std::string_view delimiters);
std::string join(const std::vector<std::string> &parts, std::string_view sep);

bool iequals(std::string_view a, std::string_view b);
bool istarts_with(std::string_view s, std::string_view prefix);
/// Case-insensitive (ASCII) search; returns npos when absent.
std::size_t ifind(std::string_view haystack, std::string_view needle, std::size_t from = 0);

bool is_punctuation_token(std::string_view token);

/// Lowercased word tokenizer shared by the metrics and the generator vocabulary.
///
/// Word characters are ASCII alphanumerics, any non-ASCII byte (UTF-8 sequences stay
/// intact) and an apostrophe between two word characters. Every other non-space
/// character becomes its own single-character token.
std::vector<std::string> word_tokens(std::string_view s);

/// Stable identifier of the tokenizer rules above, pinned in metric digests.
inline constexpr std::string_view kTokenizerId = "lower-alnum-punct-v1";

} // namespace empcause::text
