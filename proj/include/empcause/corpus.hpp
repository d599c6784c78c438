#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "empcause/common/jsonl.hpp"

namespace empcause::corpus {

enum class Speaker { user, sys };

std::string_view to_string(Speaker speaker);
Speaker speaker_from_string(std::string_view name);

struct Utterance {
    Speaker speaker = Speaker::user;
    std::string text;
    std::size_t index = 0; // position within the parent conversation

    bool operator==(const Utterance &) const = default;
};

struct Conversation {
    std::string id;
    std::string emotion;
    std::string situation;
    std::vector<Utterance> utterances;

    bool operator==(const Conversation &) const = default;
};

/// The dataset's fixed emotion label set, loaded from a plain-text manifest
/// (one label per line, '#' comments and blank lines ignored).
class EmotionInventory {
  public:
    EmotionInventory() = default;
    explicit EmotionInventory(std::vector<std::string> labels);

    static EmotionInventory load(const std::filesystem::path &manifest);

    bool contains(std::string_view label) const;
    /// Throws ValidationError for unknown labels.
    std::size_t index_of(std::string_view label) const;
    const std::vector<std::string> &labels() const { return labels_; }
    std::size_t size() const { return labels_.size(); }

  private:
    std::vector<std::string> labels_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Diagnostic {
    enum class Severity { warning, error };
    Severity severity = Severity::error;
    std::size_t line = 0;
    std::string conversation_id;
    std::string message;
};

struct LoadResult {
    std::vector<Conversation> conversations;
    std::vector<Diagnostic> diagnostics;

    bool has_errors() const;
};

inline constexpr std::string_view kSchemaJsonlV1 = "conversations-jsonl-v1";

/// Checks every Conversation invariant; throws ValidationError naming the id.
void validate(const Conversation &conversation, const EmotionInventory &inventory);

Conversation conversation_from_json(const json &record, const EmotionInventory &inventory);
json to_json(const Conversation &conversation);

/// Loads line-delimited conversations. Invalid records are skipped and reported in
/// the diagnostics with their line number; a missing file or unknown schema throws.
LoadResult load_dataset(const std::filesystem::path &path, const EmotionInventory &inventory,
                        std::string_view schema = kSchemaJsonlV1);

std::string serialize(std::span<const Conversation> conversations);
void save_dataset(const std::filesystem::path &path, std::span<const Conversation> conversations);

struct SplitRatios {
    double train = 0.8;
    double valid = 0.1;
    double test = 0.1;

    /// Parses "8:1:1" or "0.8,0.1,0.1".
    static SplitRatios parse(std::string_view spec);
};

struct SplitSet {
    std::vector<Conversation> train, valid, test;
    std::uint64_t seed = 0;
    SplitRatios ratios;
};

/// Seeded shuffle, then valid/test sizes are floor(n * ratio) and train takes the remainder.
SplitSet split(std::vector<Conversation> conversations, const SplitRatios &ratios, std::uint64_t seed);

enum class SampleMode { single_turn, multi_turn };

std::string_view to_string(SampleMode mode);
SampleMode sample_mode_from_string(std::string_view name);

struct TestSample {
    std::string conversation_id;
    SampleMode mode = SampleMode::single_turn;
    std::string emotion;
    std::string situation;
    std::vector<Utterance> context;
    Utterance reference;

    std::string sample_id() const;
    const Utterance &last_user_turn() const { return context.back(); }
};

json to_json(const TestSample &sample);
TestSample test_sample_from_json(const json &record);
std::vector<TestSample> load_test_samples(const std::filesystem::path &path);
void save_test_samples(const std::filesystem::path &path, std::span<const TestSample> samples);

/// Longest prefix ending in a user turn that is followed by a sys turn, with that
/// sys turn as reference. Returns nullopt when no such cut exists.
std::optional<TestSample> longest_cut(const Conversation &conversation);

/// single_turn: turn 0 as context, turn 1 as reference.
/// multi_turn: the longest user-final prefix (at least two turns) and the next sys turn.
/// Conversations without a usable cut are skipped with a warning.
std::vector<TestSample> make_test_samples(std::span<const Conversation> conversations, SampleMode mode);

/// Uniform random subset of `count` samples (all of them if fewer), in original order.
std::vector<TestSample> subsample(std::span<const TestSample> samples, std::size_t count, std::uint64_t seed);

/// "user: ...\nsys: ..." rendering of dialogue turns; `tag_suffix` is appended to
/// each speaker tag (e.g. "1" gives "user1:").
std::string render_turns(std::span<const Utterance> turns, std::string_view tag_suffix = "", std::string_view separator = "\n");

} // namespace empcause::corpus
