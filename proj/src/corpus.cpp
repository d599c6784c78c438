#include "empcause/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/error.hpp"
#include "empcause/common/random.hpp"
#include "empcause/common/text.hpp"

namespace empcause::corpus {

namespace fs = std::filesystem;

std::string_view to_string(Speaker speaker) { return speaker == Speaker::user ? "user" : "sys"; }

Speaker speaker_from_string(std::string_view name) {
    if (name == "user")
        return Speaker::user;
    if (name == "sys")
        return Speaker::sys;
    throw ValidationError(fmt::format("unknown speaker '{}'", name));
}

EmotionInventory::EmotionInventory(std::vector<std::string> labels) : labels_(std::move(labels)) {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        if (!index_.emplace(labels_[i], i).second)
            throw ValidationError(fmt::format("duplicate emotion label '{}'", labels_[i]));
    }
}

EmotionInventory EmotionInventory::load(const fs::path &manifest) {
    std::vector<std::string> labels;
    for (const auto &line : text::split(read_file(manifest), "\n")) {
        std::string label = text::trim(line);
        if (label.empty() || label[0] == '#')
            continue;
        labels.push_back(label);
    }
    if (labels.empty())
        throw ValidationError(fmt::format("emotion manifest '{}' lists no labels", manifest.string()));
    return EmotionInventory(std::move(labels));
}

bool EmotionInventory::contains(std::string_view label) const { return index_.count(std::string(label)) > 0; }

std::size_t EmotionInventory::index_of(std::string_view label) const {
    auto it = index_.find(std::string(label));
    if (it == index_.end())
        throw ValidationError(fmt::format("unknown emotion label '{}'", label));
    return it->second;
}

bool LoadResult::has_errors() const {
    return std::any_of(diagnostics.begin(), diagnostics.end(),
                       [](const Diagnostic &d) { return d.severity == Diagnostic::Severity::error; });
}

void validate(const Conversation &c, const EmotionInventory &inventory) {
    if (text::trim(c.id).empty())
        throw ValidationError("conversation has an empty id");
    if (!inventory.contains(c.emotion))
        throw ValidationError(fmt::format("conversation '{}': unknown emotion label '{}'", c.id, c.emotion));
    if (c.utterances.empty())
        throw ValidationError(fmt::format("conversation '{}': no utterances", c.id));
    bool has_user = false, has_sys = false;
    for (std::size_t i = 0; i < c.utterances.size(); ++i) {
        const auto &u = c.utterances[i];
        if (u.index != i)
            throw ValidationError(fmt::format("conversation '{}': utterance {} carries index {}", c.id, i, u.index));
        if (text::trim(u.text).empty())
            throw ValidationError(fmt::format("conversation '{}': utterance {} is empty", c.id, i));
        Speaker expected = i % 2 == 0 ? Speaker::user : Speaker::sys;
        if (u.speaker != expected)
            throw ValidationError(fmt::format("conversation '{}': speakers do not alternate at turn {} (expected {}, got {})", c.id,
                                              i, to_string(expected), to_string(u.speaker)));
        (u.speaker == Speaker::user ? has_user : has_sys) = true;
    }
    if (!has_user || !has_sys)
        throw ValidationError(fmt::format("conversation '{}': needs at least one user and one sys utterance", c.id));
}

Conversation conversation_from_json(const json &record, const EmotionInventory &inventory) {
    if (!record.is_object())
        throw ValidationError("record is not a JSON object");
    Conversation c;
    try {
        c.id = record.at("id").get<std::string>();
        c.emotion = record.at("emotion").get<std::string>();
        c.situation = record.value("situation", std::string{});
        const auto &turns = record.at("utterances");
        if (!turns.is_array())
            throw ValidationError(fmt::format("conversation '{}': 'utterances' is not an array", c.id));
        for (std::size_t i = 0; i < turns.size(); ++i) {
            Utterance u;
            u.speaker = speaker_from_string(turns[i].at("speaker").get<std::string>());
            u.text = turns[i].at("text").get<std::string>();
            u.index = i;
            c.utterances.push_back(std::move(u));
        }
    } catch (const json::exception &e) {
        throw ValidationError(fmt::format("conversation '{}': {}", c.id.empty() ? "?" : c.id, e.what()));
    }
    validate(c, inventory);
    return c;
}

json to_json(const Conversation &c) {
    json turns = json::array();
    for (const auto &u : c.utterances)
        turns.push_back({{"speaker", to_string(u.speaker)}, {"text", u.text}});
    return {{"id", c.id}, {"emotion", c.emotion}, {"situation", c.situation}, {"utterances", turns}};
}

LoadResult load_dataset(const fs::path &path, const EmotionInventory &inventory, std::string_view schema) {
    if (schema != kSchemaJsonlV1)
        throw PreconditionError(fmt::format("unsupported dataset schema '{}'", schema));
    if (!fs::exists(path))
        throw Error(fmt::format("dataset file '{}' does not exist", path.string()));

    LoadResult result;
    std::ifstream in(path, std::ios::binary);
    std::string line;
    std::size_t number = 0;
    std::unordered_set<std::string> seen;
    while (std::getline(in, line)) {
        ++number;
        if (text::trim(line).empty())
            continue;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::parse_error &e) {
            result.diagnostics.push_back({Diagnostic::Severity::error, number, "", fmt::format("malformed record: {}", e.what())});
            continue;
        }
        std::string id = record.is_object() && record.contains("id") && record["id"].is_string() ? record["id"].get<std::string>() : "";
        try {
            Conversation c = conversation_from_json(record, inventory);
            if (!seen.insert(c.id).second)
                throw ValidationError(fmt::format("conversation '{}': duplicate id", c.id));
            result.conversations.push_back(std::move(c));
        } catch (const ValidationError &e) {
            result.diagnostics.push_back({Diagnostic::Severity::error, number, id, e.what()});
        }
    }
    if (result.conversations.empty() && result.diagnostics.empty())
        result.diagnostics.push_back({Diagnostic::Severity::warning, 0, "", fmt::format("dataset '{}' is empty", path.string())});
    for (const auto &d : result.diagnostics) {
        if (d.severity == Diagnostic::Severity::warning)
            spdlog::warn("{}", d.message);
        else
            spdlog::error("{}:{}: {}", path.string(), d.line, d.message);
    }
    return result;
}

std::string serialize(std::span<const Conversation> conversations) {
    std::vector<json> records;
    records.reserve(conversations.size());
    for (const auto &c : conversations)
        records.push_back(to_json(c));
    return to_jsonl(records);
}

void save_dataset(const fs::path &path, std::span<const Conversation> conversations) {
    write_file_atomic(path, serialize(conversations));
}

SplitRatios SplitRatios::parse(std::string_view spec) {
    auto parts = text::split(spec, spec.find(':') != std::string_view::npos ? ":" : ",");
    if (parts.size() != 3)
        throw PreconditionError(fmt::format("ratios '{}' must have three parts", spec));
    double v[3];
    for (int i = 0; i < 3; ++i) {
        try {
            v[i] = std::stod(parts[i]);
        } catch (const std::exception &) {
            throw PreconditionError(fmt::format("ratio '{}' is not a number", parts[i]));
        }
    }
    double total = v[0] + v[1] + v[2];
    if (total <= 0)
        throw PreconditionError("ratios must not all be zero");
    return {v[0] / total, v[1] / total, v[2] / total};
}

SplitSet split(std::vector<Conversation> conversations, const SplitRatios &ratios, std::uint64_t seed) {
    if (conversations.empty())
        throw PreconditionError("cannot split an empty conversation list");
    if (ratios.train < 0 || ratios.valid < 0 || ratios.test < 0)
        throw PreconditionError("split ratios must be non-negative");
    if (std::abs(ratios.train + ratios.valid + ratios.test - 1.0) > 1e-9)
        throw PreconditionError("split ratios must sum to 1");

    const std::size_t n = conversations.size();
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999999999999996.
    auto floor_size = [n](double r) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9)); };
    const std::size_t n_valid = floor_size(ratios.valid);
    const std::size_t n_test = floor_size(ratios.test);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);

    SplitSet out;
    out.seed = seed;
    out.ratios = ratios;
    for (std::size_t i = 0; i < n; ++i) {
        auto &c = conversations[order[i]];
        if (i < n_valid)
            out.valid.push_back(std::move(c));
        else if (i < n_valid + n_test)
            out.test.push_back(std::move(c));
        else
            out.train.push_back(std::move(c));
    }
    return out;
}

std::string_view to_string(SampleMode mode) { return mode == SampleMode::single_turn ? "single_turn" : "multi_turn"; }

SampleMode sample_mode_from_string(std::string_view name) {
    if (name == "single_turn" || name == "single")
        return SampleMode::single_turn;
    if (name == "multi_turn" || name == "multi")
        return SampleMode::multi_turn;
    throw PreconditionError(fmt::format("unknown sample mode '{}'", name));
}

std::string TestSample::sample_id() const { return fmt::format("{}#{}", conversation_id, to_string(mode)); }

json to_json(const TestSample &s) {
    json context = json::array();
    for (const auto &u : s.context)
        context.push_back({{"speaker", to_string(u.speaker)}, {"text", u.text}, {"index", u.index}});
    return {{"sample_id", s.sample_id()},
            {"conversation_id", s.conversation_id},
            {"mode", to_string(s.mode)},
            {"emotion", s.emotion},
            {"situation", s.situation},
            {"context", context},
            {"reference",
             {{"speaker", to_string(s.reference.speaker)}, {"text", s.reference.text}, {"index", s.reference.index}}}};
}

TestSample test_sample_from_json(const json &r) {
    auto utterance = [](const json &u) {
        return Utterance{speaker_from_string(u.at("speaker").get<std::string>()), u.at("text").get<std::string>(),
                         u.at("index").get<std::size_t>()};
    };
    TestSample s;
    try {
        s.conversation_id = r.at("conversation_id").get<std::string>();
        s.mode = sample_mode_from_string(r.at("mode").get<std::string>());
        s.emotion = r.value("emotion", std::string{});
        s.situation = r.value("situation", std::string{});
        for (const auto &u : r.at("context"))
            s.context.push_back(utterance(u));
        s.reference = utterance(r.at("reference"));
    } catch (const json::exception &e) {
        throw ValidationError(fmt::format("malformed test sample: {}", e.what()));
    }
    if (s.context.empty() || s.context.back().speaker != Speaker::user || s.reference.speaker != Speaker::sys)
        throw ValidationError(fmt::format("test sample '{}' must end in a user turn and reference a sys turn", s.sample_id()));
    return s;
}

std::vector<TestSample> load_test_samples(const fs::path &path) {
    std::vector<TestSample> out;
    for (const auto &line : read_jsonl(path)) {
        try {
            out.push_back(test_sample_from_json(line.value));
        } catch (const ValidationError &e) {
            throw ValidationError(fmt::format("{}:{}: {}", path.string(), line.line, e.what()));
        }
    }
    return out;
}

void save_test_samples(const fs::path &path, std::span<const TestSample> samples) {
    std::vector<json> records;
    for (const auto &s : samples)
        records.push_back(to_json(s));
    write_jsonl(path, records);
}

namespace {

TestSample make_sample(const Conversation &c, SampleMode mode, std::size_t reference_index) {
    TestSample s;
    s.conversation_id = c.id;
    s.mode = mode;
    s.emotion = c.emotion;
    s.situation = c.situation;
    s.context.assign(c.utterances.begin(), c.utterances.begin() + static_cast<std::ptrdiff_t>(reference_index));
    s.reference = c.utterances[reference_index];
    return s;
}

// Index of the last sys turn that directly follows a user turn, if any.
std::optional<std::size_t> last_reference_index(const Conversation &c) {
    for (std::size_t i = c.utterances.size(); i-- > 1;) {
        if (c.utterances[i].speaker == Speaker::sys && c.utterances[i - 1].speaker == Speaker::user)
            return i;
    }
    return std::nullopt;
}

} // namespace

std::optional<TestSample> longest_cut(const Conversation &c) {
    auto ref = last_reference_index(c);
    if (!ref)
        return std::nullopt;
    return make_sample(c, *ref + 1 >= 3 ? SampleMode::multi_turn : SampleMode::single_turn, *ref);
}

std::vector<TestSample> make_test_samples(std::span<const Conversation> conversations, SampleMode mode) {
    std::vector<TestSample> out;
    for (const auto &c : conversations) {
        if (mode == SampleMode::single_turn) {
            if (c.utterances.size() >= 2 && c.utterances[0].speaker == Speaker::user && c.utterances[1].speaker == Speaker::sys) {
                out.push_back(make_sample(c, mode, 1));
                continue;
            }
        } else {
            auto ref = last_reference_index(c);
            if (ref && *ref >= 2) {
                out.push_back(make_sample(c, mode, *ref));
                continue;
            }
        }
        spdlog::warn("conversation '{}' has no {} (context, reference) pair; skipped", c.id, to_string(mode));
    }
    return out;
}

std::vector<TestSample> subsample(std::span<const TestSample> samples, std::size_t count, std::uint64_t seed) {
    if (count >= samples.size())
        return {samples.begin(), samples.end()};
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    order.resize(count);
    std::sort(order.begin(), order.end());
    std::vector<TestSample> out;
    out.reserve(count);
    for (auto i : order)
        out.push_back(samples[i]);
    return out;
}

std::string render_turns(std::span<const Utterance> turns, std::string_view tag_suffix, std::string_view separator) {
    std::string out;
    for (std::size_t i = 0; i < turns.size(); ++i) {
        if (i)
            out += separator;
        out += fmt::format("{}{}: {}", to_string(turns[i].speaker), tag_suffix, text::collapse_whitespace(turns[i].text));
    }
    return out;
}

} // namespace empcause::corpus
