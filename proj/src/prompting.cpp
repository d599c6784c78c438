#include "empcause/prompting.hpp"

#include <algorithm>
#include <cstdlib>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/error.hpp"
#include "empcause/common/text.hpp"

namespace empcause::prompting {

namespace fs = std::filesystem;
using knowledge::Relation;

std::string_view to_string(Variant v) { return v == Variant::causality ? "causality" : "baseline"; }

Variant variant_from_string(std::string_view name) {
    if (name == "causality")
        return Variant::causality;
    if (name == "baseline")
        return Variant::baseline;
    throw PreconditionError(fmt::format("unknown prompt variant '{}'", name));
}

std::string format_phrases(std::span<const std::string> phrases, PhraseStyle style) {
    std::string out;
    const std::string_view sep = style == PhraseStyle::inline_list ? "; " : ". ";
    for (std::size_t i = 0; i < phrases.size(); ++i) {
        if (i)
            out += sep;
        out += text::collapse_whitespace(phrases[i]);
    }
    if (!out.empty())
        out += '.';
    return out;
}

std::string format_user_knowledge(const UserKnowledge &k, PhraseStyle style, std::string_view separator) {
    return fmt::format("{} {}{}{} {}", kUserWantsLabel, format_phrases(k.wants, style), separator, kUserReactsLabel,
                       format_phrases(k.reacts, style));
}

std::string format_sys_knowledge(const SysKnowledge &k, PhraseStyle style, std::string_view separator) {
    return fmt::format("{} {}{}{} {}", kSysIntentLabel, format_phrases(k.intent, style), separator, kSysReactsLabel,
                       format_phrases(k.reacts, style));
}

namespace {

const knowledge::InferenceSet &pick(const knowledge::InferencePair &pair, Relation relation, std::string_view side) {
    if (pair.first.relation == relation)
        return pair.first;
    if (pair.second.relation == relation)
        return pair.second;
    throw PreconditionError(fmt::format("{} knowledge lacks a {} set", side, knowledge::to_string(relation)));
}

} // namespace

UserKnowledge user_knowledge(const knowledge::InferencePair &pair) {
    return {pick(pair, Relation::xWant, "user").phrases, pick(pair, Relation::xReact, "user").phrases};
}

SysKnowledge sys_knowledge(const knowledge::InferencePair &pair) {
    return {pick(pair, Relation::xIntent, "sys").phrases, pick(pair, Relation::xReact, "sys").phrases};
}

FewShotExample build_raw_example(const corpus::Conversation &conversation) {
    auto cut = corpus::longest_cut(conversation);
    if (!cut)
        throw PreconditionError(fmt::format("conversation '{}' has no sys response to use as a few-shot example", conversation.id));
    return {conversation.id, cut->context, std::nullopt, cut->reference.text};
}

FewShotExample build_fewshot(const corpus::Conversation &conversation, const knowledge::InferencePair &user_k,
                             const knowledge::InferencePair &sys_k) {
    FewShotExample example = build_raw_example(conversation);
    KnowledgeBlocks blocks{user_knowledge(user_k), sys_knowledge(sys_k)};
    const std::pair<std::string_view, const std::vector<std::string> *> checks[] = {
        {kUserWantsLabel, &blocks.user.wants},
        {kUserReactsLabel, &blocks.user.reacts},
        {kSysIntentLabel, &blocks.sys.intent},
        {kSysReactsLabel, &blocks.sys.reacts}};
    for (const auto &[label, phrases] : checks) {
        if (phrases->empty())
            throw PreconditionError(fmt::format("conversation '{}': empty \"{}\" block", conversation.id, label));
    }
    example.knowledge = std::move(blocks);
    return example;
}

fs::path asset_dir() {
    if (const char *env = std::getenv("EMPCAUSE_ASSET_DIR"); env && *env)
        return env;
    return EMPCAUSE_ASSET_DIR;
}

TemplateLibrary TemplateLibrary::load(const fs::path &templates_dir) {
    if (!fs::is_directory(templates_dir))
        throw Error(fmt::format("template directory '{}' does not exist", templates_dir.string()));
    TemplateLibrary lib;
    for (const auto &version : fs::directory_iterator(templates_dir)) {
        if (!version.is_directory())
            continue;
        for (const auto &file : fs::directory_iterator(version.path())) {
            std::string stem = file.path().stem().string();
            if (file.path().extension() != ".txt" || stem.rfind("intro-", 0) != 0)
                continue;
            std::string body = text::normalize_newlines(read_file(file.path()));
            while (!body.empty() && body.back() == '\n')
                body.pop_back();
            lib.templates_[stem.substr(6) + "-" + version.path().filename().string()] = std::move(body);
        }
    }
    return lib;
}

TemplateLibrary TemplateLibrary::load_default() { return load(asset_dir() / "templates"); }

const std::string &TemplateLibrary::get(const std::string &intro_id) const {
    auto it = templates_.find(intro_id);
    if (it == templates_.end())
        throw PreconditionError(fmt::format("unknown introduction template '{}'", intro_id));
    return it->second;
}

std::string default_intro_id(Variant variant) { return variant == Variant::causality ? "causality-v1" : "baseline-v1"; }

PromptBundle build_prompt(const TemplateLibrary &templates, const std::string &intro_id, std::vector<FewShotExample> fewshots,
                          std::vector<corpus::Utterance> test_context, std::optional<UserKnowledge> test_knowledge, Variant variant,
                          const PromptOptions &options) {
    if (options.k == 0 && !options.allow_zero_shot)
        throw PreconditionError("k must be at least 1 (zero-shot prompts need the explicit override)");
    if (fewshots.size() != options.k)
        throw PreconditionError(fmt::format("expected {} few-shot examples, got {}", options.k, fewshots.size()));
    if (test_context.empty() || test_context.back().speaker != corpus::Speaker::user)
        throw PreconditionError("test context must end with a user utterance");

    PromptBundle bundle;
    bundle.intro_id = intro_id;
    bundle.introduction = templates.get(intro_id);
    bundle.variant = variant;
    bundle.test_context = std::move(test_context);
    if (variant == Variant::causality) {
        if (intro_id.rfind("causality-", 0) != 0)
            throw PreconditionError(fmt::format("causality prompts need a causality introduction, not '{}'", intro_id));
        if (!test_knowledge || test_knowledge->wants.empty() || test_knowledge->reacts.empty())
            throw PreconditionError("causality prompts need the test input's xWant and xReact knowledge");
        for (const auto &ex : fewshots) {
            if (!ex.knowledge)
                throw PreconditionError(fmt::format("few-shot example '{}' has no knowledge blocks", ex.conversation_id));
        }
        bundle.test_knowledge = std::move(test_knowledge);
    } else {
        for (auto &ex : fewshots)
            ex.knowledge.reset();
    }
    bundle.examples = std::move(fewshots);
    return bundle;
}

namespace {

std::string clean_line(std::string_view s) { return text::collapse_whitespace(text::normalize_newlines(s)); }

std::string render_example(const FewShotExample &ex, std::size_t number) {
    std::vector<std::string> lines;
    const std::string suffix = std::to_string(number);
    for (const auto &u : ex.context)
        lines.push_back(fmt::format("{}{}: {}", corpus::to_string(u.speaker), suffix, clean_line(u.text)));
    if (ex.knowledge) {
        lines.push_back(format_user_knowledge(ex.knowledge->user, PhraseStyle::example_block));
        lines.push_back(format_sys_knowledge(ex.knowledge->sys, PhraseStyle::example_block));
    }
    lines.push_back(fmt::format("{} {}", kSysLabel, clean_line(ex.response)));
    return text::join(lines, "\n");
}

} // namespace

std::string render(const PromptBundle &bundle) {
    std::vector<std::string> blocks;
    blocks.push_back(text::normalize_newlines(bundle.introduction));
    for (std::size_t i = 0; i < bundle.examples.size(); ++i)
        blocks.push_back(render_example(bundle.examples[i], i + 1));

    std::vector<std::string> test;
    for (const auto &u : bundle.test_context)
        test.push_back(fmt::format("{}: {}", corpus::to_string(u.speaker), clean_line(u.text)));
    if (bundle.variant == Variant::causality && bundle.test_knowledge)
        test.push_back(format_user_knowledge(*bundle.test_knowledge, PhraseStyle::inline_list));
    blocks.push_back(text::join(test, "\n"));
    return text::join(blocks, "\n\n") + "\n";
}

json to_json(const PromptBundle &b) {
    json examples = json::array();
    for (const auto &ex : b.examples) {
        json e = {{"conversation_id", ex.conversation_id}, {"response", ex.response}};
        e["context"] = corpus::render_turns(ex.context);
        if (ex.knowledge) {
            e["knowledge"] = {{"user_wants", ex.knowledge->user.wants},
                              {"user_reacts", ex.knowledge->user.reacts},
                              {"sys_intent", ex.knowledge->sys.intent},
                              {"sys_reacts", ex.knowledge->sys.reacts}};
        }
        examples.push_back(std::move(e));
    }
    json out = {{"intro_id", b.intro_id}, {"variant", to_string(b.variant)}, {"examples", examples},
                {"test_context", corpus::render_turns(b.test_context)}};
    if (b.test_knowledge)
        out["test_knowledge"] = {{"user_wants", b.test_knowledge->wants}, {"user_reacts", b.test_knowledge->reacts}};
    return out;
}

json to_json(const ReasonedOutput &o) {
    return {{"sys_intent", o.sys_intent}, {"sys_react", o.sys_react}, {"response", o.response}, {"warnings", o.warnings}};
}

ReasonedOutput reasoned_from_json(const json &j) {
    ReasonedOutput o;
    o.sys_intent = j.value("sys_intent", std::vector<std::string>{});
    o.sys_react = j.value("sys_react", std::vector<std::string>{});
    o.response = j.value("response", std::string{});
    o.warnings = j.value("warnings", std::vector<std::string>{});
    o.raw = j.value("raw", std::string{});
    return o;
}

namespace {

enum class Field { intent, react, response };

struct LabelMatch {
    std::size_t start = 0;       // where the label begins
    std::size_t value_start = 0; // first byte after the colon
    Field field = Field::response;
};

constexpr std::string_view kIntentNames[] = {"sys's intent", "sys\xE2\x80\x99s intent", "sys' intent", "sys intent",
                                             "system's intent"};
constexpr std::string_view kReactNames[] = {"sys reacts to", "sys's reaction", "sys reaction", "system reacts to"};
constexpr std::string_view kResponseNames[] = {"sys", "system"};

bool decoration(char c) { return c == '*' || c == '"' || c == '\'' || c == '_' || c == '`'; }

bool boundary_before(const std::string &s, std::size_t pos) {
    if (pos == 0)
        return true;
    unsigned char c = static_cast<unsigned char>(s[pos - 1]);
    return !(std::isalnum(c) || c == '\'' || c >= 0x80);
}

// If a label named `name` starts at pos, returns the index just past its colon.
std::optional<std::size_t> match_label(const std::string &s, std::size_t pos, std::string_view name, bool allow_digits) {
    if (!boundary_before(s, pos) || !text::istarts_with(std::string_view(s).substr(pos), name))
        return std::nullopt;
    std::size_t i = pos + name.size();
    if (allow_digits)
        while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])))
            ++i;
    while (i < s.size() && (decoration(s[i]) || s[i] == ' '))
        ++i;
    if (i >= s.size() || s[i] != ':')
        return std::nullopt;
    ++i;
    while (i < s.size() && decoration(s[i]))
        ++i;
    return i;
}

std::vector<LabelMatch> find_labels(const std::string &s) {
    std::vector<LabelMatch> matches;
    for (std::size_t pos = 0; pos < s.size(); ++pos) {
        auto try_names = [&](std::span<const std::string_view> names, Field field, bool digits) {
            for (auto name : names) {
                if (auto end = match_label(s, pos, name, digits)) {
                    matches.push_back({pos, *end, field});
                    return true;
                }
            }
            return false;
        };
        if (try_names(kIntentNames, Field::intent, false) || try_names(kReactNames, Field::react, false) ||
            try_names(kResponseNames, Field::response, true)) {
            pos = matches.back().value_start - 1;
        }
    }
    return matches;
}

// Field text ends at the next label or at the first blank line after content.
std::string field_value(const std::string &s, std::size_t from, std::size_t to) {
    std::string value = text::trim(std::string_view(s).substr(from, to - from));
    if (auto blank = value.find("\n\n"); blank != std::string::npos)
        value.resize(blank);
    return text::trim(value);
}

std::string strip_decoration(std::string s) {
    s = text::trim(s);
    // Only wrappers that enclose the whole value; "*hugs* I am here" keeps its emphasis.
    while (s.size() >= 2 && s.front() == s.back() && (s.front() == '*' || s.front() == '_' || s.front() == '`'))
        s = text::trim(s.substr(1, s.size() - 2));
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
        s = text::trim(s.substr(1, s.size() - 2));
    if (s.size() >= 6 && s.compare(0, 3, "\xE2\x80\x9C") == 0 && s.compare(s.size() - 3, 3, "\xE2\x80\x9D") == 0)
        s = text::trim(s.substr(3, s.size() - 6));
    return s;
}

std::vector<std::string> split_phrases(const std::string &value) {
    std::vector<std::string> out;
    for (const auto &piece : text::split(value, ";.\n")) {
        std::string p = text::trim(piece);
        while (!p.empty() && (p.front() == '-' || p.front() == '*' || p.front() == '"' || p.front() == ' '))
            p.erase(p.begin());
        if (p.rfind("\xE2\x80\xA2", 0) == 0) // bullet
            p.erase(0, 3);
        while (!p.empty() && (p.back() == '*' || p.back() == '"' || p.back() == ','))
            p.pop_back();
        p = text::collapse_whitespace(p);
        bool numbering = !p.empty() && std::all_of(p.begin(), p.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
        if (!p.empty() && !numbering)
            out.push_back(std::move(p));
    }
    return out;
}

} // namespace

ReasonedOutput parse_reasoned(const std::string &raw) {
    if (text::trim(raw).empty())
        throw ParseError("empty LLM reply", raw);
    ReasonedOutput out;
    out.raw = raw;
    const std::string s = text::normalize_newlines(raw);
    auto matches = find_labels(s);

    bool seen[3] = {false, false, false};
    for (std::size_t m = 0; m < matches.size(); ++m) {
        const auto &match = matches[m];
        std::size_t end = m + 1 < matches.size() ? matches[m + 1].start : s.size();
        auto slot = static_cast<std::size_t>(match.field);
        if (seen[slot]) {
            static constexpr std::string_view kNames[] = {"sys's intent", "sys reacts to", "sys"};
            out.warnings.push_back(fmt::format("duplicate \"{}:\" field ignored", kNames[slot]));
            continue;
        }
        seen[slot] = true;
        std::string value = field_value(s, match.value_start, end);
        switch (match.field) {
        case Field::intent:
            out.sys_intent = split_phrases(value);
            break;
        case Field::react:
            out.sys_react = split_phrases(value);
            break;
        case Field::response:
            out.response = strip_decoration(value);
            break;
        }
    }
    if (!seen[static_cast<std::size_t>(Field::response)])
        throw ParseError("reply has no \"sys:\" field", raw);
    if (out.response.empty())
        throw ParseError("reply has an empty \"sys:\" field", raw);
    for (const auto &w : out.warnings)
        spdlog::warn("parse_reasoned: {}", w);
    return out;
}

std::string format_reply(std::span<const std::string> intent, std::span<const std::string> react, const std::string &response) {
    return fmt::format("{} {}\n{} {}\n{} {}", kSysIntentLabel, format_phrases(intent, PhraseStyle::inline_list), kSysReactsLabel,
                       format_phrases(react, PhraseStyle::inline_list), kSysLabel, response);
}

} // namespace empcause::prompting
