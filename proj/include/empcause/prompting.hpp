#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "empcause/common/jsonl.hpp"
#include "empcause/corpus.hpp"
#include "empcause/knowledge.hpp"

namespace empcause::prompting {

enum class Variant { causality, baseline };

std::string_view to_string(Variant variant);
Variant variant_from_string(std::string_view name);

inline constexpr std::string_view kUserWantsLabel = "user wants to:";
inline constexpr std::string_view kUserReactsLabel = "user reacts to:";
inline constexpr std::string_view kSysIntentLabel = "sys's intent:";
inline constexpr std::string_view kSysReactsLabel = "sys reacts to:";
inline constexpr std::string_view kSysLabel = "sys:";

/// The four knowledge labels in block order.
inline constexpr std::string_view kKnowledgeLabels[] = {kUserWantsLabel, kUserReactsLabel, kSysIntentLabel, kSysReactsLabel};

/// How a phrase list is joined. Test-input knowledge uses "a; b; c." and few-shot
/// knowledge blocks use "a. b. c.".
enum class PhraseStyle { inline_list, example_block };

/// The single formatter for phrase lists wherever they are shown to a model.
std::string format_phrases(std::span<const std::string> phrases, PhraseStyle style);

struct UserKnowledge {
    std::vector<std::string> wants;  // xWant of the final user turn
    std::vector<std::string> reacts; // xReact of the final user turn
};

struct SysKnowledge {
    std::vector<std::string> intent; // xIntent of the sys response
    std::vector<std::string> reacts; // xReact of the sys response
};

/// Labeled knowledge lines, e.g. "user wants to: a; b.\nuser reacts to: c." Used
/// both in prompts and as the causality-encoder input text.
std::string format_user_knowledge(const UserKnowledge &k, PhraseStyle style, std::string_view separator = "\n");
std::string format_sys_knowledge(const SysKnowledge &k, PhraseStyle style, std::string_view separator = "\n");

struct KnowledgeBlocks {
    UserKnowledge user;
    SysKnowledge sys;
};

struct FewShotExample {
    std::string conversation_id;
    std::vector<corpus::Utterance> context;
    std::optional<KnowledgeBlocks> knowledge;
    std::string response;
};

struct PromptBundle {
    std::string intro_id;
    std::string introduction;
    Variant variant = Variant::causality;
    std::vector<FewShotExample> examples; // most similar first
    std::vector<corpus::Utterance> test_context;
    std::optional<UserKnowledge> test_knowledge;
};

UserKnowledge user_knowledge(const knowledge::InferencePair &pair);
SysKnowledge sys_knowledge(const knowledge::InferencePair &pair);

/// Few-shot example from a training conversation cut at its longest user-final prefix.
/// Knowledge is placed in Want, React, Intent, React order whatever order the
/// pairs arrive in; every block must be non-empty.
FewShotExample build_fewshot(const corpus::Conversation &conversation, const knowledge::InferencePair &user_k,
                             const knowledge::InferencePair &sys_k);

/// Few-shot example without knowledge, for the baseline prompt.
FewShotExample build_raw_example(const corpus::Conversation &conversation);

/// Versioned introduction templates stored as asset files `<dir>/<version>/intro-<name>.txt`
/// and addressed as "<name>-<version>", e.g. "causality-v1".
class TemplateLibrary {
  public:
    static TemplateLibrary load(const std::filesystem::path &templates_dir);
    /// Templates under the compiled-in asset directory (or $EMPCAUSE_ASSET_DIR).
    static TemplateLibrary load_default();

    const std::string &get(const std::string &intro_id) const;
    bool contains(const std::string &intro_id) const { return templates_.count(intro_id) > 0; }

  private:
    std::map<std::string, std::string> templates_;
};

std::filesystem::path asset_dir();

std::string default_intro_id(Variant variant);

struct PromptOptions {
    std::size_t k = 2;
    /// Permit k == 0 (introduction plus test context only).
    bool allow_zero_shot = false;
};

/// Assembles the prompt. The causality variant needs test knowledge and knowledge on
/// every example; the baseline variant drops all knowledge.
PromptBundle build_prompt(const TemplateLibrary &templates, const std::string &intro_id, std::vector<FewShotExample> fewshots,
                          std::vector<corpus::Utterance> test_context, std::optional<UserKnowledge> test_knowledge,
                          Variant variant, const PromptOptions &options);

/// Byte-stable rendering: introduction, then one block per example, then the test
/// block, separated by blank lines, LF line endings, trailing newline.
std::string render(const PromptBundle &bundle);

json to_json(const PromptBundle &bundle);

struct ReasonedOutput {
    std::vector<std::string> sys_intent;
    std::vector<std::string> sys_react;
    std::string response;
    std::string raw;
    std::vector<std::string> warnings;
};

json to_json(const ReasonedOutput &out);
ReasonedOutput reasoned_from_json(const json &j);

/// Label-anchored reply parser. Tolerates prose around the fields, label case and
/// markdown decoration, and any field order. Phrases split on ';', '.' and line
/// breaks. A missing "sys:" field throws ParseError carrying the raw text; a
/// repeated field keeps its first occurrence and records a warning.
ReasonedOutput parse_reasoned(const std::string &raw);

/// Well-formed reply text in the layout the introduction requests.
std::string format_reply(std::span<const std::string> intent, std::span<const std::string> react, const std::string &response);

} // namespace empcause::prompting
