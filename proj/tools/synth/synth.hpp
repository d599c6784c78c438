#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "empcause/corpus.hpp"
#include "empcause/knowledge.hpp"
#include "empcause/raters.hpp"

// Deterministic stand-ins for the external resources the pipeline consumes: a small
// emotion-cued dialogue corpus, a lexicon-rule commonsense generator, and a scripted
// chat responder. They make offline demos and tests possible; none of them carries
// real model knowledge.
namespace empcause::synth {

/// Emotions the generator writes dialogues for; all belong to the shipped inventory.
const std::vector<std::string> &emotions();

struct CorpusOptions {
    std::size_t conversations = 250;
    std::uint64_t seed = 7;
    std::string id_prefix = "synth";
};

/// Alternating user/sys dialogues of 2, 4 or 6 turns, each cued by its emotion.
std::vector<corpus::Conversation> make_corpus(const CorpusOptions &options);

/// Rule-based phrases for (text, relation): cue words select an emotion frame and
/// the relation selects the phrase list. Never empty.
std::vector<std::string> lexicon_phrases(const std::string &text, knowledge::Relation relation);

/// Emotion whose cue words occur most often in the text; empty when none occur.
std::string detect_emotion(const std::string &text);

/// InferenceSets for every (text, relation) combination the pipeline asks for:
/// xWant/xReact of user turns and xIntent/xReact of sys turns.
std::vector<knowledge::InferenceSet> lexicon_fixture(std::span<const corpus::Conversation> conversations, const std::string &backend_id,
                                                     std::size_t max_phrases = knowledge::kDefaultMaxPhrases);

/// Chat-completion stand-in: reads the final user turn from a rendered prompt and
/// answers with intent, reaction and response lines. `style` varies the surface
/// formatting the way real chat models do (markdown, preambles, label spellings).
std::string scripted_reply(const std::string &prompt, std::size_t style);
inline constexpr std::size_t kReplyStyles = 8;

/// Keyword levels standing in for the three mechanism classifiers.
raters::EpitomeRating rule_epitome(const std::string &response);

} // namespace empcause::synth
