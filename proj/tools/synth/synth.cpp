#include "synth.hpp"

#include <algorithm>
#include <map>

#include <fmt/format.h>

#include "empcause/common/random.hpp"
#include "empcause/common/text.hpp"
#include "empcause/prompting.hpp"

namespace empcause::synth {

using knowledge::Relation;

namespace {

struct Frame {
    std::string emotion;
    std::vector<std::string> cues;
    std::vector<std::string> things;
    std::vector<std::string> situations; // {} is the thing
    std::vector<std::string> openers;
    std::vector<std::string> replies;
    std::vector<std::string> follow_ups;
    std::vector<std::string> closers;
    std::vector<std::string> reacts;
    std::vector<std::string> wants;
};

const std::vector<Frame> &frames() {
    static const std::vector<Frame> table = {
        {"afraid",
         {"afraid", "scared", "frightened", "fear", "terrifying"},
         {"a strange noise downstairs", "the dark hallway at night", "a spider in my bed", "the thunderstorm last night",
          "a car following me home"},
         {"I heard {} and was really scared.", "I was frightened by {}."},
         {"I was so scared when I noticed {}.", "Last night I was afraid because of {}.", "I got really frightened by {} yesterday."},
         {"Oh no, that sounds terrifying. Are you okay now?", "That would scare me too. What did you do?",
          "Yikes, that is frightening. Did you call someone?"},
         {"I turned on all the lights and waited.", "I called my brother to come over.", "I could not sleep for hours."},
         {"I hope you feel safer tonight.", "That was a smart thing to do.", "Try to get some rest, you deserve it."},
         {"scared", "nervous", "afraid"},
         {"to feel safe", "to call for help", "to lock the doors"}},
        {"angry",
         {"angry", "mad", "furious", "rude"},
         {"my neighbor who parked in my spot", "a coworker who took credit for my work", "the company that overcharged me",
          "someone who cut in line"},
         {"I got into a fight with {}.", "I was really mad at {}."},
         {"I am so angry at {}.", "I got really mad today because of {}.", "I was furious with {}."},
         {"That is so frustrating. Did you say anything to them?", "I would be mad too. That is not fair at all.",
          "Ugh, how rude of them. What happened next?"},
         {"I told them how I felt.", "I just walked away before I said something bad.", "I am going to file a complaint."},
         {"Good for you for standing up for yourself.", "Sometimes walking away is the best choice.", "I hope they fix it for you."},
         {"angry", "upset", "frustrated"},
         {"to get justice", "to complain", "to calm down"}},
        {"excited",
         {"excited", "thrilled", "pumped", "wait"},
         {"my trip to Japan next month", "the concert this weekend", "starting my new job on Monday", "my sister's wedding"},
         {"I am looking forward to {}.", "I could not stop thinking about {}."},
         {"I am so excited about {}!", "I can not wait for {}, I am thrilled.", "I am really pumped about {}."},
         {"That sounds amazing! How long have you been planning it?", "Wow, how exciting! What are you looking forward to most?",
          "That is awesome, you must be counting the days."},
         {"I have been planning it for almost a year.", "I am looking forward to the food the most.", "I already packed my bag."},
         {"I hope you have a wonderful time.", "Enjoy every minute of it!", "Take lots of pictures!"},
         {"excited", "happy", "eager"},
         {"to have fun", "to get ready", "to tell friends"}},
        {"grateful",
         {"grateful", "thankful", "thanks", "appreciate"},
         {"my friend who helped me move", "the nurse who took care of my dad", "my parents paying for my books",
          "a stranger who returned my wallet"},
         {"I was helped by {}.", "I felt thankful for {}."},
         {"I am so grateful for {}.", "I feel really thankful for {}.", "I really appreciate {}."},
         {"That is so kind of them. Did you thank them?", "It is wonderful to have people like that around.",
          "That is really nice to hear. How did you show your appreciation?"},
         {"I bought them dinner to say thanks.", "I wrote them a long letter.", "I told them I owe them one."},
         {"I am sure they loved that.", "That is a thoughtful way to thank them.", "Good people deserve good friends."},
         {"grateful", "thankful", "happy"},
         {"to thank them", "to return the favor", "to give a gift"}},
        {"lonely",
         {"lonely", "alone", "nobody", "isolated"},
         {"moving to a new city", "my roommate moving out", "working from home all week", "spending the holidays by myself"},
         {"I felt lonely after {}.", "I have been by myself since {}."},
         {"I have been feeling lonely since {}.", "I feel so alone after {}.", "Nobody has called me since {} and I feel lonely."},
         {"I am sorry you feel that way. Have you tried joining a club?", "That sounds hard. Do you have friends you could call?",
          "Being alone can be tough. What do you like to do for fun?"},
         {"I might try a hiking group.", "I could call my old college friend.", "I like to cook, but it is no fun for one."},
         {"That sounds like a great way to meet people.", "I bet they would love to hear from you.",
          "Maybe you could invite a neighbor over."},
         {"lonely", "sad", "isolated"},
         {"to make friends", "to talk to someone", "to go out"}},
        {"proud",
         {"proud", "accomplished", "achieved", "finally"},
         {"finishing my first marathon", "my son graduating from college", "getting promoted at work", "paying off my student loans"},
         {"I was proud of {}.", "I worked hard for {}."},
         {"I am so proud of {}.", "I feel really accomplished after {}.", "I finally achieved my goal of {}."},
         {"Congratulations! That is a huge achievement.", "Wow, you should be proud. How did you celebrate?",
          "That is great news! How long did it take?"},
         {"We went out for a nice dinner.", "It took me almost three years.", "I treated myself to something nice."},
         {"You earned it, well done.", "That dedication really paid off.", "Keep up the great work!"},
         {"proud", "happy", "accomplished"},
         {"to celebrate", "to share the news", "to set a new goal"}},
        {"sad",
         {"sad", "cried", "heartbroken", "grief"},
         {"my dog passing away", "my best friend moving abroad", "failing my driving test", "the end of my relationship"},
         {"I was sad about {}.", "I cried over {}."},
         {"I am really sad about {}.", "I cried all night after {}.", "I have been heartbroken since {}."},
         {"I am so sorry. That must be really hard.", "Oh no, I am sorry to hear that. How are you holding up?",
          "That is heartbreaking. Do you want to talk about it?"},
         {"I am doing a little better today.", "It still hurts, but I am trying.", "I keep thinking about it."},
         {"Take all the time you need to heal.", "It is okay to feel sad, be gentle with yourself.", "I am here if you need to talk."},
         {"sad", "heartbroken", "down"},
         {"to feel better", "to be comforted", "to cry"}},
        {"surprised",
         {"surprised", "shocked", "unexpected", "surprise"},
         {"a surprise party for my birthday", "running into my old teacher at the airport", "winning a raffle at work",
          "finding money in my old coat"},
         {"I did not expect {}.", "I was caught off guard by {}."},
         {"I was so surprised by {}.", "I was shocked by {}.", "I did not see {} coming, it was so unexpected."},
         {"Wow, what a surprise! How did you react?", "No way, that is unexpected. Were you happy?",
          "That must have been quite a shock. What happened then?"},
         {"I just stood there with my mouth open.", "I laughed for a good minute.", "I was speechless at first."},
         {"Those moments are the best.", "What a fun story to tell.", "Life is full of surprises!"},
         {"surprised", "shocked", "amazed"},
         {"to tell everyone", "to find out more", "to enjoy the moment"}},
    };
    return table;
}

const std::vector<std::string> kLateUser = {"Thanks for listening.", "Yeah, I think so.", "I appreciate you saying that.",
                                            "I will keep that in mind."};
const std::vector<std::string> kLateSys = {"Anytime, take care.", "Of course, I am glad to help.", "You are welcome, good luck."};

template <class T>
const T &pick(const std::vector<T> &items, Rng &rng) {
    return items[rng.below(items.size())];
}

std::string fill(const std::string &pattern, const std::string &thing) { return fmt::format(fmt::runtime(pattern), thing); }

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

const Frame *frame_for(const std::string &emotion) {
    for (const auto &f : frames())
        if (f.emotion == emotion)
            return &f;
    return nullptr;
}

bool has_word(const std::vector<std::string> &tokens, std::string_view word) {
    return std::find(tokens.begin(), tokens.end(), word) != tokens.end();
}

std::vector<std::string> intent_phrases(const std::vector<std::string> &tokens) {
    if (has_word(tokens, "sorry") || has_word(tokens, "heartbreaking") || has_word(tokens, "hard"))
        return {"to comfort them", "to show sympathy", "to be supportive"};
    if (has_word(tokens, "congratulations") || has_word(tokens, "proud") || has_word(tokens, "earned"))
        return {"to congratulate them", "to celebrate with them"};
    if (has_word(tokens, "wow") || has_word(tokens, "amazing") || has_word(tokens, "awesome") || has_word(tokens, "exciting"))
        return {"to share the excitement", "to show interest"};
    if (has_word(tokens, "?"))
        return {"to learn more", "to show interest", "to keep talking"};
    return {"to be supportive", "to encourage them"};
}

std::vector<std::string> response_react_phrases(const std::vector<std::string> &tokens) {
    if (has_word(tokens, "sorry") || has_word(tokens, "heartbreaking"))
        return {"sympathetic", "sad for them", "caring"};
    if (has_word(tokens, "congratulations") || has_word(tokens, "great") || has_word(tokens, "awesome") || has_word(tokens, "wow"))
        return {"happy for them", "excited", "impressed"};
    if (has_word(tokens, "?"))
        return {"curious", "interested", "concerned"};
    return {"caring", "attentive"};
}

} // namespace

const std::vector<std::string> &emotions() {
    static const std::vector<std::string> labels = [] {
        std::vector<std::string> out;
        for (const auto &f : frames())
            out.push_back(f.emotion);
        return out;
    }();
    return labels;
}

std::vector<corpus::Conversation> make_corpus(const CorpusOptions &options) {
    Rng rng(options.seed);
    std::vector<corpus::Conversation> out;
    for (std::size_t i = 0; i < options.conversations; ++i) {
        const Frame &f = pick(frames(), rng);
        const std::string &thing = pick(f.things, rng);
        corpus::Conversation c;
        c.id = fmt::format("{}:{:05d}", options.id_prefix, i + 1);
        c.emotion = f.emotion;
        c.situation = fill(pick(f.situations, rng), thing);
        std::size_t turns = 2 + 2 * rng.below(3);
        std::vector<std::string> texts = {fill(pick(f.openers, rng), thing), pick(f.replies, rng), pick(f.follow_ups, rng),
                                          pick(f.closers, rng), pick(kLateUser, rng), pick(kLateSys, rng)};
        for (std::size_t t = 0; t < turns; ++t)
            c.utterances.push_back({t % 2 == 0 ? corpus::Speaker::user : corpus::Speaker::sys, texts[t], t});
        out.push_back(std::move(c));
    }
    return out;
}

std::string detect_emotion(const std::string &s) {
    auto tokens = text::word_tokens(s);
    std::string best;
    std::size_t best_hits = 0;
    for (const auto &f : frames()) {
        std::size_t hits = 0;
        for (const auto &cue : f.cues)
            hits += static_cast<std::size_t>(std::count(tokens.begin(), tokens.end(), cue));
        if (hits > best_hits) {
            best_hits = hits;
            best = f.emotion;
        }
    }
    return best;
}

std::vector<std::string> lexicon_phrases(const std::string &s, Relation relation) {
    auto tokens = text::word_tokens(s);
    const Frame *f = frame_for(detect_emotion(s));
    std::vector<std::string> out;
    switch (relation) {
    case Relation::xWant:
        out = f ? f->wants : std::vector<std::string>{"to talk about it", "to be heard"};
        break;
    case Relation::xReact:
        out = f ? f->reacts : response_react_phrases(tokens);
        break;
    case Relation::xIntent:
        out = intent_phrases(tokens);
        break;
    }
    // Raw model output repeats itself with different casing; normalization removes it.
    std::string echo = out.front();
    echo[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(echo[0])));
    out.push_back(echo + ".");
    return out;
}

std::vector<knowledge::InferenceSet> lexicon_fixture(std::span<const corpus::Conversation> conversations, const std::string &backend_id,
                                                     std::size_t max_phrases) {
    std::map<std::pair<std::string, int>, knowledge::InferenceSet> sets;
    auto add = [&](const std::string &raw, Relation r) {
        std::string key = knowledge::normalize_text(raw);
        auto k = std::make_pair(key, static_cast<int>(r));
        if (sets.count(k))
            return;
        auto phrases = lexicon_phrases(key, r);
        if (phrases.size() > max_phrases)
            phrases.resize(max_phrases);
        sets[k] = knowledge::InferenceSet{key, r, phrases, backend_id, json::object()};
    };
    for (const auto &c : conversations)
        for (const auto &u : c.utterances) {
            if (u.speaker == corpus::Speaker::user) {
                add(u.text, Relation::xWant);
                add(u.text, Relation::xReact);
            } else {
                add(u.text, Relation::xIntent);
                add(u.text, Relation::xReact);
            }
        }
    std::vector<knowledge::InferenceSet> out;
    for (auto &[k, v] : sets)
        out.push_back(std::move(v));
    return out;
}

std::string scripted_reply(const std::string &prompt, std::size_t style) {
    // The final "user:" line of the prompt is the test input's last user turn.
    std::string last_user;
    for (const auto &line : text::split(prompt, "\n"))
        if (line.rfind("user:", 0) == 0)
            last_user = text::trim(line.substr(5));
    const Frame *f = frame_for(detect_emotion(last_user));
    std::string response;
    if (f)
        response = f->replies[fnv1a(last_user) % f->replies.size()];
    else
        response = "That sounds like a lot. How are you feeling about it?";
    auto tokens = text::word_tokens(response);
    auto intent = intent_phrases(tokens);
    auto react = response_react_phrases(tokens);
    auto semi = [](const std::vector<std::string> &p) { return text::join(p, "; ") + "."; };
    switch (style % kReplyStyles) {
    case 0:
        return prompting::format_reply(intent, react, response);
    case 1:
        return fmt::format("**sys's intent:** {}\n**sys reacts to:** {}\n**sys:** {}", semi(intent), semi(react), response);
    case 2:
        return "Sure, here is my answer.\n\n" + prompting::format_reply(intent, react, response);
    case 3:
        return fmt::format("sys’s intent: {}\nsys reacts to: {}\nsys: {}", semi(intent), semi(react), response);
    case 4: {
        std::string out = "sys's intent:\n";
        for (const auto &p : intent)
            out += "- " + p + "\n";
        out += "sys reacts to:\n";
        for (const auto &p : react)
            out += "- " + p + "\n";
        return out + "sys: " + response;
    }
    case 5:
        return fmt::format("System's intent: {}\nSystem reacts to: {}\nSystem: \"{}\"", semi(intent), semi(react), response);
    case 6:
        return prompting::format_reply(intent, react, response) + "\n\nNote: the reply acknowledges the user's feelings first.";
    default:
        return fmt::format("1. sys's intent: {}\n2. sys reacts to: {}\n3. sys: {}", semi(intent), semi(react), response);
    }
}

namespace {

bool contains_any(const std::string &lower, std::initializer_list<const char *> cues) {
    for (const char *c : cues)
        if (lower.find(c) != std::string::npos)
            return true;
    return false;
}

} // namespace

raters::EpitomeRating rule_epitome(const std::string &response) {
    const std::string s = text::to_lower(response);
    raters::EpitomeRating r;
    r.er = contains_any(s, {"so sorry", "so happy", "so proud", "so glad"}) ? 2 : contains_any(s, {"sorry", "glad", "happy", "proud", "wow"}) ? 1 : 0;
    r.ip = contains_any(s, {"i understand", "i can imagine", "i know how", "that must"}) ? 2 : contains_any(s, {"must", "sounds like"}) ? 1 : 0;
    // a question about the seeker's feelings is specific exploration; any other question is generic
    const bool question = s.find('?') != std::string::npos;
    r.ex = question && contains_any(s, {"feel", "are you", "terrified", "scared", "upset", "worried"}) ? 2 : question ? 1 : 0;
    return r;
}

} // namespace empcause::synth
