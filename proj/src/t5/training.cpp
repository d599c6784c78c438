#include "empcause/t5/training.hpp"

#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/error.hpp"
#include "empcause/common/random.hpp"
#include "empcause/common/text.hpp"
#include "empcause/t5/checkpoint.hpp"

namespace empcause::t5 {

std::string user_causality_text(const prompting::UserKnowledge &k) {
    return prompting::format_user_knowledge(k, prompting::PhraseStyle::inline_list);
}

std::string sys_causality_text(const prompting::SysKnowledge &k) {
    return prompting::format_sys_knowledge(k, prompting::PhraseStyle::inline_list);
}

namespace {

int emotion_index(const corpus::EmotionInventory &emotions, const std::string &label, const std::string &id) {
    if (!emotions.contains(label))
        throw ValidationError(fmt::format("'{}' has emotion '{}' outside the inventory", id, label));
    return static_cast<int>(emotions.index_of(label));
}

} // namespace

T5Example make_training_example(const corpus::Conversation &conv, const corpus::EmotionInventory &emotions,
                                knowledge::KnowledgeService &knowledge, Variant variant) {
    auto cut = corpus::longest_cut(conv);
    if (!cut)
        throw PreconditionError(fmt::format("conversation '{}' has no user turn followed by a sys turn", conv.id));
    T5Example ex;
    ex.id = conv.id;
    ex.context = corpus::render_turns(cut->context);
    ex.response = cut->reference.text;
    ex.emotion = emotion_index(emotions, conv.emotion, conv.id);
    if (uses_user_causality(variant))
        ex.user_causality = user_causality_text(prompting::user_knowledge(knowledge.user_bundle(cut->last_user_turn().text)));
    if (uses_sys_causality(variant))
        ex.sys_causality = sys_causality_text(prompting::sys_knowledge(knowledge.sys_bundle(cut->reference.text)));
    return ex;
}

T5Example make_test_example(const corpus::TestSample &sample, const corpus::EmotionInventory &emotions,
                            knowledge::KnowledgeService &knowledge, Variant variant, const prompting::ReasonedOutput *reasoned) {
    T5Example ex;
    ex.id = sample.sample_id();
    ex.context = corpus::render_turns(sample.context);
    ex.response = sample.reference.text;
    ex.emotion = emotion_index(emotions, sample.emotion, ex.id);
    if (uses_user_causality(variant))
        ex.user_causality = user_causality_text(prompting::user_knowledge(knowledge.user_bundle(sample.last_user_turn().text)));
    if (uses_sys_causality(variant)) {
        if (!reasoned)
            throw PreconditionError(fmt::format("sample '{}' needs the reasoned sys causality for variant {}", ex.id, to_string(variant)));
        ex.sys_causality = sys_causality_text({reasoned->sys_intent, reasoned->sys_react});
    }
    return ex;
}

void AdamOptimizer::step(std::span<Parameter *const> parameters) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Parameter *p : parameters) {
        p->adam_m = beta1_ * p->adam_m + (1.0 - beta1_) * p->grad;
        p->adam_v = beta2_ * p->adam_v + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
        p->value.array() -= lr_ * (p->adam_m.array() / c1) / ((p->adam_v.array() / c2).sqrt() + eps_);
    }
}

json to_json(const StepLog &s) {
    return {{"step", s.step}, {"epoch", s.epoch}, {"l_emotion", s.loss.l_emotion}, {"l_gen", s.loss.l_gen}, {"total", s.loss.total}};
}

json to_json(const EpochLog &e) {
    json j = {{"epoch", e.epoch}, {"mean_l_emotion", e.mean_l_emotion}, {"mean_l_gen", e.mean_l_gen}, {"mean_total", e.mean_total}};
    j["valid_total"] = e.valid_total ? json(*e.valid_total) : json(nullptr);
    return j;
}

LossBreakdown mean_loss(const T5Model &model, std::span<const TokenizedExample> data) {
    if (data.empty())
        throw PreconditionError("mean loss over an empty data set");
    LossBreakdown sum;
    const std::size_t bs = model.config().batch_size;
    for (std::size_t start = 0; start < data.size(); start += bs) {
        auto batch = data.subspan(start, std::min(bs, data.size() - start));
        auto l = model.evaluate(batch);
        const double w = static_cast<double>(batch.size());
        sum.l_emotion += l.l_emotion * w;
        sum.l_gen += l.l_gen * w;
        sum.total += l.total * w;
    }
    const double n = static_cast<double>(data.size());
    return {sum.l_emotion / n, sum.l_gen / n, sum.total / n};
}

double emotion_accuracy(const T5Model &model, std::span<const TokenizedExample> data) {
    if (data.empty())
        throw PreconditionError("emotion accuracy over an empty data set");
    std::size_t hits = 0;
    for (const auto &ex : data)
        hits += model.predict_emotion(ex) == ex.emotion ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

TrainResult train(T5Model &model, std::span<const TokenizedExample> train_set, std::span<const TokenizedExample> valid_set,
                  const TrainOptions &options) {
    if (train_set.empty())
        throw PreconditionError("training set is empty");
    const ModelConfig &config = model.config();
    const std::size_t epochs = options.epochs.value_or(config.epochs);
    const std::size_t bs = config.batch_size;
    AdamOptimizer optimizer(config);
    auto params = model.parameters();
    Rng rng(config.seed);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
        rng.shuffle(order);
        EpochLog log;
        log.epoch = epoch;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            if (options.max_steps && step >= *options.max_steps)
                break;
            std::vector<TokenizedExample> batch;
            for (std::size_t i = start; i < std::min(start + bs, order.size()); ++i)
                batch.push_back(train_set[order[i]]);
            for (Parameter *p : params)
                p->zero_grad();
            Tape tape;
            LossVars loss = model.loss(tape, batch);
            LossBreakdown values = loss.values();
            if (!std::isfinite(values.total)) {
                std::vector<std::string> ids;
                for (const auto &ex : batch)
                    ids.push_back(ex.id);
                throw Error(fmt::format("non-finite loss at epoch {} step {} (l_emotion={}, l_gen={}); batch: {}", epoch, step + 1,
                                        values.l_emotion, values.l_gen, text::join(ids, ", ")));
            }
            tape.backward(loss.total);
            optimizer.step(params);
            ++step;
            ++batches;
            StepLog s{step, epoch, values};
            result.steps.push_back(s);
            if (options.on_step)
                options.on_step(s);
            log.mean_l_emotion += values.l_emotion;
            log.mean_l_gen += values.l_gen;
            log.mean_total += values.total;
        }
        if (batches == 0)
            break;
        log.mean_l_emotion /= static_cast<double>(batches);
        log.mean_l_gen /= static_cast<double>(batches);
        log.mean_total /= static_cast<double>(batches);
        if (!valid_set.empty())
            log.valid_total = mean_loss(model, valid_set).total;
        spdlog::info("epoch {}: l_emotion {:.4f} l_gen {:.4f} total {:.4f}{}", epoch, log.mean_l_emotion, log.mean_l_gen, log.mean_total,
                     log.valid_total ? fmt::format(" valid {:.4f}", *log.valid_total) : "");
        result.epochs.push_back(log);
        if (!options.checkpoint_dir.empty()) {
            auto dir = options.checkpoint_dir / fmt::format("epoch-{}", epoch);
            json metrics = to_json(log);
            metrics["steps"] = step;
            metrics["optimizer"] = config.optimizer;
            save_checkpoint(dir, model, metrics);
            result.checkpoints.push_back(dir);
        }
    }
    return result;
}

} // namespace empcause::t5
