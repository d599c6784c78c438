#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "empcause/corpus.hpp"
#include "empcause/knowledge.hpp"
#include "empcause/prompting.hpp"
#include "empcause/t5/model.hpp"

namespace empcause::t5 {

/// Causality encoder input for the user side: the labeled blocks from the prompt formatter.
std::string user_causality_text(const prompting::UserKnowledge &k);
std::string sys_causality_text(const prompting::SysKnowledge &k);

/// Training example from a conversation's longest user-final cut. Sys-side
/// causality is inferred from the ground-truth response.
T5Example make_training_example(const corpus::Conversation &conversation, const corpus::EmotionInventory &emotions,
                                knowledge::KnowledgeService &knowledge, Variant variant);

/// Test example. Sys-side causality comes from the reasoned LLM output, never the reference.
T5Example make_test_example(const corpus::TestSample &sample, const corpus::EmotionInventory &emotions,
                            knowledge::KnowledgeService &knowledge, Variant variant,
                            const prompting::ReasonedOutput *reasoned);

/// Adam with bias correction.
class AdamOptimizer {
  public:
    AdamOptimizer(double learning_rate, double beta1, double beta2, double eps)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}
    explicit AdamOptimizer(const ModelConfig &c) : AdamOptimizer(c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_eps) {}

    void step(std::span<Parameter *const> parameters);
    std::size_t steps_taken() const { return t_; }

  private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

struct StepLog {
    std::size_t step = 0; // 1-based, global
    std::size_t epoch = 0;
    LossBreakdown loss;
};

struct EpochLog {
    std::size_t epoch = 0;
    double mean_l_emotion = 0.0;
    double mean_l_gen = 0.0;
    double mean_total = 0.0;
    std::optional<double> valid_total;
};

json to_json(const StepLog &log);
json to_json(const EpochLog &log);

struct TrainOptions {
    std::optional<std::size_t> epochs;    // defaults to config.epochs
    std::optional<std::size_t> max_steps; // stop early after this many steps
    std::filesystem::path checkpoint_dir; // epoch-N/ subdirectories; empty disables
    std::function<void(const StepLog &)> on_step;
};

struct TrainResult {
    std::vector<StepLog> steps;
    std::vector<EpochLog> epochs;
    std::vector<std::filesystem::path> checkpoints;
};

/// Minimizes the combined objective with batches drawn by a seeded shuffle of the
/// training set each epoch. A non-finite loss aborts with the step and sample ids.
TrainResult train(T5Model &model, std::span<const TokenizedExample> train_set, std::span<const TokenizedExample> valid_set,
                  const TrainOptions &options = {});

/// Mean total loss over a data set in batches of config.batch_size.
LossBreakdown mean_loss(const T5Model &model, std::span<const TokenizedExample> data);

/// Fraction of examples whose arg-max emotion equals the label.
double emotion_accuracy(const T5Model &model, std::span<const TokenizedExample> data);

} // namespace empcause::t5
