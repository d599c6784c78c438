#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "empcause/common/jsonl.hpp"
#include "empcause/common/random.hpp"
#include "empcause/t5/autograd.hpp"
#include "empcause/t5/tokenizer.hpp"

namespace empcause::t5 {

/// base: context encoder only. causality_user adds the user-knowledge encoder,
/// causality_user_sys adds the sys-knowledge encoder as well.
enum class Variant { base, causality_user, causality_user_sys };

std::string_view to_string(Variant variant);
Variant variant_from_string(std::string_view name);
std::size_t encoder_count(Variant variant);
bool uses_user_causality(Variant variant);
bool uses_sys_causality(Variant variant);

/// Whether the emotion loss updates the user-knowledge encoder too, or only the
/// context encoder.
enum class EmotionGrad { joint, context_only };
enum class InitMode { scratch, checkpoint };

struct DecodeParams {
    std::size_t top_k = 20;
    double temperature = 0.2; // 0 selects greedy argmax
};

struct ModelConfig {
    Variant variant = Variant::causality_user_sys;
    std::size_t d_model = 512;
    std::size_t d_ff = 2048;
    std::size_t num_heads = 8;
    std::size_t num_encoder_layers = 6;
    std::size_t num_decoder_layers = 6;
    std::size_t relative_buckets = 32;
    std::size_t relative_max_distance = 128;
    std::string vocab_id;
    std::size_t vocab_size = 0;
    std::size_t emotion_count = 32;
    std::size_t max_input_len = 128;
    std::size_t max_target_len = 64; // includes EOS
    std::size_t max_generate_len = 40;
    DecodeParams decode;
    double learning_rate = 1e-5;
    std::size_t batch_size = 8;
    std::size_t epochs = 10;
    double emotion_loss_weight = 1.0;
    EmotionGrad emotion_grad = EmotionGrad::joint;
    InitMode init = InitMode::scratch;
    std::string init_checkpoint;
    std::string optimizer = "adam";
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 42;

    /// Two layers, hidden 64: small enough to train on a CPU in seconds.
    static ModelConfig tiny();
    void validate() const;
};

json to_json(const ModelConfig &config);
ModelConfig model_config_from_json(const json &j);

/// One training or test item in text form.
struct T5Example {
    std::string id;
    std::string context;
    std::string user_causality;
    std::string sys_causality;
    std::string response;
    int emotion = -1;
};

struct TokenizedExample {
    std::string id;
    std::vector<int> context;
    std::vector<int> user;
    std::vector<int> sys;
    std::vector<int> target; // response ids followed by EOS
    int emotion = -1;
};

/// Tokenizes the inputs the variant consumes. Missing causality text for a variant
/// that needs it is a PreconditionError, never an empty sequence.
TokenizedExample tokenize(const T5Example &example, const Vocabulary &vocab, const ModelConfig &config);

/// Encoder outputs for a batch. Sequences are unpadded, so each tensor's row count
/// is its attention mask: every row is a real token.
struct EncodedBatch {
    std::vector<Var> z_c;
    std::optional<std::vector<Var>> z_user;
    std::optional<std::vector<Var>> z_sys;

    std::size_t batch_size() const { return z_c.size(); }
};

struct LossBreakdown {
    double l_emotion = 0.0;
    double l_gen = 0.0;
    double total = 0.0;
};

struct LossVars {
    Var l_emotion;
    Var l_gen;
    Var total;

    LossBreakdown values() const;
};

struct SequenceScore {
    double nll = 0.0;
    std::size_t tokens = 0;
};

/// Anything that can assign teacher-forced log-likelihood to a reference.
class TokenScorer {
  public:
    virtual ~TokenScorer() = default;
    virtual SequenceScore score(const TokenizedExample &example) = 0;
};

/// Next-token distribution uniform over the vocabulary at every position.
class UniformScorer final : public TokenScorer {
  public:
    explicit UniformScorer(std::size_t vocab_size) : vocab_size_(vocab_size) {}
    SequenceScore score(const TokenizedExample &example) override;

  private:
    std::size_t vocab_size_;
};

/// exp of the mean per-token negative log-likelihood over all references.
double perplexity(TokenScorer &scorer, std::span<const TokenizedExample> samples);

// Value-level math shared by the model and its tests.

std::vector<double> softmax(std::span<const double> logits);
/// Batch mean of -log p[label]; probs is (batch x emotion_count).
double emotion_loss(const Matrix &probs, std::span<const int> labels);
/// Sum over non-pad positions of -log softmax(logits)[reference]. An all-pad
/// reference gives 0 and logs a degenerate-batch warning.
double gen_loss(const Matrix &logits, std::span<const int> reference, int pad = Vocabulary::kPad);

class T5Model final : public TokenScorer {
  public:
    /// Fresh weights drawn from config.seed.
    T5Model(ModelConfig config, Vocabulary vocab);

    const ModelConfig &config() const { return config_; }
    const Vocabulary &vocab() const { return vocab_; }

    std::vector<Parameter *> parameters();
    std::vector<const Parameter *> parameters() const;
    Parameter &parameter(const std::string &name);
    std::size_t parameter_count() const;

    EncodedBatch encode(Tape &tape, std::span<const TokenizedExample> batch) const;
    /// W_e applied to mean-pooled z_c (and z_user for the causality variants): 1 x emotion_count.
    Var emotion_logits(Tape &tape, Var z_c, std::optional<Var> z_user) const;
    /// Position-wise FC over the sequence-axis concatenation of the present states.
    Var fuse(Tape &tape, Var z_c, std::optional<Var> z_user, std::optional<Var> z_sys) const;
    /// Teacher-forced decoder logits: (decoder_input length) x vocab.
    Var decode(Tape &tape, Var fused, std::span<const int> decoder_input) const;

    /// Combined objective over a batch: l_emotion and l_gen are batch means and
    /// total = emotion_loss_weight * l_emotion + l_gen.
    LossVars loss(Tape &tape, std::span<const TokenizedExample> batch) const;
    LossBreakdown evaluate(std::span<const TokenizedExample> batch) const;

    std::vector<double> emotion_distribution(const TokenizedExample &example) const;
    int predict_emotion(const TokenizedExample &example) const;

    /// Response ids without EOS; never longer than max_generate_len.
    std::vector<int> generate(const TokenizedExample &example, const DecodeParams &params, Rng &rng) const;
    std::string generate_text(const TokenizedExample &example, const DecodeParams &params, Rng &rng) const;

    SequenceScore score(const TokenizedExample &example) override;

  private:
    struct Attention {
        Parameter *wq, *wk, *wv, *wo;
    };
    struct Layer {
        Parameter *self_norm;
        Attention self;
        Parameter *cross_norm = nullptr;
        Attention cross{};
        Parameter *ff_norm, *wi, *wo;
    };
    struct Stack {
        std::vector<Layer> layers;
        Parameter *relative_bias;
        Parameter *final_norm;
    };

    Parameter &add_parameter(const std::string &name, Matrix value);
    Stack make_stack(const std::string &prefix, std::size_t layers, bool decoder, Rng &rng);
    Var attention(Tape &tape, const Attention &a, Var query, Var memory, std::span<const Var> head_bias, bool causal) const;
    Var feed_forward(Tape &tape, const Layer &layer, Var x) const;
    Var run_encoder(Tape &tape, const Stack &stack, std::span<const int> ids) const;
    Var pv(Tape &tape, const Parameter *p) const;

    ModelConfig config_;
    Vocabulary vocab_;
    std::map<std::string, std::unique_ptr<Parameter>> params_;
    std::vector<Parameter *> order_;
    Parameter *embedding_ = nullptr;
    Stack context_encoder_, user_encoder_, sys_encoder_, decoder_;
    Parameter *emotion_head_ = nullptr;
    Parameter *fusion_weight_ = nullptr;
    Parameter *fusion_bias_ = nullptr;
    Parameter *lm_head_ = nullptr;
};

} // namespace empcause::t5
