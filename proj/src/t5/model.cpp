#include "empcause/t5/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "empcause/common/error.hpp"
#include "empcause/common/text.hpp"

namespace empcause::t5 {

std::string_view to_string(Variant v) {
    switch (v) {
    case Variant::base:
        return "base";
    case Variant::causality_user:
        return "causality_user";
    case Variant::causality_user_sys:
        return "causality_user_sys";
    }
    return "?";
}

Variant variant_from_string(std::string_view name) {
    for (auto v : {Variant::base, Variant::causality_user, Variant::causality_user_sys})
        if (to_string(v) == name)
            return v;
    throw ValidationError(fmt::format("unknown model variant '{}'", name));
}

std::size_t encoder_count(Variant v) { return v == Variant::base ? 1 : v == Variant::causality_user ? 2 : 3; }
bool uses_user_causality(Variant v) { return v != Variant::base; }
bool uses_sys_causality(Variant v) { return v == Variant::causality_user_sys; }

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.d_model = 64;
    c.d_ff = 256;
    c.num_heads = 4;
    c.num_encoder_layers = 2;
    c.num_decoder_layers = 2;
    c.max_input_len = 64;
    c.max_target_len = 48;
    c.learning_rate = 1e-3;
    return c;
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char *name) {
        if (v == 0)
            throw ValidationError(fmt::format("model config: {} must be positive", name));
    };
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(num_heads, "num_heads");
    positive(num_encoder_layers, "num_encoder_layers");
    positive(num_decoder_layers, "num_decoder_layers");
    positive(relative_buckets, "relative_buckets");
    positive(emotion_count, "emotion_count");
    positive(max_input_len, "max_input_len");
    positive(max_generate_len, "max_generate_len");
    positive(batch_size, "batch_size");
    positive(decode.top_k, "decode.top_k");
    if (max_target_len < 2)
        throw ValidationError("model config: max_target_len must leave room for one token and EOS");
    if (d_model % num_heads != 0)
        throw ValidationError(fmt::format("model config: d_model {} is not divisible by {} heads", d_model, num_heads));
    if (decode.temperature < 0)
        throw ValidationError("model config: decode.temperature must be non-negative");
    if (!(learning_rate > 0))
        throw ValidationError("model config: learning_rate must be positive");
    if (optimizer != "adam")
        throw ValidationError(fmt::format("model config: unsupported optimizer '{}'", optimizer));
    if (init == InitMode::checkpoint && init_checkpoint.empty())
        throw ValidationError("model config: init 'checkpoint' needs init_checkpoint");
}

json to_json(const ModelConfig &c) {
    return {{"variant", to_string(c.variant)},
            {"d_model", c.d_model},
            {"d_ff", c.d_ff},
            {"num_heads", c.num_heads},
            {"num_encoder_layers", c.num_encoder_layers},
            {"num_decoder_layers", c.num_decoder_layers},
            {"relative_buckets", c.relative_buckets},
            {"relative_max_distance", c.relative_max_distance},
            {"vocab_id", c.vocab_id},
            {"vocab_size", c.vocab_size},
            {"emotion_count", c.emotion_count},
            {"max_input_len", c.max_input_len},
            {"max_target_len", c.max_target_len},
            {"max_generate_len", c.max_generate_len},
            {"decode", {{"top_k", c.decode.top_k}, {"temperature", c.decode.temperature}}},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"emotion_loss_weight", c.emotion_loss_weight},
            {"emotion_grad", c.emotion_grad == EmotionGrad::joint ? "joint" : "context_only"},
            {"init", c.init == InitMode::scratch ? "scratch" : "checkpoint"},
            {"init_checkpoint", c.init_checkpoint},
            {"optimizer", c.optimizer},
            {"adam", {{"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"eps", c.adam_eps}}},
            {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json &j) {
    ModelConfig c = j.value("preset", std::string{"default"}) == "tiny" ? ModelConfig::tiny() : ModelConfig{};
    try {
        if (j.contains("variant"))
            c.variant = variant_from_string(j.at("variant").get<std::string>());
        c.d_model = j.value("d_model", c.d_model);
        c.d_ff = j.value("d_ff", c.d_ff);
        c.num_heads = j.value("num_heads", c.num_heads);
        c.num_encoder_layers = j.value("num_encoder_layers", c.num_encoder_layers);
        c.num_decoder_layers = j.value("num_decoder_layers", c.num_decoder_layers);
        c.relative_buckets = j.value("relative_buckets", c.relative_buckets);
        c.relative_max_distance = j.value("relative_max_distance", c.relative_max_distance);
        c.vocab_id = j.value("vocab_id", c.vocab_id);
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.emotion_count = j.value("emotion_count", c.emotion_count);
        c.max_input_len = j.value("max_input_len", c.max_input_len);
        c.max_target_len = j.value("max_target_len", c.max_target_len);
        c.max_generate_len = j.value("max_generate_len", c.max_generate_len);
        if (j.contains("decode")) {
            c.decode.top_k = j["decode"].value("top_k", c.decode.top_k);
            c.decode.temperature = j["decode"].value("temperature", c.decode.temperature);
        }
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.epochs = j.value("epochs", c.epochs);
        c.emotion_loss_weight = j.value("emotion_loss_weight", c.emotion_loss_weight);
        if (j.contains("emotion_grad")) {
            auto g = j["emotion_grad"].get<std::string>();
            if (g != "joint" && g != "context_only")
                throw ValidationError(fmt::format("unknown emotion_grad '{}'", g));
            c.emotion_grad = g == "joint" ? EmotionGrad::joint : EmotionGrad::context_only;
        }
        if (j.contains("init")) {
            auto m = j["init"].get<std::string>();
            if (m != "scratch" && m != "checkpoint")
                throw ValidationError(fmt::format("unknown init mode '{}'", m));
            c.init = m == "scratch" ? InitMode::scratch : InitMode::checkpoint;
        }
        c.init_checkpoint = j.value("init_checkpoint", c.init_checkpoint);
        c.optimizer = j.value("optimizer", c.optimizer);
        if (j.contains("adam")) {
            c.adam_beta1 = j["adam"].value("beta1", c.adam_beta1);
            c.adam_beta2 = j["adam"].value("beta2", c.adam_beta2);
            c.adam_eps = j["adam"].value("eps", c.adam_eps);
        }
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception &e) {
        throw ValidationError(fmt::format("malformed model config: {}", e.what()));
    }
    return c;
}

TokenizedExample tokenize(const T5Example &ex, const Vocabulary &vocab, const ModelConfig &config) {
    if (text::trim(ex.context).empty())
        throw PreconditionError(fmt::format("example '{}' has an empty context", ex.id));
    if (uses_user_causality(config.variant) && text::trim(ex.user_causality).empty())
        throw PreconditionError(fmt::format("example '{}' lacks user causality text required by variant {}", ex.id, to_string(config.variant)));
    if (uses_sys_causality(config.variant) && text::trim(ex.sys_causality).empty())
        throw PreconditionError(fmt::format("example '{}' lacks sys causality text required by variant {}", ex.id, to_string(config.variant)));
    TokenizedExample out;
    out.id = ex.id;
    out.emotion = ex.emotion;
    // Keep the most recent context tokens: the final user turn matters most.
    out.context = vocab.encode(ex.context);
    if (out.context.size() > config.max_input_len)
        out.context.erase(out.context.begin(), out.context.end() - static_cast<long>(config.max_input_len));
    if (uses_user_causality(config.variant))
        out.user = vocab.encode(ex.user_causality, config.max_input_len);
    if (uses_sys_causality(config.variant))
        out.sys = vocab.encode(ex.sys_causality, config.max_input_len);
    out.target = vocab.encode(ex.response, config.max_target_len - 1);
    out.target.push_back(Vocabulary::kEos);
    return out;
}

LossBreakdown LossVars::values() const { return {l_emotion.value()(0, 0), l_gen.value()(0, 0), total.value()(0, 0)}; }

std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty())
        throw PreconditionError("softmax of an empty vector");
    double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i)
        sum += out[i] = std::exp(logits[i] - m);
    for (auto &v : out)
        v /= sum;
    return out;
}

double emotion_loss(const Matrix &probs, std::span<const int> labels) {
    if (static_cast<std::size_t>(probs.rows()) != labels.size() || labels.empty())
        throw PreconditionError(fmt::format("emotion loss: {} distributions for {} labels", probs.rows(), labels.size()));
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= probs.cols())
            throw PreconditionError(fmt::format("emotion label {} outside {} classes", labels[i], probs.cols()));
        total += -std::log(probs(static_cast<Eigen::Index>(i), labels[i]));
    }
    return total / static_cast<double>(labels.size());
}

double gen_loss(const Matrix &logits, std::span<const int> reference, int pad) {
    if (static_cast<std::size_t>(logits.rows()) != reference.size())
        throw PreconditionError(fmt::format("gen loss: {} logit rows for a reference of {} tokens", logits.rows(), reference.size()));
    if (std::all_of(reference.begin(), reference.end(), [pad](int id) { return id == pad; })) {
        spdlog::warn("degenerate batch: reference is entirely padding, generation loss is 0");
        return 0.0;
    }
    Tape tape(false);
    return cross_entropy_sum(tape.constant(logits), reference, pad).value()(0, 0);
}

SequenceScore UniformScorer::score(const TokenizedExample &ex) {
    if (vocab_size_ == 0)
        throw PreconditionError("uniform scorer needs a non-empty vocabulary");
    Matrix logits = Matrix::Zero(static_cast<Eigen::Index>(ex.target.size()), static_cast<Eigen::Index>(vocab_size_));
    SequenceScore s;
    s.nll = gen_loss(logits, ex.target);
    s.tokens = static_cast<std::size_t>(std::count_if(ex.target.begin(), ex.target.end(), [](int id) { return id != Vocabulary::kPad; }));
    return s;
}

double perplexity(TokenScorer &scorer, std::span<const TokenizedExample> samples) {
    if (samples.empty())
        throw PreconditionError("perplexity over an empty test set");
    double nll = 0.0;
    std::size_t tokens = 0;
    for (const auto &ex : samples) {
        auto s = scorer.score(ex);
        nll += s.nll;
        tokens += s.tokens;
    }
    if (tokens == 0)
        throw PreconditionError("perplexity over references with no tokens");
    return std::exp(nll / static_cast<double>(tokens));
}

namespace {

Matrix normal_matrix(Rng &rng, std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = rng.normal() * stddev;
    return m;
}

Matrix linear_init(Rng &rng, std::size_t in, std::size_t out) {
    return normal_matrix(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in)));
}

Matrix ones_row(std::size_t n) { return Matrix::Ones(1, static_cast<Eigen::Index>(n)); }

} // namespace

Parameter &T5Model::add_parameter(const std::string &name, Matrix value) {
    auto p = std::make_unique<Parameter>(name, std::move(value));
    Parameter *raw = p.get();
    if (!params_.emplace(name, std::move(p)).second)
        throw PreconditionError(fmt::format("duplicate parameter '{}'", name));
    order_.push_back(raw);
    return *raw;
}

T5Model::Stack T5Model::make_stack(const std::string &prefix, std::size_t layers, bool decoder, Rng &rng) {
    const std::size_t d = config_.d_model, ff = config_.d_ff;
    auto attention_params = [&](const std::string &p) {
        return Attention{&add_parameter(p + ".q", linear_init(rng, d, d)), &add_parameter(p + ".k", linear_init(rng, d, d)),
                         &add_parameter(p + ".v", linear_init(rng, d, d)), &add_parameter(p + ".o", linear_init(rng, d, d))};
    };
    Stack s;
    s.relative_bias = &add_parameter(prefix + ".relative_bias", normal_matrix(rng, config_.relative_buckets, config_.num_heads, 0.1));
    for (std::size_t i = 0; i < layers; ++i) {
        std::string lp = fmt::format("{}.layer{}", prefix, i);
        Layer l{};
        l.self_norm = &add_parameter(lp + ".self_norm", ones_row(d));
        l.self = attention_params(lp + ".self");
        if (decoder) {
            l.cross_norm = &add_parameter(lp + ".cross_norm", ones_row(d));
            l.cross = attention_params(lp + ".cross");
        }
        l.ff_norm = &add_parameter(lp + ".ff_norm", ones_row(d));
        l.wi = &add_parameter(lp + ".ff_in", linear_init(rng, d, ff));
        l.wo = &add_parameter(lp + ".ff_out", linear_init(rng, ff, d));
        s.layers.push_back(l);
    }
    s.final_norm = &add_parameter(prefix + ".final_norm", ones_row(d));
    return s;
}

T5Model::T5Model(ModelConfig config, Vocabulary vocab) : config_(std::move(config)), vocab_(std::move(vocab)) {
    if (config_.vocab_id.empty())
        config_.vocab_id = vocab_.id();
    if (config_.vocab_size == 0)
        config_.vocab_size = vocab_.size();
    config_.validate();
    if (config_.vocab_id != vocab_.id() || config_.vocab_size != vocab_.size())
        throw ValidationError(fmt::format("model config expects vocabulary {} ({} entries) but got {} ({} entries)", config_.vocab_id,
                                          config_.vocab_size, vocab_.id(), vocab_.size()));
    Rng rng(config_.seed);
    const std::size_t d = config_.d_model, v = vocab_.size();
    embedding_ = &add_parameter("shared.embedding", normal_matrix(rng, v, d, 1.0));
    context_encoder_ = make_stack("encoder.context", config_.num_encoder_layers, false, rng);
    if (uses_user_causality(config_.variant))
        user_encoder_ = make_stack("encoder.user", config_.num_encoder_layers, false, rng);
    if (uses_sys_causality(config_.variant))
        sys_encoder_ = make_stack("encoder.sys", config_.num_encoder_layers, false, rng);
    std::size_t pooled = uses_user_causality(config_.variant) ? 2 * d : d;
    emotion_head_ = &add_parameter("emotion_head.weight", linear_init(rng, pooled, config_.emotion_count));
    fusion_weight_ = &add_parameter("fusion.weight", linear_init(rng, d, d));
    fusion_bias_ = &add_parameter("fusion.bias", Matrix::Zero(1, static_cast<Eigen::Index>(d)));
    decoder_ = make_stack("decoder", config_.num_decoder_layers, true, rng);
    lm_head_ = &add_parameter("lm_head", linear_init(rng, d, v));
}

std::vector<Parameter *> T5Model::parameters() { return order_; }

std::vector<const Parameter *> T5Model::parameters() const { return {order_.begin(), order_.end()}; }

Parameter &T5Model::parameter(const std::string &name) {
    auto it = params_.find(name);
    if (it == params_.end())
        throw PreconditionError(fmt::format("no parameter named '{}'", name));
    return *it->second;
}

std::size_t T5Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto *p : order_)
        n += p->size();
    return n;
}

Var T5Model::pv(Tape &tape, const Parameter *p) const {
    // A recording tape needs the mutable parameter to deposit gradients.
    return tape.recording() ? tape.param(*const_cast<Parameter *>(p)) : tape.param(*p);
}

Var T5Model::attention(Tape &tape, const Attention &a, Var query, Var memory, std::span<const Var> head_bias, bool causal) const {
    const std::size_t heads = config_.num_heads, dh = config_.d_model / heads;
    Var q = matmul(query, pv(tape, a.wq));
    Var k = matmul(memory, pv(tape, a.wk));
    Var v = matmul(memory, pv(tape, a.wv));
    const auto tq = static_cast<Eigen::Index>(query.rows()), tk = static_cast<Eigen::Index>(memory.rows());
    Matrix mask;
    if (causal) {
        mask = Matrix::Zero(tq, tk);
        for (Eigen::Index i = 0; i < tq; ++i)
            for (Eigen::Index j = i + 1; j < tk; ++j)
                mask(i, j) = -1e9;
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outputs;
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = slice_cols(q, h * dh, dh), kh = slice_cols(k, h * dh, dh), vh = slice_cols(v, h * dh, dh);
        Var scores = scale(matmul_nt(qh, kh), inv_sqrt);
        if (!head_bias.empty())
            scores = add(scores, head_bias[h]);
        if (causal)
            scores = add_constant(scores, mask);
        outputs.push_back(matmul(softmax_rows(scores), vh));
    }
    return matmul(concat_cols(outputs), pv(tape, a.wo));
}

Var T5Model::feed_forward(Tape &tape, const Layer &layer, Var x) const {
    Var h = rms_norm(x, pv(tape, layer.ff_norm));
    return matmul(relu(matmul(h, pv(tape, layer.wi))), pv(tape, layer.wo));
}

Var T5Model::run_encoder(Tape &tape, const Stack &stack, std::span<const int> ids) const {
    if (ids.empty())
        throw PreconditionError("encoder input is empty");
    Var x = embed(pv(tape, embedding_), ids);
    std::vector<Var> bias;
    Var table = pv(tape, stack.relative_bias);
    for (std::size_t h = 0; h < config_.num_heads; ++h)
        bias.push_back(relative_bias(table, h, ids.size(), ids.size(), true, config_.relative_max_distance));
    for (const auto &layer : stack.layers) {
        Var h = rms_norm(x, pv(tape, layer.self_norm));
        x = add(x, attention(tape, layer.self, h, h, bias, false));
        x = add(x, feed_forward(tape, layer, x));
    }
    return rms_norm(x, pv(tape, stack.final_norm));
}

EncodedBatch T5Model::encode(Tape &tape, std::span<const TokenizedExample> batch) const {
    EncodedBatch out;
    if (uses_user_causality(config_.variant))
        out.z_user.emplace();
    if (uses_sys_causality(config_.variant))
        out.z_sys.emplace();
    for (const auto &ex : batch) {
        out.z_c.push_back(run_encoder(tape, context_encoder_, ex.context));
        if (out.z_user) {
            if (ex.user.empty())
                throw PreconditionError(fmt::format("example '{}' has no user causality tokens", ex.id));
            out.z_user->push_back(run_encoder(tape, user_encoder_, ex.user));
        }
        if (out.z_sys) {
            if (ex.sys.empty())
                throw PreconditionError(fmt::format("example '{}' has no sys causality tokens", ex.id));
            out.z_sys->push_back(run_encoder(tape, sys_encoder_, ex.sys));
        }
    }
    return out;
}

Var T5Model::emotion_logits(Tape &tape, Var z_c, std::optional<Var> z_user) const {
    if (z_c.cols() != config_.d_model)
        throw PreconditionError(fmt::format("classifier input width {} does not match d_model {}", z_c.cols(), config_.d_model));
    std::vector<Var> pooled{mean_rows(z_c)};
    if (uses_user_causality(config_.variant)) {
        if (!z_user)
            throw PreconditionError("variant needs z_user for the emotion classifier");
        if (z_user->cols() != config_.d_model)
            throw PreconditionError(fmt::format("z_user width {} does not match d_model {}", z_user->cols(), config_.d_model));
        Var pu = mean_rows(*z_user);
        pooled.push_back(config_.emotion_grad == EmotionGrad::context_only ? detach(pu) : pu);
    }
    return matmul(concat_cols(pooled), pv(tape, emotion_head_));
}

Var T5Model::fuse(Tape &tape, Var z_c, std::optional<Var> z_user, std::optional<Var> z_sys) const {
    std::vector<Var> parts{z_c};
    if (z_user)
        parts.push_back(*z_user);
    if (z_sys)
        parts.push_back(*z_sys);
    for (const auto &p : parts)
        if (p.cols() != config_.d_model)
            throw PreconditionError(fmt::format("fusion input width {} does not match d_model {}", p.cols(), config_.d_model));
    return add_row(matmul(concat_rows(parts), pv(tape, fusion_weight_)), pv(tape, fusion_bias_));
}

Var T5Model::decode(Tape &tape, Var fused, std::span<const int> decoder_input) const {
    if (decoder_input.empty())
        throw PreconditionError("decoder input is empty");
    Var x = embed(pv(tape, embedding_), decoder_input);
    std::vector<Var> bias;
    Var table = pv(tape, decoder_.relative_bias);
    for (std::size_t h = 0; h < config_.num_heads; ++h)
        bias.push_back(relative_bias(table, h, decoder_input.size(), decoder_input.size(), false, config_.relative_max_distance));
    for (const auto &layer : decoder_.layers) {
        Var h = rms_norm(x, pv(tape, layer.self_norm));
        x = add(x, attention(tape, layer.self, h, h, bias, true));
        h = rms_norm(x, pv(tape, layer.cross_norm));
        x = add(x, attention(tape, layer.cross, h, fused, {}, false));
        x = add(x, feed_forward(tape, layer, x));
    }
    return matmul(rms_norm(x, pv(tape, decoder_.final_norm)), pv(tape, lm_head_));
}

namespace {

std::vector<int> teacher_input(const std::vector<int> &target) {
    std::vector<int> in{Vocabulary::kBos};
    in.insert(in.end(), target.begin(), target.end() - 1);
    return in;
}

std::optional<Var> at(const std::optional<std::vector<Var>> &v, std::size_t i) {
    if (!v)
        return std::nullopt;
    return (*v)[i];
}

} // namespace

LossVars T5Model::loss(Tape &tape, std::span<const TokenizedExample> batch) const {
    if (batch.empty())
        throw PreconditionError("loss over an empty batch");
    EncodedBatch enc = encode(tape, batch);
    std::vector<Var> emotion_terms, gen_terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto &ex = batch[i];
        if (ex.emotion < 0 || static_cast<std::size_t>(ex.emotion) >= config_.emotion_count)
            throw PreconditionError(fmt::format("example '{}' has emotion label {} outside {} classes", ex.id, ex.emotion, config_.emotion_count));
        if (ex.target.empty())
            throw PreconditionError(fmt::format("example '{}' has an empty target", ex.id));
        int label = ex.emotion;
        emotion_terms.push_back(cross_entropy_sum(emotion_logits(tape, enc.z_c[i], at(enc.z_user, i)), std::span<const int>(&label, 1)));
        Var fused = fuse(tape, enc.z_c[i], at(enc.z_user, i), at(enc.z_sys, i));
        auto input = teacher_input(ex.target);
        gen_terms.push_back(cross_entropy_sum(decode(tape, fused, input), ex.target, Vocabulary::kPad));
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    LossVars out;
    out.l_emotion = scale(sum_scalars(emotion_terms), inv);
    out.l_gen = scale(sum_scalars(gen_terms), inv);
    std::vector<Var> parts{scale(out.l_emotion, config_.emotion_loss_weight), out.l_gen};
    out.total = sum_scalars(parts);
    return out;
}

LossBreakdown T5Model::evaluate(std::span<const TokenizedExample> batch) const {
    Tape tape(false);
    return loss(tape, batch).values();
}

std::vector<double> T5Model::emotion_distribution(const TokenizedExample &ex) const {
    Tape tape(false);
    auto enc = encode(tape, std::span<const TokenizedExample>(&ex, 1));
    Var logits = emotion_logits(tape, enc.z_c[0], at(enc.z_user, 0));
    const Matrix &l = logits.value();
    return softmax(std::span<const double>(l.data(), static_cast<std::size_t>(l.size())));
}

int T5Model::predict_emotion(const TokenizedExample &ex) const {
    auto p = emotion_distribution(ex);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::vector<int> T5Model::generate(const TokenizedExample &ex, const DecodeParams &params, Rng &rng) const {
    if (params.top_k < 1)
        throw PreconditionError("decode.top_k must be at least 1");
    if (params.temperature < 0)
        throw PreconditionError("decode.temperature must be non-negative");
    Tape tape(false);
    auto enc = encode(tape, std::span<const TokenizedExample>(&ex, 1));
    Var fused = fuse(tape, enc.z_c[0], at(enc.z_user, 0), at(enc.z_sys, 0));
    std::vector<int> prefix{Vocabulary::kBos};
    std::vector<int> out;
    const auto v = static_cast<Eigen::Index>(vocab_.size());
    while (out.size() < config_.max_generate_len) {
        Var logits = decode(tape, fused, prefix);
        Eigen::RowVectorXd last = logits.value().row(logits.value().rows() - 1);
        last(Vocabulary::kPad) = -std::numeric_limits<double>::infinity();
        last(Vocabulary::kBos) = -std::numeric_limits<double>::infinity();
        int next = 0;
        if (params.temperature == 0.0) {
            Eigen::Index best = 0;
            last.maxCoeff(&best); // first maximum: ties go to the lowest id
            next = static_cast<int>(best);
        } else {
            std::vector<int> ids(static_cast<std::size_t>(v));
            std::iota(ids.begin(), ids.end(), 0);
            std::size_t k = std::min<std::size_t>(params.top_k, ids.size());
            std::partial_sort(ids.begin(), ids.begin() + static_cast<long>(k), ids.end(), [&](int a, int b) {
                return last(a) != last(b) ? last(a) > last(b) : a < b;
            });
            std::vector<double> scaled(k);
            for (std::size_t i = 0; i < k; ++i)
                scaled[i] = last(ids[i]) / params.temperature;
            auto p = softmax(scaled);
            double u = rng.uniform(), acc = 0.0;
            next = ids[k - 1];
            for (std::size_t i = 0; i < k; ++i) {
                acc += p[i];
                if (u < acc) {
                    next = ids[i];
                    break;
                }
            }
        }
        if (next == Vocabulary::kEos)
            break;
        out.push_back(next);
        prefix.push_back(next);
    }
    return out;
}

std::string T5Model::generate_text(const TokenizedExample &ex, const DecodeParams &params, Rng &rng) const {
    auto ids = generate(ex, params, rng);
    return vocab_.decode(ids);
}

SequenceScore T5Model::score(const TokenizedExample &ex) {
    if (ex.target.empty())
        throw PreconditionError(fmt::format("example '{}' has no reference tokens", ex.id));
    Tape tape(false);
    auto enc = encode(tape, std::span<const TokenizedExample>(&ex, 1));
    Var fused = fuse(tape, enc.z_c[0], at(enc.z_user, 0), at(enc.z_sys, 0));
    Var logits = decode(tape, fused, teacher_input(ex.target));
    SequenceScore s;
    s.nll = gen_loss(logits.value(), ex.target);
    s.tokens = static_cast<std::size_t>(std::count_if(ex.target.begin(), ex.target.end(), [](int id) { return id != Vocabulary::kPad; }));
    return s;
}

} // namespace empcause::t5
