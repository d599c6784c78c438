#pragma once

#include <filesystem>
#include <memory>

#include "empcause/common/jsonl.hpp"
#include "empcause/t5/model.hpp"

namespace empcause::t5 {

/// Writes config.json, weights.bin, vocab.txt and metrics.json into dir.
///
/// weights.bin (little-endian): magic "EMPT5W01", u32 tensor count, then per tensor
/// u32 name length + name, u32 rows, u32 cols, rows*cols float64 values in row-major order.
void save_checkpoint(const std::filesystem::path &dir, const T5Model &model, const json &metrics = json::object());

/// Rebuilds a model from a checkpoint directory. A missing directory or file is a
/// PreconditionError naming the path.
std::unique_ptr<T5Model> load_checkpoint(const std::filesystem::path &dir);

/// Model for training: fresh weights for init "scratch", or the weights of
/// config.init_checkpoint (a checkpoint directory) for init "checkpoint".
std::unique_ptr<T5Model> initialize_model(const ModelConfig &config, Vocabulary vocab);

void save_weights(const std::filesystem::path &path, const T5Model &model);
/// Copies every stored tensor into the model. Names and shapes must match exactly.
void load_weights(const std::filesystem::path &path, T5Model &model);

} // namespace empcause::t5
