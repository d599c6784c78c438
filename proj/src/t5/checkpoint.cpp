#include "empcause/t5/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "empcause/common/error.hpp"

namespace empcause::t5 {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'E', 'M', 'P', 'T', '5', 'W', '0', '1'};

template <class T>
void put(std::string &out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T take(std::istream &in, const fs::path &path) {
    T v;
    if (!in.read(reinterpret_cast<char *>(&v), sizeof(T)))
        throw ValidationError(fmt::format("{}: truncated weights file", path.string()));
    return v;
}

void require(const fs::path &p) {
    if (!fs::exists(p))
        throw PreconditionError(fmt::format("checkpoint artifact missing: {}", p.string()));
}

} // namespace

void save_weights(const fs::path &path, const T5Model &model) {
    std::string out(kMagic, sizeof(kMagic));
    auto params = model.parameters();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto *p : params) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
        out += p->name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rows()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.cols()));
        out.append(reinterpret_cast<const char *>(p->value.data()), p->size() * sizeof(double));
    }
    write_file_atomic(path, out);
}

void load_weights(const fs::path &path, T5Model &model) {
    require(path);
    std::ifstream in(path, std::ios::binary);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw ValidationError(fmt::format("{}: not a weights file", path.string()));
    auto count = take<std::uint32_t>(in, path);
    if (count != model.parameters().size())
        throw ValidationError(fmt::format("{}: {} tensors stored, model has {}", path.string(), count, model.parameters().size()));
    for (std::uint32_t i = 0; i < count; ++i) {
        auto len = take<std::uint32_t>(in, path);
        std::string name(len, '\0');
        if (!in.read(name.data(), len))
            throw ValidationError(fmt::format("{}: truncated weights file", path.string()));
        auto rows = take<std::uint32_t>(in, path), cols = take<std::uint32_t>(in, path);
        Parameter &p = model.parameter(name);
        if (p.value.rows() != rows || p.value.cols() != cols)
            throw ValidationError(fmt::format("{}: tensor '{}' is {}x{}, model expects {}x{}", path.string(), name, rows, cols, p.value.rows(),
                                              p.value.cols()));
        if (!in.read(reinterpret_cast<char *>(p.value.data()), static_cast<std::streamsize>(p.size() * sizeof(double))))
            throw ValidationError(fmt::format("{}: truncated weights file", path.string()));
    }
}

void save_checkpoint(const fs::path &dir, const T5Model &model, const json &metrics) {
    fs::create_directories(dir);
    write_file_atomic(dir / "config.json", to_json(model.config()).dump(2) + "\n");
    model.vocab().save(dir / "vocab.txt");
    save_weights(dir / "weights.bin", model);
    write_file_atomic(dir / "metrics.json", metrics.dump(2) + "\n");
}

std::unique_ptr<T5Model> load_checkpoint(const fs::path &dir) {
    require(dir);
    require(dir / "config.json");
    require(dir / "vocab.txt");
    ModelConfig config;
    try {
        config = model_config_from_json(json::parse(read_file(dir / "config.json")));
    } catch (const json::exception &e) {
        throw ValidationError(fmt::format("{}: {}", (dir / "config.json").string(), e.what()));
    }
    auto model = std::make_unique<T5Model>(config, Vocabulary::load(dir / "vocab.txt"));
    load_weights(dir / "weights.bin", *model);
    return model;
}

std::unique_ptr<T5Model> initialize_model(const ModelConfig &config, Vocabulary vocab) {
    auto model = std::make_unique<T5Model>(config, std::move(vocab));
    if (config.init == InitMode::checkpoint)
        load_weights(fs::path(config.init_checkpoint) / "weights.bin", *model);
    return model;
}

} // namespace empcause::t5
