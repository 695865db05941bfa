#include "ldic/checkpoint.hpp"

#include "ldic/errors.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace ldic {

namespace {

constexpr char kMagic[4] = {'L', 'D', 'C', 'K'};

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
        if (!out_) {
            throw DataError("cannot write checkpoint " + path.string());
        }
    }
    void raw(const void* p, size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void u32(uint32_t v) { raw(&v, 4); }
    void i32(int32_t v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void table(const entropy::CdfTable& t) {
        i32(t.offset);
        u32(static_cast<uint32_t>(t.cdf.size()));
        raw(t.cdf.data(), t.cdf.size() * sizeof(uint32_t));
    }
    void close() {
        out_.close();
        if (!out_) {
            throw DataError("failed writing checkpoint");
        }
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) {
            throw CheckpointError("cannot open checkpoint " + path.string());
        }
    }
    void raw(void* p, size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!in_) {
            throw CheckpointError("checkpoint " + path_.string() + " is truncated");
        }
    }
    uint32_t u32() {
        uint32_t v;
        raw(&v, 4);
        return v;
    }
    int32_t i32() {
        int32_t v;
        raw(&v, 4);
        return v;
    }
    double f64() {
        double v;
        raw(&v, 8);
        return v;
    }
    std::string str() {
        std::string s(u32(), '\0');
        raw(s.data(), s.size());
        return s;
    }
    entropy::CdfTable table() {
        entropy::CdfTable t;
        t.offset = i32();
        t.cdf.resize(u32());
        raw(t.cdf.data(), t.cdf.size() * sizeof(uint32_t));
        t.validate();
        return t;
    }

private:
    std::ifstream in_;
    std::filesystem::path path_;
};

ModelConfig read_header(Reader& in) {
    char magic[4];
    in.raw(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw CheckpointError("not a checkpoint file (bad magic)");
    }
    const auto version = in.u32();
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    ModelConfig cfg = nlohmann::json::parse(in.str()).get<ModelConfig>();
    cfg.validate();
    return cfg;
}

std::map<std::string, torch::Tensor> named_state(model::Model& model) {
    std::map<std::string, torch::Tensor> state;
    for (const auto& item : model->named_parameters()) {
        state[item.key()] = item.value();
    }
    for (const auto& item : model->named_buffers()) {
        state[item.key()] = item.value();
    }
    return state;
}

void read_body(Reader& in, model::Model& model) {
    model::FrozenTables tables;
    const auto z_count = in.u32();
    for (uint32_t i = 0; i < z_count; ++i) {
        tables.z_tables.push_back(in.table());
    }
    entropy::GaussianTableSpec spec;
    spec.scale_min = in.f64();
    spec.scale_max = in.f64();
    spec.scale_levels = static_cast<int>(in.u32());
    spec.offset_levels = static_cast<int>(in.u32());
    spec.tail_sigmas = in.f64();
    std::vector<entropy::CdfTable> y_tables(in.u32());
    for (auto& t : y_tables) {
        t = in.table();
    }
    if (z_count != static_cast<uint32_t>(model->config().hyper_channels)) {
        throw CheckpointError("checkpoint has " + std::to_string(z_count) + " hyper tables, model expects " +
                              std::to_string(model->config().hyper_channels));
    }
    tables.y_model = entropy::GaussianConditional(spec, std::move(y_tables));

    auto state = named_state(model);
    const auto count = in.u32();
    if (count != state.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                              std::to_string(state.size()));
    }
    torch::NoGradGuard no_grad;
    for (uint32_t i = 0; i < count; ++i) {
        const auto name = in.str();
        const auto rank = in.u32();
        std::vector<int64_t> shape(rank);
        for (auto& d : shape) {
            d = static_cast<int64_t>(in.u32());
        }
        auto it = state.find(name);
        if (it == state.end()) {
            throw CheckpointError("checkpoint tensor '" + name + "' has no counterpart in the model");
        }
        if (it->second.sizes() != torch::IntArrayRef(shape)) {
            throw CheckpointError("shape mismatch for '" + name + "'");
        }
        auto buf = torch::empty(shape, torch::kFloat32);
        in.raw(buf.data_ptr<float>(), static_cast<size_t>(buf.numel()) * sizeof(float));
        it->second.copy_(buf);
    }
    model->set_tables(std::move(tables));
}

}  // namespace

void save_checkpoint(model::Model& model, const std::filesystem::path& path) {
    model->freeze_entropy_tables();
    const auto& tables = *model->tables();
    Writer out(path);
    out.raw(kMagic, 4);
    out.u32(kCheckpointVersion);
    out.str(nlohmann::json(model->config()).dump());

    out.u32(static_cast<uint32_t>(tables.z_tables.size()));
    for (const auto& t : tables.z_tables) {
        out.table(t);
    }
    const auto& spec = tables.y_model.spec();
    out.f64(spec.scale_min);
    out.f64(spec.scale_max);
    out.u32(static_cast<uint32_t>(spec.scale_levels));
    out.u32(static_cast<uint32_t>(spec.offset_levels));
    out.f64(spec.tail_sigmas);
    out.u32(static_cast<uint32_t>(tables.y_model.tables().size()));
    for (const auto& t : tables.y_model.tables()) {
        out.table(t);
    }

    const auto state = named_state(model);
    out.u32(static_cast<uint32_t>(state.size()));
    for (const auto& [name, tensor] : state) {
        out.str(name);
        out.u32(static_cast<uint32_t>(tensor.dim()));
        for (auto d : tensor.sizes()) {
            out.u32(static_cast<uint32_t>(d));
        }
        auto t = tensor.detach().to(torch::kFloat32).contiguous();
        out.raw(t.data_ptr<float>(), static_cast<size_t>(t.numel()) * sizeof(float));
    }
    out.close();
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
    Reader in(path);
    return read_header(in);
}

model::Model load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
    Reader in(path);
    const auto cfg = read_header(in);
    if (expected && !(*expected == cfg)) {
        throw CheckpointError("checkpoint config does not match the expected model config: stored " +
                              nlohmann::json(cfg).dump());
    }
    model::Model model(cfg);
    read_body(in, model);
    model->eval();
    return model;
}

void load_weights(model::Model& model, const std::filesystem::path& path) {
    Reader in(path);
    const auto cfg = read_header(in);
    if (!(cfg == model->config())) {
        throw CheckpointError("checkpoint config " + nlohmann::json(cfg).dump() +
                              " does not match model config " + nlohmann::json(model->config()).dump());
    }
    read_body(in, model);
}

}  // namespace ldic
