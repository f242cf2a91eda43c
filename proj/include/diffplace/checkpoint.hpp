#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffplace/model.hpp"

namespace diffplace {

// Checkpoint layout:
//   "PDCKPT1\n"                        8-byte magic
//   u32 meta_len, meta bytes           JSON: dims, layer count, schedule, step
//   u32 array_count
//   per array: u32 name_len, name, u32 ndim, u32 dims[ndim], f32 data (LE)
// Arrays are written in for_each_param order plus optional optimizer moments;
// a save -> load -> save round trip is bit-exact.

struct SchedulePlan {
    int T = 300;
    int inference_ratio = 10;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

struct CheckpointMeta {
    ModelConfig model;
    SchedulePlan schedule;
    long train_step = 0;
    bool has_optimizer = false;
    long optimizer_step = 0;
};

namespace ckpt_detail {

constexpr char kMagic[8] = {'P', 'D', 'C', 'K', 'P', 'T', '1', '\n'};

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
    out.push_back(char((v >> 16) & 0xff));
    out.push_back(char((v >> 24) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

struct Reader {
    const std::uint8_t* p;
    std::size_t n;
    std::size_t pos = 0;

    void need(std::size_t k) const {
        if (pos + k > n) throw std::runtime_error("checkpoint: unexpected end of file");
    }
    std::uint32_t u32() {
        need(4);
        const std::uint32_t v = std::uint32_t(p[pos]) | (std::uint32_t(p[pos + 1]) << 8) |
                                (std::uint32_t(p[pos + 2]) << 16) |
                                (std::uint32_t(p[pos + 3]) << 24);
        pos += 4;
        return v;
    }
    float f32() {
        const std::uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string str(std::size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p + pos), k);
        pos += k;
        return s;
    }
};

inline nlohmann::json meta_to_json(const CheckpointMeta& m) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["task"] = task_name(m.model.task);
    j["model"]["position_dim"] = m.model.denoiser.position_dim;
    j["model"]["feature_dim"] = m.model.denoiser.feature_dim;
    j["model"]["time_embed_dim"] = m.model.denoiser.time_embed_dim;
    j["model"]["width"] = m.model.denoiser.width;
    j["model"]["heads"] = m.model.denoiser.heads;
    j["model"]["max_timestep"] = m.model.denoiser.max_timestep;
    j["model"]["attention_layers"] = Denoiser<float>::kAttentionLayers;
    j["model"]["conv_channels"] = m.model.conv_channels;
    j["model"]["vocab"] = m.model.vocab;
    j["schedule"]["T"] = m.schedule.T;
    j["schedule"]["inference_ratio"] = m.schedule.inference_ratio;
    j["schedule"]["beta_start"] = m.schedule.beta_start;
    j["schedule"]["beta_end"] = m.schedule.beta_end;
    j["train_step"] = m.train_step;
    j["has_optimizer"] = m.has_optimizer;
    j["optimizer_step"] = m.optimizer_step;
    return j;
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
    if (!j.contains("format_version") || j["format_version"].get<int>() != 1)
        throw std::runtime_error("checkpoint: unsupported format version");
    CheckpointMeta m;
    m.model.task = task_from_name(j.at("task").get<std::string>());
    const auto& mj = j.at("model");
    m.model.denoiser.position_dim = mj.at("position_dim").get<int>();
    m.model.denoiser.feature_dim = mj.at("feature_dim").get<int>();
    m.model.denoiser.time_embed_dim = mj.at("time_embed_dim").get<int>();
    m.model.denoiser.width = mj.at("width").get<int>();
    m.model.denoiser.heads = mj.at("heads").get<int>();
    m.model.denoiser.max_timestep = mj.at("max_timestep").get<int>();
    if (mj.at("attention_layers").get<int>() != Denoiser<float>::kAttentionLayers)
        throw std::runtime_error("checkpoint: attention layer count mismatch");
    const auto cc = mj.at("conv_channels");
    for (int i = 0; i < 3; ++i) m.model.conv_channels[std::size_t(i)] = cc.at(std::size_t(i)).get<int>();
    m.model.vocab = mj.at("vocab").get<int>();
    const auto& sj = j.at("schedule");
    m.schedule.T = sj.at("T").get<int>();
    m.schedule.inference_ratio = sj.at("inference_ratio").get<int>();
    m.schedule.beta_start = sj.at("beta_start").get<double>();
    m.schedule.beta_end = sj.at("beta_end").get<double>();
    m.train_step = j.at("train_step").get<long>();
    m.has_optimizer = j.value("has_optimizer", false);
    m.optimizer_step = j.value("optimizer_step", 0L);
    return m;
}

}  // namespace ckpt_detail

// A named f32 array, the unit of checkpoint storage.
struct NamedArray {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

inline std::string serialize_checkpoint(const CheckpointMeta& meta,
                                        const std::vector<NamedArray>& arrays) {
    using namespace ckpt_detail;
    std::string out(kMagic, sizeof(kMagic));
    const std::string meta_str = meta_to_json(meta).dump();
    put_u32(out, std::uint32_t(meta_str.size()));
    out += meta_str;
    put_u32(out, std::uint32_t(arrays.size()));
    for (const NamedArray& a : arrays) {
        put_u32(out, std::uint32_t(a.name.size()));
        out += a.name;
        put_u32(out, std::uint32_t(a.dims.size()));
        std::size_t total = 1;
        for (const std::uint32_t d : a.dims) {
            put_u32(out, d);
            total *= d;
        }
        if (total != a.data.size()) throw std::runtime_error("checkpoint: dims/data mismatch");
        for (const float f : a.data) put_f32(out, f);
    }
    return out;
}

struct ParsedCheckpoint {
    CheckpointMeta meta;
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const {
        for (const NamedArray& a : arrays)
            if (a.name == name) return &a;
        return nullptr;
    }
};

inline ParsedCheckpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
    using namespace ckpt_detail;
    if (bytes.size() < sizeof(kMagic) ||
        std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("checkpoint: bad magic (not a PDCKPT1 file)");
    Reader r{bytes.data(), bytes.size(), sizeof(kMagic)};
    const std::uint32_t meta_len = r.u32();
    const std::string meta_str = r.str(meta_len);
    ParsedCheckpoint out;
    try {
        out.meta = meta_from_json(nlohmann::json::parse(meta_str));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("checkpoint: bad metadata: ") + e.what());
    }
    const std::uint32_t count = r.u32();
    out.arrays.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray& a = out.arrays[i];
        a.name = r.str(r.u32());
        const std::uint32_t ndim = r.u32();
        a.dims.resize(ndim);
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            a.dims[d] = r.u32();
            total *= a.dims[d];
        }
        a.data.resize(total);
        for (std::size_t k = 0; k < total; ++k) a.data[k] = r.f32();
    }
    return out;
}

template <typename T>
std::vector<NamedArray> collect_arrays(const Model<T>& model) {
    std::vector<NamedArray> arrays;
    model.for_each_param([&](const std::string& name, const Mat<T>& p) {
        NamedArray a;
        a.name = name;
        a.dims = {std::uint32_t(p.rows), std::uint32_t(p.cols)};
        a.data.resize(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) a.data[i] = float(p.v[i]);
        arrays.push_back(std::move(a));
    });
    return arrays;
}

template <typename T>
void fill_model_from_arrays(Model<T>& model, const ParsedCheckpoint& ck) {
    model.for_each_param([&](const std::string& name, Mat<T>& p) {
        const NamedArray* a = ck.find(name);
        if (a == nullptr) throw std::runtime_error("checkpoint: missing array " + name);
        if (a->dims.size() != 2 || a->dims[0] != std::uint32_t(p.rows) ||
            a->dims[1] != std::uint32_t(p.cols))
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        for (std::size_t i = 0; i < p.size(); ++i) p.v[i] = T(a->data[i]);
    });
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const SchedulePlan& plan,
                     long train_step, const std::vector<NamedArray>& extra_arrays = {}) {
    CheckpointMeta meta;
    meta.model = model.cfg;
    meta.schedule = plan;
    meta.train_step = train_step;
    meta.has_optimizer = !extra_arrays.empty();
    meta.optimizer_step = train_step;
    std::vector<NamedArray> arrays = collect_arrays(model);
    arrays.insert(arrays.end(), extra_arrays.begin(), extra_arrays.end());
    const std::string bytes = serialize_checkpoint(meta, arrays);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline ParsedCheckpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_checkpoint: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes);
}

template <typename T>
Model<T> model_from_checkpoint(const ParsedCheckpoint& ck) {
    Model<T> model = Model<T>::init(ck.meta.model, 0);
    fill_model_from_arrays(model, ck);
    return model;
}

}  // namespace diffplace
