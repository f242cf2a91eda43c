#pragma once

#include <json.hpp>

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffplace/checkpoint.hpp"
#include "diffplace/datagen.hpp"
#include "diffplace/model.hpp"
#include "diffplace/optim.hpp"
#include "diffplace/trainer.hpp"

namespace diffplace {

// Raised for malformed configuration or usage; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Resolved run configuration. Every field has a default; a config file
// overrides defaults and command-line flags override the file. Unknown keys
// anywhere in the file are hard errors.
struct RunConfig {
    Task task = Task::puzzle;
    DatasetSpec dataset;
    std::string dataset_path = "data/default";
    int model_width = 128;
    int model_heads = 4;
    int model_time_embed_dim = 32;
    int model_feature_dim = 64;
    std::array<int, 3> conv_channels{12, 24, 48};
    std::uint64_t model_seed = 5;
    SchedulePlan diffusion;
    int epochs = 10;
    int batch = 16;
    AdamSettings opt;
    std::uint64_t train_seed = 7;
    long checkpoint_every = 0;
    std::string out_dir = "runs/run";
    std::string resume;
    InitMode eval_init = InitMode::zero_centered;
    Split eval_split = Split::test;
    std::uint64_t gaussian_seed = 0;
};

namespace config_detail {

inline nlohmann::json defaults_json() {
    const RunConfig d;
    nlohmann::json j;
    j["task"] = "puzzle";
    j["dataset"]["kind"] = "procedural-image";
    j["dataset"]["path"] = d.dataset_path;
    j["dataset"]["count"] = 2000;
    j["dataset"]["seed"] = 1;
    j["dataset"]["splits"]["train"] = 0.8;
    j["dataset"]["splits"]["val"] = 0.1;
    j["dataset"]["splits"]["test"] = 0.1;
    j["dataset"]["image_size"] = 128;
    j["dataset"]["puzzle_sizes"] = {3, 4};
    j["dataset"]["image_dir"] = "";
    j["dataset"]["k_min"] = 3;
    j["dataset"]["k_max"] = 8;
    j["dataset"]["vocab"] = 512;
    j["dataset"]["element_len"] = 6;
    j["dataset"]["head_repeat"] = 3;
    j["model"]["width"] = d.model_width;
    j["model"]["heads"] = d.model_heads;
    j["model"]["time_embed_dim"] = d.model_time_embed_dim;
    j["model"]["feature_dim"] = d.model_feature_dim;
    j["model"]["conv_channels"] = d.conv_channels;
    j["model"]["seed"] = d.model_seed;
    j["diffusion"]["T"] = d.diffusion.T;
    j["diffusion"]["inference_ratio"] = d.diffusion.inference_ratio;
    j["diffusion"]["beta_start"] = d.diffusion.beta_start;
    j["diffusion"]["beta_end"] = d.diffusion.beta_end;
    j["train"]["epochs"] = d.epochs;
    j["train"]["batch"] = d.batch;
    j["train"]["lr"] = d.opt.lr;
    j["train"]["adam_beta1"] = d.opt.beta1;
    j["train"]["adam_beta2"] = d.opt.beta2;
    j["train"]["adam_eps"] = d.opt.eps;
    j["train"]["clip_norm"] = d.opt.clip_norm;
    j["train"]["seed"] = d.train_seed;
    j["train"]["checkpoint_every"] = d.checkpoint_every;
    j["train"]["out"] = d.out_dir;
    j["train"]["resume"] = "";
    j["eval"]["init"] = "zero";
    j["eval"]["split"] = "test";
    j["eval"]["gaussian_seed"] = d.gaussian_seed;
    return j;
}

inline void merge_checked(nlohmann::json& base, const nlohmann::json& user,
                          const std::string& path) {
    if (!user.is_object())
        throw ConfigError("config: expected an object at '" + (path.empty() ? "<root>" : path) + "'");
    for (const auto& [key, value] : user.items()) {
        const std::string here = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw ConfigError("config: unknown key '" + here + "'");
        nlohmann::json& slot = base[key];
        if (slot.is_object()) {
            merge_checked(slot, value, here);
        } else {
            const bool num_ok = slot.is_number() && value.is_number();
            if (!num_ok && slot.type() != value.type())
                throw ConfigError("config: wrong type for '" + here + "'");
            slot = value;
        }
    }
}

}  // namespace config_detail

inline RunConfig config_from_json(const nlohmann::json& merged) {
    RunConfig c;
    c.task = task_from_name(merged.at("task").get<std::string>());
    const auto& dj = merged.at("dataset");
    c.dataset.kind = dataset_kind_from_name(dj.at("kind").get<std::string>());
    c.dataset_path = dj.at("path").get<std::string>();
    c.dataset.count = dj.at("count").get<int>();
    c.dataset.seed = dj.at("seed").get<std::uint64_t>();
    c.dataset.train_frac = dj.at("splits").at("train").get<double>();
    c.dataset.val_frac = dj.at("splits").at("val").get<double>();
    c.dataset.test_frac = dj.at("splits").at("test").get<double>();
    c.dataset.image_size = dj.at("image_size").get<int>();
    c.dataset.puzzle_sizes = dj.at("puzzle_sizes").get<std::vector<int>>();
    c.dataset.image_dir = dj.at("image_dir").get<std::string>();
    c.dataset.k_min = dj.at("k_min").get<int>();
    c.dataset.k_max = dj.at("k_max").get<int>();
    c.dataset.vocab = dj.at("vocab").get<int>();
    c.dataset.element_len = dj.at("element_len").get<int>();
    c.dataset.head_repeat = dj.at("head_repeat").get<int>();
    const auto& mj = merged.at("model");
    c.model_width = mj.at("width").get<int>();
    c.model_heads = mj.at("heads").get<int>();
    c.model_time_embed_dim = mj.at("time_embed_dim").get<int>();
    c.model_feature_dim = mj.at("feature_dim").get<int>();
    const auto cc = mj.at("conv_channels");
    for (int i = 0; i < 3; ++i) c.conv_channels[std::size_t(i)] = cc.at(std::size_t(i)).get<int>();
    c.model_seed = mj.at("seed").get<std::uint64_t>();
    const auto& fj = merged.at("diffusion");
    c.diffusion.T = fj.at("T").get<int>();
    c.diffusion.inference_ratio = fj.at("inference_ratio").get<int>();
    c.diffusion.beta_start = fj.at("beta_start").get<double>();
    c.diffusion.beta_end = fj.at("beta_end").get<double>();
    const auto& tj = merged.at("train");
    c.epochs = tj.at("epochs").get<int>();
    c.batch = tj.at("batch").get<int>();
    c.opt.lr = tj.at("lr").get<double>();
    c.opt.beta1 = tj.at("adam_beta1").get<double>();
    c.opt.beta2 = tj.at("adam_beta2").get<double>();
    c.opt.eps = tj.at("adam_eps").get<double>();
    c.opt.clip_norm = tj.at("clip_norm").get<double>();
    c.train_seed = tj.at("seed").get<std::uint64_t>();
    c.checkpoint_every = tj.at("checkpoint_every").get<long>();
    c.out_dir = tj.at("out").get<std::string>();
    c.resume = tj.at("resume").get<std::string>();
    const auto& ej = merged.at("eval");
    const std::string init = ej.at("init").get<std::string>();
    if (init == "zero")
        c.eval_init = InitMode::zero_centered;
    else if (init == "gaussian")
        c.eval_init = InitMode::standard_gaussian;
    else
        throw ConfigError("config: eval.init must be 'zero' or 'gaussian'");
    c.eval_split = split_from_name(ej.at("split").get<std::string>());
    c.gaussian_seed = ej.at("gaussian_seed").get<std::uint64_t>();
    return c;
}

// Loads config file (if any) over the defaults; throws ConfigError on unknown
// keys, wrong types, or invalid values. Returns both the resolved struct and
// the resolved JSON (echoed into the run directory for provenance).
inline std::pair<RunConfig, nlohmann::json> load_config(const std::string& path) {
    nlohmann::json merged = config_detail::defaults_json();
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw ConfigError("config: cannot open " + path);
        nlohmann::json user;
        try {
            f >> user;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: parse error in " + path + ": " + e.what());
        }
        config_detail::merge_checked(merged, user, "");
    }
    return {config_from_json(merged), merged};
}

inline void validate_run_config(const RunConfig& c) {
    try {
        c.dataset.validate();
        c.opt.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (c.opt.lr <= 0.0) throw ConfigError("config: train.lr must be > 0");
    if (c.epochs < 0) throw ConfigError("config: train.epochs must be >= 0");
    if (c.batch < 1) throw ConfigError("config: train.batch must be >= 1");
    if (c.diffusion.T < 1) throw ConfigError("config: diffusion.T must be >= 1");
    if (c.diffusion.inference_ratio < 1 || c.diffusion.inference_ratio > c.diffusion.T)
        throw ConfigError("config: diffusion.inference_ratio must be in [1, T]");
    if (!(c.diffusion.beta_start > 0.0 && c.diffusion.beta_start <= c.diffusion.beta_end &&
          c.diffusion.beta_end < 1.0))
        throw ConfigError("config: diffusion betas must satisfy 0 < beta_start <= beta_end < 1");
    const bool seq_task = c.task == Task::sequence;
    const bool seq_data = c.dataset.kind == DatasetKind::synthetic_sequence;
    if (seq_task != seq_data)
        throw ConfigError("config: task/dataset kind mismatch (" +
                          std::string(task_name(c.task)) + " vs " +
                          dataset_kind_name(c.dataset.kind) + ")");
}

inline ModelConfig model_config_from_run(const RunConfig& c) {
    ModelConfig m;
    m.task = c.task;
    m.denoiser.position_dim = c.task == Task::puzzle ? 2 : 1;
    m.denoiser.feature_dim = c.model_feature_dim;
    m.denoiser.time_embed_dim = c.model_time_embed_dim;
    m.denoiser.width = c.model_width;
    m.denoiser.heads = c.model_heads;
    m.denoiser.max_timestep = c.diffusion.T;
    m.conv_channels = c.conv_channels;
    m.vocab = c.dataset.vocab;
    return m;
}

inline TrainSettings train_settings_from_run(const RunConfig& c) {
    TrainSettings s;
    s.plan = c.diffusion;
    s.opt = c.opt;
    s.epochs = c.epochs;
    s.batch = c.batch;
    s.seed = c.train_seed;
    s.checkpoint_every = c.checkpoint_every;
    s.puzzle_sizes = c.dataset.puzzle_sizes;
    return s;
}

}  // namespace diffplace
