#pragma once

#include <array>
#include <stdexcept>
#include <string>

#include "diffplace/denoiser.hpp"
#include "diffplace/encoders.hpp"
#include "diffplace/rng.hpp"

namespace diffplace {

enum class Task { puzzle, sequence };

inline const char* task_name(Task t) { return t == Task::puzzle ? "puzzle" : "sequence"; }

inline Task task_from_name(const std::string& s) {
    if (s == "puzzle") return Task::puzzle;
    if (s == "sequence") return Task::sequence;
    throw std::invalid_argument("unknown task '" + s + "' (expected puzzle or sequence)");
}

struct ModelConfig {
    Task task = Task::puzzle;
    DenoiserConfig denoiser;
    std::array<int, 3> conv_channels{12, 24, 48};  // puzzle backbone
    int vocab = 512;                               // sequence backbone

    void validate() const {
        denoiser.validate();
        const int want_n = task == Task::puzzle ? 2 : 1;
        if (denoiser.position_dim != want_n)
            throw std::invalid_argument(std::string("ModelConfig: task ") + task_name(task) +
                                        " requires position_dim n=" + std::to_string(want_n) +
                                        ", got n=" + std::to_string(denoiser.position_dim));
    }
};

// Full trainable state: the task backbone plus the graph denoiser. Only the
// encoder matching cfg.task is active.
template <typename T>
struct Model {
    ModelConfig cfg;
    PatchEncoder<T> patch_encoder;
    TokenEncoder<T> token_encoder;
    Denoiser<T> denoiser;

    static Model init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        if (cfg.task == Task::puzzle)
            m.patch_encoder = PatchEncoder<T>::init(cfg.denoiser.feature_dim, cfg.conv_channels,
                                                    Rng::mix(seed, 1));
        else
            m.token_encoder =
                TokenEncoder<T>::init(cfg.vocab, cfg.denoiser.feature_dim, Rng::mix(seed, 2));
        m.denoiser = Denoiser<T>::init(cfg.denoiser, Rng::mix(seed, 3));
        return m;
    }

    static Model zeros_like(const Model& other) {
        Model m;
        m.cfg = other.cfg;
        if (other.cfg.task == Task::puzzle)
            m.patch_encoder = PatchEncoder<T>::zeros_like(other.patch_encoder);
        else
            m.token_encoder = TokenEncoder<T>::zeros_like(other.token_encoder);
        m.denoiser = Denoiser<T>::zeros_like(other.denoiser);
        return m;
    }

    void zero() {
        for_each_param([](const std::string&, Mat<T>& p) { p.zero(); });
    }

    template <typename F>
    void for_each_param(F&& f) {
        if (cfg.task == Task::puzzle)
            patch_encoder.for_each_param(f);
        else
            token_encoder.for_each_param(f);
        denoiser.for_each_param(
            [&](const std::string& name, Mat<T>& p) { f("denoiser." + name, p); });
    }

    template <typename F>
    void for_each_param(F&& f) const {
        const_cast<Model*>(this)->for_each_param(
            [&](const std::string& name, Mat<T>& p) { f(name, const_cast<const Mat<T>&>(p)); });
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for_each_param([&](const std::string&, const Mat<T>& p) { n += p.size(); });
        return n;
    }
};

}  // namespace diffplace
