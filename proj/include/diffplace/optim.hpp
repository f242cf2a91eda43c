#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "diffplace/checkpoint.hpp"
#include "diffplace/mat.hpp"

namespace diffplace {

struct AdamSettings {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // <= 0 disables clipping

    void validate() const {
        if (lr < 0.0) throw std::invalid_argument("AdamSettings: lr must be >= 0");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw std::invalid_argument("AdamSettings: betas must be in [0, 1)");
        if (eps <= 0.0) throw std::invalid_argument("AdamSettings: eps must be > 0");
    }
};

// First/second moment buffers aligned with the model's for_each_param order.
template <typename T>
struct AdamState {
    long step = 0;
    std::vector<Mat<T>> m, v;

    template <typename ModelT>
    void init(ModelT& model) {
        step = 0;
        m.clear();
        v.clear();
        model.for_each_param([&](const std::string&, Mat<T>& p) {
            m.emplace_back(p.rows, p.cols);
            v.emplace_back(p.rows, p.cols);
        });
    }
};

template <typename T, typename ModelT>
double global_grad_norm(ModelT& grads) {
    double acc = 0.0;
    grads.for_each_param([&](const std::string&, Mat<T>& g) {
        for (const T x : g.v) acc += double(x) * double(x);
    });
    return std::sqrt(acc);
}

// In-place gradient clipping by global norm; returns the pre-clip norm.
template <typename T, typename ModelT>
double clip_gradients(ModelT& grads, double clip_norm) {
    const double norm = global_grad_norm<T>(grads);
    if (clip_norm > 0.0 && norm > clip_norm) {
        const T scale = T(clip_norm / norm);
        grads.for_each_param([&](const std::string&, Mat<T>& g) {
            for (T& x : g.v) x *= scale;
        });
    }
    return norm;
}

template <typename T, typename ModelT>
void adam_update(ModelT& params, ModelT& grads, AdamState<T>& st, const AdamSettings& opt) {
    ++st.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, double(st.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, double(st.step));
    std::size_t idx = 0;
    // Pair params and grads through the shared traversal order.
    std::vector<Mat<T>*> grad_ptrs;
    grads.for_each_param([&](const std::string&, Mat<T>& g) { grad_ptrs.push_back(&g); });
    params.for_each_param([&](const std::string&, Mat<T>& p) {
        Mat<T>& g = *grad_ptrs[idx];
        Mat<T>& m = st.m[idx];
        Mat<T>& v = st.v[idx];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = double(g.v[i]);
            const double mi = opt.beta1 * double(m.v[i]) + (1.0 - opt.beta1) * gi;
            const double vi = opt.beta2 * double(v.v[i]) + (1.0 - opt.beta2) * gi * gi;
            m.v[i] = T(mi);
            v.v[i] = T(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p.v[i] = T(double(p.v[i]) - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
        }
        ++idx;
    });
}

// Optimizer state serialization for exact training resume.
template <typename T, typename ModelT>
std::vector<NamedArray> adam_to_arrays(ModelT& model, const AdamState<T>& st) {
    std::vector<NamedArray> out;
    std::size_t idx = 0;
    model.for_each_param([&](const std::string& name, Mat<T>&) {
        for (const char* kind : {"m", "v"}) {
            const Mat<T>& src = kind[0] == 'm' ? st.m[idx] : st.v[idx];
            NamedArray a;
            a.name = std::string("adam.") + kind + ":" + name;
            a.dims = {std::uint32_t(src.rows), std::uint32_t(src.cols)};
            a.data.resize(src.size());
            for (std::size_t i = 0; i < src.size(); ++i) a.data[i] = float(src.v[i]);
            out.push_back(std::move(a));
        }
        ++idx;
    });
    return out;
}

template <typename T, typename ModelT>
bool adam_from_checkpoint(ModelT& model, const ParsedCheckpoint& ck, AdamState<T>& st) {
    if (!ck.meta.has_optimizer) return false;
    st.init(model);
    st.step = ck.meta.optimizer_step;
    std::size_t idx = 0;
    bool complete = true;
    model.for_each_param([&](const std::string& name, Mat<T>&) {
        const NamedArray* m = ck.find("adam.m:" + name);
        const NamedArray* v = ck.find("adam.v:" + name);
        if (m == nullptr || v == nullptr) {
            complete = false;
        } else {
            for (std::size_t i = 0; i < m->data.size(); ++i) st.m[idx].v[i] = T(m->data[i]);
            for (std::size_t i = 0; i < v->data.size(); ++i) st.v[idx].v[i] = T(v->data[i]);
        }
        ++idx;
    });
    return complete;
}

}  // namespace diffplace
