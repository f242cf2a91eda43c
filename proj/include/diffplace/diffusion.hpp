#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffplace/mat.hpp"
#include "diffplace/rng.hpp"

namespace diffplace {

// Precomputed variance tables for the noising process. alpha_bar has T+1
// entries with alpha_bar[0] == 1 so that t = 0 is the identity timestep.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // beta[t-1] is the variance at step t, t in [1, T]
    std::vector<double> alpha;      // alpha[t-1] = 1 - beta[t-1]
    std::vector<double> alpha_bar;  // alpha_bar[t], t in [0, T]; strictly decreasing

    double beta_at(int t) const {
        check_step(t);
        return beta[std::size_t(t) - 1];
    }
    double alpha_at(int t) const {
        check_step(t);
        return alpha[std::size_t(t) - 1];
    }
    double alpha_bar_at(int t) const {
        if (t < 0 || t > T) throw std::invalid_argument("NoiseSchedule: t out of [0, T]");
        return alpha_bar[std::size_t(t)];
    }

private:
    void check_step(int t) const {
        if (t < 1 || t > T) throw std::invalid_argument("NoiseSchedule: t out of [1, T]");
    }
};

enum class InitMode { zero_centered, standard_gaussian };

// sigma is fixed at zero everywhere (deterministic DDIM); ordering problems
// have a single correct arrangement, so there is nothing to sample.
struct DiffusionConfig {
    int T = 300;
    int inference_ratio = 10;  // stride for the reverse-process subsequence
    InitMode init_mode = InitMode::zero_centered;
    int position_dim = 2;  // 1 for sequences, 2 for grids

    void validate() const {
        if (T < 1) throw std::invalid_argument("DiffusionConfig: T must be >= 1");
        if (inference_ratio < 1 || inference_ratio > T)
            throw std::invalid_argument("DiffusionConfig: inference_ratio must be in [1, T]");
        if (position_dim != 1 && position_dim != 2)
            throw std::invalid_argument("DiffusionConfig: position_dim must be 1 or 2");
    }
};

inline NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("build_linear_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start < 1.0) || !(beta_end > 0.0 && beta_end < 1.0))
        throw std::invalid_argument("build_linear_schedule: betas must be in (0, 1)");
    if (beta_start > beta_end)
        throw std::invalid_argument("build_linear_schedule: beta_start must be <= beta_end");

    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(std::size_t(T) + 1);
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double frac = T > 1 ? double(t - 1) / double(T - 1) : 0.0;
        const double b = beta_start + frac * (beta_end - beta_start);
        s.beta[t - 1] = b;
        s.alpha[t - 1] = 1.0 - b;
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t - 1];
    }
    return s;
}

// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, elementwise. The noise is
// supplied by the caller so the operation stays pure. t = 0 is the identity.
template <typename T>
Mat<T> forward_sample(const Mat<T>& x0, int t, const Mat<T>& eps, const NoiseSchedule& sched) {
    if (t < 0 || t > sched.T)
        throw std::invalid_argument("forward_sample: t out of [0, T]");
    if (!x0.same_shape(eps)) throw std::invalid_argument("forward_sample: eps shape mismatch");
    const double abar = sched.alpha_bar_at(t);
    const T a = T(std::sqrt(abar));
    const T b = T(std::sqrt(1.0 - abar));
    Mat<T> xt(x0.rows, x0.cols);
    for (std::size_t i = 0; i < x0.size(); ++i) xt.v[i] = a * x0.v[i] + b * eps.v[i];
    return xt;
}

// Deterministic (sigma = 0) update from timestep t to t_prev: reconstructs the
// implied x0 from (x_t, eps_hat) and re-noises it to the t_prev marginal.
template <typename T>
Mat<T> ddim_step(const Mat<T>& xt, const Mat<T>& eps_hat, int t, int t_prev,
                 const NoiseSchedule& sched) {
    if (t > sched.T) throw std::invalid_argument("ddim_step: t exceeds schedule length");
    if (t_prev < 0 || t_prev >= t)
        throw std::invalid_argument("ddim_step: requires 0 <= t_prev < t");
    if (!xt.same_shape(eps_hat)) throw std::invalid_argument("ddim_step: shape mismatch");

    const double abar_t = sched.alpha_bar_at(t);
    const double abar_p = sched.alpha_bar_at(t_prev);
    const double inv_sqrt_abar_t = 1.0 / std::sqrt(abar_t);
    const double coef_noise_t = std::sqrt(1.0 - abar_t);
    const double sqrt_abar_p = std::sqrt(abar_p);
    const double coef_noise_p = std::sqrt(1.0 - abar_p);

    Mat<T> out(xt.rows, xt.cols);
    for (std::size_t i = 0; i < xt.size(); ++i) {
        const double x0_pred = (double(xt.v[i]) - coef_noise_t * double(eps_hat.v[i])) * inv_sqrt_abar_t;
        out.v[i] = T(sqrt_abar_p * x0_pred + coef_noise_p * double(eps_hat.v[i]));
    }
    return out;
}

// Visited timesteps for sampling: T, T-r, T-2r, ... with 0 appended as the
// final target. For T=300, r=10 this is 31 states (30 reverse steps).
inline std::vector<int> timestep_subsequence(int T, int r) {
    if (T < 1) throw std::invalid_argument("timestep_subsequence: T must be >= 1");
    if (r < 1 || r > T)
        throw std::invalid_argument("timestep_subsequence: r must be in [1, T]");
    std::vector<int> ts;
    for (int t = T; t > 0; t -= r) ts.push_back(t);
    ts.push_back(0);
    return ts;
}

// Mean squared error over all scalar entries.
template <typename T>
double simple_loss(const Mat<T>& eps, const Mat<T>& eps_hat) {
    if (!eps.same_shape(eps_hat)) throw std::invalid_argument("simple_loss: shape mismatch");
    if (eps.size() == 0) throw std::invalid_argument("simple_loss: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const double d = double(eps.v[i]) - double(eps_hat.v[i]);
        acc += d * d;
    }
    return acc / double(eps.size());
}

// Full reverse process. denoise_fn(x_t, t, H) -> eps_hat is evaluated once per
// visited timestep; with zero-centered init the whole run is a pure function
// of (denoise_fn, H, cfg, sched).
template <typename T, typename DenoiseFn>
Mat<T> reverse_process(DenoiseFn&& denoise_fn, const Mat<T>& features, const DiffusionConfig& cfg,
                       const NoiseSchedule& sched, Rng* rng = nullptr) {
    cfg.validate();
    if (cfg.T != sched.T)
        throw std::invalid_argument("reverse_process: config T does not match schedule");
    const int K = features.rows;
    Mat<T> x(K, cfg.position_dim);
    if (cfg.init_mode == InitMode::standard_gaussian) {
        if (rng == nullptr)
            throw std::invalid_argument("reverse_process: gaussian init requires an entropy source");
        for (std::size_t i = 0; i < x.size(); ++i) x.v[i] = T(rng->normal());
    }
    const std::vector<int> ts = timestep_subsequence(cfg.T, cfg.inference_ratio);
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        const Mat<T> eps_hat = denoise_fn(x, ts[i], features);
        x = ddim_step(x, eps_hat, ts[i], ts[i + 1], sched);
    }
    return x;
}

// As above but also records every visited state (including the initial one)
// for trajectory export.
template <typename T, typename DenoiseFn>
std::vector<std::pair<int, Mat<T>>> reverse_process_trajectory(DenoiseFn&& denoise_fn,
                                                               const Mat<T>& features,
                                                               const DiffusionConfig& cfg,
                                                               const NoiseSchedule& sched,
                                                               Rng* rng = nullptr) {
    cfg.validate();
    if (cfg.T != sched.T)
        throw std::invalid_argument("reverse_process: config T does not match schedule");
    const int K = features.rows;
    Mat<T> x(K, cfg.position_dim);
    if (cfg.init_mode == InitMode::standard_gaussian) {
        if (rng == nullptr)
            throw std::invalid_argument("reverse_process: gaussian init requires an entropy source");
        for (std::size_t i = 0; i < x.size(); ++i) x.v[i] = T(rng->normal());
    }
    const std::vector<int> ts = timestep_subsequence(cfg.T, cfg.inference_ratio);
    std::vector<std::pair<int, Mat<T>>> states;
    states.reserve(ts.size());
    states.emplace_back(ts[0], x);
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
        const Mat<T> eps_hat = denoise_fn(x, ts[i], features);
        x = ddim_step(x, eps_hat, ts[i], ts[i + 1], sched);
        states.emplace_back(ts[i + 1], x);
    }
    return states;
}

}  // namespace diffplace
