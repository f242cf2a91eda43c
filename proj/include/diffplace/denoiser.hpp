#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffplace/graph.hpp"
#include "diffplace/mat.hpp"
#include "diffplace/rng.hpp"

namespace diffplace {

template <typename T>
struct Linear {
    Mat<T> w;  // in x out
    Mat<T> b;  // 1 x out

    // Xavier by default; pass std_override for layers that want another scale.
    void init(int in, int out, Rng& rng, double std_override = 0.0) {
        w.resize(in, out);
        b.resize(1, out);
        const double std = std_override > 0.0 ? std_override : std::sqrt(2.0 / double(in + out));
        for (auto& x : w.v) x = T(rng.normal() * std);
    }

    void forward(const Mat<T>& x, Mat<T>& y) const {
        y.resize(x.rows, w.cols);
        gemm(x, w, y);
        for (int i = 0; i < y.rows; ++i) {
            T* row = y.row(i);
            for (int j = 0; j < y.cols; ++j) row[j] += b(0, j);
        }
    }

    // Accumulates parameter grads and writes the input grad.
    void backward(const Mat<T>& x, const Mat<T>& dy, Mat<T>& dx, Linear<T>& grads) const {
        gemm_tn(x, dy, grads.w, /*accumulate=*/true);
        for (int i = 0; i < dy.rows; ++i) {
            const T* row = dy.row(i);
            for (int j = 0; j < dy.cols; ++j) grads.b(0, j) += row[j];
        }
        dx.resize(dy.rows, w.rows);
        gemm_nt(dy, w, dx);
    }
};

template <typename T>
struct LayerNorm {
    Mat<T> gamma;  // 1 x width
    Mat<T> beta;   // 1 x width

    struct Cache {
        Mat<T> xhat;
        std::vector<double> rstd;
    };

    static constexpr double kEps = 1e-5;

    void init(int width) {
        gamma.resize(1, width);
        beta.resize(1, width);
        for (auto& g : gamma.v) g = T(1);
    }

    void forward(const Mat<T>& x, Mat<T>& y, Cache& c) const {
        const int n = x.cols;
        y.resize(x.rows, n);
        c.xhat.resize(x.rows, n);
        c.rstd.assign(std::size_t(x.rows), 0.0);
        for (int i = 0; i < x.rows; ++i) {
            const T* row = x.row(i);
            double mean = 0.0;
            for (int j = 0; j < n; ++j) mean += double(row[j]);
            mean /= n;
            double var = 0.0;
            for (int j = 0; j < n; ++j) {
                const double d = double(row[j]) - mean;
                var += d * d;
            }
            var /= n;
            const double rstd = 1.0 / std::sqrt(var + kEps);
            c.rstd[std::size_t(i)] = rstd;
            T* xh = c.xhat.row(i);
            T* out = y.row(i);
            for (int j = 0; j < n; ++j) {
                xh[j] = T((double(row[j]) - mean) * rstd);
                out[j] = T(double(gamma(0, j)) * double(xh[j]) + double(beta(0, j)));
            }
        }
    }

    void backward(const Mat<T>& dy, const Cache& c, Mat<T>& dx, LayerNorm<T>& grads) const {
        const int n = dy.cols;
        dx.resize(dy.rows, n);
        for (int i = 0; i < dy.rows; ++i) {
            const T* dyr = dy.row(i);
            const T* xh = c.xhat.row(i);
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (int j = 0; j < n; ++j) {
                const double dxhat = double(dyr[j]) * double(gamma(0, j));
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * double(xh[j]);
                grads.gamma(0, j) += dyr[j] * xh[j];
                grads.beta(0, j) += dyr[j];
            }
            mean_dxhat /= n;
            mean_dxhat_xhat /= n;
            const double rstd = c.rstd[std::size_t(i)];
            T* dxr = dx.row(i);
            for (int j = 0; j < n; ++j) {
                const double dxhat = double(dyr[j]) * double(gamma(0, j));
                dxr[j] = T(rstd * (dxhat - mean_dxhat - double(xh[j]) * mean_dxhat_xhat));
            }
        }
    }
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
    const double pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

struct DenoiserConfig {
    int position_dim = 2;    // n
    int feature_dim = 64;    // d
    int time_embed_dim = 32; // e
    int width = 128;
    int heads = 4;
    int max_timestep = 300;  // timestep table covers [0, max_timestep]

    void validate() const {
        if (position_dim < 1 || feature_dim < 1 || time_embed_dim < 1 || width < 1 || heads < 1 ||
            max_timestep < 1)
            throw std::invalid_argument("DenoiserConfig: dimensions must be positive");
        if (width % heads != 0)
            throw std::invalid_argument("DenoiserConfig: width not divisible by heads");
    }
};

template <typename T>
struct DenoiserCache {
    Mat<T> x_in;  // N x (n+d+e)
    Mat<T> z0;
    struct LayerCache {
        Mat<T> z_in;
        Mat<T> a;  // ln1 output
        typename LayerNorm<T>::Cache ln1;
        Mat<T> q, k, v;
        std::vector<Mat<T>> probs;  // per (graph, head) attention weights
        Mat<T> attn_o;              // concatenated head outputs, pre-projection
        Mat<T> z_mid;
        Mat<T> b_norm;  // ln2 output
        typename LayerNorm<T>::Cache ln2;
        Mat<T> f1;  // feed-forward pre-activation
        Mat<T> g;   // feed-forward post-activation
    };
    std::array<LayerCache, 4> layers;
    Mat<T> z_final;
    Mat<T> zf;  // final norm output
    typename LayerNorm<T>::Cache lnf;
};

// Noise predictor: a stack of four pre-norm graph-transformer layers over the
// fully connected graph of each instance. Node input is [x_t ; h ; t-embed];
// output is one position-dimensional noise estimate per node. There is no
// encoding of node order anywhere, so the network is permutation-equivariant
// by construction.
template <typename T>
class Denoiser {
public:
    static constexpr int kAttentionLayers = 4;

    struct Layer {
        LayerNorm<T> ln1;
        Linear<T> wq, wk, wv, wo;
        LayerNorm<T> ln2;
        Linear<T> ff1, ff2;
    };

    DenoiserConfig cfg;
    Linear<T> input_proj;
    Mat<T> time_embed;  // (max_timestep + 1) x e
    std::array<Layer, kAttentionLayers> layers;
    LayerNorm<T> final_norm;
    Linear<T> head;

    Denoiser() = default;

    static Denoiser init(const DenoiserConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Denoiser m;
        m.cfg = cfg;
        Rng rng(seed);
        const int w = cfg.width;
        m.input_proj.init(cfg.position_dim + cfg.feature_dim + cfg.time_embed_dim, w, rng);
        m.time_embed.resize(cfg.max_timestep + 1, cfg.time_embed_dim);
        for (auto& x : m.time_embed.v) x = T(rng.normal() * 0.5);
        for (auto& layer : m.layers) {
            layer.ln1.init(w);
            layer.wq.init(w, w, rng);
            layer.wk.init(w, w, rng);
            layer.wv.init(w, w, rng);
            layer.wo.init(w, w, rng);
            layer.ln2.init(w);
            layer.ff1.init(w, 4 * w, rng);
            layer.ff2.init(4 * w, w, rng);
        }
        m.final_norm.init(w);
        // Small head scale keeps the untrained noise estimate near zero, so
        // the initial MSE starts close to the noise variance.
        m.head.init(w, cfg.position_dim, rng, 0.3 / std::sqrt(double(w)));
        return m;
    }

    // Same-shaped zero model, used as a gradient accumulator.
    static Denoiser zeros_like(const Denoiser& other) {
        Denoiser m = init(other.cfg, 0);
        m.for_each_param([](const std::string&, Mat<T>& p) { p.zero(); });
        return m;
    }

    void zero() {
        for_each_param([](const std::string&, Mat<T>& p) { p.zero(); });
    }

    Mat<T> embed_timestep(int t) const {
        if (t < 0 || t > cfg.max_timestep)
            throw std::invalid_argument("embed_timestep: t outside the embedding table");
        Mat<T> row(1, cfg.time_embed_dim);
        for (int j = 0; j < cfg.time_embed_dim; ++j) row(0, j) = time_embed(t, j);
        return row;
    }

    Mat<T> forward(const GraphBatch<T>& batch, DenoiserCache<T>& cache) const {
        batch.validate();
        if (batch.features.cols != cfg.feature_dim)
            throw std::invalid_argument("Denoiser: feature dimension mismatch");
        if (batch.positions.cols != cfg.position_dim)
            throw std::invalid_argument("Denoiser: position dimension mismatch");
        for (int t : batch.timesteps)
            if (t < 0 || t > cfg.max_timestep)
                throw std::invalid_argument("Denoiser: timestep outside the embedding table");

        const int n = batch.num_nodes();
        const int in_dim = cfg.position_dim + cfg.feature_dim + cfg.time_embed_dim;
        cache.x_in.resize(n, in_dim);
        for (int g = 0; g < batch.num_graphs(); ++g) {
            const T* temb = time_embed.row(batch.timesteps[std::size_t(g)]);
            for (int i = batch.offsets[std::size_t(g)]; i < batch.offsets[std::size_t(g) + 1]; ++i) {
                T* row = cache.x_in.row(i);
                const T* pos = batch.positions.row(i);
                const T* feat = batch.features.row(i);
                int c = 0;
                for (int j = 0; j < cfg.position_dim; ++j) row[c++] = pos[j];
                for (int j = 0; j < cfg.feature_dim; ++j) row[c++] = feat[j];
                for (int j = 0; j < cfg.time_embed_dim; ++j) row[c++] = temb[j];
            }
        }

        input_proj.forward(cache.x_in, cache.z0);
        Mat<T> z = cache.z0;
        for (int l = 0; l < kAttentionLayers; ++l) {
            auto& lc = cache.layers[std::size_t(l)];
            const Layer& layer = layers[std::size_t(l)];
            lc.z_in = z;
            layer.ln1.forward(lc.z_in, lc.a, lc.ln1);
            layer.wq.forward(lc.a, lc.q);
            layer.wk.forward(lc.a, lc.k);
            layer.wv.forward(lc.a, lc.v);
            attention_forward(batch, lc);
            Mat<T> at;
            layer.wo.forward(lc.attn_o, at);
            lc.z_mid.resize(n, cfg.width);
            for (std::size_t i = 0; i < lc.z_mid.size(); ++i)
                lc.z_mid.v[i] = lc.z_in.v[i] + at.v[i];
            layer.ln2.forward(lc.z_mid, lc.b_norm, lc.ln2);
            layer.ff1.forward(lc.b_norm, lc.f1);
            lc.g.resize(n, 4 * cfg.width);
            for (std::size_t i = 0; i < lc.f1.size(); ++i) lc.g.v[i] = T(gelu(double(lc.f1.v[i])));
            Mat<T> f2;
            layer.ff2.forward(lc.g, f2);
            z.resize(n, cfg.width);
            for (std::size_t i = 0; i < z.size(); ++i) z.v[i] = lc.z_mid.v[i] + f2.v[i];
        }
        cache.z_final = z;
        final_norm.forward(cache.z_final, cache.zf, cache.lnf);
        Mat<T> eps_hat;
        head.forward(cache.zf, eps_hat);
        return eps_hat;
    }

    // Accumulates parameter gradients into `grads` and returns the gradient
    // w.r.t. the node features (for joint training of an upstream encoder).
    Mat<T> backward(const GraphBatch<T>& batch, const DenoiserCache<T>& cache, const Mat<T>& d_eps,
                    Denoiser<T>& grads) const {
        const int n = batch.num_nodes();
        Mat<T> d_zf;
        head.backward(cache.zf, d_eps, d_zf, grads.head);
        Mat<T> dz;
        final_norm.backward(d_zf, cache.lnf, dz, grads.final_norm);

        for (int l = kAttentionLayers - 1; l >= 0; --l) {
            const auto& lc = cache.layers[std::size_t(l)];
            const Layer& layer = layers[std::size_t(l)];
            Layer& glayer = grads.layers[std::size_t(l)];

            // feed-forward: z = z_mid + ff2(gelu(ff1(ln2(z_mid))))
            Mat<T> dg;
            layer.ff2.backward(lc.g, dz, dg, glayer.ff2);
            Mat<T> df1(n, 4 * cfg.width);
            for (std::size_t i = 0; i < df1.size(); ++i)
                df1.v[i] = T(double(dg.v[i]) * gelu_grad(double(lc.f1.v[i])));
            Mat<T> db_norm;
            layer.ff1.backward(lc.b_norm, df1, db_norm, glayer.ff1);
            Mat<T> dz_mid;
            layer.ln2.backward(db_norm, lc.ln2, dz_mid, glayer.ln2);
            for (std::size_t i = 0; i < dz_mid.size(); ++i) dz_mid.v[i] += dz.v[i];

            // attention: z_mid = z_in + wo(attn(ln1(z_in)))
            Mat<T> d_attn_o;
            layer.wo.backward(lc.attn_o, dz_mid, d_attn_o, glayer.wo);
            Mat<T> dq(n, cfg.width), dk(n, cfg.width), dv(n, cfg.width);
            attention_backward(batch, lc, d_attn_o, dq, dk, dv);
            Mat<T> da, tmp;
            layer.wq.backward(lc.a, dq, da, glayer.wq);
            layer.wk.backward(lc.a, dk, tmp, glayer.wk);
            for (std::size_t i = 0; i < da.size(); ++i) da.v[i] += tmp.v[i];
            layer.wv.backward(lc.a, dv, tmp, glayer.wv);
            for (std::size_t i = 0; i < da.size(); ++i) da.v[i] += tmp.v[i];
            Mat<T> dz_in;
            layer.ln1.backward(da, lc.ln1, dz_in, glayer.ln1);
            for (std::size_t i = 0; i < dz_in.size(); ++i) dz_in.v[i] += dz_mid.v[i];
            dz = std::move(dz_in);
        }

        Mat<T> dx;
        input_proj.backward(cache.x_in, dz, dx, grads.input_proj);

        Mat<T> d_features(n, cfg.feature_dim);
        for (int i = 0; i < n; ++i) {
            const T* src = dx.row(i) + cfg.position_dim;
            T* dst = d_features.row(i);
            for (int j = 0; j < cfg.feature_dim; ++j) dst[j] = src[j];
        }
        for (int g = 0; g < batch.num_graphs(); ++g) {
            T* trow = grads.time_embed.row(batch.timesteps[std::size_t(g)]);
            for (int i = batch.offsets[std::size_t(g)]; i < batch.offsets[std::size_t(g) + 1]; ++i) {
                const T* src = dx.row(i) + cfg.position_dim + cfg.feature_dim;
                for (int j = 0; j < cfg.time_embed_dim; ++j) trow[j] += src[j];
            }
        }
        return d_features;
    }

    template <typename F>
    void for_each_param(F&& f) {
        f("input_proj.w", input_proj.w);
        f("input_proj.b", input_proj.b);
        f("time_embed", time_embed);
        for (int l = 0; l < kAttentionLayers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            Layer& layer = layers[std::size_t(l)];
            f(p + "ln1.gamma", layer.ln1.gamma);
            f(p + "ln1.beta", layer.ln1.beta);
            f(p + "attn.wq.w", layer.wq.w);
            f(p + "attn.wq.b", layer.wq.b);
            f(p + "attn.wk.w", layer.wk.w);
            f(p + "attn.wk.b", layer.wk.b);
            f(p + "attn.wv.w", layer.wv.w);
            f(p + "attn.wv.b", layer.wv.b);
            f(p + "attn.wo.w", layer.wo.w);
            f(p + "attn.wo.b", layer.wo.b);
            f(p + "ln2.gamma", layer.ln2.gamma);
            f(p + "ln2.beta", layer.ln2.beta);
            f(p + "ff1.w", layer.ff1.w);
            f(p + "ff1.b", layer.ff1.b);
            f(p + "ff2.w", layer.ff2.w);
            f(p + "ff2.b", layer.ff2.b);
        }
        f("final_norm.gamma", final_norm.gamma);
        f("final_norm.beta", final_norm.beta);
        f("head.w", head.w);
        f("head.b", head.b);
    }

    template <typename F>
    void for_each_param(F&& f) const {
        const_cast<Denoiser*>(this)->for_each_param(
            [&](const std::string& name, Mat<T>& p) { f(name, const_cast<const Mat<T>&>(p)); });
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for_each_param([&](const std::string&, const Mat<T>& p) { n += p.size(); });
        return n;
    }

private:
    void attention_forward(const GraphBatch<T>& batch, typename DenoiserCache<T>::LayerCache& lc) const {
        const int dk = cfg.width / cfg.heads;
        const double scale = 1.0 / std::sqrt(double(dk));
        const int groups = batch.num_graphs();
        lc.attn_o.resize(batch.num_nodes(), cfg.width);
        lc.probs.assign(std::size_t(groups) * cfg.heads, Mat<T>());
        for (int g = 0; g < groups; ++g) {
            const int s = batch.offsets[std::size_t(g)];
            const int kg = batch.offsets[std::size_t(g) + 1] - s;
            for (int hh = 0; hh < cfg.heads; ++hh) {
                Mat<T>& p = lc.probs[std::size_t(g) * cfg.heads + hh];
                p.resize(kg, kg);
                gemm_nt_raw(kg, dk, kg, lc.q.row(s) + hh * dk, cfg.width, lc.k.row(s) + hh * dk,
                            cfg.width, p.data(), kg, false);
                for (int i = 0; i < kg; ++i) {
                    T* row = p.row(i);
                    double mx = -1e300;
                    for (int j = 0; j < kg; ++j) {
                        row[j] = T(double(row[j]) * scale);
                        mx = std::max(mx, double(row[j]));
                    }
                    double sum = 0.0;
                    for (int j = 0; j < kg; ++j) {
                        const double e = std::exp(double(row[j]) - mx);
                        row[j] = T(e);
                        sum += e;
                    }
                    const double inv = 1.0 / sum;
                    for (int j = 0; j < kg; ++j) row[j] = T(double(row[j]) * inv);
                }
                gemm_raw(kg, kg, dk, p.data(), kg, lc.v.row(s) + hh * dk, cfg.width,
                         lc.attn_o.row(s) + hh * dk, cfg.width, false);
            }
        }
    }

    void attention_backward(const GraphBatch<T>& batch, const typename DenoiserCache<T>::LayerCache& lc,
                            const Mat<T>& d_attn_o, Mat<T>& dq, Mat<T>& dk_mat, Mat<T>& dv) const {
        const int dk = cfg.width / cfg.heads;
        const double scale = 1.0 / std::sqrt(double(dk));
        for (int g = 0; g < batch.num_graphs(); ++g) {
            const int s = batch.offsets[std::size_t(g)];
            const int kg = batch.offsets[std::size_t(g) + 1] - s;
            for (int hh = 0; hh < cfg.heads; ++hh) {
                const Mat<T>& p = lc.probs[std::size_t(g) * cfg.heads + hh];
                Mat<T> dp(kg, kg);
                gemm_nt_raw(kg, dk, kg, d_attn_o.row(s) + hh * dk, cfg.width,
                            lc.v.row(s) + hh * dk, cfg.width, dp.data(), kg, false);
                gemm_tn_raw(kg, kg, dk, p.data(), kg, d_attn_o.row(s) + hh * dk, cfg.width,
                            dv.row(s) + hh * dk, cfg.width, true);
                // softmax backward, with the score scale folded in
                Mat<T> ds(kg, kg);
                for (int i = 0; i < kg; ++i) {
                    const T* prow = p.row(i);
                    const T* dprow = dp.row(i);
                    double dot = 0.0;
                    for (int j = 0; j < kg; ++j) dot += double(prow[j]) * double(dprow[j]);
                    T* dsrow = ds.row(i);
                    for (int j = 0; j < kg; ++j)
                        dsrow[j] = T(double(prow[j]) * (double(dprow[j]) - dot) * scale);
                }
                gemm_raw(kg, kg, dk, ds.data(), kg, lc.k.row(s) + hh * dk, cfg.width,
                         dq.row(s) + hh * dk, cfg.width, true);
                gemm_tn_raw(kg, kg, dk, ds.data(), kg, lc.q.row(s) + hh * dk, cfg.width,
                            dk_mat.row(s) + hh * dk, cfg.width, true);
            }
        }
    }
};

// loss = mean squared error between target noise and the model output; grads
// are exact reverse-mode derivatives for every parameter. Also returns the
// feature gradient so task encoders can train jointly.
template <typename T>
struct LossGrads {
    double loss = 0.0;
    Mat<T> d_features;
};

template <typename T>
LossGrads<T> loss_and_gradients(const Denoiser<T>& model, const GraphBatch<T>& batch,
                                const Mat<T>& eps_target, Denoiser<T>& grads,
                                DenoiserCache<T>& cache) {
    Mat<T> eps_hat = model.forward(batch, cache);
    if (!eps_hat.same_shape(eps_target))
        throw std::invalid_argument("loss_and_gradients: target shape mismatch");
    double loss = 0.0;
    Mat<T> d_eps(eps_hat.rows, eps_hat.cols);
    const double inv = 1.0 / double(eps_hat.size());
    for (std::size_t i = 0; i < eps_hat.size(); ++i) {
        const double diff = double(eps_hat.v[i]) - double(eps_target.v[i]);
        loss += diff * diff;
        d_eps.v[i] = T(2.0 * diff * inv);
    }
    loss *= inv;
    if (!std::isfinite(loss)) throw std::runtime_error("loss_and_gradients: non-finite loss");
    LossGrads<T> out;
    out.loss = loss;
    out.d_features = model.backward(batch, cache, d_eps, grads);
    return out;
}

}  // namespace diffplace
