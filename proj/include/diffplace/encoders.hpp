#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffplace/denoiser.hpp"
#include "diffplace/image.hpp"
#include "diffplace/mat.hpp"
#include "diffplace/rng.hpp"

namespace diffplace {

// 3x3 convolution, stride 2, zero padding 1, expressed as im2col + matmul so
// forward and backward share the gemm kernels.
template <typename T>
struct Conv3x3s2 {
    int in_c = 0, out_c = 0;
    Mat<T> w;  // (9 * in_c) x out_c, rows ordered [ky][kx][c]
    Mat<T> b;  // 1 x out_c

    void init(int in_channels, int out_channels, Rng& rng) {
        in_c = in_channels;
        out_c = out_channels;
        w.resize(9 * in_c, out_c);
        b.resize(1, out_c);
        const double std = std::sqrt(2.0 / double(9 * in_c));
        for (auto& x : w.v) x = T(rng.normal() * std);
    }

    static int out_hw(int in_hw) { return (in_hw + 2 - 3) / 2 + 1; }

    void im2col(const T* x, int hw, Mat<T>& col) const {
        const int ohw = out_hw(hw);
        col.resize(ohw * ohw, 9 * in_c);
        for (int oy = 0; oy < ohw; ++oy)
            for (int ox = 0; ox < ohw; ++ox) {
                T* row = col.row(oy * ohw + ox);
                for (int ky = 0; ky < 3; ++ky) {
                    const int iy = 2 * oy - 1 + ky;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int ix = 2 * ox - 1 + kx;
                        T* dst = row + (ky * 3 + kx) * in_c;
                        if (iy < 0 || iy >= hw || ix < 0 || ix >= hw) {
                            for (int c = 0; c < in_c; ++c) dst[c] = T(0);
                        } else {
                            const T* src = x + (std::size_t(iy) * hw + ix) * in_c;
                            for (int c = 0; c < in_c; ++c) dst[c] = src[c];
                        }
                    }
                }
            }
    }

    // col and pre are cached for the backward pass; act = gelu(pre).
    void forward(const T* x, int hw, Mat<T>& col, Mat<T>& pre, Mat<T>& act) const {
        im2col(x, hw, col);
        pre.resize(col.rows, out_c);
        gemm(col, w, pre);
        act.resize(col.rows, out_c);
        for (int i = 0; i < pre.rows; ++i)
            for (int j = 0; j < out_c; ++j) {
                pre(i, j) += b(0, j);
                act(i, j) = T(gelu(double(pre(i, j))));
            }
    }

    // d_act -> gradients; dx (size hw*hw*in_c) is accumulated when non-null.
    void backward(const Mat<T>& col, const Mat<T>& pre, const Mat<T>& d_act, int hw, T* dx,
                  Conv3x3s2<T>& grads) const {
        Mat<T> d_pre(pre.rows, out_c);
        for (std::size_t i = 0; i < d_pre.size(); ++i)
            d_pre.v[i] = T(double(d_act.v[i]) * gelu_grad(double(pre.v[i])));
        gemm_tn(col, d_pre, grads.w, /*accumulate=*/true);
        for (int i = 0; i < d_pre.rows; ++i)
            for (int j = 0; j < out_c; ++j) grads.b(0, j) += d_pre(i, j);
        if (dx == nullptr) return;
        Mat<T> d_col(col.rows, col.cols);
        gemm_nt(d_pre, w, d_col);
        const int ohw = out_hw(hw);
        for (int oy = 0; oy < ohw; ++oy)
            for (int ox = 0; ox < ohw; ++ox) {
                const T* row = d_col.row(oy * ohw + ox);
                for (int ky = 0; ky < 3; ++ky) {
                    const int iy = 2 * oy - 1 + ky;
                    if (iy < 0 || iy >= hw) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int ix = 2 * ox - 1 + kx;
                        if (ix < 0 || ix >= hw) continue;
                        const T* src = row + (ky * 3 + kx) * in_c;
                        T* dst = dx + (std::size_t(iy) * hw + ix) * in_c;
                        for (int c = 0; c < in_c; ++c) dst[c] += src[c];
                    }
                }
            }
    }
};

template <typename T>
struct PatchEncoderCache {
    Mat<T> input;  // 32*32 x 3 pixels as a flat buffer (1 row)
    Mat<T> col1, pre1, act1;
    Mat<T> col2, pre2, act2;
    Mat<T> col3, pre3, act3;
    Mat<T> pooled;
};

// Small trainable patch backbone: three strided conv stages and a pooled
// projection. Trained jointly with the denoiser through the feature gradient.
template <typename T>
class PatchEncoder {
public:
    int feature_dim = 0;
    std::array<int, 3> channels{12, 24, 48};
    Conv3x3s2<T> conv1, conv2, conv3;
    Linear<T> proj;

    static PatchEncoder init(int feature_dim, const std::array<int, 3>& channels,
                             std::uint64_t seed) {
        if (feature_dim < 1) throw std::invalid_argument("PatchEncoder: feature_dim must be >= 1");
        for (const int c : channels)
            if (c < 1) throw std::invalid_argument("PatchEncoder: channels must be >= 1");
        PatchEncoder e;
        e.feature_dim = feature_dim;
        e.channels = channels;
        Rng rng(seed);
        e.conv1.init(3, channels[0], rng);
        e.conv2.init(channels[0], channels[1], rng);
        e.conv3.init(channels[1], channels[2], rng);
        e.proj.init(channels[2], feature_dim, rng);
        return e;
    }

    static PatchEncoder zeros_like(const PatchEncoder& other) {
        PatchEncoder e = init(other.feature_dim, other.channels, 0);
        e.for_each_param([](const std::string&, Mat<T>& p) { p.zero(); });
        return e;
    }

    // Pixels are interleaved RGB in [0, 1]; writes the d-dimensional feature
    // into `out` (a row pointer).
    void forward(const std::vector<float>& px, T* out, PatchEncoderCache<T>& c) const {
        if (px.size() != std::size_t(kPatchSize) * kPatchSize * 3)
            throw std::invalid_argument("PatchEncoder: wrong patch size");
        c.input.resize(1, int(px.size()));
        for (std::size_t i = 0; i < px.size(); ++i) c.input.v[i] = T(px[i]);
        conv1.forward(c.input.data(), 32, c.col1, c.pre1, c.act1);
        conv2.forward(c.act1.data(), 16, c.col2, c.pre2, c.act2);
        conv3.forward(c.act2.data(), 8, c.col3, c.pre3, c.act3);
        // Global average pool over the 4x4 spatial grid.
        c.pooled.resize(1, channels[2]);
        const double inv = 1.0 / double(c.act3.rows);
        for (int ch = 0; ch < channels[2]; ++ch) {
            double acc = 0.0;
            for (int i = 0; i < c.act3.rows; ++i) acc += double(c.act3(i, ch));
            c.pooled(0, ch) = T(acc * inv);
        }
        Mat<T> h;
        proj.forward(c.pooled, h);
        for (int j = 0; j < feature_dim; ++j) out[j] = h(0, j);
    }

    void backward(const PatchEncoderCache<T>& c, const T* d_out, PatchEncoder<T>& grads) const {
        Mat<T> dh(1, feature_dim);
        for (int j = 0; j < feature_dim; ++j) dh(0, j) = d_out[j];
        Mat<T> d_pooled;
        proj.backward(c.pooled, dh, d_pooled, grads.proj);
        Mat<T> d_act3(c.act3.rows, channels[2]);
        const T inv = T(1.0 / double(c.act3.rows));
        for (int i = 0; i < d_act3.rows; ++i)
            for (int ch = 0; ch < channels[2]; ++ch) d_act3(i, ch) = d_pooled(0, ch) * inv;

        std::vector<T> d_act2(std::size_t(8) * 8 * channels[1], T(0));
        conv3.backward(c.col3, c.pre3, d_act3, 8, d_act2.data(), grads.conv3);
        Mat<T> d_act2_m(64, channels[1]);
        std::copy(d_act2.begin(), d_act2.end(), d_act2_m.v.begin());

        std::vector<T> d_act1(std::size_t(16) * 16 * channels[0], T(0));
        conv2.backward(c.col2, c.pre2, d_act2_m, 16, d_act1.data(), grads.conv2);
        Mat<T> d_act1_m(256, channels[0]);
        std::copy(d_act1.begin(), d_act1.end(), d_act1_m.v.begin());

        conv1.backward(c.col1, c.pre1, d_act1_m, 32, nullptr, grads.conv1);
    }

    template <typename F>
    void for_each_param(F&& f) {
        f("patch_encoder.conv1.w", conv1.w);
        f("patch_encoder.conv1.b", conv1.b);
        f("patch_encoder.conv2.w", conv2.w);
        f("patch_encoder.conv2.b", conv2.b);
        f("patch_encoder.conv3.w", conv3.w);
        f("patch_encoder.conv3.b", conv3.b);
        f("patch_encoder.proj.w", proj.w);
        f("patch_encoder.proj.b", proj.b);
    }
};

// Embedding lookup with order-aware pooling: per-channel exponential weights
// over the normalized within-element token position. A single-token element
// pools to exactly its embedding row.
template <typename T>
class TokenEncoder {
public:
    int vocab = 0;
    int dim = 0;
    Mat<T> embed;  // vocab x dim
    Mat<T> gate;   // 1 x dim, position-weighting exponent per channel

    static TokenEncoder init(int vocab, int dim, std::uint64_t seed) {
        if (vocab < 1 || dim < 1) throw std::invalid_argument("TokenEncoder: bad dimensions");
        TokenEncoder e;
        e.vocab = vocab;
        e.dim = dim;
        Rng rng(seed);
        e.embed.resize(vocab, dim);
        for (auto& x : e.embed.v) x = T(rng.normal());
        e.gate.resize(1, dim);
        // Cycle head-selective, tail-selective and plain-mean channels so both
        // token order and full content are visible to the first attention
        // layer right from initialization.
        for (int c = 0; c < dim; ++c)
            e.gate(0, c) = T(c % 3 == 0 ? 2.0 : c % 3 == 1 ? -2.0 : 0.0);
        return e;
    }

    static TokenEncoder zeros_like(const TokenEncoder& other) {
        TokenEncoder e;
        e.vocab = other.vocab;
        e.dim = other.dim;
        e.embed.resize(other.vocab, other.dim);
        e.gate.resize(1, other.dim);
        return e;
    }

    void check_tokens(const std::vector<int>& tokens) const {
        if (tokens.empty()) throw std::invalid_argument("TokenEncoder: empty element");
        for (const int t : tokens)
            if (t < 0 || t >= vocab)
                throw std::invalid_argument("TokenEncoder: unknown token id " + std::to_string(t));
    }

    // h_c = sum_j w_jc e_jc / sum_j w_jc with w_jc = exp(gate_c * p_j) and
    // p_j = j / (len - 1). Permuting tokens within the element changes h.
    void forward(const std::vector<int>& tokens, T* out) const {
        check_tokens(tokens);
        const int len = int(tokens.size());
        for (int c = 0; c < dim; ++c) {
            double num = 0.0, den = 0.0;
            for (int j = 0; j < len; ++j) {
                const double p = len > 1 ? double(j) / double(len - 1) : 0.0;
                const double w = std::exp(double(gate(0, c)) * p);
                num += w * double(embed(tokens[std::size_t(j)], c));
                den += w;
            }
            out[c] = T(num / den);
        }
    }

    void backward(const std::vector<int>& tokens, const T* d_out, TokenEncoder<T>& grads) const {
        const int len = int(tokens.size());
        for (int c = 0; c < dim; ++c) {
            double den = 0.0, num = 0.0, p_num = 0.0, p_den = 0.0;
            for (int j = 0; j < len; ++j) {
                const double p = len > 1 ? double(j) / double(len - 1) : 0.0;
                const double w = std::exp(double(gate(0, c)) * p);
                const double e = double(embed(tokens[std::size_t(j)], c));
                den += w;
                num += w * e;
                p_den += p * w;
                p_num += p * w * e;
            }
            const double h = num / den;
            const double d = double(d_out[c]);
            // dh/dgate = E_w[p e] - E_w[e] E_w[p]
            grads.gate(0, c) += T(d * (p_num / den - h * (p_den / den)));
            for (int j = 0; j < len; ++j) {
                const double p = len > 1 ? double(j) / double(len - 1) : 0.0;
                const double w = std::exp(double(gate(0, c)) * p);
                grads.embed(tokens[std::size_t(j)], c) += T(d * w / den);
            }
        }
    }

    template <typename F>
    void for_each_param(F&& f) {
        f("token_encoder.embed", embed);
        f("token_encoder.gate", gate);
    }
};

}  // namespace diffplace
