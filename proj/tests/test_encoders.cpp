#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "diffplace/encoders.hpp"
#include "diffplace/rng.hpp"

using namespace diffplace;

namespace {

std::vector<float> random_patch(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> px(std::size_t(32) * 32 * 3);
    for (auto& v : px) v = float(rng.uniform());
    return px;
}

}  // namespace

TEST_CASE("patch encoder: identical patches give identical features") {
    PatchEncoder<double> enc = PatchEncoder<double>::init(8, {4, 6, 8}, 3);
    const std::vector<float> px = random_patch(1);
    std::vector<double> a(8), b(8);
    PatchEncoderCache<double> cache;
    enc.forward(px, a.data(), cache);
    enc.forward(px, b.data(), cache);
    CHECK(a == b);
}

TEST_CASE("patch encoder: rejects wrong patch sizes") {
    PatchEncoder<double> enc = PatchEncoder<double>::init(8, {4, 6, 8}, 3);
    std::vector<float> px(100, 0.0f);
    std::vector<double> out(8);
    PatchEncoderCache<double> cache;
    CHECK_THROWS_AS(enc.forward(px, out.data(), cache), std::invalid_argument);
}

TEST_CASE("patch encoder: gradients match central finite differences") {
    PatchEncoder<double> enc = PatchEncoder<double>::init(6, {4, 5, 7}, 11);
    const std::vector<float> px = random_patch(21);

    // Scalar loss: dot(h, w) for a fixed random direction w.
    Rng rng(31);
    std::vector<double> dir(6);
    for (auto& v : dir) v = rng.normal();
    auto loss_of = [&]() {
        std::vector<double> h(6);
        PatchEncoderCache<double> c;
        enc.forward(px, h.data(), c);
        double acc = 0.0;
        for (int i = 0; i < 6; ++i) acc += h[std::size_t(i)] * dir[std::size_t(i)];
        return acc;
    };

    PatchEncoderCache<double> cache;
    std::vector<double> h(6);
    enc.forward(px, h.data(), cache);
    PatchEncoder<double> grads = PatchEncoder<double>::zeros_like(enc);
    enc.backward(cache, dir.data(), grads);

    std::vector<Mat<double>*> params, gmats;
    enc.for_each_param([&](const std::string&, Mat<double>& p) { params.push_back(&p); });
    grads.for_each_param([&](const std::string&, Mat<double>& g) { gmats.push_back(&g); });

    const double step = 1e-5;
    double worst = 0.0;
    long checked = 0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Mat<double>& p = *params[pi];
        const Mat<double>& g = *gmats[pi];
        // Sample a subset of each tensor to keep the test fast.
        const std::size_t stride = std::max<std::size_t>(1, p.size() / 40);
        for (std::size_t i = 0; i < p.size(); i += stride) {
            const double orig = p.v[i];
            p.v[i] = orig + step;
            const double lp = loss_of();
            p.v[i] = orig - step;
            const double lm = loss_of();
            p.v[i] = orig;
            const double fd = (lp - lm) / (2.0 * step);
            const double denom = std::max({std::abs(fd), std::abs(g.v[i]), 1e-6});
            worst = std::max(worst, std::abs(fd - g.v[i]) / denom);
            ++checked;
        }
    }
    CHECK(checked > 200);
    CHECK(worst < 1e-4);
}

TEST_CASE("token encoder: single-token element pools to its embedding row") {
    TokenEncoder<double> enc = TokenEncoder<double>::init(32, 6, 5);
    std::vector<double> h(6);
    enc.forward({17}, h.data());
    for (int c = 0; c < 6; ++c) CHECK(h[std::size_t(c)] == enc.embed(17, c));
}

TEST_CASE("token encoder: within-element order matters") {
    TokenEncoder<double> enc = TokenEncoder<double>::init(32, 6, 7);
    std::vector<double> a(6), b(6);
    enc.forward({3, 9, 21}, a.data());
    enc.forward({21, 9, 3}, b.data());
    bool differs = false;
    for (int c = 0; c < 6; ++c) differs |= a[std::size_t(c)] != b[std::size_t(c)];
    CHECK(differs);
}

TEST_CASE("token encoder: duplicate elements encode identically") {
    TokenEncoder<double> enc = TokenEncoder<double>::init(32, 6, 9);
    std::vector<double> a(6), b(6);
    enc.forward({4, 4, 11}, a.data());
    enc.forward({4, 4, 11}, b.data());
    CHECK(a == b);
}

TEST_CASE("token encoder: unknown token ids are rejected") {
    TokenEncoder<double> enc = TokenEncoder<double>::init(32, 6, 9);
    std::vector<double> h(6);
    CHECK_THROWS_AS(enc.forward({32}, h.data()), std::invalid_argument);
    CHECK_THROWS_AS(enc.forward({-1}, h.data()), std::invalid_argument);
    CHECK_THROWS_AS(enc.forward({}, h.data()), std::invalid_argument);
}

TEST_CASE("token encoder: gradients match central finite differences") {
    TokenEncoder<double> enc = TokenEncoder<double>::init(16, 5, 13);
    const std::vector<int> tokens{2, 7, 7, 12};

    Rng rng(17);
    std::vector<double> dir(5);
    for (auto& v : dir) v = rng.normal();
    auto loss_of = [&]() {
        std::vector<double> h(5);
        enc.forward(tokens, h.data());
        double acc = 0.0;
        for (int i = 0; i < 5; ++i) acc += h[std::size_t(i)] * dir[std::size_t(i)];
        return acc;
    };

    TokenEncoder<double> grads = TokenEncoder<double>::zeros_like(enc);
    enc.backward(tokens, dir.data(), grads);

    std::vector<Mat<double>*> params, gmats;
    enc.for_each_param([&](const std::string&, Mat<double>& p) { params.push_back(&p); });
    grads.for_each_param([&](const std::string&, Mat<double>& g) { gmats.push_back(&g); });

    const double step = 1e-6;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Mat<double>& p = *params[pi];
        const Mat<double>& g = *gmats[pi];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p.v[i];
            p.v[i] = orig + step;
            const double lp = loss_of();
            p.v[i] = orig - step;
            const double lm = loss_of();
            p.v[i] = orig;
            const double fd = (lp - lm) / (2.0 * step);
            const double denom = std::max({std::abs(fd), std::abs(g.v[i]), 1e-6});
            CHECK(std::abs(fd - g.v[i]) / denom < 1e-4);
        }
    }

    // Rows of tokens that never appear receive no gradient.
    double untouched = 0.0;
    for (int c = 0; c < 5; ++c) untouched += std::abs(grads.embed(0, c));
    CHECK(untouched == 0.0);
}
