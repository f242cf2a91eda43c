#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "diffplace/denoiser.hpp"
#include "diffplace/diffusion.hpp"
#include "diffplace/graph.hpp"
#include "diffplace/instances.hpp"
#include "diffplace/rng.hpp"

using namespace diffplace;

namespace {

template <typename T>
GraphBatch<T> random_batch(const DenoiserConfig& cfg, const std::vector<int>& sizes,
                           std::uint64_t seed) {
    Rng rng(seed);
    GraphBatch<T> b;
    int total = 0;
    b.offsets = {0};
    for (const int k : sizes) {
        total += k;
        b.offsets.push_back(total);
        b.timesteps.push_back(1 + int(rng.below(std::uint64_t(cfg.max_timestep))));
    }
    b.features.resize(total, cfg.feature_dim);
    b.positions.resize(total, cfg.position_dim);
    for (auto& v : b.features.v) v = T(rng.normal() * 0.5);
    for (auto& v : b.positions.v) v = T(rng.normal());
    return b;
}

DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.position_dim = 2;
    cfg.feature_dim = 4;
    cfg.time_embed_dim = 4;
    cfg.width = 8;
    cfg.heads = 1;
    cfg.max_timestep = 5;
    return cfg;
}

}  // namespace

static_assert(Denoiser<double>::kAttentionLayers == 4,
              "the denoiser is a stack of exactly four attention layers");

TEST_CASE("denoiser structure: exactly four attention layers") {
    const Denoiser<double> m = Denoiser<double>::init(tiny_config(), 1);
    CHECK(int(m.layers.size()) == 4);
    CHECK(Denoiser<double>::kAttentionLayers == 4);
}

TEST_CASE("init: deterministic per seed, distinct across seeds") {
    const DenoiserConfig cfg = tiny_config();
    Denoiser<float> a = Denoiser<float>::init(cfg, 42);
    Denoiser<float> b = Denoiser<float>::init(cfg, 42);
    Denoiser<float> c = Denoiser<float>::init(cfg, 43);
    bool identical = true, differs = false;
    a.for_each_param([&](const std::string& name, Mat<float>& pa) {
        b.for_each_param([&](const std::string& nb, Mat<float>& pb) {
            if (nb == name)
                for (std::size_t i = 0; i < pa.size(); ++i) identical &= pa.v[i] == pb.v[i];
        });
        c.for_each_param([&](const std::string& nc, Mat<float>& pc) {
            if (nc == name)
                for (std::size_t i = 0; i < pa.size(); ++i) differs |= pa.v[i] != pc.v[i];
        });
    });
    CHECK(identical);
    CHECK(differs);
}

TEST_CASE("init: rejects width not divisible by heads") {
    DenoiserConfig cfg = tiny_config();
    cfg.width = 10;
    cfg.heads = 4;
    CHECK_THROWS_AS(Denoiser<double>::init(cfg, 1), std::invalid_argument);
}

TEST_CASE("init: output scale is order one on unit-normal inputs") {
    DenoiserConfig cfg;
    cfg.position_dim = 2;
    cfg.feature_dim = 16;
    cfg.time_embed_dim = 8;
    cfg.width = 64;
    cfg.heads = 4;
    cfg.max_timestep = 100;
    const Denoiser<double> m = Denoiser<double>::init(cfg, 7);
    double sum = 0.0, sum_sq = 0.0;
    long count = 0;
    for (int rep = 0; rep < 8; ++rep) {
        const GraphBatch<double> b = random_batch<double>(cfg, {8, 8}, 100 + rep);
        DenoiserCache<double> cache;
        const Mat<double> out = m.forward(b, cache);
        for (const double v : out.v) {
            sum += v;
            sum_sq += v * v;
            ++count;
        }
    }
    const double mean = sum / double(count);
    const double std = std::sqrt(sum_sq / double(count) - mean * mean);
    CHECK(std > 0.1);
    CHECK(std < 10.0);
}

TEST_CASE("embed_timestep: deterministic, distinct, range-checked") {
    const Denoiser<double> m = Denoiser<double>::init(tiny_config(), 3);
    const Mat<double> a = m.embed_timestep(2);
    const Mat<double> b = m.embed_timestep(2);
    const Mat<double> c = m.embed_timestep(3);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.v[i] == b.v[i]);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) differs |= a.v[i] != c.v[i];
    CHECK(differs);
    CHECK_THROWS_AS(m.embed_timestep(-1), std::invalid_argument);
    CHECK_THROWS_AS(m.embed_timestep(6), std::invalid_argument);
}

TEST_CASE("timestep embedding: only the sampled row receives gradient") {
    DenoiserConfig cfg = tiny_config();
    cfg.max_timestep = 1;  // two-row table
    const Denoiser<double> m = Denoiser<double>::init(cfg, 5);
    GraphBatch<double> b = random_batch<double>(cfg, {3}, 11);
    b.timesteps = {1};
    Rng rng(13);
    Mat<double> eps(3, 2);
    for (auto& v : eps.v) v = rng.normal();
    Denoiser<double> grads = Denoiser<double>::zeros_like(m);
    DenoiserCache<double> cache;
    loss_and_gradients(m, b, eps, grads, cache);
    double row0 = 0.0, row1 = 0.0;
    for (int j = 0; j < cfg.time_embed_dim; ++j) {
        row0 += std::abs(grads.time_embed(0, j));
        row1 += std::abs(grads.time_embed(1, j));
    }
    CHECK(row0 == 0.0);
    CHECK(row1 > 0.0);
}

TEST_CASE("denoise: single-node graphs depend only on their own inputs") {
    const DenoiserConfig cfg = tiny_config();
    const Denoiser<double> m = Denoiser<double>::init(cfg, 9);
    GraphBatch<double> pair = random_batch<double>(cfg, {1, 1}, 21);
    DenoiserCache<double> cache;
    const Mat<double> both = m.forward(pair, cache);

    for (int g = 0; g < 2; ++g) {
        GraphBatch<double> single;
        single.offsets = {0, 1};
        single.timesteps = {pair.timesteps[std::size_t(g)]};
        single.features.resize(1, cfg.feature_dim);
        single.positions.resize(1, cfg.position_dim);
        for (int j = 0; j < cfg.feature_dim; ++j) single.features(0, j) = pair.features(g, j);
        for (int j = 0; j < cfg.position_dim; ++j) single.positions(0, j) = pair.positions(g, j);
        const Mat<double> out = m.forward(single, cache);
        for (int j = 0; j < cfg.position_dim; ++j) CHECK(out(0, j) == both(g, j));
    }
}

TEST_CASE("denoise: identical graphs in one batch produce identical blocks") {
    const DenoiserConfig cfg = tiny_config();
    const Denoiser<double> m = Denoiser<double>::init(cfg, 15);
    GraphBatch<double> b = random_batch<double>(cfg, {4, 4}, 31);
    b.timesteps[1] = b.timesteps[0];
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < cfg.feature_dim; ++j) b.features(4 + i, j) = b.features(i, j);
        for (int j = 0; j < cfg.position_dim; ++j) b.positions(4 + i, j) = b.positions(i, j);
    }
    DenoiserCache<double> cache;
    const Mat<double> out = m.forward(b, cache);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < cfg.position_dim; ++j) CHECK(out(i, j) == out(4 + i, j));
}

TEST_CASE("denoise: graph isolation is exact") {
    const DenoiserConfig cfg = tiny_config();
    const Denoiser<double> m = Denoiser<double>::init(cfg, 17);
    GraphBatch<double> b = random_batch<double>(cfg, {3, 5}, 41);
    DenoiserCache<double> cache;
    const Mat<double> before = m.forward(b, cache);
    // Rewrite the second graph's inputs entirely.
    for (int i = 3; i < 8; ++i) {
        for (int j = 0; j < cfg.feature_dim; ++j) b.features(i, j) = 0.0;
        for (int j = 0; j < cfg.position_dim; ++j) b.positions(i, j) = 9.0;
    }
    b.timesteps[1] = 5;
    const Mat<double> after = m.forward(b, cache);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < cfg.position_dim; ++j) CHECK(before(i, j) == after(i, j));
}

TEST_CASE("denoise: permutation equivariance within a graph") {
    DenoiserConfig cfg;
    cfg.position_dim = 2;
    cfg.feature_dim = 16;
    cfg.time_embed_dim = 8;
    cfg.width = 64;
    cfg.heads = 4;
    cfg.max_timestep = 50;
    const Denoiser<float> m = Denoiser<float>::init(cfg, 23);
    Rng rng(55);
    for (int rep = 0; rep < 20; ++rep) {
        const int k = 2 + int(rng.below(19));
        GraphBatch<float> b = random_batch<float>(cfg, {k}, 1000 + rep);
        DenoiserCache<float> cache;
        const Mat<float> out = m.forward(b, cache);

        Rng prng(2000 + rep);
        const std::vector<int> perm = random_permutation(k, prng);
        GraphBatch<float> pb = b;
        for (int i = 0; i < k; ++i) {
            for (int j = 0; j < cfg.feature_dim; ++j)
                pb.features(i, j) = b.features(perm[std::size_t(i)], j);
            for (int j = 0; j < cfg.position_dim; ++j)
                pb.positions(i, j) = b.positions(perm[std::size_t(i)], j);
        }
        const Mat<float> pout = m.forward(pb, cache);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < cfg.position_dim; ++j)
                CHECK(std::abs(double(pout(i, j)) - double(out(perm[std::size_t(i)], j))) < 1e-5);
    }
}

TEST_CASE("denoise: input validation") {
    const DenoiserConfig cfg = tiny_config();
    const Denoiser<double> m = Denoiser<double>::init(cfg, 2);
    DenoiserCache<double> cache;

    GraphBatch<double> empty;
    empty.offsets = {0, 0};
    empty.timesteps = {1};
    empty.features.resize(0, cfg.feature_dim);
    empty.positions.resize(0, cfg.position_dim);
    CHECK_THROWS_AS(m.forward(empty, cache), std::invalid_argument);

    GraphBatch<double> wrong = random_batch<double>(cfg, {3}, 1);
    wrong.features.resize(3, cfg.feature_dim + 1);
    CHECK_THROWS_AS(m.forward(wrong, cache), std::invalid_argument);

    GraphBatch<double> bad_t = random_batch<double>(cfg, {3}, 1);
    bad_t.timesteps = {cfg.max_timestep + 1};
    CHECK_THROWS_AS(m.forward(bad_t, cache), std::invalid_argument);
}

TEST_CASE("loss_and_gradients: zero at the MSE minimum") {
    const DenoiserConfig cfg = tiny_config();
    const Denoiser<double> m = Denoiser<double>::init(cfg, 29);
    const GraphBatch<double> b = random_batch<double>(cfg, {3, 2}, 71);
    DenoiserCache<double> cache;
    const Mat<double> out = m.forward(b, cache);
    Denoiser<double> grads = Denoiser<double>::zeros_like(m);
    const LossGrads<double> lg = loss_and_gradients(m, b, out, grads, cache);
    CHECK(lg.loss == 0.0);
    grads.for_each_param([&](const std::string&, Mat<double>& g) {
        for (const double v : g.v) CHECK(v == 0.0);
    });
    for (const double v : lg.d_features.v) CHECK(v == 0.0);
}

TEST_CASE("loss_and_gradients: duplicating every graph leaves the loss unchanged") {
    const DenoiserConfig cfg = tiny_config();
    const Denoiser<double> m = Denoiser<double>::init(cfg, 31);
    const GraphBatch<double> b = random_batch<double>(cfg, {3, 2}, 73);
    Rng rng(74);
    Mat<double> eps(5, 2);
    for (auto& v : eps.v) v = rng.normal();

    GraphBatch<double> doubled;
    doubled.offsets = {0, 3, 5, 8, 10};
    doubled.timesteps = {b.timesteps[0], b.timesteps[1], b.timesteps[0], b.timesteps[1]};
    doubled.features.resize(10, cfg.feature_dim);
    doubled.positions.resize(10, cfg.position_dim);
    Mat<double> eps2(10, 2);
    for (int rep = 0; rep < 2; ++rep)
        for (int i = 0; i < 5; ++i) {
            for (int j = 0; j < cfg.feature_dim; ++j)
                doubled.features(5 * rep + i, j) = b.features(i, j);
            for (int j = 0; j < cfg.position_dim; ++j) {
                doubled.positions(5 * rep + i, j) = b.positions(i, j);
                eps2(5 * rep + i, j) = eps(i, j);
            }
        }

    Denoiser<double> g1 = Denoiser<double>::zeros_like(m);
    Denoiser<double> g2 = Denoiser<double>::zeros_like(m);
    DenoiserCache<double> cache;
    const double l1 = loss_and_gradients(m, b, eps, g1, cache).loss;
    const double l2 = loss_and_gradients(m, doubled, eps2, g2, cache).loss;
    CHECK(l1 == doctest::Approx(l2).epsilon(1e-12));
}

TEST_CASE("loss_and_gradients: every gradient matches central finite differences") {
    const DenoiserConfig cfg = tiny_config();  // width 8, 1 head, K = 3
    Denoiser<double> m = Denoiser<double>::init(cfg, 37);
    const GraphBatch<double> b = random_batch<double>(cfg, {3, 3}, 81);
    Rng rng(83);
    Mat<double> eps(6, 2);
    for (auto& v : eps.v) v = rng.normal();

    Denoiser<double> grads = Denoiser<double>::zeros_like(m);
    DenoiserCache<double> cache;
    loss_and_gradients(m, b, eps, grads, cache);

    auto loss_only = [&]() {
        DenoiserCache<double> c;
        const Mat<double> out = m.forward(b, c);
        return simple_loss(eps, out);
    };

    const double h = 1e-4;
    std::vector<Mat<double>*> params, gmats;
    m.for_each_param([&](const std::string&, Mat<double>& p) { params.push_back(&p); });
    grads.for_each_param([&](const std::string&, Mat<double>& g) { gmats.push_back(&g); });
    REQUIRE(params.size() == gmats.size());

    long checked = 0;
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Mat<double>& p = *params[pi];
        const Mat<double>& g = *gmats[pi];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p.v[i];
            p.v[i] = orig + h;
            const double lp = loss_only();
            p.v[i] = orig - h;
            const double lm = loss_only();
            p.v[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(g.v[i]), 1e-6});
            const double rel = std::abs(fd - g.v[i]) / denom;
            worst = std::max(worst, rel);
            ++checked;
        }
    }
    CHECK(checked > 3000);
    CHECK(worst < 1e-4);
}

TEST_CASE("loss_and_gradients: feature gradient matches finite differences") {
    const DenoiserConfig cfg = tiny_config();
    Denoiser<double> m = Denoiser<double>::init(cfg, 41);
    GraphBatch<double> b = random_batch<double>(cfg, {3}, 91);
    Rng rng(93);
    Mat<double> eps(3, 2);
    for (auto& v : eps.v) v = rng.normal();

    Denoiser<double> grads = Denoiser<double>::zeros_like(m);
    DenoiserCache<double> cache;
    const LossGrads<double> lg = loss_and_gradients(m, b, eps, grads, cache);

    const double h = 1e-4;
    for (int i = 0; i < b.features.rows; ++i)
        for (int j = 0; j < cfg.feature_dim; ++j) {
            const double orig = b.features(i, j);
            b.features(i, j) = orig + h;
            DenoiserCache<double> c1;
            const double lp = simple_loss(eps, m.forward(b, c1));
            b.features(i, j) = orig - h;
            const double lm = simple_loss(eps, m.forward(b, c1));
            b.features(i, j) = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(lg.d_features(i, j)), 1e-6});
            CHECK(std::abs(fd - lg.d_features(i, j)) / denom < 1e-4);
        }
}

TEST_CASE("attention mask view is symmetric block-diagonal with self edges") {
    const DenoiserConfig cfg = tiny_config();
    const GraphBatch<double> b = random_batch<double>(cfg, {2, 3}, 3);
    const Mat<char> mask = b.attention_mask();
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            CHECK(mask(i, j) == mask(j, i));
            const bool same_graph = (i < 2) == (j < 2);
            CHECK(bool(mask(i, j)) == same_graph);
        }
    for (int i = 0; i < 5; ++i) CHECK(mask(i, i) == 1);
}
