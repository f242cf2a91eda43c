#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "diffplace/mat.hpp"

namespace diffplace {

// Centers of an n x n uniform partition of [-1, 1]^2, row-major. Cell (i, j)
// sits at (-1 + (2j+1)/n, -1 + (2i+1)/n); spacing is 2/n per axis.
struct GridSpec {
    int n = 0;
    std::vector<std::array<double, 2>> centers;  // index = i * n + j

    int cell_count() const { return n * n; }
};

inline GridSpec make_grid(int n) {
    if (n < 1) throw std::invalid_argument("make_grid: n must be >= 1");
    GridSpec g;
    g.n = n;
    g.centers.resize(std::size_t(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            g.centers[std::size_t(i) * n + j] = {-1.0 + double(2 * j + 1) / n,
                                                 -1.0 + double(2 * i + 1) / n};
    return g;
}

// Centers of K equal subintervals of (-1, 1): position_i = -1 + (2i+1)/K.
// The first element gets the smallest value.
inline std::vector<double> sequence_positions(int K) {
    if (K < 1) throw std::invalid_argument("sequence_positions: K must be >= 1");
    std::vector<double> pos(std::size_t(K), 0.0);
    for (int i = 0; i < K; ++i) pos[std::size_t(i)] = -1.0 + double(2 * i + 1) / K;
    return pos;
}

// Injective element -> slot mapping.
struct Assignment {
    std::vector<int> slot;  // slot[element] = cell index or rank
};

// Global greedy decoding: all K * n^2 element-cell Euclidean distances are
// ranked and the smallest distance among still-free elements and cells is
// committed first, so the most confident predictions bind first. Ties break
// lexicographically by (element, cell).
template <typename T>
Assignment greedy_assign(const Mat<T>& pred, const GridSpec& grid) {
    const int K = pred.rows;
    const int cells = grid.cell_count();
    if (pred.cols != 2) throw std::invalid_argument("greedy_assign: predictions must be 2D");
    if (K > cells) throw std::invalid_argument("greedy_assign: more elements than cells");

    struct Cand {
        double dist;
        int elem;
        int cell;
    };
    std::vector<Cand> cand;
    cand.reserve(std::size_t(K) * cells);
    for (int e = 0; e < K; ++e)
        for (int c = 0; c < cells; ++c) {
            const double dx = double(pred(e, 0)) - grid.centers[std::size_t(c)][0];
            const double dy = double(pred(e, 1)) - grid.centers[std::size_t(c)][1];
            cand.push_back({std::sqrt(dx * dx + dy * dy), e, c});
        }
    std::sort(cand.begin(), cand.end(), [](const Cand& a, const Cand& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        if (a.elem != b.elem) return a.elem < b.elem;
        return a.cell < b.cell;
    });

    Assignment out;
    out.slot.assign(std::size_t(K), -1);
    std::vector<char> cell_taken(std::size_t(cells), 0);
    int assigned = 0;
    for (const Cand& c : cand) {
        if (assigned == K) break;
        if (out.slot[std::size_t(c.elem)] >= 0 || cell_taken[std::size_t(c.cell)]) continue;
        out.slot[std::size_t(c.elem)] = c.cell;
        cell_taken[std::size_t(c.cell)] = 1;
        ++assigned;
    }
    return out;
}

// Ranks elements by ascending predicted scalar position; ties keep the
// original element order.
template <typename T>
Assignment order_from_positions(const Mat<T>& pred) {
    const int K = pred.rows;
    if (K < 1) throw std::invalid_argument("order_from_positions: K must be >= 1");
    if (pred.cols != 1) throw std::invalid_argument("order_from_positions: predictions must be 1D");
    for (int i = 0; i < K; ++i)
        if (!std::isfinite(double(pred(i, 0))))
            throw std::invalid_argument("order_from_positions: non-finite position");
    std::vector<int> order(std::size_t(K), 0);
    for (int i = 0; i < K; ++i) order[std::size_t(i)] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return pred(a, 0) < pred(b, 0); });
    Assignment out;
    out.slot.assign(std::size_t(K), -1);
    for (int r = 0; r < K; ++r) out.slot[std::size_t(order[std::size_t(r)])] = r;
    return out;
}

}  // namespace diffplace
