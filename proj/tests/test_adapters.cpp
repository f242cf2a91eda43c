#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "diffplace/assign.hpp"
#include "diffplace/instances.hpp"
#include "diffplace/rng.hpp"

using namespace diffplace;

namespace {

// Exhaustive minimum-total-distance assignment for small K and cell counts.
struct BruteForce {
    const Mat<double>* pred;
    const GridSpec* grid;
    std::vector<int> best;
    double best_cost;
    std::vector<int> cur;
    std::vector<char> used;

    double dist(int e, int c) const {
        const double dx = (*pred)(e, 0) - grid->centers[std::size_t(c)][0];
        const double dy = (*pred)(e, 1) - grid->centers[std::size_t(c)][1];
        return std::sqrt(dx * dx + dy * dy);
    }

    void rec(int e, double cost) {
        const int k = pred->rows;
        if (cost >= best_cost) return;
        if (e == k) {
            best_cost = cost;
            best = cur;
            return;
        }
        for (int c = 0; c < grid->cell_count(); ++c) {
            if (used[std::size_t(c)]) continue;
            used[std::size_t(c)] = 1;
            cur[std::size_t(e)] = c;
            rec(e + 1, cost + dist(e, c));
            used[std::size_t(c)] = 0;
        }
    }

    std::vector<int> solve(const Mat<double>& p, const GridSpec& g) {
        pred = &p;
        grid = &g;
        best_cost = 1e300;
        cur.assign(std::size_t(p.rows), -1);
        used.assign(std::size_t(g.cell_count()), 0);
        rec(0, 0.0);
        return best;
    }
};

}  // namespace

TEST_CASE("make_grid: small cases") {
    const GridSpec g1 = make_grid(1);
    CHECK(g1.centers.size() == 1);
    CHECK(g1.centers[0][0] == 0.0);
    CHECK(g1.centers[0][1] == 0.0);

    const GridSpec g2 = make_grid(2);
    REQUIRE(g2.centers.size() == 4);
    CHECK(g2.centers[0][0] == doctest::Approx(-0.5));
    CHECK(g2.centers[0][1] == doctest::Approx(-0.5));
    CHECK(g2.centers[1][0] == doctest::Approx(0.5));
    CHECK(g2.centers[1][1] == doctest::Approx(-0.5));
    CHECK(g2.centers[3][0] == doctest::Approx(0.5));
    CHECK(g2.centers[3][1] == doctest::Approx(0.5));

    CHECK_THROWS_AS(make_grid(0), std::invalid_argument);
}

TEST_CASE("make_grid: n=6 layout and spacing") {
    const GridSpec g = make_grid(6);
    REQUIRE(g.centers.size() == 36);
    CHECK(g.centers[0][0] == doctest::Approx(-5.0 / 6.0).epsilon(1e-15));
    CHECK(g.centers[0][1] == doctest::Approx(-5.0 / 6.0).epsilon(1e-15));
    // Spacing 2/n = 1/3 along each axis.
    CHECK(g.centers[1][0] - g.centers[0][0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(g.centers[6][1] - g.centers[0][1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    // All centers distinct with min pairwise distance 2/n.
    double min_dist = 1e300;
    for (std::size_t a = 0; a < g.centers.size(); ++a)
        for (std::size_t b = a + 1; b < g.centers.size(); ++b) {
            const double dx = g.centers[a][0] - g.centers[b][0];
            const double dy = g.centers[a][1] - g.centers[b][1];
            min_dist = std::min(min_dist, std::sqrt(dx * dx + dy * dy));
        }
    CHECK(min_dist == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("sequence_positions: values and structure") {
    CHECK(sequence_positions(1) == std::vector<double>{0.0});
    const std::vector<double> p2 = sequence_positions(2);
    CHECK(p2[0] == doctest::Approx(-0.5));
    CHECK(p2[1] == doctest::Approx(0.5));
    const std::vector<double> p5 = sequence_positions(5);
    const std::vector<double> want{-0.8, -0.4, 0.0, 0.4, 0.8};
    for (int i = 0; i < 5; ++i) CHECK(p5[std::size_t(i)] == doctest::Approx(want[std::size_t(i)]).epsilon(1e-15));

    for (const int k : {2, 3, 7, 12}) {
        const std::vector<double> p = sequence_positions(k);
        for (int i = 0; i < k; ++i) {
            CHECK(p[std::size_t(i)] == doctest::Approx(-p[std::size_t(k - 1 - i)]).epsilon(1e-12));
            if (i > 0)
                CHECK(p[std::size_t(i)] - p[std::size_t(i - 1)] ==
                      doctest::Approx(2.0 / k).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(sequence_positions(0), std::invalid_argument);
}

TEST_CASE("greedy_assign: exact centers return the underlying bijection") {
    const GridSpec g = make_grid(3);
    Rng rng(5);
    const std::vector<int> perm = random_permutation(9, rng);
    Mat<double> pred(9, 2);
    for (int e = 0; e < 9; ++e) {
        pred(e, 0) = g.centers[std::size_t(perm[std::size_t(e)])][0];
        pred(e, 1) = g.centers[std::size_t(perm[std::size_t(e)])][1];
    }
    const Assignment a = greedy_assign(pred, g);
    for (int e = 0; e < 9; ++e) CHECK(a.slot[std::size_t(e)] == perm[std::size_t(e)]);
}

TEST_CASE("greedy_assign: sub-half-spacing perturbations match brute force") {
    Rng rng(17);
    for (int it = 0; it < 200; ++it) {
        const int n = 2 + int(rng.below(2));  // n in {2, 3}, K = n^2 <= 9
        const GridSpec g = make_grid(n);
        const int k = n * n;
        const std::vector<int> perm = random_permutation(k, rng);
        Mat<double> pred(k, 2);
        const double half_spacing = 1.0 / n;
        for (int e = 0; e < k; ++e) {
            // Uniform perturbation with L2 norm strictly below half the spacing.
            double dx, dy;
            do {
                dx = rng.uniform(-half_spacing, half_spacing);
                dy = rng.uniform(-half_spacing, half_spacing);
            } while (std::sqrt(dx * dx + dy * dy) >= 0.98 * half_spacing);
            pred(e, 0) = g.centers[std::size_t(perm[std::size_t(e)])][0] + dx;
            pred(e, 1) = g.centers[std::size_t(perm[std::size_t(e)])][1] + dy;
        }
        const Assignment a = greedy_assign(pred, g);
        BruteForce bf;
        const std::vector<int> opt = bf.solve(pred, g);
        for (int e = 0; e < k; ++e) {
            CHECK(a.slot[std::size_t(e)] == perm[std::size_t(e)]);
            CHECK(a.slot[std::size_t(e)] == opt[std::size_t(e)]);
        }
    }
}

TEST_CASE("greedy_assign: contested cell goes to the lexicographic winner") {
    const GridSpec g = make_grid(2);
    Mat<double> pred(3, 2);
    // Two elements at the same point nearest to cell 3 (0.5, 0.5); element 0
    // wins the tie, element 1 takes the next-nearest free cell.
    pred(0, 0) = 0.5;
    pred(0, 1) = 0.4;
    pred(1, 0) = 0.5;
    pred(1, 1) = 0.4;
    pred(2, 0) = -0.5;
    pred(2, 1) = -0.5;
    const Assignment a = greedy_assign(pred, g);
    CHECK(a.slot[0] == 3);
    CHECK(a.slot[1] == 1);  // (0.5, -0.5) is the nearest free cell
    CHECK(a.slot[2] == 0);

    // Exhaustive check: the greedy total cost equals the optimal total cost
    // for this instance (the tie swap does not change the total).
    BruteForce bf;
    const std::vector<int> opt = bf.solve(pred, g);
    auto total = [&](const std::vector<int>& slots) {
        double c = 0.0;
        for (int e = 0; e < 3; ++e) c += bf.dist(e, slots[std::size_t(e)]);
        return c;
    };
    bf.pred = &pred;
    bf.grid = &g;
    CHECK(total(a.slot) == doctest::Approx(total(opt)).epsilon(1e-12));
}

TEST_CASE("greedy_assign: injective on random inputs; rejects K > cells") {
    Rng rng(23);
    for (int it = 0; it < 500; ++it) {
        const int n = 2 + int(rng.below(3));
        const int cells = n * n;
        const int k = 1 + int(rng.below(std::uint64_t(cells)));
        const GridSpec g = make_grid(n);
        Mat<double> pred(k, 2);
        for (auto& v : pred.v) v = rng.uniform(-1.5, 1.5);
        const Assignment a = greedy_assign(pred, g);
        std::vector<char> used(std::size_t(cells), 0);
        for (int e = 0; e < k; ++e) {
            REQUIRE(a.slot[std::size_t(e)] >= 0);
            REQUIRE(a.slot[std::size_t(e)] < cells);
            CHECK(!used[std::size_t(a.slot[std::size_t(e)])]);
            used[std::size_t(a.slot[std::size_t(e)])] = 1;
        }
    }
    Mat<double> too_many(5, 2);
    CHECK_THROWS_AS(greedy_assign(too_many, make_grid(2)), std::invalid_argument);
}

TEST_CASE("order_from_positions: basic and stable ties") {
    Mat<double> inc(4, 1);
    for (int i = 0; i < 4; ++i) inc(i, 0) = 0.1 * i;
    const Assignment a = order_from_positions(inc);
    for (int i = 0; i < 4; ++i) CHECK(a.slot[std::size_t(i)] == i);

    Mat<double> dec(4, 1);
    for (int i = 0; i < 4; ++i) dec(i, 0) = -0.1 * i;
    const Assignment b = order_from_positions(dec);
    for (int i = 0; i < 4; ++i) CHECK(b.slot[std::size_t(i)] == 3 - i);

    // Duplicate value: stable tie-break by original index, verified against a
    // reference stable sort.
    Mat<double> dup(5, 1);
    dup(0, 0) = 0.3;
    dup(1, 0) = 0.1;
    dup(2, 0) = 0.3;
    dup(3, 0) = -0.2;
    dup(4, 0) = 0.1;
    const Assignment c = order_from_positions(dup);
    std::vector<int> idx{0, 1, 2, 3, 4};
    std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) { return dup(x, 0) < dup(y, 0); });
    for (int r = 0; r < 5; ++r) CHECK(c.slot[std::size_t(idx[std::size_t(r)])] == r);

    Mat<double> bad(2, 1);
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS(order_from_positions(bad), std::invalid_argument);
}

TEST_CASE("shuffle_instance: deterministic and consistent") {
    // Build a tiny puzzle instance by hand.
    ImageU8 img(64, 64);
    Rng rng(31);
    for (auto& p : img.px) p = std::uint8_t(rng.below(256));
    const PuzzleInstance a = make_puzzle_instance(img, 2, 7, 99);
    const PuzzleInstance b = make_puzzle_instance(img, 2, 7, 99);
    REQUIRE(a.element_count() == 4);
    CHECK(a.shuffle_perm == b.shuffle_perm);
    a.validate();

    // Relabeling consistency: patch presented at q is the original patch
    // shuffle_perm[q], and its gt cell is that patch's row-major cell.
    for (int q = 0; q < 4; ++q) CHECK(a.gt_cell[std::size_t(q)] == a.shuffle_perm[std::size_t(q)]);

    // Shuffling again relabels but keeps the task: each presented patch keeps
    // the gt cell of the original patch it carries.
    const PuzzleInstance c = shuffle_instance(a, 123);
    c.validate();
    for (int q = 0; q < 4; ++q) {
        const int orig = c.shuffle_perm[std::size_t(q)];
        CHECK(c.gt_cell[std::size_t(q)] == orig);
        int qa = -1;
        for (int p = 0; p < 4; ++p)
            if (a.shuffle_perm[std::size_t(p)] == orig) qa = p;
        REQUIRE(qa >= 0);
        CHECK(c.patches[std::size_t(q)].px == a.patches[std::size_t(qa)].px);
    }
}

TEST_CASE("shuffle_instance: permutation uniformity over seeds") {
    // K = 3: each of the 6 permutations should occur with frequency ~1/6.
    std::map<std::vector<int>, int> counts;
    const int trials = 10000;
    for (int seed = 0; seed < trials; ++seed) {
        Rng rng(std::uint64_t(seed) * 2654435761u + 17);
        counts[random_permutation(3, rng)]++;
    }
    CHECK(counts.size() == 6);
    for (const auto& [perm, c] : counts)
        CHECK(std::abs(double(c) / trials - 1.0 / 6.0) < 0.02);
}

TEST_CASE("sequence shuffle keeps gt semantics") {
    SequenceInstance inst;
    inst.elements = {{1, 2}, {3, 4}, {5, 6}, {7, 8}};
    inst.gt_rank = {0, 1, 2, 3};
    inst.shuffle_perm = {0, 1, 2, 3};
    const SequenceInstance s = shuffle_instance(inst, 5);
    s.validate();
    // Element content moves together with its rank.
    for (int q = 0; q < 4; ++q) {
        const int orig = s.shuffle_perm[std::size_t(q)];
        CHECK(s.gt_rank[std::size_t(q)] == orig);
        CHECK(s.elements[std::size_t(q)] == inst.elements[std::size_t(orig)]);
    }
}
