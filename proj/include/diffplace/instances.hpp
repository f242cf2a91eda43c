#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "diffplace/assign.hpp"
#include "diffplace/image.hpp"
#include "diffplace/rng.hpp"

namespace diffplace {

// A shuffled puzzle task. patches are in presentation order; gt_cell maps each
// presented patch to its row-major grid cell. shuffle_perm records which
// original (row-major) patch each presentation slot came from.
struct PuzzleInstance {
    std::uint64_t source_id = 0;
    int n = 0;
    std::vector<Patch> patches;
    std::vector<int> gt_cell;
    std::vector<int> shuffle_perm;

    int element_count() const { return int(patches.size()); }

    void validate() const {
        const std::size_t k = patches.size();
        if (gt_cell.size() != k || shuffle_perm.size() != k)
            throw std::invalid_argument("PuzzleInstance: inconsistent sizes");
        std::vector<char> seen(std::size_t(n) * n, 0);
        for (const int c : gt_cell) {
            if (c < 0 || c >= n * n || seen[std::size_t(c)])
                throw std::invalid_argument("PuzzleInstance: gt_cell is not a bijection");
            seen[std::size_t(c)] = 1;
        }
    }
};

// A shuffled ordering task over token arrays. gt_rank maps each presented
// element to its rank in the original order.
struct SequenceInstance {
    std::uint64_t source_id = 0;
    std::vector<std::vector<int>> elements;
    std::vector<int> gt_rank;
    std::vector<int> shuffle_perm;
    std::vector<int> chain_links;  // generator-side signal, never shown to the model

    int element_count() const { return int(elements.size()); }

    void validate() const {
        const std::size_t k = elements.size();
        if (k < 2) throw std::invalid_argument("SequenceInstance: needs at least 2 elements");
        if (gt_rank.size() != k || shuffle_perm.size() != k)
            throw std::invalid_argument("SequenceInstance: inconsistent sizes");
        std::vector<char> seen(k, 0);
        for (const int r : gt_rank) {
            if (r < 0 || r >= int(k) || seen[std::size_t(r)])
                throw std::invalid_argument("SequenceInstance: gt_rank is not a bijection");
            seen[std::size_t(r)] = 1;
        }
    }
};

inline std::vector<int> random_permutation(int k, Rng& rng) {
    std::vector<int> p(std::size_t(k), 0);
    for (int i = 0; i < k; ++i) p[std::size_t(i)] = i;
    for (int i = k - 1; i > 0; --i) {
        const int j = int(rng.below(std::uint64_t(i) + 1));
        std::swap(p[std::size_t(i)], p[std::size_t(j)]);
    }
    return p;
}

// Applies a seed-derived permutation to the presentation order; the ground
// truth is relabeled through the same permutation so the task is unchanged.
inline PuzzleInstance shuffle_instance(const PuzzleInstance& in, std::uint64_t seed) {
    Rng rng(seed);
    const int k = in.element_count();
    const std::vector<int> perm = random_permutation(k, rng);
    PuzzleInstance out;
    out.source_id = in.source_id;
    out.n = in.n;
    out.patches.resize(std::size_t(k));
    out.gt_cell.resize(std::size_t(k));
    out.shuffle_perm.resize(std::size_t(k));
    for (int q = 0; q < k; ++q) {
        const int src = perm[std::size_t(q)];
        out.patches[std::size_t(q)] = in.patches[std::size_t(src)];
        out.gt_cell[std::size_t(q)] = in.gt_cell[std::size_t(src)];
        out.shuffle_perm[std::size_t(q)] = in.shuffle_perm[std::size_t(src)];
    }
    return out;
}

inline SequenceInstance shuffle_instance(const SequenceInstance& in, std::uint64_t seed) {
    Rng rng(seed);
    const int k = in.element_count();
    const std::vector<int> perm = random_permutation(k, rng);
    SequenceInstance out;
    out.source_id = in.source_id;
    out.chain_links = in.chain_links;
    out.elements.resize(std::size_t(k));
    out.gt_rank.resize(std::size_t(k));
    out.shuffle_perm.resize(std::size_t(k));
    for (int q = 0; q < k; ++q) {
        const int src = perm[std::size_t(q)];
        out.elements[std::size_t(q)] = in.elements[std::size_t(src)];
        out.gt_rank[std::size_t(q)] = in.gt_rank[std::size_t(src)];
        out.shuffle_perm[std::size_t(q)] = in.shuffle_perm[std::size_t(src)];
    }
    return out;
}

// Builds an unshuffled instance (identity order) from an image, then shuffles.
inline PuzzleInstance make_puzzle_instance(const ImageU8& img, int n, std::uint64_t source_id,
                                           std::uint64_t shuffle_seed) {
    PuzzleInstance inst;
    inst.source_id = source_id;
    inst.n = n;
    inst.patches = patchify(img, n);
    const int k = inst.element_count();
    inst.gt_cell.resize(std::size_t(k));
    inst.shuffle_perm.resize(std::size_t(k));
    for (int i = 0; i < k; ++i) {
        inst.gt_cell[std::size_t(i)] = i;
        inst.shuffle_perm[std::size_t(i)] = i;
    }
    return shuffle_instance(inst, shuffle_seed);
}

}  // namespace diffplace
