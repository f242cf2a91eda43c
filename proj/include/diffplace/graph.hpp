#pragma once

#include <stdexcept>
#include <vector>

#include "diffplace/mat.hpp"

namespace diffplace {

// A batch of fully connected graphs packed into contiguous node rows.
// offsets[g]..offsets[g+1] are the rows of graph g; attention runs block by
// block, which realizes a symmetric block-diagonal mask (self edges included)
// without ever materializing it. Graphs in a batch may have different sizes
// and share one timestep per graph.
template <typename T>
struct GraphBatch {
    Mat<T> features;            // N x d
    Mat<T> positions;           // N x n (noisy positions x_t)
    std::vector<int> offsets;   // size G+1, offsets[0] = 0, offsets[G] = N
    std::vector<int> timesteps; // size G

    int num_graphs() const { return int(timesteps.size()); }
    int num_nodes() const { return features.rows; }

    void validate() const {
        if (offsets.size() != timesteps.size() + 1)
            throw std::invalid_argument("GraphBatch: offsets/timesteps size mismatch");
        if (offsets.front() != 0 || offsets.back() != features.rows)
            throw std::invalid_argument("GraphBatch: offsets do not cover the node rows");
        for (std::size_t g = 0; g + 1 < offsets.size(); ++g)
            if (offsets[g + 1] <= offsets[g])
                throw std::invalid_argument("GraphBatch: empty graph");
        if (positions.rows != features.rows)
            throw std::invalid_argument("GraphBatch: positions/features row mismatch");
    }

    // Dense mask view, for tests and debugging only.
    Mat<char> attention_mask() const {
        Mat<char> m(num_nodes(), num_nodes());
        for (int g = 0; g < num_graphs(); ++g)
            for (int i = offsets[g]; i < offsets[g + 1]; ++i)
                for (int j = offsets[g]; j < offsets[g + 1]; ++j) m(i, j) = 1;
        return m;
    }
};

}  // namespace diffplace
