#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace diffplace {

// Dense row-major matrix. Rows are the batch/node axis throughout the
// library; a 1xC matrix doubles as a bias/parameter vector.
template <typename T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(std::size_t(r) * std::size_t(c), T(0)) {}
    Mat(int r, int c, T fill) : rows(r), cols(c), v(std::size_t(r) * std::size_t(c), fill) {}

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }
    T* row(int i) { return v.data() + std::size_t(i) * cols; }
    const T* row(int i) const { return v.data() + std::size_t(i) * cols; }
    T& operator()(int i, int j) { return v[std::size_t(i) * cols + j]; }
    T operator()(int i, int j) const { return v[std::size_t(i) * cols + j]; }

    std::size_t size() const { return v.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    void resize(int r, int c) {
        rows = r;
        cols = c;
        v.assign(std::size_t(r) * std::size_t(c), T(0));
    }
    void zero() { std::fill(v.begin(), v.end(), T(0)); }

    template <typename U>
    Mat<U> cast() const {
        Mat<U> out(rows, cols);
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = U(v[i]);
        return out;
    }
};

// C (+)= A * B on raw row-major blocks with leading dimensions.
template <typename T>
inline void gemm_raw(int m, int k, int n, const T* a, int lda, const T* b, int ldb, T* c, int ldc,
                     bool accumulate) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + std::size_t(i) * ldc;
        if (!accumulate) std::fill(crow, crow + n, T(0));
        const T* arow = a + std::size_t(i) * lda;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + std::size_t(p) * ldb;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (+)= A^T * B where A is k x m, B is k x n.
template <typename T>
inline void gemm_tn_raw(int m, int k, int n, const T* a, int lda, const T* b, int ldb, T* c,
                        int ldc, bool accumulate) {
    if (!accumulate) {
        for (int i = 0; i < m; ++i) std::fill(c + std::size_t(i) * ldc, c + std::size_t(i) * ldc + n, T(0));
    }
    for (int p = 0; p < k; ++p) {
        const T* arow = a + std::size_t(p) * lda;
        const T* brow = b + std::size_t(p) * ldb;
        for (int i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + std::size_t(i) * ldc;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (+)= A * B^T where A is m x k, B is n x k.
template <typename T>
inline void gemm_nt_raw(int m, int k, int n, const T* a, int lda, const T* b, int ldb, T* c,
                        int ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + std::size_t(i) * lda;
        T* crow = c + std::size_t(i) * ldc;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + std::size_t(j) * ldb;
            T acc = 0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            if (accumulate)
                crow[j] += acc;
            else
                crow[j] = acc;
        }
    }
}

template <typename T>
inline void gemm(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false) {
    if (a.cols != b.rows || c.rows != a.rows || c.cols != b.cols)
        throw std::invalid_argument("gemm: shape mismatch");
    gemm_raw(a.rows, a.cols, b.cols, a.data(), a.cols, b.data(), b.cols, c.data(), c.cols,
             accumulate);
}

template <typename T>
inline void gemm_tn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false) {
    if (a.rows != b.rows || c.rows != a.cols || c.cols != b.cols)
        throw std::invalid_argument("gemm_tn: shape mismatch");
    gemm_tn_raw(a.cols, a.rows, b.cols, a.data(), a.cols, b.data(), b.cols, c.data(), c.cols,
                accumulate);
}

template <typename T>
inline void gemm_nt(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false) {
    if (a.cols != b.cols || c.rows != a.rows || c.cols != b.rows)
        throw std::invalid_argument("gemm_nt: shape mismatch");
    gemm_nt_raw(a.rows, a.cols, b.rows, a.data(), a.cols, b.data(), b.cols, c.data(), c.cols,
                accumulate);
}

}  // namespace diffplace
