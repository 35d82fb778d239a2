#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tileq/rng.hpp"

namespace tileq {

// Row-major f32 matrix. This is the one carrier type the whole toolkit moves
// data in; kernels that need more precision accumulate in f64 internally and
// round once on write-back, which keeps results reproducible across runs.

struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data; // rows * cols, row-major

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c, float fill = 0.0f)
        : rows(r), cols(c), data(r * c, fill) {}

    float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    float* row(std::size_t r) { return data.data() + r * cols; }
    const float* row(std::size_t r) const { return data.data() + r * cols; }

    std::size_t size() const { return rows * cols; }
    bool empty() const { return rows == 0 || cols == 0; }
};

// ============================================================================
// construction helpers
// ============================================================================

/// Matrix of iid standard normals drawn from rng (row-major order).
DenseMatrix gaussian_matrix(std::size_t rows, std::size_t cols, CounterRng& rng);

/// Identity-like: ones on the main diagonal, zero elsewhere.
DenseMatrix eye(std::size_t n);

/// Matrix from a nested initializer-style vector (test convenience).
DenseMatrix matrix_from(const std::vector<std::vector<float>>& rows);

// ============================================================================
// core kernels
// ============================================================================

/// a(m x k) * b(k x n) -> (m x n). Each output element is one f64 dot product
/// over k in index order, rounded to f32 once. Throws ShapeError on inner-dim
/// mismatch naming both shapes.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);

/// matmul with the output rows computed on `threads` workers. Each output
/// element is still a single f64 accumulation in k-order, so results are
/// bitwise identical to the single-threaded kernel.
DenseMatrix matmul_threaded(const DenseMatrix& a, const DenseMatrix& b, int threads);

/// y = A * x for a length-cols vector; f64 accumulation as in matmul.
std::vector<float> matvec(const DenseMatrix& a, const std::vector<float>& x);

DenseMatrix transpose(const DenseMatrix& a);

/// c = a + b elementwise (shapes must match).
DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);

/// c = a - b elementwise (shapes must match).
DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b);

/// Scale every column j by d[j] (i.e. a * diag(d)). d.size() must equal cols.
DenseMatrix scale_cols(const DenseMatrix& a, const std::vector<float>& d);

/// Frobenius norm, accumulated in f64.
double frob_norm(const DenseMatrix& a);

/// max |a_ij - b_ij| over all entries (shapes must match).
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);

/// True iff every entry is finite.
bool all_finite(const DenseMatrix& a);

} // namespace tileq
