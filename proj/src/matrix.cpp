#include "tileq/matrix.hpp"

#include <cmath>
#include <string>
#include <thread>

#include "tileq/errors.hpp"

namespace tileq {

namespace {

std::string shape_str(const DenseMatrix& m) {
    return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

void require_same_shape(const char* op, const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows != b.rows || a.cols != b.cols) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                         " vs " + shape_str(b));
    }
}

// One output row of a*b: f64 accumulator per element, k ascending.
void matmul_row(const DenseMatrix& a, const DenseMatrix& b, DenseMatrix& c,
                std::size_t i) {
    const float* arow = a.row(i);
    float* crow = c.row(i);
    for (std::size_t j = 0; j < b.cols; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < a.cols; ++k) {
            acc += static_cast<double>(arow[k]) * static_cast<double>(b.at(k, j));
        }
        crow[j] = static_cast<float>(acc);
    }
}

} // namespace

// ============================================================================
// construction helpers
// ============================================================================

DenseMatrix gaussian_matrix(std::size_t rows, std::size_t cols, CounterRng& rng) {
    DenseMatrix m(rows, cols);
    for (float& v : m.data) v = static_cast<float>(rng.next_gaussian());
    return m;
}

DenseMatrix eye(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0f;
    return m;
}

DenseMatrix matrix_from(const std::vector<std::vector<float>>& rows) {
    if (rows.empty()) return {};
    DenseMatrix m(rows.size(), rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != m.cols) {
            throw ShapeError("matrix_from: ragged row " + std::to_string(i));
        }
        for (std::size_t j = 0; j < m.cols; ++j) m.at(i, j) = rows[i][j];
    }
    return m;
}

// ============================================================================
// core kernels
// ============================================================================

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dims disagree, lhs " + shape_str(a) +
                         " vs rhs " + shape_str(b));
    }
    DenseMatrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) matmul_row(a, b, c, i);
    return c;
}

DenseMatrix matmul_threaded(const DenseMatrix& a, const DenseMatrix& b, int threads) {
    if (threads <= 1 || a.rows <= 1) return matmul(a, b);
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dims disagree, lhs " + shape_str(a) +
                         " vs rhs " + shape_str(b));
    }
    DenseMatrix c(a.rows, b.cols);
    std::size_t nworkers =
        std::min<std::size_t>(static_cast<std::size_t>(threads), a.rows);
    std::vector<std::thread> pool;
    pool.reserve(nworkers);
    for (std::size_t w = 0; w < nworkers; ++w) {
        pool.emplace_back([&, w]() {
            // Static row partition: each output element is owned by exactly one
            // worker, so the accumulation order per element never changes.
            for (std::size_t i = w; i < a.rows; i += nworkers) {
                matmul_row(a, b, c, i);
            }
        });
    }
    for (auto& t : pool) t.join();
    return c;
}

std::vector<float> matvec(const DenseMatrix& a, const std::vector<float>& x) {
    if (a.cols != x.size()) {
        throw ShapeError("matvec: matrix " + shape_str(a) + " vs vector length " +
                         std::to_string(x.size()));
    }
    std::vector<float> y(a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const float* arow = a.row(i);
        double acc = 0.0;
        for (std::size_t k = 0; k < a.cols; ++k) {
            acc += static_cast<double>(arow[k]) * static_cast<double>(x[k]);
        }
        y[i] = static_cast<float>(acc);
    }
    return y;
}

DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
    }
    return t;
}

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape("add", a, b);
    DenseMatrix c(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + b.data[i];
    return c;
}

DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape("sub", a, b);
    DenseMatrix c(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] - b.data[i];
    return c;
}

DenseMatrix scale_cols(const DenseMatrix& a, const std::vector<float>& d) {
    if (d.size() != a.cols) {
        throw ShapeError("scale_cols: matrix " + shape_str(a) + " vs diag length " +
                         std::to_string(d.size()));
    }
    DenseMatrix c(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < a.cols; ++j) c.at(i, j) = a.at(i, j) * d[j];
    }
    return c;
}

double frob_norm(const DenseMatrix& a) {
    double acc = 0.0;
    for (float v : a.data) acc += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(acc);
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    require_same_shape("max_abs_diff", a, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        worst = std::max(worst, std::abs(static_cast<double>(a.data[i]) -
                                         static_cast<double>(b.data[i])));
    }
    return worst;
}

bool all_finite(const DenseMatrix& a) {
    for (float v : a.data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace tileq
