#include "tileq/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "tileq/errors.hpp"

namespace tileq {

namespace {

// All internal math runs in f64; results round to f32 only at the boundary.

struct DMat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    DMat() = default;
    DMat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

DMat widen(const DenseMatrix& a) {
    DMat out(a.rows, a.cols);
    for (std::size_t t = 0; t < a.data.size(); ++t) out.data[t] = a.data[t];
    return out;
}

std::vector<double> mat_vec(const DMat& a, const std::vector<double>& x) {
    std::vector<double> y(a.rows, 0.0);
    for (std::size_t r = 0; r < a.rows; ++r) {
        double acc = 0.0;
        const double* row = a.data.data() + r * a.cols;
        for (std::size_t c = 0; c < a.cols; ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
    return y;
}

std::vector<double> mat_tvec(const DMat& a, const std::vector<double>& x) {
    std::vector<double> y(a.cols, 0.0);
    for (std::size_t r = 0; r < a.rows; ++r) {
        const double* row = a.data.data() + r * a.cols;
        const double xr = x[r];
        for (std::size_t c = 0; c < a.cols; ++c) y[c] += row[c] * xr;
    }
    return y;
}

double norm2(const std::vector<double>& x) {
    double acc = 0.0;
    for (double v : x) acc += v * v;
    return std::sqrt(acc);
}

void check_rank(const DenseMatrix& w, std::size_t rank, const char* op) {
    if (w.empty()) throw ParamError(std::string(op) + ": input matrix is empty");
    const std::size_t cap = std::min(w.rows, w.cols);
    if (rank < 1 || rank > cap) {
        throw ParamError(std::string(op) + ": rank " + std::to_string(rank) +
                         " outside [1, " + std::to_string(cap) + "] for a " +
                         std::to_string(w.rows) + "x" + std::to_string(w.cols) + " matrix");
    }
}

struct Triple {
    double sigma = 0.0;
    std::vector<double> u; // length rows
    std::vector<double> v; // length cols
};

LowRankFactor pack_triples(std::vector<Triple> triples, std::size_t rows, std::size_t cols) {
    // Nonincreasing sigma; stable so equal values keep generation order.
    std::stable_sort(triples.begin(), triples.end(),
                     [](const Triple& a, const Triple& b) { return a.sigma > b.sigma; });
    LowRankFactor f;
    const std::size_t r = triples.size();
    f.left = DenseMatrix(rows, r);
    f.right = DenseMatrix(r, cols);
    f.singulars.resize(r);
    for (std::size_t j = 0; j < r; ++j) {
        f.singulars[j] = static_cast<float>(triples[j].sigma);
        for (std::size_t i = 0; i < rows; ++i) f.left.at(i, j) = static_cast<float>(triples[j].u[i]);
        for (std::size_t c = 0; c < cols; ++c) f.right.at(j, c) = static_cast<float>(triples[j].v[c]);
    }
    return f;
}

Triple basis_triple(std::size_t j, std::size_t rows, std::size_t cols) {
    Triple t;
    t.u.assign(rows, 0.0);
    t.v.assign(cols, 0.0);
    t.u[j % rows] = 1.0;
    t.v[j % cols] = 1.0;
    return t;
}

// ----------------------------------------------------------------------------
// cyclic Jacobi eigensolver for a symmetric matrix (in place)
// ----------------------------------------------------------------------------

/// Diagonalizes symmetric `a`; on return a's diagonal holds eigenvalues and
/// `vecs` columns the matching eigenvectors. Classic cyclic sweeps; quadratic
/// convergence makes the sweep cap generous.
void jacobi_eigh(DMat& a, DMat& vecs) {
    const std::size_t n = a.rows;
    vecs = DMat(n, n);
    for (std::size_t i = 0; i < n; ++i) vecs.at(i, i) = 1.0;
    if (n < 2) return;

    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::fabs(a.at(i, i)));
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t q = p + 1; q < n; ++q) scale = std::max(scale, std::fabs(a.at(p, q)));
    if (scale == 0.0) return;

    const int max_sweeps = 64;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (std::sqrt(off) <= 1e-15 * scale * n) break;

        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::fabs(apq) <= 1e-300) continue;
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a.at(k, p);
                    const double akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a.at(p, k);
                    const double aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = vecs.at(k, p);
                    const double vkq = vecs.at(k, q);
                    vecs.at(k, p) = c * vkp - s * vkq;
                    vecs.at(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Columns with
/// vanishing norm come back as zero columns (handled by the caller).
void mgs_orthonormalize(DMat& q) {
    const std::size_t n = q.rows;
    const std::size_t r = q.cols;
    for (std::size_t j = 0; j < r; ++j) {
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t k = 0; k < j; ++k) {
                double dot = 0.0;
                for (std::size_t i = 0; i < n; ++i) dot += q.at(i, k) * q.at(i, j);
                for (std::size_t i = 0; i < n; ++i) q.at(i, j) -= dot * q.at(i, k);
            }
        }
        double nrm = 0.0;
        for (std::size_t i = 0; i < n; ++i) nrm += q.at(i, j) * q.at(i, j);
        nrm = std::sqrt(nrm);
        if (nrm <= 1e-300) {
            for (std::size_t i = 0; i < n; ++i) q.at(i, j) = 0.0;
        } else {
            for (std::size_t i = 0; i < n; ++i) q.at(i, j) /= nrm;
        }
    }
}

} // namespace

// ============================================================================
// randomized sketch
// ============================================================================

LowRankFactor sketch_lowrank(const DenseMatrix& w, std::size_t rank, int power_iters,
                             std::uint64_t seed) {
    check_rank(w, rank, "sketch_lowrank");
    if (power_iters < 0) throw ParamError("sketch_lowrank: power_iters must be >= 0");

    const std::size_t rows = w.rows, cols = w.cols;
    DMat work = widen(w); // deflated in place as triples peel off
    CounterRng rng(seed);

    std::vector<Triple> triples;
    triples.reserve(rank);
    for (std::size_t j = 0; j < rank; ++j) {
        std::vector<double> probe(cols);
        for (double& p : probe) p = rng.next_gaussian();

        std::vector<double> q = mat_vec(work, probe);
        double qn = norm2(q);
        bool dead = (qn == 0.0);
        if (!dead) {
            for (double& x : q) x /= qn;
            for (int it = 0; it < power_iters && !dead; ++it) {
                q = mat_vec(work, mat_tvec(work, q));
                qn = norm2(q);
                if (qn == 0.0) {
                    dead = true;
                } else {
                    for (double& x : q) x /= qn;
                }
            }
        }
        if (!dead) {
            std::vector<double> t = mat_tvec(work, q);
            const double sigma = norm2(t);
            if (sigma == 0.0) {
                dead = true;
            } else {
                Triple tr;
                tr.sigma = sigma;
                tr.u = q;
                tr.v = std::move(t);
                for (double& x : tr.v) x /= sigma;
                // Deflate the working copy so the next probe sees the residual.
                for (std::size_t r = 0; r < rows; ++r) {
                    const double ur = sigma * tr.u[r];
                    double* row = work.data.data() + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) row[c] -= ur * tr.v[c];
                }
                triples.push_back(std::move(tr));
            }
        }
        if (dead) triples.push_back(basis_triple(j, rows, cols));
    }
    return pack_triples(std::move(triples), rows, cols);
}

// ============================================================================
// dense oracle
// ============================================================================

LowRankFactor exact_svd_truncated(const DenseMatrix& w, std::size_t rank) {
    check_rank(w, rank, "exact_svd_truncated");
    const std::size_t small = std::min(w.rows, w.cols);
    if (small > 512) {
        throw SizeError("exact_svd_truncated: min dimension " + std::to_string(small) +
                        " exceeds the 512 oracle cap");
    }
    // Work with the tall orientation so the Gram matrix is the small side.
    if (w.rows < w.cols) {
        LowRankFactor t = exact_svd_truncated(transpose(w), rank);
        LowRankFactor f;
        f.singulars = t.singulars;
        f.left = transpose(t.right);
        f.right = transpose(t.left);
        canonicalize_signs(f); // re-apply the convention in the swapped orientation
        return f;
    }

    const std::size_t rows = w.rows, cols = w.cols;
    DMat wd = widen(w);

    // Gram matrix G = W^T W (cols x cols) and its full eigendecomposition.
    DMat gram(cols, cols);
    for (std::size_t a = 0; a < cols; ++a) {
        for (std::size_t b = a; b < cols; ++b) {
            double acc = 0.0;
            for (std::size_t r = 0; r < rows; ++r) acc += wd.at(r, a) * wd.at(r, b);
            gram.at(a, b) = acc;
            gram.at(b, a) = acc;
        }
    }
    DMat gv;
    jacobi_eigh(gram, gv);

    std::vector<std::size_t> order(cols);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return gram.at(a, a) > gram.at(b, b);
    });

    // Rayleigh-Ritz refinement: orthonormalize W * V_r, project, and solve the
    // small problem. This recovers accuracy the squared Gram step loses.
    DMat b(rows, rank);
    for (std::size_t j = 0; j < rank; ++j) {
        const std::size_t src = order[j];
        for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cols; ++c) acc += wd.at(r, c) * gv.at(c, src);
            b.at(r, j) = acc;
        }
    }
    mgs_orthonormalize(b); // b becomes Q (rows x rank)

    DMat cmat(rank, cols); // C = Q^T W
    for (std::size_t j = 0; j < rank; ++j) {
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (std::size_t r = 0; r < rows; ++r) acc += b.at(r, j) * wd.at(r, c);
            cmat.at(j, c) = acc;
        }
    }
    DMat ssmall(rank, rank); // C C^T
    for (std::size_t a = 0; a < rank; ++a) {
        for (std::size_t bb = a; bb < rank; ++bb) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cols; ++c) acc += cmat.at(a, c) * cmat.at(bb, c);
            ssmall.at(a, bb) = acc;
            ssmall.at(bb, a) = acc;
        }
    }
    DMat p;
    jacobi_eigh(ssmall, p);
    std::vector<std::size_t> ord2(rank);
    std::iota(ord2.begin(), ord2.end(), 0);
    std::stable_sort(ord2.begin(), ord2.end(), [&](std::size_t a, std::size_t bb) {
        return ssmall.at(a, a) > ssmall.at(bb, bb);
    });

    std::vector<Triple> triples;
    triples.reserve(rank);
    for (std::size_t j = 0; j < rank; ++j) {
        const std::size_t src = ord2[j];
        Triple t;
        t.u.assign(rows, 0.0);
        t.v.assign(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r) { // u = Q * p_col
            double acc = 0.0;
            for (std::size_t k = 0; k < rank; ++k) acc += b.at(r, k) * p.at(k, src);
            t.u[r] = acc;
        }
        for (std::size_t c = 0; c < cols; ++c) { // unnormalized v = (P^T C)_row
            double acc = 0.0;
            for (std::size_t k = 0; k < rank; ++k) acc += p.at(k, src) * cmat.at(k, c);
            t.v[c] = acc;
        }
        const double sigma = norm2(t.v); // equals sqrt(eigenvalue) up to rounding
        if (sigma == 0.0) {
            triples.push_back(basis_triple(j, rows, cols));
            continue;
        }
        t.sigma = sigma;
        for (double& x : t.v) x /= sigma;
        // Sign convention: first nonzero entry of u nonnegative.
        for (std::size_t r = 0; r < rows; ++r) {
            if (t.u[r] == 0.0) continue;
            if (t.u[r] < 0.0) {
                for (double& x : t.u) x = -x;
                for (double& x : t.v) x = -x;
            }
            break;
        }
        triples.push_back(std::move(t));
    }
    return pack_triples(std::move(triples), rows, cols);
}

// ============================================================================
// shared helpers
// ============================================================================

void canonicalize_signs(LowRankFactor& f) {
    for (std::size_t j = 0; j < f.singulars.size(); ++j) {
        for (std::size_t i = 0; i < f.left.rows; ++i) {
            const float x = f.left.at(i, j);
            if (x == 0.0f) continue;
            if (x < 0.0f) {
                for (std::size_t r = 0; r < f.left.rows; ++r) f.left.at(r, j) = -f.left.at(r, j);
                for (std::size_t c = 0; c < f.right.cols; ++c) f.right.at(j, c) = -f.right.at(j, c);
            }
            break;
        }
    }
}

DenseMatrix reconstruct(const LowRankFactor& f) {
    const std::size_t rows = f.left.rows;
    const std::size_t cols = f.right.cols;
    const std::size_t r = f.singulars.size();
    DenseMatrix out(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (std::size_t j = 0; j < r; ++j) {
                acc += static_cast<double>(f.left.at(i, j)) * f.singulars[j] * f.right.at(j, c);
            }
            out.at(i, c) = static_cast<float>(acc);
        }
    }
    return out;
}

double relative_residual(const DenseMatrix& w, const LowRankFactor& f) {
    const DenseMatrix recon = reconstruct(f);
    const double base = frob_norm(w);
    const double err = frob_norm(sub(w, recon));
    if (base == 0.0) return err == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return err / base;
}

} // namespace tileq
