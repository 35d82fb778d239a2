#pragma once

#include <cstddef>
#include <cstdint>

#include "tileq/matrix.hpp"

namespace tileq {

// Truncated singular value decompositions. Two implementations share one
// result type: a fast randomized sketch used everywhere in the pipeline, and
// a dense eigensolver-based oracle used by tests to bound the sketch's error.

/// Rank-r factorization w ~ left * diag(singulars) * right.
struct LowRankFactor {
    DenseMatrix left;             // n x r, columns are left singular vectors
    std::vector<float> singulars; // length r, nonincreasing
    DenseMatrix right;            // r x m, rows are right singular vectors
};

/// Randomized rank-r factorization via sequential Gaussian sketching with
/// deflation: each round draws one Gaussian probe, runs `power_iters` rounds
/// of subspace iteration on the working copy, extracts a (sigma, u, v) triple
/// and subtracts it. Rounds share one seeded stream, so on a fixed seed the
/// rank-(r+1) result extends the rank-r one and the residual is monotone
/// nonincreasing in rank. A vanishing probe (already fully deflated input)
/// yields sigma = 0 with unit-basis vectors. Deterministic for fixed
/// (w, rank, power_iters, seed).
///
/// Preconditions: w nonempty, 1 <= rank <= min(w.rows, w.cols),
/// power_iters >= 0; violations throw ParamError.
LowRankFactor sketch_lowrank(const DenseMatrix& w, std::size_t rank, int power_iters,
                             std::uint64_t seed);

/// Dense truncated SVD used as the accuracy oracle: Gram-matrix Jacobi
/// eigensolve followed by a Rayleigh-Ritz refinement pass on the original
/// matrix. Intended for test-sized inputs; throws SizeError when
/// min(rows, cols) > 512. Sign convention: the first nonzero entry of each
/// left singular vector is nonnegative (the paired right vector flips with
/// it). Zero singular values get unit-basis vectors.
///
/// Preconditions: w nonempty, 1 <= rank <= min(w.rows, w.cols).
LowRankFactor exact_svd_truncated(const DenseMatrix& w, std::size_t rank);

/// left * diag(singulars) * right with f64 accumulation per output element.
DenseMatrix reconstruct(const LowRankFactor& f);

/// Apply the oracle's sign convention in place: for each component j, if the
/// first nonzero entry of left column j is negative, flip that column and
/// right row j together (the product is unchanged). Makes factor comparisons
/// across implementations well-defined.
void canonicalize_signs(LowRankFactor& f);

/// ||w - reconstruct(f)||_F / ||w||_F (0/0 counts as 0).
double relative_residual(const DenseMatrix& w, const LowRankFactor& f);

} // namespace tileq
