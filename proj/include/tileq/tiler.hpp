#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "tileq/codec.hpp"
#include "tileq/matrix.hpp"
#include "tileq/moe.hpp"

namespace tileq {

// The tiling pipeline: calibration scaling, factor-embedding features,
// biclustering, greedy grid placement, mosaic assembly, shared low-rank
// extraction, and residual computation. Experts are o x i; the scaling vector
// multiplies the input dimension (right side), so the mosaic holds
// W_k * diag(s_k) and reconstruction divides it back out.

/// One strictly positive length-i vector per expert.
struct ScalingVectors {
    std::vector<std::vector<float>> s;

    std::size_t num_experts() const { return s.size(); }
    /// True iff every expert's vector equals expert 0's exactly.
    bool uniform() const;
};

/// Grid geometry plus the ideal (biclustered) and placed (injective) cell of
/// every expert.
struct TileAssignment {
    std::size_t grid_rows = 0; // M
    std::size_t grid_cols = 0; // N
    std::vector<std::pair<std::size_t, std::size_t>> ideal;  // per expert
    std::vector<std::pair<std::size_t, std::size_t>> placed; // per expert, injective
    std::size_t total_l1_displacement = 0;                   // sum ||placed - ideal||_1
};

/// Shared rank-r factorization of the mosaic, sliced per grid row/column.
/// Factor blocks live behind the 8-bit absmax codec and singular values
/// behind binary16; the stored codes/bits are serialization ground truth,
/// the f32 views are what the math uses. Reconstruction of expert k is
/// u_blocks[p_k] * diag(singulars) * v_blocks[q_k] * diag(s_k)^-1 with
/// (p_k, q_k) = assignment.placed[k].
struct TiledLowRank {
    std::size_t rank = 0;
    std::vector<CodedBlock> u_blocks; // M blocks, each o x rank (output side)
    std::vector<CodedBlock> v_blocks; // N blocks, each rank x i (input side)
    std::vector<std::uint16_t> singular_bits; // binary16 patterns, length rank
    std::vector<float> singulars;             // decoded, nonincreasing
    TileAssignment assignment;
    ScalingVectors scaling;

    std::size_t out_dim() const { return u_blocks.empty() ? 0 : u_blocks[0].rows; }
    std::size_t in_dim() const { return v_blocks.empty() ? 0 : v_blocks[0].cols; }
};

/// Full-precision residuals R_k = W_k - reconstructed expert k.
struct ResidualSet {
    std::vector<DenseMatrix> residuals; // K matrices, each o x i
};

// ============================================================================
// pipeline steps
// ============================================================================

/// Step 1: s_k[j] = X_k[j]^p / sqrt(max_j X_k * min_j X_k) from per-channel
/// mean-absolute activation statistics. Entries are clamped to a 1e-6 floor
/// first; non-finite statistics or a non-finite result throw DataError.
/// (Experts that saw no calibration tokens should be given a constant-1 row
/// upstream, which yields the neutral s_k = 1.)
ScalingVectors compute_scaling(const DenseMatrix& calib_mean_abs, double exponent_p);

/// Step 2: per expert, sketch W_k * diag(s_k) at rank r0, canonicalize factor
/// signs, flatten the left factor into row k of u_embeddings (K x o*r0) and
/// the right factor into v_embeddings (K x r0*i), each row normalized to unit
/// Euclidean norm. All experts share one probe stream derived from `seed`, so
/// identical experts get identical embeddings.
struct FeatureEmbeddings {
    DenseMatrix u_embeddings; // K x (o * r0)
    DenseMatrix v_embeddings; // K x (r0 * i)
};
FeatureEmbeddings extract_features(const ExpertSet& experts, const ScalingVectors& scaling,
                                   std::size_t feature_rank, std::uint64_t seed);

/// Step 3: independent kmeans over the two embedding sets; expert k's ideal
/// cell is (row label, column label). Throws ParamError if M or N exceeds K.
std::vector<std::pair<std::size_t, std::size_t>> bicluster(const DenseMatrix& u_embeddings,
                                                           const DenseMatrix& v_embeddings,
                                                           std::size_t m, std::size_t n,
                                                           std::uint64_t seed);

/// Step 4: greedy injective placement. Experts in ascending index order; each
/// anchors at its ideal cell (clamped into the grid) and takes the first free
/// cell scanning concentric Chebyshev rings rho = 0, 1, ... outward, row-major
/// within each ring. Throws ParamError when M*N < K.
TileAssignment place(const std::vector<std::pair<std::size_t, std::size_t>>& ideal,
                     std::size_t m, std::size_t n);

/// Mosaic W_big (M*o) x (N*i): scaled expert W_k * diag(s_k) at block
/// placed[k]; unoccupied tiles stay zero.
DenseMatrix build_mosaic(const ExpertSet& experts, const ScalingVectors& scaling,
                         const TileAssignment& assignment);

/// Shared factorization: sketch W_big at rank r, slice the left factor into M
/// row blocks and the right factor into N column blocks, push blocks through
/// the 8-bit codec and singular values through binary16. Throws ParamError
/// when r exceeds min(M*o, N*i).
TiledLowRank decompose_shared(const DenseMatrix& w_big, std::size_t rank, int power_iters,
                              std::uint64_t seed, const TileAssignment& assignment,
                              const ScalingVectors& scaling);

/// Eq.-12 reconstruction of one expert in the original (unscaled) domain.
DenseMatrix reconstruct_expert(const TiledLowRank& tiled, std::size_t k);

/// Step 5 input: R_k = W_k - reconstruct_expert(tiled, k), full precision.
ResidualSet compute_residuals(const ExpertSet& experts, const TiledLowRank& tiled);

} // namespace tileq
