#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tileq/lowrank.hpp"
#include "tileq/matrix.hpp"
#include "tileq/moe.hpp"
#include "tileq/quant.hpp"
#include "tileq/tiler.hpp"

namespace tileq {

// Runtime execution of quantized layers: the dequantized residual path, the
// fused shared-low-rank path (two GEMMs + gather/scatter regardless of batch
// size or expert fan-out), the two baselines it is compared against, and a
// wall-clock microbenchmark harness.

/// A fully quantized MoE layer: per-expert packed residuals plus the shared
/// tiled factorization and the routing gate matrix.
struct TileQLayer {
    MoELayerSpec spec;
    std::vector<QuantizedExpert> quantized;        // K routed residuals
    std::vector<QuantizedExpert> shared_quantized; // num_shared full experts
    TiledLowRank tiled;
    DenseMatrix gate_weights; // K x i
};

// ----------------------------------------------------------------------------
// dispatch / workspace instrumentation
// ----------------------------------------------------------------------------
// Forward kernels count every distinct matrix-multiply dispatch they issue
// (GEMM or per-token factor multiply; gather/scatter and elementwise work do
// not count). Counters are thread-local; reset before a run, read after.

void reset_dispatch_count();
std::uint64_t dispatch_count();

/// Batch-dependent intermediate values (f32/f64 elements) allocated by the
/// most recent lotile_forward on this thread; model-sized constants (factor
/// matrices) are excluded. Bounded by 2 * B * (M + N) * rank.
std::size_t last_workspace_values();

// ----------------------------------------------------------------------------
// forward paths
// ----------------------------------------------------------------------------

/// Residual path: reference_forward over the dequantized residual experts and
/// dequantized shared experts. Bitwise equal to materializing the experts and
/// calling the reference directly (it does exactly that).
DenseMatrix qmoe_forward(const DenseMatrix& x, const TileQLayer& layer,
                         const RoutingDecision& routing);

/// Fused shared-low-rank path: (1) one projection of the batch against all
/// input-side blocks stacked ((N*r) x i), (2) per (token, selected expert) a
/// gather of the expert's r-slice, gate scaling, and scatter-add into a
/// B x (M*r) accumulator, (3) one product against the stacked output-side
/// blocks. Per-expert descaling by s_k^-1 happens at gather time: folded into
/// the projection when every expert of a column block shares one scaling
/// vector, applied as one scalar when s_k is constant, otherwise via a per-
/// gather r x i multiply on the descaled token (attributed to gather, not
/// dispatch). Exactly two GEMM dispatches for every batch size. Accumulation
/// order is fixed (tokens in order, selected experts in ascending t), so
/// single-threaded runs are bitwise reproducible; `threads` > 1 splits GEMM
/// rows without changing any accumulation order, staying bitwise identical.
/// Throws FormatError if an expert's placed cell lies outside the grid.
DenseMatrix lotile_forward(const DenseMatrix& x, const TiledLowRank& tiled,
                           const RoutingDecision& routing, int threads = 1);

/// Full TileQ forward: qmoe_forward + lotile_forward, summed elementwise.
DenseMatrix tileq_forward(const DenseMatrix& x, const TileQLayer& layer,
                          const RoutingDecision& routing);

/// Per-expert independent low-rank baseline: two small multiplies per
/// (token, selected expert); dispatch count 2 * B * top_k.
DenseMatrix baseline_elementwise_forward(const DenseMatrix& x,
                                         const std::vector<LowRankFactor>& per_expert_factors,
                                         const RoutingDecision& routing);

/// 1D-shared baseline factors: one shared input projection (singular values
/// folded in) plus a per-expert output factor.
struct Shared1DFactors {
    DenseMatrix shared_proj;                 // r x i
    std::vector<DenseMatrix> per_expert_out; // K matrices, each o x r
};

/// One shared projection GEMM, then one o x r multiply per (token, selected
/// expert); dispatch count 1 + B * top_k.
DenseMatrix baseline_1d_forward(const DenseMatrix& x, const Shared1DFactors& factors,
                                const RoutingDecision& routing);

// ----------------------------------------------------------------------------
// baseline construction from a tiling
// ----------------------------------------------------------------------------

/// Per-expert factors encoding exactly the tiled reconstruction (descaling
/// folded into the right factor); semantically matches lotile_forward.
std::vector<LowRankFactor> elementwise_factors_from_tiled(const TiledLowRank& tiled);

/// Exact 1D factors for a single-column tiling (N = 1). Descaling requires a
/// scaling that is shared or per-expert scalar; throws ParamError otherwise.
Shared1DFactors shared_1d_from_tiled_exact(const TiledLowRank& tiled);

/// Shape-representative 1D factors from any grid (block 0 as the shared
/// projection). Latency/dispatch comparisons only; no semantic claim.
Shared1DFactors shared_1d_from_tiled_representative(const TiledLowRank& tiled);

// ----------------------------------------------------------------------------
// microbenchmark harness
// ----------------------------------------------------------------------------

enum class BenchLayout { fused_2d, shared_1d, element_wise, dequant_only };

const char* layout_name(BenchLayout layout);

struct BenchReport {
    BenchLayout layout = BenchLayout::fused_2d;
    std::size_t batch = 0;
    std::vector<double> wall_times_ns; // one entry per timed repeat
    std::uint64_t dispatches = 0;      // matrix-multiply dispatches per forward

    double median_ns() const;
    double p10_ns() const;
    double p90_ns() const;
};

/// Time `layout` over each batch size: `warmup` untimed runs, then `repeats`
/// timed runs of the forward alone (inputs, routing and baseline factors are
/// prepared outside the timed region). Requires repeats >= 5, warmup >= 1.
std::vector<BenchReport> bench(BenchLayout layout, const TileQLayer& layer,
                               const std::vector<std::size_t>& batches, std::size_t repeats,
                               std::size_t warmup, int threads = 1, std::uint64_t seed = 0);

} // namespace tileq
