#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tileq/infer.hpp"
#include "tileq/matrix.hpp"
#include "tileq/moe.hpp"
#include "tileq/quant.hpp"
#include "tileq/tiler.hpp"

namespace tileq {

// End-to-end orchestration: calibration statistics -> scaling -> feature
// embeddings -> biclustering -> placement -> mosaic -> shared factorization ->
// residual quantization, with per-stage wall times and summary statistics.

enum class ResidualQuantizer { rtn, gptq, vq };

const char* quantizer_name(ResidualQuantizer q);
/// Parse "rtn" / "gptq" / "vq"; anything else throws ParamError.
ResidualQuantizer parse_quantizer(const std::string& name);

/// Every pipeline knob. Zero means "derive from the layer": grid_rows from
/// round(sqrt(K)), grid_cols from ceil(K / grid_rows), feature_rank from
/// max(1, rank / 2).
struct TileQConfig {
    std::size_t grid_rows = 0;   // M
    std::size_t grid_cols = 0;   // N
    std::size_t rank = 32;       // shared rank r
    std::size_t feature_rank = 0;
    double scale_exponent = 0.5; // p in the channel-scaling formula
    int power_iters = 4;
    int bits = 4;
    std::size_t group_size = 128;
    double damping_fraction = 0.01;
    ResidualQuantizer quantizer = ResidualQuantizer::rtn;
    std::size_t sub_dim = 2; // vector-quantizer subvector length
    std::uint64_t seed = 0;

    /// Copy with every auto field filled in for `spec`, validated. Rejected
    /// combinations throw ParamError naming the violated constraint
    /// (grid capacity, rank versus mosaic dimensions, ...).
    TileQConfig resolved(const MoELayerSpec& spec) const;
};

/// Per-channel mean-absolute activation statistics, one row per expert, from
/// routing the calibration tokens through the gate. Experts that saw no
/// tokens get a constant-1 row (neutral scaling); an empty calibration set
/// yields all-1 rows for everyone.
DenseMatrix calibration_mean_abs(const DenseMatrix& calib, const DenseMatrix& gate_weights,
                                 const MoELayerSpec& spec);

struct PipelineReport {
    /// Wall time per stage, keys: scaling, features, cluster, place, mosaic,
    /// decompose, quantize, pack.
    std::map<std::string, double> stage_seconds;
    /// mean_k ||W_k - lowrank_k||_F / ||W_k||_F (shared factorization only).
    double lowrank_mean_relative_error = 0.0;
    /// mean_k ||W_k - (lowrank_k + dequant(residual_k))||_F / ||W_k||_F.
    double mean_relative_error = 0.0;
    /// Sum over routed experts of tr(E H E^T) for the residual quantizer.
    double total_proxy_loss = 0.0;
    std::size_t total_l1_displacement = 0;
};

struct QuantizeResult {
    TileQLayer layer;
    PipelineReport report;
};

/// Run the full pipeline. With an empty calibration set, scaling is neutral
/// (all ones) and the Hessian proxy falls back to the identity, under which
/// the error-compensated quantizer coincides with round-to-nearest.
QuantizeResult quantize_moe(const ExpertSet& experts, const DenseMatrix& gate_weights,
                            const DenseMatrix& calib, const TileQConfig& config);

/// Shared-versus-independent low-rank error comparison. For each expert,
/// `tiled_error` is the relative Frobenius error of the shared tiled
/// reconstruction and `independent_error` that of a codec-free per-expert
/// sketch at the same rank (capped at min(o, i)). mean_gap =
/// mean(tiled_error - independent_error); since a private rank-r factor pair
/// is at least as expressive as any slice of a shared rank-r factorization,
/// the gap isolates the cost of 2D sharing plus the factor codec.
struct ErrorBoundReport {
    std::size_t baseline_rank = 0;
    std::vector<double> tiled_error;
    std::vector<double> independent_error;
    double mean_gap = 0.0;
};

ErrorBoundReport error_bound_report(const ExpertSet& experts, const TiledLowRank& tiled,
                                    int power_iters, std::uint64_t seed);

} // namespace tileq
