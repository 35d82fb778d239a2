#include "tileq/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <type_traits>
#include <utility>

#include "tileq/errors.hpp"
#include "tileq/lowrank.hpp"
#include "tileq/rng.hpp"

namespace tileq {
namespace {

// Stage-seed streams: decorrelate the randomized stages from one another so
// changing, say, the quantizer seed usage never perturbs the clustering.
constexpr std::uint64_t kFeatureStream = 1;
constexpr std::uint64_t kClusterStream = 2;
constexpr std::uint64_t kDecomposeStream = 3;
constexpr std::uint64_t kRoutedVqStream = 4;
constexpr std::uint64_t kSharedVqStream = 5;

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

HessianProxy identity_hessian(std::size_t dim) {
    HessianProxy h;
    h.h = eye(dim);
    h.damping = 0.0;
    h.sample_count = 0;
    return h;
}

QuantizedExpert quantize_one(const DenseMatrix& w, const HessianProxy& h,
                             const TileQConfig& cfg, std::uint64_t vq_seed) {
    switch (cfg.quantizer) {
    case ResidualQuantizer::rtn:
        return quantize_rtn(w, cfg.bits, cfg.group_size);
    case ResidualQuantizer::gptq:
        return quantize_gptq(w, h, cfg.bits, cfg.group_size);
    case ResidualQuantizer::vq:
        return quantize_vq(w, h, cfg.bits, cfg.sub_dim, vq_seed);
    }
    throw ParamError("unknown residual quantizer");
}

double relative_frob_error(const DenseMatrix& w, const DenseMatrix& approx) {
    double denom = frob_norm(w);
    double num = frob_norm(sub(w, approx));
    if (denom == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return num / denom;
}

} // namespace

const char* quantizer_name(ResidualQuantizer q) {
    switch (q) {
    case ResidualQuantizer::rtn: return "rtn";
    case ResidualQuantizer::gptq: return "gptq";
    case ResidualQuantizer::vq: return "vq";
    }
    return "?";
}

ResidualQuantizer parse_quantizer(const std::string& name) {
    if (name == "rtn") return ResidualQuantizer::rtn;
    if (name == "gptq") return ResidualQuantizer::gptq;
    if (name == "vq") return ResidualQuantizer::vq;
    throw ParamError("unknown quantizer mode '" + name + "' (expected rtn, gptq or vq)");
}

TileQConfig TileQConfig::resolved(const MoELayerSpec& spec) const {
    spec.validate();
    TileQConfig cfg = *this;
    const std::size_t k = spec.num_experts;
    if (cfg.grid_rows == 0)
        cfg.grid_rows = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(k))));
    if (cfg.grid_rows == 0) cfg.grid_rows = 1;
    if (cfg.grid_cols == 0) cfg.grid_cols = (k + cfg.grid_rows - 1) / cfg.grid_rows;
    if (cfg.grid_rows * cfg.grid_cols < k)
        throw ParamError("grid capacity violated: grid_rows * grid_cols = " +
                         std::to_string(cfg.grid_rows * cfg.grid_cols) + " < num_experts = " +
                         std::to_string(k));
    if (cfg.rank == 0) throw ParamError("rank must be >= 1");
    const std::size_t mosaic_min =
        std::min(cfg.grid_rows * spec.out_dim, cfg.grid_cols * spec.in_dim);
    if (cfg.rank > mosaic_min)
        throw ParamError("rank exceeds mosaic dimensions: rank = " + std::to_string(cfg.rank) +
                         " > min(M*o, N*i) = " + std::to_string(mosaic_min));
    if (cfg.feature_rank == 0) cfg.feature_rank = std::max<std::size_t>(1, cfg.rank / 2);
    if (cfg.feature_rank > std::min(spec.out_dim, spec.in_dim))
        throw ParamError("feature_rank exceeds expert dimensions");
    if (!(cfg.scale_exponent >= 0.0) || !std::isfinite(cfg.scale_exponent))
        throw ParamError("scale_exponent must be a finite nonnegative number");
    if (cfg.power_iters < 0) throw ParamError("power_iters must be >= 0");
    if (cfg.bits != 2 && cfg.bits != 3 && cfg.bits != 4 && cfg.bits != 8)
        throw ParamError("bits must be one of 2, 3, 4, 8");
    if (cfg.group_size == 0) throw ParamError("group_size must be >= 1");
    if (cfg.sub_dim == 0) throw ParamError("sub_dim must be >= 1");
    if (!(cfg.damping_fraction >= 0.0) || !std::isfinite(cfg.damping_fraction))
        throw ParamError("damping_fraction must be a finite nonnegative number");
    return cfg;
}

DenseMatrix calibration_mean_abs(const DenseMatrix& calib, const DenseMatrix& gate_weights,
                                 const MoELayerSpec& spec) {
    spec.validate();
    if (gate_weights.rows != spec.num_experts || gate_weights.cols != spec.in_dim)
        throw ShapeError("gate_weights must be num_experts x in_dim");
    const std::size_t k = spec.num_experts;
    const std::size_t i = spec.in_dim;
    DenseMatrix stats(k, i, 1.0f);
    if (calib.rows == 0) return stats; // neutral: every expert scales by 1

    if (calib.cols != i) throw ShapeError("calibration tokens must have in_dim columns");
    RoutingDecision routing = route(calib, gate_weights, spec.top_k);
    std::vector<std::vector<double>> sums(k, std::vector<double>(i, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t b = 0; b < calib.rows; ++b) {
        const float* x = calib.row(b);
        for (std::size_t t = 0; t < spec.top_k; ++t) {
            std::size_t e = routing.id_at(b, t);
            ++counts[e];
            for (std::size_t j = 0; j < i; ++j) sums[e][j] += std::abs(static_cast<double>(x[j]));
        }
    }
    for (std::size_t e = 0; e < k; ++e) {
        if (counts[e] == 0) continue; // keep the constant-1 row
        for (std::size_t j = 0; j < i; ++j)
            stats.at(e, j) = static_cast<float>(sums[e][j] / static_cast<double>(counts[e]));
    }
    return stats;
}

QuantizeResult quantize_moe(const ExpertSet& experts, const DenseMatrix& gate_weights,
                            const DenseMatrix& calib, const TileQConfig& config) {
    experts.validate();
    const MoELayerSpec& spec = experts.spec;
    TileQConfig cfg = config.resolved(spec);
    if (gate_weights.rows != spec.num_experts || gate_weights.cols != spec.in_dim)
        throw ShapeError("gate_weights must be num_experts x in_dim");
    if (calib.rows > 0 && calib.cols != spec.in_dim)
        throw ShapeError("calibration tokens must have in_dim columns");

    QuantizeResult out;
    PipelineReport& report = out.report;
    auto timed = [&report](const char* stage, auto&& body) {
        auto start = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(body())>) {
            body();
            report.stage_seconds[stage] = seconds_since(start);
        } else {
            auto value = body();
            report.stage_seconds[stage] = seconds_since(start);
            return value;
        }
    };

    ScalingVectors scaling = timed("scaling", [&] {
        DenseMatrix stats = calibration_mean_abs(calib, gate_weights, spec);
        return compute_scaling(stats, cfg.scale_exponent);
    });
    FeatureEmbeddings features = timed("features", [&] {
        return extract_features(experts, scaling, cfg.feature_rank,
                                CounterRng::derive(cfg.seed, kFeatureStream));
    });
    auto ideal = timed("cluster", [&] {
        return bicluster(features.u_embeddings, features.v_embeddings, cfg.grid_rows,
                         cfg.grid_cols, CounterRng::derive(cfg.seed, kClusterStream));
    });
    TileAssignment assignment = timed("place", [&] {
        return place(ideal, cfg.grid_rows, cfg.grid_cols);
    });
    DenseMatrix mosaic = timed("mosaic", [&] {
        return build_mosaic(experts, scaling, assignment);
    });
    TiledLowRank tiled = timed("decompose", [&] {
        return decompose_shared(mosaic, cfg.rank, cfg.power_iters,
                                CounterRng::derive(cfg.seed, kDecomposeStream), assignment,
                                scaling);
    });
    mosaic = DenseMatrix{}; // largest intermediate; drop before quantization

    HessianProxy hessian =
        calib.rows > 0 ? estimate_hessian(calib, cfg.damping_fraction)
                       : identity_hessian(spec.in_dim);
    std::vector<QuantizedExpert> quantized;
    std::vector<QuantizedExpert> shared_quantized;
    timed("quantize", [&] {
        ResidualSet residuals = compute_residuals(experts, tiled);
        quantized.reserve(spec.num_experts);
        for (std::size_t k = 0; k < spec.num_experts; ++k) {
            std::uint64_t vq_seed =
                CounterRng::derive(CounterRng::derive(cfg.seed, kRoutedVqStream), k);
            quantized.push_back(quantize_one(residuals.residuals[k], hessian, cfg, vq_seed));
            report.total_proxy_loss += proxy_loss(residuals.residuals[k], quantized[k], hessian);
        }
        // Shared experts are always active, so they skip the shared low-rank
        // split and go through the base quantizer whole.
        shared_quantized.reserve(spec.num_shared);
        for (std::size_t s = 0; s < spec.num_shared; ++s) {
            std::uint64_t vq_seed =
                CounterRng::derive(CounterRng::derive(cfg.seed, kSharedVqStream), s);
            shared_quantized.push_back(quantize_one(experts.shared[s], hessian, cfg, vq_seed));
        }
    });

    timed("pack", [&] {
        out.layer.spec = spec;
        out.layer.quantized = std::move(quantized);
        out.layer.shared_quantized = std::move(shared_quantized);
        out.layer.tiled = std::move(tiled);
        out.layer.gate_weights = gate_weights;
        report.total_l1_displacement = out.layer.tiled.assignment.total_l1_displacement;
        double lowrank_sum = 0.0;
        double full_sum = 0.0;
        for (std::size_t k = 0; k < spec.num_experts; ++k) {
            DenseMatrix lowrank = reconstruct_expert(out.layer.tiled, k);
            lowrank_sum += relative_frob_error(experts.routed[k], lowrank);
            DenseMatrix full = add(lowrank, dequantize(out.layer.quantized[k]));
            full_sum += relative_frob_error(experts.routed[k], full);
        }
        report.lowrank_mean_relative_error = lowrank_sum / static_cast<double>(spec.num_experts);
        report.mean_relative_error = full_sum / static_cast<double>(spec.num_experts);
    });
    return out;
}

ErrorBoundReport error_bound_report(const ExpertSet& experts, const TiledLowRank& tiled,
                                    int power_iters, std::uint64_t seed) {
    experts.validate();
    const std::size_t k = experts.spec.num_experts;
    const std::size_t o = experts.spec.out_dim;
    const std::size_t i = experts.spec.in_dim;
    if (tiled.scaling.num_experts() != k || tiled.assignment.placed.size() != k)
        throw ShapeError("tiled factorization does not cover this expert set");

    ErrorBoundReport rep;
    // The independent baseline gets the full shared rank per expert: a
    // codec-free sketch at rank r is at least as expressive as any slice of
    // a shared rank-r factorization, so the gap isolates what 2D sharing
    // (plus the factor codec) costs.
    rep.baseline_rank = std::min(std::min(o, i), tiled.rank);

    rep.tiled_error.resize(k);
    rep.independent_error.resize(k);
    double gap_sum = 0.0;
    for (std::size_t e = 0; e < k; ++e) {
        const DenseMatrix& w = experts.routed[e];
        rep.tiled_error[e] = relative_frob_error(w, reconstruct_expert(tiled, e));
        LowRankFactor f =
            sketch_lowrank(w, rep.baseline_rank, power_iters, CounterRng::derive(seed, e + 1));
        rep.independent_error[e] = relative_frob_error(w, reconstruct(f));
        gap_sum += rep.tiled_error[e] - rep.independent_error[e];
    }
    rep.mean_gap = gap_sum / static_cast<double>(k);
    return rep;
}

} // namespace tileq
