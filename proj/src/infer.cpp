#include "tileq/infer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "tileq/errors.hpp"
#include "tileq/rng.hpp"

namespace tileq {

namespace {

thread_local std::uint64_t g_dispatches = 0;
thread_local std::size_t g_workspace_values = 0;

void bump_dispatch() { ++g_dispatches; }

/// Column-block descaling strategy (how diag(s_k)^-1 reaches the gather).
enum class DescaleTier {
    folded, // all experts of the block share one vector; folded into P
    scalar, // per-expert constant vector; one multiply per gathered slice
    general // per-gather r x i multiply on the descaled token
};

bool is_constant_vector(const std::vector<float>& v) {
    for (float x : v) {
        if (x != v[0]) return false;
    }
    return true;
}

} // namespace

void reset_dispatch_count() { g_dispatches = 0; }
std::uint64_t dispatch_count() { return g_dispatches; }
std::size_t last_workspace_values() { return g_workspace_values; }

DenseMatrix qmoe_forward(const DenseMatrix& x, const TileQLayer& layer,
                         const RoutingDecision& routing) {
    ExpertSet materialized;
    materialized.spec = layer.spec;
    materialized.routed.reserve(layer.quantized.size());
    for (const QuantizedExpert& q : layer.quantized) materialized.routed.push_back(dequantize(q));
    materialized.shared.reserve(layer.shared_quantized.size());
    for (const QuantizedExpert& q : layer.shared_quantized) {
        materialized.shared.push_back(dequantize(q));
    }
    return reference_forward(x, materialized, routing);
}

DenseMatrix lotile_forward(const DenseMatrix& x, const TiledLowRank& tiled,
                           const RoutingDecision& routing, int threads) {
    const std::size_t m = tiled.assignment.grid_rows;
    const std::size_t n = tiled.assignment.grid_cols;
    const std::size_t r = tiled.rank;
    const std::size_t o = tiled.out_dim();
    const std::size_t i = tiled.in_dim();
    const std::size_t batch = x.rows;
    if (x.cols != i) {
        throw ShapeError("lotile_forward: token width " + std::to_string(x.cols) +
                         " vs in_dim " + std::to_string(i));
    }
    for (std::size_t k = 0; k < tiled.assignment.placed.size(); ++k) {
        const auto [p, q] = tiled.assignment.placed[k];
        if (p >= m || q >= n) {
            throw FormatError("lotile_forward: expert " + std::to_string(k) + " placed at (" +
                              std::to_string(p) + "," + std::to_string(q) +
                              ") outside grid " + std::to_string(m) + "x" + std::to_string(n));
        }
    }

    // Classify each column block's descaling tier.
    std::vector<DescaleTier> tier(n, DescaleTier::folded);
    std::vector<const std::vector<float>*> block_scaling(n, nullptr);
    for (std::size_t q = 0; q < n; ++q) {
        bool any = false, all_same = true, all_scalar = true;
        const std::vector<float>* first = nullptr;
        for (std::size_t k = 0; k < tiled.assignment.placed.size(); ++k) {
            if (tiled.assignment.placed[k].second != q) continue;
            const std::vector<float>& sk = tiled.scaling.s[k];
            if (!any) {
                first = &sk;
                any = true;
            } else if (sk != *first) {
                all_same = false;
            }
            if (!is_constant_vector(sk)) all_scalar = false;
        }
        if (!any || all_same) {
            tier[q] = DescaleTier::folded;
            block_scaling[q] = first; // null for unused blocks
        } else if (all_scalar) {
            tier[q] = DescaleTier::scalar;
        } else {
            tier[q] = DescaleTier::general;
        }
    }

    // Stacked input-side projection P ((N*r) x i): block q holds
    // diag(singulars) * v_blocks[q], with the scaling inverse folded in for
    // folded-tier blocks.
    DenseMatrix proj(n * r, i);
    for (std::size_t q = 0; q < n; ++q) {
        const DenseMatrix& v = tiled.v_blocks[q].values;
        for (std::size_t j = 0; j < r; ++j) {
            const double sigma = tiled.singulars[j];
            for (std::size_t c = 0; c < i; ++c) {
                double val = sigma * v.at(j, c);
                if (tier[q] == DescaleTier::folded && block_scaling[q] != nullptr) {
                    val /= (*block_scaling[q])[c];
                }
                proj.at(q * r + j, c) = static_cast<float>(val);
            }
        }
    }

    // GEMM 1: all column blocks for the whole batch at once.
    bump_dispatch();
    const DenseMatrix x_proj = matmul_threaded(x, transpose(proj), threads); // B x (N*r)

    // Gather / gate / scatter into the row-block accumulator (f64, fixed
    // order: tokens in order, selected experts ascending t).
    std::vector<double> s_acc(batch * m * r, 0.0);
    std::vector<double> descaled(i);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < routing.top_k; ++t) {
            const std::size_t e = routing.id_at(b, t);
            const double g = routing.gate_at(b, t);
            const auto [p, q] = tiled.assignment.placed[e];
            double* dst = s_acc.data() + (b * m + p) * r;
            switch (tier[q]) {
                case DescaleTier::folded:
                    for (std::size_t j = 0; j < r; ++j) dst[j] += g * double(x_proj.at(b, q * r + j));
                    break;
                case DescaleTier::scalar: {
                    const double inv = 1.0 / tiled.scaling.s[e][0];
                    for (std::size_t j = 0; j < r; ++j) {
                        dst[j] += g * (double(x_proj.at(b, q * r + j)) * inv);
                    }
                    break;
                }
                case DescaleTier::general: {
                    const std::vector<float>& sk = tiled.scaling.s[e];
                    for (std::size_t c = 0; c < i; ++c) descaled[c] = double(x.at(b, c)) / sk[c];
                    for (std::size_t j = 0; j < r; ++j) {
                        const float* prow = proj.row(q * r + j);
                        double acc = 0.0;
                        for (std::size_t c = 0; c < i; ++c) acc += double(prow[c]) * descaled[c];
                        dst[j] += g * acc;
                    }
                    break;
                }
            }
        }
    }
    DenseMatrix s_buf(batch, m * r);
    for (std::size_t t = 0; t < s_buf.data.size(); ++t) {
        s_buf.data[t] = static_cast<float>(s_acc[t]);
    }

    // Stacked output-side factor ((M*r) x o): block p holds u_blocks[p]^T.
    DenseMatrix u_flat(m * r, o);
    for (std::size_t p = 0; p < m; ++p) {
        const DenseMatrix& u = tiled.u_blocks[p].values;
        for (std::size_t j = 0; j < r; ++j) {
            for (std::size_t c = 0; c < o; ++c) u_flat.at(p * r + j, c) = u.at(c, j);
        }
    }

    // GEMM 2: one output product for the whole batch.
    bump_dispatch();
    DenseMatrix out = matmul_threaded(s_buf, u_flat, threads); // B x o

    // Batch-dependent intermediates: x_proj + the f64 accumulator + its f32
    // mirror. Model-sized constants (proj, u_flat) are weights, not workspace.
    g_workspace_values = x_proj.size() + s_acc.size() + s_buf.size();
    return out;
}

DenseMatrix tileq_forward(const DenseMatrix& x, const TileQLayer& layer,
                          const RoutingDecision& routing) {
    return add(qmoe_forward(x, layer, routing), lotile_forward(x, layer.tiled, routing));
}

DenseMatrix baseline_elementwise_forward(const DenseMatrix& x,
                                         const std::vector<LowRankFactor>& per_expert_factors,
                                         const RoutingDecision& routing) {
    if (per_expert_factors.empty()) throw ParamError("elementwise baseline: no factors");
    const std::size_t o = per_expert_factors[0].left.rows;
    const std::size_t i = per_expert_factors[0].right.cols;
    if (x.cols != i) {
        throw ShapeError("elementwise baseline: token width " + std::to_string(x.cols) +
                         " vs factor in_dim " + std::to_string(i));
    }
    DenseMatrix out(x.rows, o);
    std::vector<double> acc(o);
    std::vector<double> mid;
    for (std::size_t b = 0; b < x.rows; ++b) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t t = 0; t < routing.top_k; ++t) {
            const std::size_t e = routing.id_at(b, t);
            if (e >= per_expert_factors.size()) {
                throw ParamError("elementwise baseline: expert id " + std::to_string(e) +
                                 " out of range");
            }
            const LowRankFactor& f = per_expert_factors[e];
            const double g = routing.gate_at(b, t);
            const std::size_t rank = f.singulars.size();
            mid.assign(rank, 0.0);
            bump_dispatch(); // right-factor multiply
            for (std::size_t j = 0; j < rank; ++j) {
                const float* vr = f.right.row(j);
                double dot = 0.0;
                for (std::size_t c = 0; c < i; ++c) dot += double(vr[c]) * x.at(b, c);
                mid[j] = dot * f.singulars[j];
            }
            bump_dispatch(); // left-factor multiply
            for (std::size_t c = 0; c < o; ++c) {
                double dot = 0.0;
                for (std::size_t j = 0; j < rank; ++j) dot += double(f.left.at(c, j)) * mid[j];
                acc[c] += g * dot;
            }
        }
        for (std::size_t c = 0; c < o; ++c) out.at(b, c) = static_cast<float>(acc[c]);
    }
    return out;
}

DenseMatrix baseline_1d_forward(const DenseMatrix& x, const Shared1DFactors& factors,
                                const RoutingDecision& routing) {
    const std::size_t r = factors.shared_proj.rows;
    const std::size_t i = factors.shared_proj.cols;
    if (x.cols != i) {
        throw ShapeError("1d baseline: token width " + std::to_string(x.cols) + " vs in_dim " +
                         std::to_string(i));
    }
    if (factors.per_expert_out.empty()) throw ParamError("1d baseline: no output factors");
    const std::size_t o = factors.per_expert_out[0].rows;

    bump_dispatch(); // shared projection
    const DenseMatrix x_proj = matmul(x, transpose(factors.shared_proj)); // B x r

    DenseMatrix out(x.rows, o);
    std::vector<double> acc(o);
    for (std::size_t b = 0; b < x.rows; ++b) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t t = 0; t < routing.top_k; ++t) {
            const std::size_t e = routing.id_at(b, t);
            if (e >= factors.per_expert_out.size()) {
                throw ParamError("1d baseline: expert id " + std::to_string(e) + " out of range");
            }
            const double g = routing.gate_at(b, t);
            const DenseMatrix& u = factors.per_expert_out[e];
            bump_dispatch(); // per-expert output multiply
            for (std::size_t c = 0; c < o; ++c) {
                double dot = 0.0;
                for (std::size_t j = 0; j < r; ++j) dot += double(u.at(c, j)) * x_proj.at(b, j);
                acc[c] += g * dot;
            }
        }
        for (std::size_t c = 0; c < o; ++c) out.at(b, c) = static_cast<float>(acc[c]);
    }
    return out;
}

std::vector<LowRankFactor> elementwise_factors_from_tiled(const TiledLowRank& tiled) {
    std::vector<LowRankFactor> out;
    const std::size_t k_total = tiled.assignment.placed.size();
    out.reserve(k_total);
    for (std::size_t k = 0; k < k_total; ++k) {
        const auto [p, q] = tiled.assignment.placed[k];
        LowRankFactor f;
        f.left = tiled.u_blocks[p].values;
        f.singulars = tiled.singulars;
        f.right = tiled.v_blocks[q].values;
        const std::vector<float>& sk = tiled.scaling.s[k];
        for (std::size_t j = 0; j < f.right.rows; ++j) {
            for (std::size_t c = 0; c < f.right.cols; ++c) {
                f.right.at(j, c) = static_cast<float>(double(f.right.at(j, c)) / sk[c]);
            }
        }
        out.push_back(std::move(f));
    }
    return out;
}

Shared1DFactors shared_1d_from_tiled_exact(const TiledLowRank& tiled) {
    if (tiled.assignment.grid_cols != 1) {
        throw ParamError("1d factors: tiling has " + std::to_string(tiled.assignment.grid_cols) +
                         " column blocks, need exactly 1");
    }
    const bool shared_scaling = tiled.scaling.uniform();
    for (const std::vector<float>& sk : tiled.scaling.s) {
        if (!shared_scaling && !is_constant_vector(sk)) {
            throw ParamError("1d factors: descaling cannot be shared unless scaling vectors "
                             "are uniform or per-expert constant");
        }
    }
    Shared1DFactors out;
    const DenseMatrix& v = tiled.v_blocks[0].values;
    out.shared_proj = DenseMatrix(tiled.rank, v.cols);
    for (std::size_t j = 0; j < tiled.rank; ++j) {
        for (std::size_t c = 0; c < v.cols; ++c) {
            double val = double(tiled.singulars[j]) * v.at(j, c);
            if (shared_scaling) val /= tiled.scaling.s[0][c];
            out.shared_proj.at(j, c) = static_cast<float>(val);
        }
    }
    const std::size_t k_total = tiled.assignment.placed.size();
    out.per_expert_out.reserve(k_total);
    for (std::size_t k = 0; k < k_total; ++k) {
        DenseMatrix u = tiled.u_blocks[tiled.assignment.placed[k].first].values;
        if (!shared_scaling) { // per-expert scalar commutes to the output side
            const float inv = 1.0f / tiled.scaling.s[k][0];
            for (float& x : u.data) x *= inv;
        }
        out.per_expert_out.push_back(std::move(u));
    }
    return out;
}

Shared1DFactors shared_1d_from_tiled_representative(const TiledLowRank& tiled) {
    Shared1DFactors out;
    const DenseMatrix& v = tiled.v_blocks[0].values;
    out.shared_proj = DenseMatrix(tiled.rank, v.cols);
    for (std::size_t j = 0; j < tiled.rank; ++j) {
        for (std::size_t c = 0; c < v.cols; ++c) {
            out.shared_proj.at(j, c) = static_cast<float>(double(tiled.singulars[j]) * v.at(j, c));
        }
    }
    const std::size_t k_total = tiled.assignment.placed.size();
    out.per_expert_out.reserve(k_total);
    for (std::size_t k = 0; k < k_total; ++k) {
        out.per_expert_out.push_back(tiled.u_blocks[tiled.assignment.placed[k].first].values);
    }
    return out;
}

// ----------------------------------------------------------------------------
// bench harness
// ----------------------------------------------------------------------------

const char* layout_name(BenchLayout layout) {
    switch (layout) {
        case BenchLayout::fused_2d: return "fused_2d";
        case BenchLayout::shared_1d: return "shared_1d";
        case BenchLayout::element_wise: return "element_wise";
        case BenchLayout::dequant_only: return "dequant_only";
    }
    return "unknown";
}

namespace {

double percentile(std::vector<double> values, double p) {
    std::sort(values.begin(), values.end());
    // Nearest-rank on the sorted sample.
    const double pos = p / 100.0 * double(values.size() - 1);
    const std::size_t idx = static_cast<std::size_t>(std::llround(pos));
    return values[std::min(idx, values.size() - 1)];
}

} // namespace

double BenchReport::median_ns() const { return percentile(wall_times_ns, 50.0); }
double BenchReport::p10_ns() const { return percentile(wall_times_ns, 10.0); }
double BenchReport::p90_ns() const { return percentile(wall_times_ns, 90.0); }

std::vector<BenchReport> bench(BenchLayout layout, const TileQLayer& layer,
                               const std::vector<std::size_t>& batches, std::size_t repeats,
                               std::size_t warmup, int threads, std::uint64_t seed) {
    if (repeats < 5) throw ParamError("bench: repeats must be >= 5");
    if (warmup < 1) throw ParamError("bench: warmup must be >= 1");

    // Baseline factors are prepared once, outside every timed region.
    std::vector<LowRankFactor> ew_factors;
    Shared1DFactors sd_factors;
    if (layout == BenchLayout::element_wise) {
        ew_factors = elementwise_factors_from_tiled(layer.tiled);
    } else if (layout == BenchLayout::shared_1d) {
        sd_factors = shared_1d_from_tiled_representative(layer.tiled);
    }

    std::vector<BenchReport> reports;
    reports.reserve(batches.size());
    for (const std::size_t batch : batches) {
        CounterRng rng(CounterRng::derive(seed, batch));
        const DenseMatrix x = gaussian_matrix(batch, layer.spec.in_dim, rng);
        const RoutingDecision routing = route(x, layer.gate_weights, layer.spec.top_k);

        auto run_once = [&]() {
            switch (layout) {
                case BenchLayout::fused_2d:
                    lotile_forward(x, layer.tiled, routing, threads);
                    break;
                case BenchLayout::shared_1d:
                    baseline_1d_forward(x, sd_factors, routing);
                    break;
                case BenchLayout::element_wise:
                    baseline_elementwise_forward(x, ew_factors, routing);
                    break;
                case BenchLayout::dequant_only:
                    for (const QuantizedExpert& q : layer.quantized) dequantize(q);
                    break;
            }
        };

        BenchReport report;
        report.layout = layout;
        report.batch = batch;
        for (std::size_t w = 0; w < warmup; ++w) run_once();
        for (std::size_t rep = 0; rep < repeats; ++rep) {
            reset_dispatch_count();
            const auto t0 = std::chrono::steady_clock::now();
            run_once();
            const auto t1 = std::chrono::steady_clock::now();
            report.wall_times_ns.push_back(
                double(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
            report.dispatches = dispatch_count();
        }
        reports.push_back(std::move(report));
    }
    return reports;
}

} // namespace tileq
