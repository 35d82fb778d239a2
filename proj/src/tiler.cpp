#include "tileq/tiler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tileq/errors.hpp"
#include "tileq/kmeans.hpp"
#include "tileq/lowrank.hpp"
#include "tileq/rng.hpp"

namespace tileq {

namespace {

/// Feature sketches use a fixed iteration count, higher than the default
/// decomposition count: the embeddings compare individual singular vectors
/// across experts, so residual mixing between close singular values hurts
/// here in a way it does not for reconstruction error.
constexpr int kFeaturePowerIters = 12;
constexpr std::size_t kBiclusterMaxIters = 50;
constexpr std::size_t kBiclusterRestarts = 8;

/// Singular directions below this fraction of sigma_1 are deflation residue,
/// not structure. Left as-is they would enter the flattened embedding as
/// unit-norm garbage columns with the same weight as real directions.
constexpr float kNumericalRankTol = 1e-6f;

} // namespace

bool ScalingVectors::uniform() const {
    for (std::size_t k = 1; k < s.size(); ++k) {
        if (s[k] != s[0]) return false;
    }
    return true;
}

ScalingVectors compute_scaling(const DenseMatrix& calib_mean_abs, double exponent_p) {
    ScalingVectors out;
    out.s.resize(calib_mean_abs.rows);
    for (std::size_t k = 0; k < calib_mean_abs.rows; ++k) {
        const float* stats = calib_mean_abs.row(k);
        double mx = 0.0, mn = 0.0;
        std::vector<float>& sk = out.s[k];
        sk.resize(calib_mean_abs.cols);
        for (std::size_t j = 0; j < calib_mean_abs.cols; ++j) {
            const float v = stats[j];
            if (!std::isfinite(v)) {
                throw DataError("compute_scaling: non-finite statistic for expert " +
                                std::to_string(k) + " channel " + std::to_string(j));
            }
            const double clamped = std::max(double(v), 1e-6); // dead-channel floor
            sk[j] = static_cast<float>(clamped);              // reused as scratch below
            mx = (j == 0) ? clamped : std::max(mx, clamped);
            mn = (j == 0) ? clamped : std::min(mn, clamped);
        }
        const double denom = std::sqrt(mx * mn);
        for (std::size_t j = 0; j < calib_mean_abs.cols; ++j) {
            const double val = std::pow(double(sk[j]), exponent_p) / denom;
            if (!(val > 0.0) || !std::isfinite(val)) {
                throw DataError("compute_scaling: nonpositive scaling for expert " +
                                std::to_string(k) + " channel " + std::to_string(j));
            }
            sk[j] = static_cast<float>(val);
        }
    }
    return out;
}

FeatureEmbeddings extract_features(const ExpertSet& experts, const ScalingVectors& scaling,
                                   std::size_t feature_rank, std::uint64_t seed) {
    experts.validate();
    if (feature_rank < 1) throw ParamError("extract_features: feature_rank must be >= 1");
    if (scaling.num_experts() != experts.spec.num_experts) {
        throw ShapeError("extract_features: " + std::to_string(scaling.num_experts()) +
                         " scaling vectors for " + std::to_string(experts.spec.num_experts) +
                         " experts");
    }
    const std::size_t k_total = experts.spec.num_experts;
    const std::size_t o = experts.spec.out_dim;
    const std::size_t i = experts.spec.in_dim;

    FeatureEmbeddings out;
    out.u_embeddings = DenseMatrix(k_total, o * feature_rank);
    out.v_embeddings = DenseMatrix(k_total, feature_rank * i);

    // One shared probe seed: identical experts then produce bitwise-identical
    // factors, and similar experts get comparable embeddings (common random
    // numbers), which is what the clustering step consumes.
    const std::uint64_t probe_seed = CounterRng::derive(seed, 1);

    // Fixed reference directions for the sign convention below, shared by all
    // experts and independent of the probe seed so the convention never moves
    // between runs that only change sketching.
    constexpr std::size_t kSignRefs = 3;
    CounterRng ref_rng(0x5169u);
    DenseMatrix left_refs(kSignRefs, o);
    DenseMatrix right_refs(kSignRefs, i);
    for (float& v : left_refs.data) v = static_cast<float>(ref_rng.next_gaussian());
    for (float& v : right_refs.data) v = static_cast<float>(ref_rng.next_gaussian());

    // Returns -1/+1 to multiply the component by, 0 to leave a zero component
    // alone. Majority vote over the reference projections: two sketches of
    // the same direction differ by a small angular error, so any single
    // fixed functional occasionally straddles zero across a pair of experts;
    // the three straddle events are nearly independent, which squares the
    // flip probability. A rule keyed to a single coordinate (first-nonzero
    // or largest entry) is far worse -- coordinates tie all the time.
    auto ref_sign = [](const DenseMatrix& refs, auto&& component_at, std::size_t len) -> float {
        double norm_sq = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            const double x = component_at(t);
            norm_sq += x * x;
        }
        if (norm_sq == 0.0) return 0.0f;
        int vote = 0;
        for (std::size_t t = 0; t < refs.rows; ++t) {
            double dot = 0.0;
            for (std::size_t c = 0; c < len; ++c) dot += double(refs.at(t, c)) * component_at(c);
            vote += dot < 0.0 ? -1 : 1;
        }
        return vote < 0 ? -1.0f : 1.0f;
    };

    auto fill_unit_row = [](DenseMatrix& dst, std::size_t row, const DenseMatrix& src) {
        double nrm = 0.0;
        for (float v : src.data) nrm += double(v) * v;
        nrm = std::sqrt(nrm);
        const double inv = nrm > 0.0 ? 1.0 / nrm : 0.0;
        for (std::size_t t = 0; t < src.data.size(); ++t) {
            dst.at(row, t) = static_cast<float>(src.data[t] * inv);
        }
    };

    for (std::size_t k = 0; k < k_total; ++k) {
        const DenseMatrix scaled = scale_cols(experts.routed[k], scaling.s[k]);
        LowRankFactor f = sketch_lowrank(scaled, std::min(feature_rank, std::min(o, i)),
                                         kFeaturePowerIters, probe_seed);
        // Drop components beyond the numerical rank: on a rank-deficient
        // expert the sketch happily normalizes ~1e-7 leftovers into unit
        // columns that would otherwise swamp the real directions.
        const float sigma0 = f.singulars.empty() ? 0.0f : f.singulars[0];
        if (sigma0 > 0.0f) {
            for (std::size_t j = 0; j < f.singulars.size(); ++j) {
                if (f.singulars[j] > kNumericalRankTol * sigma0) continue;
                for (std::size_t r = 0; r < f.left.rows; ++r) f.left.at(r, j) = 0.0f;
                for (std::size_t c = 0; c < f.right.cols; ++c) f.right.at(j, c) = 0.0f;
            }
        }
        // Sign conventions, applied to each side independently (the factors
        // feed embeddings only, never a reconstruction, so the product need
        // not be preserved; pairing v's sign to u's would leave v effectively
        // random, since experts sharing a right direction need not share any
        // left one).
        for (std::size_t j = 0; j < f.singulars.size(); ++j) {
            const float ls =
                ref_sign(left_refs, [&](std::size_t r) { return f.left.at(r, j); }, o);
            if (ls < 0.0f) {
                for (std::size_t r = 0; r < o; ++r) f.left.at(r, j) = -f.left.at(r, j);
            }
            const float rs =
                ref_sign(right_refs, [&](std::size_t c) { return f.right.at(j, c); }, i);
            if (rs < 0.0f) {
                for (std::size_t c = 0; c < i; ++c) f.right.at(j, c) = -f.right.at(j, c);
            }
        }
        // If feature_rank exceeded min(o, i) the factor is narrower than the
        // embedding row; the tail stays zero, which is still unit-norm safe.
        DenseMatrix left_padded(o, feature_rank);
        DenseMatrix right_padded(feature_rank, i);
        for (std::size_t r = 0; r < o; ++r)
            for (std::size_t j = 0; j < f.singulars.size(); ++j)
                left_padded.at(r, j) = f.left.at(r, j);
        for (std::size_t j = 0; j < f.singulars.size(); ++j)
            for (std::size_t c = 0; c < i; ++c) right_padded.at(j, c) = f.right.at(j, c);
        fill_unit_row(out.u_embeddings, k, left_padded);
        fill_unit_row(out.v_embeddings, k, right_padded);
    }
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> bicluster(const DenseMatrix& u_embeddings,
                                                           const DenseMatrix& v_embeddings,
                                                           std::size_t m, std::size_t n,
                                                           std::uint64_t seed) {
    const std::size_t k_total = u_embeddings.rows;
    if (v_embeddings.rows != k_total) {
        throw ShapeError("bicluster: embedding row counts disagree, " + std::to_string(k_total) +
                         " vs " + std::to_string(v_embeddings.rows));
    }
    if (m < 1 || m > k_total || n < 1 || n > k_total) {
        throw ParamError("bicluster: grid " + std::to_string(m) + "x" + std::to_string(n) +
                         " invalid for " + std::to_string(k_total) + " experts");
    }
    // Best of several seeded inits per side: a single kmeans++ run lands in
    // a split-cluster local minimum often enough to matter, and a wrong
    // cluster here becomes a placement collision downstream.
    auto best_of = [](const DenseMatrix& points, std::size_t clusters, std::uint64_t side_seed) {
        KMeansResult best;
        double best_inertia = 0.0;
        for (std::size_t trial = 0; trial < kBiclusterRestarts; ++trial) {
            KMeansResult run = kmeans(points, clusters, CounterRng::derive(side_seed, trial),
                                      kBiclusterMaxIters);
            const double inertia = run.inertia_history.empty() ? 0.0 : run.inertia_history.back();
            if (trial == 0 || inertia < best_inertia) {
                best_inertia = inertia;
                best = std::move(run);
            }
        }
        return best;
    };
    const KMeansResult rows = best_of(u_embeddings, m, CounterRng::derive(seed, 1));
    const KMeansResult cols = best_of(v_embeddings, n, CounterRng::derive(seed, 2));
    std::vector<std::pair<std::size_t, std::size_t>> ideal(k_total);
    for (std::size_t k = 0; k < k_total; ++k) ideal[k] = {rows.labels[k], cols.labels[k]};
    return ideal;
}

TileAssignment place(const std::vector<std::pair<std::size_t, std::size_t>>& ideal,
                     std::size_t m, std::size_t n) {
    const std::size_t k_total = ideal.size();
    if (m < 1 || n < 1 || m * n < k_total) {
        throw ParamError("place: grid " + std::to_string(m) + "x" + std::to_string(n) +
                         " too small for " + std::to_string(k_total) + " experts");
    }
    TileAssignment out;
    out.grid_rows = m;
    out.grid_cols = n;
    out.ideal = ideal;
    out.placed.resize(k_total);

    std::vector<char> occupied(m * n, 0);
    const std::size_t max_ring = std::max(m, n); // rings beyond this are empty
    for (std::size_t k = 0; k < k_total; ++k) {
        const long long anchor_r = static_cast<long long>(std::min(ideal[k].first, m - 1));
        const long long anchor_c = static_cast<long long>(std::min(ideal[k].second, n - 1));
        bool found = false;
        for (std::size_t ring = 0; ring <= max_ring && !found; ++ring) {
            const long long rho = static_cast<long long>(ring);
            // Row-major scan of the square [anchor-rho, anchor+rho]^2, keeping
            // only cells whose Chebyshev distance is exactly rho.
            for (long long r = anchor_r - rho; r <= anchor_r + rho && !found; ++r) {
                if (r < 0 || r >= static_cast<long long>(m)) continue;
                for (long long c = anchor_c - rho; c <= anchor_c + rho && !found; ++c) {
                    if (c < 0 || c >= static_cast<long long>(n)) continue;
                    if (std::max(std::llabs(r - anchor_r), std::llabs(c - anchor_c)) != rho)
                        continue;
                    if (occupied[static_cast<std::size_t>(r) * n + c]) continue;
                    occupied[static_cast<std::size_t>(r) * n + c] = 1;
                    out.placed[k] = {static_cast<std::size_t>(r), static_cast<std::size_t>(c)};
                    found = true;
                }
            }
        }
        // M*N >= K guarantees a free cell within the scanned rings.
        const auto delta_r = static_cast<long long>(out.placed[k].first) -
                             static_cast<long long>(ideal[k].first);
        const auto delta_c = static_cast<long long>(out.placed[k].second) -
                             static_cast<long long>(ideal[k].second);
        out.total_l1_displacement +=
            static_cast<std::size_t>(std::llabs(delta_r) + std::llabs(delta_c));
    }
    return out;
}

DenseMatrix build_mosaic(const ExpertSet& experts, const ScalingVectors& scaling,
                         const TileAssignment& assignment) {
    experts.validate();
    const std::size_t k_total = experts.spec.num_experts;
    if (assignment.placed.size() != k_total || scaling.num_experts() != k_total) {
        throw ShapeError("build_mosaic: assignment/scaling cover " +
                         std::to_string(assignment.placed.size()) + "/" +
                         std::to_string(scaling.num_experts()) + " experts, set has " +
                         std::to_string(k_total));
    }
    const std::size_t o = experts.spec.out_dim;
    const std::size_t i = experts.spec.in_dim;
    DenseMatrix big(assignment.grid_rows * o, assignment.grid_cols * i, 0.0f);
    for (std::size_t k = 0; k < k_total; ++k) {
        const auto [p, q] = assignment.placed[k];
        const DenseMatrix scaled = scale_cols(experts.routed[k], scaling.s[k]);
        for (std::size_t r = 0; r < o; ++r) {
            float* dst = big.row(p * o + r) + q * i;
            const float* src = scaled.row(r);
            std::copy(src, src + i, dst);
        }
    }
    return big;
}

TiledLowRank decompose_shared(const DenseMatrix& w_big, std::size_t rank, int power_iters,
                              std::uint64_t seed, const TileAssignment& assignment,
                              const ScalingVectors& scaling) {
    const std::size_t m = assignment.grid_rows;
    const std::size_t n = assignment.grid_cols;
    if (m == 0 || n == 0 || w_big.rows % m != 0 || w_big.cols % n != 0) {
        throw ShapeError("decompose_shared: mosaic " + std::to_string(w_big.rows) + "x" +
                         std::to_string(w_big.cols) + " not divisible by grid " +
                         std::to_string(m) + "x" + std::to_string(n));
    }
    if (rank < 1 || rank > std::min(w_big.rows, w_big.cols)) {
        throw ParamError("decompose_shared: rank " + std::to_string(rank) + " outside [1, " +
                         std::to_string(std::min(w_big.rows, w_big.cols)) + "]");
    }
    const std::size_t o = w_big.rows / m;
    const std::size_t i = w_big.cols / n;

    const LowRankFactor f = sketch_lowrank(w_big, rank, power_iters, seed);

    TiledLowRank out;
    out.rank = rank;
    out.assignment = assignment;
    out.scaling = scaling;
    out.singular_bits.resize(rank);
    out.singulars.resize(rank);
    for (std::size_t j = 0; j < rank; ++j) {
        out.singular_bits[j] = float_to_half_bits(f.singulars[j]);
        out.singulars[j] = half_bits_to_float(out.singular_bits[j]);
    }
    out.u_blocks.reserve(m);
    for (std::size_t p = 0; p < m; ++p) {
        DenseMatrix block(o, rank);
        for (std::size_t r = 0; r < o; ++r)
            for (std::size_t j = 0; j < rank; ++j) block.at(r, j) = f.left.at(p * o + r, j);
        out.u_blocks.push_back(encode_block_i8(block));
    }
    out.v_blocks.reserve(n);
    for (std::size_t q = 0; q < n; ++q) {
        DenseMatrix block(rank, i);
        for (std::size_t j = 0; j < rank; ++j)
            for (std::size_t c = 0; c < i; ++c) block.at(j, c) = f.right.at(j, q * i + c);
        out.v_blocks.push_back(encode_block_i8(block));
    }
    return out;
}

DenseMatrix reconstruct_expert(const TiledLowRank& tiled, std::size_t k) {
    if (k >= tiled.assignment.placed.size()) {
        throw ParamError("reconstruct_expert: expert " + std::to_string(k) + " out of range");
    }
    const auto [p, q] = tiled.assignment.placed[k];
    const DenseMatrix& u = tiled.u_blocks[p].values;
    const DenseMatrix& v = tiled.v_blocks[q].values;
    const std::vector<float>& sk = tiled.scaling.s[k];
    const std::size_t o = u.rows;
    const std::size_t i = v.cols;
    DenseMatrix out(o, i);
    for (std::size_t r = 0; r < o; ++r) {
        for (std::size_t c = 0; c < i; ++c) {
            double acc = 0.0;
            for (std::size_t j = 0; j < tiled.rank; ++j) {
                acc += double(u.at(r, j)) * tiled.singulars[j] * v.at(j, c);
            }
            out.at(r, c) = static_cast<float>(acc / sk[c]);
        }
    }
    return out;
}

ResidualSet compute_residuals(const ExpertSet& experts, const TiledLowRank& tiled) {
    experts.validate();
    if (tiled.assignment.placed.size() != experts.spec.num_experts) {
        throw ShapeError("compute_residuals: tiling covers " +
                         std::to_string(tiled.assignment.placed.size()) + " experts, set has " +
                         std::to_string(experts.spec.num_experts));
    }
    ResidualSet out;
    out.residuals.reserve(experts.spec.num_experts);
    for (std::size_t k = 0; k < experts.spec.num_experts; ++k) {
        out.residuals.push_back(sub(experts.routed[k], reconstruct_expert(tiled, k)));
    }
    return out;
}

} // namespace tileq
