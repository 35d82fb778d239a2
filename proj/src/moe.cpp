#include "tileq/moe.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "tileq/errors.hpp"

namespace tileq {

void MoELayerSpec::validate() const {
    if (num_experts < 1) throw ParamError("layer spec: num_experts must be >= 1");
    if (top_k < 1 || top_k > num_experts) {
        throw ParamError("layer spec: top_k " + std::to_string(top_k) + " outside [1, " +
                         std::to_string(num_experts) + "]");
    }
    if (in_dim < 1 || out_dim < 1) throw ParamError("layer spec: dims must be >= 1");
}

void ExpertSet::validate() const {
    spec.validate();
    if (routed.size() != spec.num_experts) {
        throw ShapeError("expert set: " + std::to_string(routed.size()) + " routed experts, spec says " +
                         std::to_string(spec.num_experts));
    }
    if (shared.size() != spec.num_shared) {
        throw ShapeError("expert set: " + std::to_string(shared.size()) + " shared experts, spec says " +
                         std::to_string(spec.num_shared));
    }
    auto check = [&](const DenseMatrix& w, const std::string& name) {
        if (w.rows != spec.out_dim || w.cols != spec.in_dim) {
            throw ShapeError("expert set: " + name + " is " + std::to_string(w.rows) + "x" +
                             std::to_string(w.cols) + ", spec wants " + std::to_string(spec.out_dim) +
                             "x" + std::to_string(spec.in_dim));
        }
    };
    for (std::size_t k = 0; k < routed.size(); ++k) check(routed[k], "routed expert " + std::to_string(k));
    for (std::size_t s = 0; s < shared.size(); ++s) check(shared[s], "shared expert " + std::to_string(s));
}

RoutingDecision route(const DenseMatrix& x, const DenseMatrix& gate_weights, std::size_t top_k) {
    const std::size_t num_experts = gate_weights.rows;
    if (top_k < 1 || top_k > num_experts) {
        throw ParamError("route: top_k " + std::to_string(top_k) + " outside [1, " +
                         std::to_string(num_experts) + "]");
    }
    if (x.cols != gate_weights.cols) {
        throw ShapeError("route: token width " + std::to_string(x.cols) +
                         " vs gate width " + std::to_string(gate_weights.cols));
    }

    const DenseMatrix scores = matmul(x, transpose(gate_weights)); // B x K

    RoutingDecision out;
    out.batch = x.rows;
    out.top_k = top_k;
    out.expert_ids.resize(x.rows * top_k);
    out.gates = DenseMatrix(x.rows, top_k);

    std::vector<double> prob(num_experts);
    std::vector<std::size_t> order(num_experts);
    for (std::size_t b = 0; b < x.rows; ++b) {
        // Softmax over all K in f64, max-subtracted for stability.
        double mx = scores.at(b, 0);
        for (std::size_t k = 1; k < num_experts; ++k) mx = std::max(mx, double(scores.at(b, k)));
        double total = 0.0;
        for (std::size_t k = 0; k < num_experts; ++k) {
            prob[k] = std::exp(double(scores.at(b, k)) - mx);
            total += prob[k];
        }
        for (std::size_t k = 0; k < num_experts; ++k) prob[k] /= total;

        // Top-k by value; ties go to the lower expert index.
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) {
            if (prob[a] != prob[c]) return prob[a] > prob[c];
            return a < c;
        });
        double selected = 0.0;
        for (std::size_t t = 0; t < top_k; ++t) selected += prob[order[t]];
        for (std::size_t t = 0; t < top_k; ++t) {
            out.expert_ids[b * top_k + t] = order[t];
            out.gates.at(b, t) = static_cast<float>(prob[order[t]] / selected);
        }
    }
    return out;
}

DenseMatrix reference_forward(const DenseMatrix& x, const ExpertSet& experts,
                              const RoutingDecision& routing) {
    experts.validate();
    const MoELayerSpec& spec = experts.spec;
    if (x.cols != spec.in_dim) {
        throw ShapeError("reference_forward: token width " + std::to_string(x.cols) +
                         " vs in_dim " + std::to_string(spec.in_dim));
    }
    if (routing.batch != x.rows) {
        throw ShapeError("reference_forward: routing batch " + std::to_string(routing.batch) +
                         " vs input batch " + std::to_string(x.rows));
    }

    DenseMatrix out(x.rows, spec.out_dim);
    std::vector<double> acc(spec.out_dim);
    for (std::size_t b = 0; b < x.rows; ++b) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const float* xb = x.row(b);
        for (std::size_t t = 0; t < routing.top_k; ++t) {
            const std::size_t e = routing.id_at(b, t);
            if (e >= spec.num_experts) {
                throw ParamError("reference_forward: expert id " + std::to_string(e) +
                                 " out of range [0, " + std::to_string(spec.num_experts) + ")");
            }
            const double g = routing.gate_at(b, t);
            const DenseMatrix& w = experts.routed[e];
            for (std::size_t r = 0; r < spec.out_dim; ++r) {
                const float* wr = w.row(r);
                double dot = 0.0;
                for (std::size_t c = 0; c < spec.in_dim; ++c) dot += double(wr[c]) * xb[c];
                acc[r] += g * dot;
            }
        }
        for (const DenseMatrix& w : experts.shared) {
            for (std::size_t r = 0; r < spec.out_dim; ++r) {
                const float* wr = w.row(r);
                double dot = 0.0;
                for (std::size_t c = 0; c < spec.in_dim; ++c) dot += double(wr[c]) * xb[c];
                acc[r] += dot;
            }
        }
        for (std::size_t r = 0; r < spec.out_dim; ++r) out.at(b, r) = static_cast<float>(acc[r]);
    }
    return out;
}

namespace {

/// Orthonormalize the columns of a gaussian draw (modified Gram-Schmidt with
/// a re-orthogonalization pass; f64 throughout). rows >= cols by caller.
DenseMatrix orthonormal_columns(std::size_t rows, std::size_t cols, CounterRng& rng) {
    std::vector<std::vector<double>> q(cols, std::vector<double>(rows));
    for (std::size_t j = 0; j < cols; ++j) {
        for (std::size_t r = 0; r < rows; ++r) q[j][r] = rng.next_gaussian();
    }
    for (std::size_t j = 0; j < cols; ++j) {
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t k = 0; k < j; ++k) {
                double dot = 0.0;
                for (std::size_t r = 0; r < rows; ++r) dot += q[k][r] * q[j][r];
                for (std::size_t r = 0; r < rows; ++r) q[j][r] -= dot * q[k][r];
            }
        }
        double nrm = 0.0;
        for (std::size_t r = 0; r < rows; ++r) nrm += q[j][r] * q[j][r];
        nrm = std::sqrt(nrm);
        // A vanishing column is probability-zero for gaussian draws; fall back
        // to a basis vector to stay total.
        if (nrm <= 1e-300) {
            std::fill(q[j].begin(), q[j].end(), 0.0);
            q[j][j % rows] = 1.0;
        } else {
            for (std::size_t r = 0; r < rows; ++r) q[j][r] /= nrm;
        }
    }
    DenseMatrix out(rows, cols);
    for (std::size_t j = 0; j < cols; ++j)
        for (std::size_t r = 0; r < rows; ++r) out.at(r, j) = static_cast<float>(q[j][r]);
    return out;
}

} // namespace

SynthResult synth_experts(const MoELayerSpec& spec, std::size_t m_rows, std::size_t n_cols,
                          std::size_t rank, float mix_scale, float noise_sigma,
                          std::uint64_t seed) {
    spec.validate();
    if (m_rows < 1 || n_cols < 1 || m_rows * n_cols < spec.num_experts) {
        throw ParamError("synth_experts: grid " + std::to_string(m_rows) + "x" +
                         std::to_string(n_cols) + " too small for " +
                         std::to_string(spec.num_experts) + " experts");
    }
    if (rank < 1 || rank > std::min(spec.in_dim, spec.out_dim)) {
        throw ParamError("synth_experts: rank " + std::to_string(rank) + " outside [1, " +
                         std::to_string(std::min(spec.in_dim, spec.out_dim)) + "]");
    }

    // Independent derived streams keep the planted parts identical whether or
    // not noise is drawn (tests regenerate the noiseless parts this way).
    CounterRng base_rng(CounterRng::derive(seed, 1));
    CounterRng mix_rng(CounterRng::derive(seed, 2));
    CounterRng noise_rng(CounterRng::derive(seed, 3));
    CounterRng shared_rng(CounterRng::derive(seed, 4));

    std::vector<DenseMatrix> u_bases; // o x rank, orthonormal columns
    u_bases.reserve(m_rows);
    for (std::size_t m = 0; m < m_rows; ++m) {
        u_bases.push_back(orthonormal_columns(spec.out_dim, rank, base_rng));
    }
    std::vector<DenseMatrix> v_bases; // rank x i, orthonormal rows
    v_bases.reserve(n_cols);
    for (std::size_t n = 0; n < n_cols; ++n) {
        v_bases.push_back(transpose(orthonormal_columns(spec.in_dim, rank, base_rng)));
    }

    SynthResult out;
    out.experts.spec = spec;
    out.experts.routed.reserve(spec.num_experts);
    out.planted.reserve(spec.num_experts);
    for (std::size_t k = 0; k < spec.num_experts; ++k) {
        const std::size_t cell_m = (k / n_cols) % m_rows;
        const std::size_t cell_n = k % n_cols;
        out.planted.emplace_back(cell_m, cell_n);

        // The mixer sits in the singular-value slot of the planted
        // decomposition, so it is a positive diagonal, descending with a
        // guaranteed spectral gap: the planted bases then ARE each expert's
        // singular vectors, in the same column order for every expert of a
        // cluster. A dense random mixer would rotate the factors inside the
        // shared subspace, and near-ties would leave individual singular
        // vectors ill-defined -- either way no factor-embedding clustering
        // could recover the planted grid. The geometric decay keeps the
        // relative gap uniform so one-vector-at-a-time sketching separates
        // every component, not just the leading ones.
        DenseMatrix mixer(rank, rank);
        for (std::size_t j = 0; j < rank; ++j) {
            const double base = 1.5 * std::pow(0.7, static_cast<double>(j));
            const double jitter = 1.0 + 0.05 * (2.0 * mix_rng.next_unit() - 1.0);
            mixer.at(j, j) = mix_scale * static_cast<float>(base * jitter);
        }

        DenseMatrix w = matmul(matmul(u_bases[cell_m], mixer), v_bases[cell_n]);
        if (noise_sigma != 0.0f) {
            for (float& v : w.data) {
                v += noise_sigma * static_cast<float>(noise_rng.next_gaussian());
            }
        }
        out.experts.routed.push_back(std::move(w));
    }
    for (std::size_t s = 0; s < spec.num_shared; ++s) {
        out.experts.shared.push_back(gaussian_matrix(spec.out_dim, spec.in_dim, shared_rng));
    }
    return out;
}

} // namespace tileq
