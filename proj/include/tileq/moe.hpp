#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "tileq/matrix.hpp"

namespace tileq {

// MoE layer model: layer shape, top-k routing, the full-precision reference
// forward pass (the ground-truth oracle for every quantized path), and a
// synthetic generator that plants 2D cluster structure for validation.

struct MoELayerSpec {
    std::size_t num_experts = 0; // K
    std::size_t top_k = 0;       // experts combined per token
    std::size_t in_dim = 0;      // i
    std::size_t out_dim = 0;     // o
    std::size_t num_shared = 0;  // always-active experts outside routing

    /// Throws ParamError unless 1 <= top_k <= num_experts and dims >= 1.
    void validate() const;
};

/// K routed experts plus optional shared experts, all out_dim x in_dim.
struct ExpertSet {
    MoELayerSpec spec;
    std::vector<DenseMatrix> routed;
    std::vector<DenseMatrix> shared;

    /// Throws ShapeError naming the first matrix that disagrees with spec.
    void validate() const;
};

/// Per-token expert selection: row b holds top_k distinct expert ids and
/// their renormalized gates (nonnegative, summing to 1 per token).
struct RoutingDecision {
    std::size_t batch = 0;
    std::size_t top_k = 0;
    std::vector<std::size_t> expert_ids; // batch * top_k, row-major
    DenseMatrix gates;                   // batch x top_k

    std::size_t id_at(std::size_t b, std::size_t t) const { return expert_ids[b * top_k + t]; }
    float gate_at(std::size_t b, std::size_t t) const { return gates.at(b, t); }
};

/// Top-k routing: scores = x * gate_weights^T, per-token softmax over all K
/// (computed in f64, max-subtracted), select the top_k largest with ties to
/// the lower expert index, renormalize the selected gates to sum 1.
/// Throws ParamError if top_k > K, ShapeError on width mismatch.
RoutingDecision route(const DenseMatrix& x, const DenseMatrix& gate_weights, std::size_t top_k);

/// out[b] = sum_t gates[b,t] * W_{ids[b,t]} * x[b] + sum_s shared[s] * x[b].
/// Each output element accumulates in f64 with a fixed order (selected
/// experts in ascending t, then shared experts) and rounds to f32 once, so
/// repeated runs are bitwise identical. Throws ParamError on an expert id
/// outside [0, K).
DenseMatrix reference_forward(const DenseMatrix& x, const ExpertSet& experts,
                              const RoutingDecision& routing);

/// Synthetic expert set with planted 2D structure: m_rows orthonormal left
/// bases (o x rank), n_cols orthonormal right bases (rank x i); expert k gets
/// grid cell (k / n_cols, k % n_cols) and weight
/// W_k = U_cell * (mix_scale * D_k) * V_cell + noise_sigma * G_k,
/// where D_k is a random positive diagonal, geometrically decaying so every
/// prefix keeps a clear spectral gap -- the planted bases are each expert's
/// singular vectors in a cluster-consistent order.
struct SynthResult {
    ExpertSet experts;
    std::vector<std::pair<std::size_t, std::size_t>> planted; // cell per expert
};

/// Bases, mixers and noise draw from independent derived streams, so the same
/// seed with noise_sigma = 0 reproduces exactly the planted low-rank parts of
/// a noisy run. Throws ParamError if the grid cannot hold K experts or
/// rank > min(i, o).
SynthResult synth_experts(const MoELayerSpec& spec, std::size_t m_rows, std::size_t n_cols,
                          std::size_t rank, float mix_scale, float noise_sigma,
                          std::uint64_t seed);

} // namespace tileq
