#pragma once

#include <cstddef>
#include <cstdint>

namespace tileq {

// Closed-form storage and compute ledgers for the four layouts. Budgets are
// evaluated in exact rational arithmetic internally and reported as decimals,
// so component sums are exact and small differences are meaningful.

enum class Scheme { basic, per_expert, shared_1d, tileq_2d };

const char* scheme_name(Scheme scheme);

/// Average bits per weight element, itemized. total_avg_bits is exactly the
/// sum of the four components. metadata_bits (placement table and scaling
/// vectors, tileq scheme only) is informational and excluded from the total,
/// mirroring how the reference accounting ignores it.
struct BitBudget {
    Scheme scheme = Scheme::basic;
    double base_bits = 0.0;
    double scale_bits = 0.0;
    double lowrank_factor_bits = 0.0;
    double singular_bits = 0.0;
    double total_avg_bits = 0.0;
    double metadata_bits = 0.0;

    /// Everything beyond the base-plus-scale budget (the low-rank overhead).
    double extra_bits() const { return lowrank_factor_bits + singular_bits; }
};

/// Plain grouped quantization: d + d_fp/g.
BitBudget bits_basic(int d, std::size_t g, int d_fp);

/// Independent per-expert rank-r factors:
/// basic + r*d_factor*(1/i + 1/o) + r^2*d_fp/(o*i).
BitBudget bits_per_expert(int d, std::size_t g, int d_fp, int d_factor, std::size_t r,
                          std::size_t i, std::size_t o);

/// One shared input factor amortized over K experts, per-expert output
/// factors: basic + r*d_factor*(1/(K*i) + 1/o); singular values charged 0
/// (absorbed into the shared factor).
BitBudget bits_1d(int d, std::size_t g, int d_fp, int d_factor, std::size_t r, std::size_t i,
                  std::size_t o, std::size_t k);

/// 2D-tiled sharing: basic + r*d_factor*(M/(K*o) + N/(K*i)) + r^2*d_fp/(K*o*i).
BitBudget bits_tileq(int d, std::size_t g, int d_fp, int d_factor, std::size_t r, std::size_t i,
                     std::size_t o, std::size_t k, std::size_t m, std::size_t n);

/// Exact multiply-add count of one forward pass of the low-rank path:
///   tileq_2d:   B*(i*M*r + N*r*o + topk*r)
///   per_expert: B*topk*(i*r + r*o)
///   shared_1d:  B*(i*r + topk*r*o + topk*r)
///   basic:      B*topk*i*o (dense expert application; no low-rank path)
/// Unused geometry arguments for a scheme are ignored.
std::uint64_t flops_estimate(Scheme scheme, std::size_t b, std::size_t i, std::size_t o,
                             std::size_t r, std::size_t m, std::size_t n, std::size_t k,
                             std::size_t topk);

} // namespace tileq
