#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>

#include "tileq/accounting.hpp"
#include "tileq/errors.hpp"
#include "tileq/rng.hpp"

using namespace tileq;

namespace {

// Component sums are computed in exact rational arithmetic, so the reported
// total must match re-adding the parts to the last bit of the double.
void check_internal_consistency(const BitBudget& b) {
    CHECK(b.base_bits >= 0.0);
    CHECK(b.scale_bits >= 0.0);
    CHECK(b.lowrank_factor_bits >= 0.0);
    CHECK(b.singular_bits >= 0.0);
    CHECK(b.metadata_bits >= 0.0);
    const double sum = b.base_bits + b.scale_bits + b.lowrank_factor_bits + b.singular_bits;
    CHECK(b.total_avg_bits == doctest::Approx(sum).epsilon(1e-12));
}

} // namespace

// ============================================================================
// bits_basic
// ============================================================================

TEST_CASE("basic budget: d + d_fp/g") {
    const BitBudget b2 = bits_basic(2, 128, 16);
    CHECK(b2.base_bits == 2.0);
    CHECK(b2.scale_bits == 0.125);
    CHECK(b2.lowrank_factor_bits == 0.0);
    CHECK(b2.singular_bits == 0.0);
    CHECK(b2.total_avg_bits == 2.125);
    CHECK(b2.extra_bits() == 0.0);
    CHECK(b2.metadata_bits == 0.0);
    check_internal_consistency(b2);

    CHECK(bits_basic(3, 128, 16).total_avg_bits == 3.125);

    // One scale for the whole 768 x 2048 expert: scale cost vanishes.
    const BitBudget wide = bits_basic(2, 768 * 2048, 16);
    CHECK(wide.scale_bits < 1e-4);
    CHECK(wide.total_avg_bits == doctest::Approx(2.0).epsilon(1e-4));
}

// ============================================================================
// bits_per_expert
// ============================================================================

TEST_CASE("per-expert budget matches the exact rational values") {
    const BitBudget b = bits_per_expert(2, 128, 16, 8, 32, 768, 2048);
    CHECK(b.lowrank_factor_bits == doctest::Approx(11.0 / 24.0).epsilon(1e-12));
    CHECK(b.singular_bits == doctest::Approx(1.0 / 96.0).epsilon(1e-12));
    CHECK(b.extra_bits() == doctest::Approx(0.46875).epsilon(1e-12));
    check_internal_consistency(b);

    // Doubling factor precision doubles the factor term only.
    const BitBudget wide = bits_per_expert(2, 128, 16, 16, 32, 768, 2048);
    CHECK(wide.extra_bits() == doctest::Approx(89.0 / 96.0).epsilon(1e-12));

    // Rank 0 degenerates to the basic budget.
    const BitBudget r0 = bits_per_expert(2, 128, 16, 8, 0, 768, 2048);
    CHECK(r0.extra_bits() == 0.0);
    CHECK(r0.total_avg_bits == bits_basic(2, 128, 16).total_avg_bits);
}

// ============================================================================
// bits_1d
// ============================================================================

TEST_CASE("1D-shared budget amortizes the input factor over K") {
    const BitBudget b = bits_1d(2, 128, 16, 8, 32, 768, 2048, 128);
    CHECK(b.lowrank_factor_bits == doctest::Approx(49.0 / 384.0).epsilon(1e-12));
    CHECK(b.singular_bits == 0.0); // absorbed into the shared factor
    check_internal_consistency(b);

    // K = 1: identical to per-expert minus the singular-value term.
    const BitBudget k1 = bits_1d(2, 128, 16, 8, 32, 768, 2048, 1);
    const BitBudget pe = bits_per_expert(2, 128, 16, 8, 32, 768, 2048);
    CHECK(k1.lowrank_factor_bits == doctest::Approx(pe.lowrank_factor_bits).epsilon(1e-12));

    // K -> infinity: only the unshared output factor survives.
    const BitBudget huge = bits_1d(2, 128, 16, 8, 32, 768, 2048, 1000000000);
    CHECK(huge.extra_bits() == doctest::Approx(0.125).epsilon(1e-8));
}

// ============================================================================
// bits_tileq
// ============================================================================

TEST_CASE("2D-tiled budget: the reference parameter set") {
    // K=128, i=768, o=2048, r=32, M=N=12, d_factor=8, d_fp=16.
    const BitBudget b = bits_tileq(2, 128, 16, 8, 32, 768, 2048, 128, 12, 12);
    CHECK(b.lowrank_factor_bits == 11.0 / 256.0); // 0.04296875, dyadic: exact
    CHECK(b.singular_bits == doctest::Approx(1.0 / 12288.0).epsilon(1e-12));
    CHECK(b.extra_bits() == doctest::Approx(529.0 / 12288.0).epsilon(1e-12));
    CHECK(b.total_avg_bits == doctest::Approx(2.125 + 529.0 / 12288.0).epsilon(1e-12));
    check_internal_consistency(b);

    // Placement pairs (two u16) and f32 scaling rows, reported separately and
    // never folded into the total.
    CHECK(b.metadata_bits ==
          doctest::Approx(32.0 / 2048.0 + 32.0 / (768.0 * 2048.0)).epsilon(1e-12));

    // Overhead ratios against the other schemes at the same parameters.
    const double pe = bits_per_expert(2, 128, 16, 8, 32, 768, 2048).extra_bits();
    const double sd = bits_1d(2, 128, 16, 8, 32, 768, 2048, 128).extra_bits();
    CHECK(pe / b.extra_bits() == doctest::Approx(10.888).epsilon(1e-3));
    CHECK(sd / b.extra_bits() == doctest::Approx(2.964).epsilon(1e-3));
}

TEST_CASE("2D-tiled budget: degenerate 1x1 grid equals per-expert") {
    const BitBudget tq = bits_tileq(3, 64, 16, 8, 16, 256, 512, 1, 1, 1);
    const BitBudget pe = bits_per_expert(3, 64, 16, 8, 16, 256, 512);
    CHECK(tq.lowrank_factor_bits == doctest::Approx(pe.lowrank_factor_bits).epsilon(1e-12));
    CHECK(tq.singular_bits == doctest::Approx(pe.singular_bits).epsilon(1e-12));
    CHECK(tq.total_avg_bits == doctest::Approx(pe.total_avg_bits).epsilon(1e-12));
}

// ============================================================================
// scheme ordering and scaling laws
// ============================================================================

TEST_CASE("overhead ordering tileq <= 1d <= per-expert over realistic shapes") {
    // Domain: K in [16, 512], i in [512, 8192], o/i in [1/3, 2.5], square-ish
    // grid M = round(sqrt(K)), N = ceil(K/M). Outside this regime the
    // ordering can flip (see the counterexample below).
    CounterRng rng(2024);
    const std::size_t ranks[] = {8, 16, 32, 64};
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 16 + rng.next_below(497);
        const std::size_t i = 512 + rng.next_below(7681);
        const double ratio = 1.0 / 3.0 + rng.next_unit() * (2.5 - 1.0 / 3.0);
        const std::size_t o = static_cast<std::size_t>(static_cast<double>(i) * ratio);
        const std::size_t r = ranks[rng.next_below(4)];
        const int d = 2 + static_cast<int>(rng.next_below(3));
        const std::size_t g = rng.next_below(2) == 0 ? 64 : 128;
        const std::size_t m =
            static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(k))));
        const std::size_t n = (k + m - 1) / m;

        const double pe = bits_per_expert(d, g, 16, 8, r, i, o).extra_bits();
        const double sd = bits_1d(d, g, 16, 8, r, i, o, k).extra_bits();
        const double tq = bits_tileq(d, g, 16, 8, r, i, o, k, m, n).extra_bits();
        CAPTURE(k);
        CAPTURE(i);
        CAPTURE(o);
        CHECK(tq <= sd + 1e-12);
        CHECK(sd <= pe + 1e-12);
    }
}

TEST_CASE("ordering counterexample: tiny K with output-heavy experts") {
    // K=4 leaves almost nothing to amortize: the M output-side blocks cost
    // M/(K*o) each and overtake 1D's single shared input factor when o >> i.
    const double sd = bits_1d(2, 128, 16, 8, 32, 512, 4096, 4).extra_bits();
    const double tq = bits_tileq(2, 128, 16, 8, 32, 512, 4096, 4, 2, 2).extra_bits();
    CHECK(tq > sd);
}

TEST_CASE("per-expert / tileq overhead ratio grows like sqrt(K)") {
    // Square experts, square grid, i large enough that the r^2 terms vanish.
    for (std::size_t k : {std::size_t{16}, std::size_t{64}, std::size_t{256}}) {
        const std::size_t root = static_cast<std::size_t>(std::llround(std::sqrt(double(k))));
        const double pe = bits_per_expert(2, 128, 16, 8, 32, 4096, 4096).extra_bits();
        const double tq =
            bits_tileq(2, 128, 16, 8, 32, 4096, 4096, k, root, root).extra_bits();
        CHECK(pe / tq == doctest::Approx(std::sqrt(double(k))).epsilon(0.15));
    }
}

// ============================================================================
// flops_estimate
// ============================================================================

TEST_CASE("flops: frozen counts for the reference shape") {
    // B=16, i=768, o=2048, r=32, M=N=12, topk=8.
    CHECK(flops_estimate(Scheme::tileq_2d, 16, 768, 2048, 32, 12, 12, 128, 8) ==
          17305600ULL);
    CHECK(flops_estimate(Scheme::per_expert, 16, 768, 2048, 32, 12, 12, 128, 8) ==
          11534336ULL);
    CHECK(flops_estimate(Scheme::shared_1d, 16, 768, 2048, 32, 12, 12, 128, 8) ==
          8785920ULL);
    CHECK(flops_estimate(Scheme::basic, 16, 768, 2048, 32, 12, 12, 128, 8) ==
          201326592ULL);
}

TEST_CASE("flops: degenerate single-token single-expert tiling") {
    CHECK(flops_estimate(Scheme::tileq_2d, 1, 768, 2048, 32, 1, 1, 1, 1) ==
          768ULL * 32 + 32 * 2048 + 32);
}

// ============================================================================
// names and validation
// ============================================================================

TEST_CASE("scheme names match the report spellings") {
    CHECK(std::string(scheme_name(Scheme::basic)) == "basic");
    CHECK(std::string(scheme_name(Scheme::per_expert)) == "per_expert");
    CHECK(std::string(scheme_name(Scheme::shared_1d)) == "shared_1d");
    CHECK(std::string(scheme_name(Scheme::tileq_2d)) == "tileq_2d");
}

TEST_CASE("budget parameter validation") {
    CHECK_THROWS_AS(bits_basic(0, 128, 16), ParamError);
    CHECK_THROWS_AS(bits_basic(2, 0, 16), ParamError);
    CHECK_THROWS_AS(bits_per_expert(2, 128, 16, 0, 32, 768, 2048), ParamError);
    CHECK_THROWS_AS(bits_per_expert(2, 128, 16, 8, 32, 0, 2048), ParamError);
    CHECK_THROWS_AS(bits_tileq(2, 128, 16, 8, 32, 768, 2048, 0, 12, 12), ParamError);
    CHECK_THROWS_AS(bits_tileq(2, 128, 16, 8, 32, 768, 2048, 128, 0, 12), ParamError);
}
