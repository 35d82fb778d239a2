#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "tileq/codec.hpp"
#include "tileq/errors.hpp"
#include "tileq/lowrank.hpp"
#include "tileq/matrix.hpp"
#include "tileq/quant.hpp"
#include "tileq/rng.hpp"

using namespace tileq;

namespace {

HessianProxy identity_hessian(std::size_t dim) {
    HessianProxy h;
    h.h = eye(dim);
    h.damping = 0.0;
    h.sample_count = 1;
    return h;
}

HessianProxy hessian_from(const DenseMatrix& m) {
    HessianProxy h;
    h.h = m;
    h.damping = 0.0;
    h.sample_count = 1;
    return h;
}

// tr(E H E^T) computed independently of proxy_loss.
double weighted_loss(const DenseMatrix& e, const DenseMatrix& h) {
    const DenseMatrix eh = matmul(e, h);
    double loss = 0.0;
    for (std::size_t r = 0; r < e.rows; ++r) {
        for (std::size_t c = 0; c < e.cols; ++c) {
            loss += static_cast<double>(eh.at(r, c)) * e.at(r, c);
        }
    }
    return loss;
}

} // namespace

// ============================================================================
// estimate_hessian
// ============================================================================

TEST_CASE("hessian: single basis-vector sample is a rank-1 outer product") {
    DenseMatrix calib(1, 4, 0.0f);
    calib.at(0, 0) = 1.0f;
    const HessianProxy h = estimate_hessian(calib, 0.0);
    CHECK(h.sample_count == 1);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(h.h.at(r, c) == ((r == 0 && c == 0) ? 1.0f : 0.0f));
        }
    }
}

TEST_CASE("hessian: isotropic inputs give approximately the identity") {
    CounterRng rng(100);
    const DenseMatrix calib = gaussian_matrix(10000, 4, rng);
    const HessianProxy h = estimate_hessian(calib, 0.0);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(h.h.at(j, j) == doctest::Approx(1.0).epsilon(0.10));
    }
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            if (r != c) CHECK(std::fabs(h.h.at(r, c)) < 0.1);
            CHECK(h.h.at(r, c) == h.h.at(c, r)); // symmetric by construction
        }
    }
}

TEST_CASE("hessian: damping adds exactly lambda to the diagonal") {
    CounterRng rng(101);
    const DenseMatrix calib = gaussian_matrix(50, 6, rng);
    const HessianProxy plain = estimate_hessian(calib, 0.0);
    const HessianProxy damped = estimate_hessian(calib, 0.01);
    double mean_diag = 0.0;
    for (std::size_t j = 0; j < 6; ++j) mean_diag += plain.h.at(j, j);
    mean_diag /= 6.0;
    CHECK(damped.damping == doctest::Approx(0.01 * mean_diag).epsilon(1e-6));
    for (std::size_t r = 0; r < 6; ++r) {
        for (std::size_t c = 0; c < 6; ++c) {
            const double expect = plain.h.at(r, c) + (r == c ? damped.damping : 0.0);
            CHECK(damped.h.at(r, c) == doctest::Approx(expect).epsilon(1e-6));
        }
    }
}

TEST_CASE("hessian: positive semidefinite after damping on small instances") {
    CounterRng rng(102);
    const DenseMatrix calib = gaussian_matrix(3, 5, rng); // T < i: rank-deficient
    const HessianProxy h = estimate_hessian(calib, 0.01);
    // Symmetric PSD: singular values equal eigenvalues; all must be >= 0 and
    // the damped floor keeps the smallest near lambda.
    const LowRankFactor f = exact_svd_truncated(h.h, 5);
    CHECK(f.singulars[4] >= 0.0f);
    CHECK(f.singulars[4] >= 0.5f * static_cast<float>(h.damping));
}

TEST_CASE("hessian: empty calibration set is rejected") {
    CHECK_THROWS_AS(estimate_hessian(DenseMatrix(), 0.01), DataError);
}

// ============================================================================
// quantize_rtn
// ============================================================================

TEST_CASE("rtn: grid-aligned values reproduce exactly") {
    const DenseMatrix r = matrix_from({{0, 1, 2, 3}});
    const QuantizedExpert q = quantize_rtn(r, 2, 4);
    CHECK(max_abs_diff(dequantize(q), r) == 0.0);
}

TEST_CASE("rtn: constant group collapses to the zero point") {
    const DenseMatrix r(2, 6, 1.5f);
    const QuantizedExpert q = quantize_rtn(r, 3, 6);
    const DenseMatrix back = dequantize(q);
    // The range is extended to include 0, so [0, 1.5] quantizes losslessly
    // only up to the f16 scale snap; the error stays far below the range.
    CHECK(max_abs_diff(back, r) < 1e-3);
    const auto codes = unpack_codes(q.packed, 3, q.code_count());
    for (std::size_t t = 1; t < codes.size(); ++t) CHECK(codes[t] == codes[0]);
}

TEST_CASE("rtn: per-element error bounded by half the group scale") {
    CounterRng rng(2);
    const DenseMatrix r = gaussian_matrix(4, 8, rng);
    const QuantizedExpert q = quantize_rtn(r, 3, 8);
    const DenseMatrix back = dequantize(q);
    for (std::size_t row = 0; row < 4; ++row) {
        const float scale = q.grids[row * q.groups_per_row()].scale;
        for (std::size_t c = 0; c < 8; ++c) {
            CHECK(std::fabs(back.at(row, c) - r.at(row, c)) <=
                  0.5f * scale * (1.0f + 1e-3f));
        }
    }
}

TEST_CASE("rtn: grid contract - range includes zero, zero point in range") {
    CounterRng rng(3);
    DenseMatrix r = gaussian_matrix(3, 12, rng);
    for (float& v : r.data) v = std::fabs(v) + 1.0f; // strictly positive input
    const QuantizedExpert q = quantize_rtn(r, 4, 4);
    for (const QuantGrid& grid : q.grids) {
        CHECK(grid.scale > 0.0f);
        CHECK(snap_f16(grid.scale) == grid.scale); // f16-exact storage charge
        CHECK(grid.zero_point >= 0);
        CHECK(grid.zero_point < 16);
        // With all-positive values and the range pinned at zero, code 0
        // decodes to exactly 0.
        CHECK(grid.zero_point == 0);
    }
    CHECK(q.packed.size() == packed_byte_length(q.code_count(), 4));
}

TEST_CASE("rtn: quantizing a dequantized result is a fixed point") {
    CounterRng rng(4);
    const DenseMatrix r = gaussian_matrix(5, 10, rng);
    for (int bits : {2, 4, 8}) {
        const QuantizedExpert q1 = quantize_rtn(r, bits, 5);
        const QuantizedExpert q2 = quantize_rtn(dequantize(q1), bits, 5);
        CHECK(q1.packed == q2.packed);
        CHECK(q1.grids.size() == q2.grids.size());
        for (std::size_t g = 0; g < q1.grids.size(); ++g) {
            CHECK(q1.grids[g].scale == q2.grids[g].scale);
            CHECK(q1.grids[g].zero_point == q2.grids[g].zero_point);
        }
        CHECK(max_abs_diff(dequantize(q2), dequantize(q1)) == 0.0);
    }
}

TEST_CASE("rtn: short final group and domain errors") {
    CounterRng rng(5);
    const DenseMatrix r = gaussian_matrix(2, 7, rng); // 7 = 4 + 3 at g=4
    const QuantizedExpert q = quantize_rtn(r, 2, 4);
    CHECK(q.groups_per_row() == 2);
    CHECK(q.grids.size() == 4);
    CHECK(all_finite(dequantize(q)));

    CHECK_THROWS_AS(quantize_rtn(r, 5, 4), ParamError);
    CHECK_THROWS_AS(quantize_rtn(r, 2, 0), ParamError);
}

// ============================================================================
// quantize_gptq
// ============================================================================

TEST_CASE("gptq: identity Hessian reduces to plain RTN") {
    CounterRng rng(6);
    const DenseMatrix r = gaussian_matrix(4, 9, rng);
    const HessianProxy h = identity_hessian(9);
    const QuantizedExpert rtn = quantize_rtn(r, 3, 3);
    const QuantizedExpert gptq = quantize_gptq(r, h, 3, 3);
    CHECK(gptq.packed == rtn.packed);
    CHECK(std::fabs(proxy_loss(r, gptq, h) - proxy_loss(r, rtn, h)) < 1e-6);
}

TEST_CASE("gptq: crafted correlated case beats RTN and hits the 1x2 optimum") {
    // Group range [0, 2] at d=2 puts codes near {0, 2/3, 4/3, 2}. Column 0's
    // value 0.35 rounds UP (error +0.32), and the strong coupling to the
    // cheap second column makes shifting that column's code down one step
    // profitable -- exactly the move plain RTN cannot make.
    const DenseMatrix r = matrix_from({{0.35f, 2.0f}});
    const DenseMatrix hm = matrix_from({{1.0f, 0.45f}, {0.45f, 0.25f}});
    const HessianProxy h = hessian_from(hm);

    const QuantizedExpert rtn = quantize_rtn(r, 2, 2);
    const QuantizedExpert gptq = quantize_gptq(r, h, 2, 2);
    const double rtn_loss = proxy_loss(r, rtn, h);
    const double gptq_loss = proxy_loss(r, gptq, h);
    CHECK(gptq_loss < rtn_loss - 0.05); // strictly better, not a tie

    // Exhaustive reference over all 16 code pairs on the shared RTN grid.
    const QuantGrid grid = rtn.grids[0];
    double best = std::numeric_limits<double>::infinity();
    for (int c0 = 0; c0 < 4; ++c0) {
        for (int c1 = 0; c1 < 4; ++c1) {
            DenseMatrix e(1, 2);
            e.at(0, 0) = static_cast<float>(c0 - grid.zero_point) * grid.scale - r.at(0, 0);
            e.at(0, 1) = static_cast<float>(c1 - grid.zero_point) * grid.scale - r.at(0, 1);
            best = std::min(best, weighted_loss(e, hm));
        }
    }
    CHECK(gptq_loss <= best + 1e-9);
    CHECK(gptq_loss >= best - 1e-9);
}

TEST_CASE("gptq: proxy loss never exceeds RTN across seeded trials") {
    const int bits_cycle[] = {2, 3, 4, 8};
    for (std::uint64_t trial = 0; trial < 40; ++trial) {
        CounterRng rng(1000 + trial);
        const std::size_t i = 8 + rng.next_below(9);
        const DenseMatrix r = gaussian_matrix(3, i, rng);
        const DenseMatrix calib = gaussian_matrix(32, i, rng);
        const HessianProxy h = estimate_hessian(calib, 0.01);
        const int bits = bits_cycle[trial % 4];
        const std::size_t g = trial % 2 == 0 ? 4 : i;

        const double rtn_loss = proxy_loss(r, quantize_rtn(r, bits, g), h);
        const double gptq_loss = proxy_loss(r, quantize_gptq(r, h, bits, g), h);
        CHECK(gptq_loss <= rtn_loss + 1e-9);
    }
}

TEST_CASE("gptq: degenerate Hessian and shape mismatches are rejected") {
    const DenseMatrix r(2, 4, 1.0f);
    CHECK_THROWS_AS(quantize_gptq(r, hessian_from(DenseMatrix(4, 4, 0.0f)), 2, 4),
                    NumericError);
    CHECK_THROWS_AS(quantize_gptq(r, identity_hessian(5), 2, 4), ShapeError);
}

// ============================================================================
// quantize_vq
// ============================================================================

TEST_CASE("vq: codebook covering the support reconstructs exactly") {
    // 4 distinct f16-exact subvectors repeated across the matrix; a 2-bit
    // codebook (4 entries) must capture them with zero error.
    const std::vector<std::vector<float>> atoms = {
        {0.5f, -1.0f}, {1.5f, 2.0f}, {-0.5f, 0.25f}, {3.0f, -2.0f}};
    DenseMatrix r(4, 8);
    for (std::size_t row = 0; row < 4; ++row) {
        for (std::size_t s = 0; s < 4; ++s) {
            const auto& atom = atoms[(row + s) % 4];
            r.at(row, 2 * s) = atom[0];
            r.at(row, 2 * s + 1) = atom[1];
        }
    }
    const QuantizedExpert q = quantize_vq(r, identity_hessian(8), 2, 2, 9);
    CHECK(q.mode == QuantMode::vector);
    CHECK(q.codebook.rows == 4);
    CHECK(q.codebook.cols == 2);
    CHECK(max_abs_diff(dequantize(q), r) == 0.0);
}

TEST_CASE("vq: scalar codebook beats uniform RTN on heavy-tailed data") {
    // Cubed Gaussians concentrate mass near zero with rare large outliers;
    // kmeans spends its 4 levels adaptively while the uniform grid wastes
    // range on the tail. Single row and a full-width group so both schemes
    // amortize one parameter set over the same 32 values.
    int vq_wins = 0;
    for (std::uint64_t trial = 0; trial < 50; ++trial) {
        CounterRng rng(3000 + trial);
        DenseMatrix r(1, 32);
        for (float& v : r.data) {
            const double g = rng.next_gaussian();
            v = static_cast<float>(g * g * g);
        }
        const HessianProxy h = identity_hessian(32);
        const double rtn_err = frob_norm(sub(dequantize(quantize_rtn(r, 2, 32)), r));
        const double vq_err =
            frob_norm(sub(dequantize(quantize_vq(r, h, 2, 1, trial)), r));
        if (vq_err <= rtn_err) ++vq_wins;
    }
    CHECK(vq_wins >= 40);
}

TEST_CASE("vq: all-zero residual reconstructs to zero") {
    const DenseMatrix r(3, 6, 0.0f);
    const QuantizedExpert q = quantize_vq(r, identity_hessian(6), 2, 2, 4);
    CHECK(frob_norm(dequantize(q)) == 0.0);
}

TEST_CASE("vq: padding, determinism and domain errors") {
    CounterRng rng(8);
    const DenseMatrix r = gaussian_matrix(4, 7, rng); // 7 not divisible by 2
    const HessianProxy h = identity_hessian(7);
    const QuantizedExpert a = quantize_vq(r, h, 3, 2, 5);
    const QuantizedExpert b = quantize_vq(r, h, 3, 2, 5);
    CHECK(a.packed == b.packed);
    CHECK(max_abs_diff(a.codebook, b.codebook) == 0.0);
    CHECK(a.subvectors_per_row() == 4); // final subvector zero-padded
    CHECK(dequantize(a).cols == 7);

    // Codebook entries are f16-snapped for honest 16-bit accounting.
    for (float v : a.codebook.data) CHECK(snap_f16(v) == v);

    // 2^8 codebook entries but only 4*4=16 subvectors available.
    CHECK_THROWS_AS(quantize_vq(r, h, 8, 2, 5), ParamError);
}

// ============================================================================
// dequantize / proxy_loss
// ============================================================================

TEST_CASE("dequantize: zero matrix round-trips to zero") {
    const QuantizedExpert q = quantize_rtn(DenseMatrix(3, 9, 0.0f), 2, 3);
    CHECK(frob_norm(dequantize(q)) == 0.0);
}

TEST_CASE("dequantize: stray padding bits are detected") {
    const DenseMatrix r = matrix_from({{0.5f, 1.0f, -0.25f}});
    QuantizedExpert q = quantize_rtn(r, 2, 3); // 6 bits used, 2 padding
    CHECK_NOTHROW(dequantize(q));
    q.packed.back() |= 0x80;
    CHECK_THROWS_AS(dequantize(q), FormatError);
}

TEST_CASE("proxy_loss: identity Hessian reduces to the squared error") {
    CounterRng rng(10);
    const DenseMatrix r = gaussian_matrix(3, 8, rng);
    const QuantizedExpert q = quantize_rtn(r, 2, 4);
    const DenseMatrix e = sub(r, dequantize(q));
    const double frob_sq = frob_norm(e) * frob_norm(e);
    CHECK(proxy_loss(r, q, identity_hessian(8)) == doctest::Approx(frob_sq).epsilon(1e-6));
}
