#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "tileq/codec.hpp"
#include "tileq/errors.hpp"
#include "tileq/matrix.hpp"
#include "tileq/rng.hpp"

using namespace tileq;

// ============================================================================
// binary16 conversion
// ============================================================================
// The bit patterns below were worked out by hand from the IEEE 754 layout
// (1 sign, 5 exponent, 10 mantissa, bias 15) and are frozen: the encoder is
// normative for the artifact format, so any change here is a format change.

TEST_CASE("f16 encode: frozen patterns for exact values") {
    CHECK(float_to_half_bits(0.0f) == 0x0000);
    CHECK(float_to_half_bits(-0.0f) == 0x8000);
    CHECK(float_to_half_bits(1.0f) == 0x3C00);
    CHECK(float_to_half_bits(-1.0f) == 0xBC00);
    CHECK(float_to_half_bits(0.5f) == 0x3800);
    CHECK(float_to_half_bits(2.0f) == 0x4000);
    CHECK(float_to_half_bits(65504.0f) == 0x7BFF); // largest finite half

    // Least normal and the two subnormal landmarks either side of it.
    CHECK(float_to_half_bits(std::ldexp(1.0f, -14)) == 0x0400);
    CHECK(float_to_half_bits(std::ldexp(1.0f, -15)) == 0x0200);
    CHECK(float_to_half_bits(std::ldexp(1.0f, -24)) == 0x0001); // least subnormal
}

TEST_CASE("f16 encode: round-to-nearest-even at the dropped-bit boundary") {
    // 1 + 2^-11 sits exactly between 0x3C00 and 0x3C01; the tie goes to the
    // even code. 1 + 3*2^-11 sits between 0x3C01 and 0x3C02; even again.
    CHECK(float_to_half_bits(1.0f + std::ldexp(1.0f, -11)) == 0x3C00);
    CHECK(float_to_half_bits(1.0f + 3.0f * std::ldexp(1.0f, -11)) == 0x3C02);
    // Just above the tie must round up.
    CHECK(float_to_half_bits(std::nextafterf(1.0f + std::ldexp(1.0f, -11), 2.0f)) == 0x3C01);

    // Same rule in the subnormal range: 2^-25 is half of the least subnormal
    // (ties to zero, the even side), 1.5 * 2^-24 ties up to code 2.
    CHECK(float_to_half_bits(std::ldexp(1.0f, -25)) == 0x0000);
    CHECK(float_to_half_bits(std::nextafterf(std::ldexp(1.0f, -25), 1.0f)) == 0x0001);
    CHECK(float_to_half_bits(1.5f * std::ldexp(1.0f, -24)) == 0x0002);
    // A subnormal that rounds up across the boundary becomes the least normal.
    CHECK(float_to_half_bits(std::nextafterf(std::ldexp(1.0f, -14), 0.0f)) == 0x0400);
}

TEST_CASE("f16 encode: overflow, infinity and NaN") {
    CHECK(float_to_half_bits(1e30f) == 0x7C00);
    CHECK(float_to_half_bits(-1e30f) == 0xFC00);
    // 65520 = 65504 + half an ulp: the RNE carry walks into the exponent and
    // lands exactly on the infinity pattern.
    CHECK(float_to_half_bits(65520.0f) == 0x7C00);
    CHECK(float_to_half_bits(std::nextafterf(65520.0f, 0.0f)) == 0x7BFF);

    const float inf = std::numeric_limits<float>::infinity();
    CHECK(float_to_half_bits(inf) == 0x7C00);
    CHECK(float_to_half_bits(-inf) == 0xFC00);
    CHECK(float_to_half_bits(std::nanf("")) == 0x7E00); // payloads collapse
}

TEST_CASE("f16 decode: frozen values") {
    CHECK(half_bits_to_float(0x3C00) == 1.0f);
    CHECK(half_bits_to_float(0x3800) == 0.5f);
    CHECK(half_bits_to_float(0x7BFF) == 65504.0f);
    CHECK(half_bits_to_float(0x0001) == std::ldexp(1.0f, -24));
    CHECK(half_bits_to_float(0x0400) == std::ldexp(1.0f, -14));
    CHECK(half_bits_to_float(0x8000) == 0.0f);
    CHECK(std::signbit(half_bits_to_float(0x8000)));
    CHECK(std::isinf(half_bits_to_float(0x7C00)));
    CHECK(half_bits_to_float(0xFC00) < 0.0f);
    CHECK(std::isnan(half_bits_to_float(0x7E01)));
}

TEST_CASE("f16 exhaustive: every pattern round-trips through f32") {
    // decode -> encode must reproduce all 63488 non-NaN patterns bit-exactly
    // (halves are a subset of f32); NaN payloads collapse to the quiet NaN.
    for (std::uint32_t b = 0; b <= 0xFFFF; ++b) {
        const std::uint16_t bits = static_cast<std::uint16_t>(b);
        const float f = half_bits_to_float(bits);
        const std::uint16_t back = float_to_half_bits(f);
        const bool is_nan = (bits & 0x7C00) == 0x7C00 && (bits & 0x03FF) != 0;
        if (is_nan) {
            CHECK(back == ((bits & 0x8000) | 0x7E00));
        } else {
            CHECK(back == bits);
        }
    }
}

TEST_CASE("snap_f16 is idempotent and within half an ulp") {
    CounterRng rng(41);
    for (int t = 0; t < 2000; ++t) {
        // Magnitudes spanning subnormal halves up to near overflow.
        const double mag = std::pow(10.0, rng.next_unit() * 12.0 - 8.0);
        const float x = static_cast<float>((rng.next_unit() * 2.0 - 1.0) * mag);
        const float snapped = snap_f16(x);
        CHECK(snap_f16(snapped) == snapped);
        if (std::fabs(x) <= 65504.0f) {
            // Half spacing at |x|: 2^(e-10) around exponent e, at most x/1024.
            const double ulp = std::max(std::ldexp(1.0, -24),
                                        std::fabs(static_cast<double>(x)) / 1024.0);
            CHECK(std::fabs(static_cast<double>(snapped) - x) <= 0.5 * ulp * (1 + 1e-12));
        }
    }
}

// ============================================================================
// 8-bit absmax block codec
// ============================================================================

TEST_CASE("block codec: frozen small block") {
    const DenseMatrix block = matrix_from({{1.0f, -0.5f}, {0.25f, 0.0f}});
    const CodedBlock coded = encode_block_i8(block);
    CHECK(coded.rows == 2);
    CHECK(coded.cols == 2);
    CHECK(coded.absmax == 1.0f);
    CHECK(coded.codes[0] == 127);
    CHECK(coded.codes[1] == -64); // -63.5 ties to even
    CHECK(coded.codes[2] == 32);  // 31.75 rounds up
    CHECK(coded.codes[3] == 0);
    CHECK(coded.values.at(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(coded.values.at(0, 1) == doctest::Approx(-64.0 / 127.0).epsilon(1e-6));
}

TEST_CASE("block codec: all-zero block") {
    const CodedBlock coded = encode_block_i8(DenseMatrix(3, 5, 0.0f));
    CHECK(coded.absmax == 0.0f);
    for (std::int8_t c : coded.codes) CHECK(c == 0);
    for (float v : coded.values.data) CHECK(v == 0.0f);
}

TEST_CASE("block codec: error bound, absmax exactness, decoded cache") {
    CounterRng rng(7);
    for (int t = 0; t < 20; ++t) {
        DenseMatrix block = gaussian_matrix(6, 9, rng);
        const float scale_up = static_cast<float>(std::pow(10.0, t % 5 - 2));
        for (float& v : block.data) v *= scale_up;

        const CodedBlock coded = encode_block_i8(block);
        float expect_absmax = 0.0f;
        for (float v : block.data) expect_absmax = std::max(expect_absmax, std::fabs(v));
        CHECK(coded.absmax == expect_absmax);

        std::int8_t maxcode = 0;
        for (std::int8_t c : coded.codes) maxcode = std::max<std::int8_t>(maxcode, std::abs(c));
        CHECK(maxcode == 127); // the extremal element always keys the grid

        // Quantization step is absmax/127, so the error is at most half that
        // (plus f32 rounding in the scale itself).
        const DenseMatrix decoded = decode_block_i8(coded);
        CHECK(max_abs_diff(block, decoded) <= coded.absmax * (1.0 / 254.0 + 1e-6));

        // `values` is exactly the decoder's output, not a separate path.
        CHECK(max_abs_diff(decoded, coded.values) == 0.0);
    }
}

// ============================================================================
// sub-byte packing
// ============================================================================

TEST_CASE("pack_codes: frozen LSB-first layouts") {
    CHECK(pack_codes({1, 2, 3}, 2) == std::vector<std::uint8_t>{0x39});
    CHECK(pack_codes({5, 3}, 3) == std::vector<std::uint8_t>{0x1D});
    CHECK(pack_codes({0xA, 0x5}, 4) == std::vector<std::uint8_t>{0x5A});
    CHECK(pack_codes({0xAB}, 8) == std::vector<std::uint8_t>{0xAB});
    // 5 codes at 3 bits = 15 bits: the final bit of byte 1 is padding.
    CHECK(packed_byte_length(5, 3) == 2);
    CHECK(packed_byte_length(4, 2) == 1);
    CHECK(packed_byte_length(0, 4) == 0);
}

TEST_CASE("pack/unpack round-trips every supported width") {
    CounterRng rng(13);
    for (int bits : {2, 3, 4, 8}) {
        for (std::size_t count : {std::size_t{1}, std::size_t{7}, std::size_t{64},
                                  std::size_t{129}}) {
            std::vector<std::uint32_t> codes(count);
            for (auto& c : codes) c = static_cast<std::uint32_t>(rng.next_below(1u << bits));
            const auto bytes = pack_codes(codes, bits);
            CHECK(bytes.size() == packed_byte_length(count, bits));
            CHECK(unpack_codes(bytes, bits, count) == codes);
        }
    }
}

TEST_CASE("pack/unpack rejects malformed input") {
    CHECK_THROWS_AS(pack_codes({0}, 5), ParamError);
    CHECK_THROWS_AS(pack_codes({4}, 2), ParamError); // 4 needs 3 bits
    CHECK_THROWS_AS(unpack_codes({0x00, 0x00}, 2, 3), ParamError); // 3 codes fit in 1 byte

    // A stray bit in the padding region means corruption, not a silent zero.
    auto bytes = pack_codes({1, 1, 1}, 2); // 6 bits used, 2 padding
    bytes[0] |= 0x80;
    CHECK_THROWS_AS(unpack_codes(bytes, 2, 3), FormatError);

    // The same stream with the padding clean is fine.
    CHECK(unpack_codes(pack_codes({1, 1, 1}, 2), 2, 3) == std::vector<std::uint32_t>{1, 1, 1});
}
