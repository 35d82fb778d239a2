#include "tileq/codec.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "tileq/errors.hpp"

namespace tileq {

namespace {

std::uint32_t bits_of(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, sizeof(u));
    return u;
}

float float_of(std::uint32_t u) {
    float v;
    std::memcpy(&v, &u, sizeof(v));
    return v;
}

/// Round-to-nearest-even increment: add one to `base` when the discarded
/// `rem` bits (with `half` the weight of the dropped MSB) round up.
std::uint32_t rne_bump(std::uint32_t base, std::uint32_t rem, std::uint32_t half) {
    if (rem > half || (rem == half && (base & 1u))) return base + 1u;
    return base;
}

} // namespace

// ============================================================================
// binary16
// ============================================================================

std::uint16_t float_to_half_bits(float value) {
    const std::uint32_t u = bits_of(value);
    const std::uint16_t sign = static_cast<std::uint16_t>((u >> 16) & 0x8000u);
    const std::int32_t exp = static_cast<std::int32_t>((u >> 23) & 0xFFu) - 127;
    const std::uint32_t mant = u & 0x7FFFFFu;

    if (exp == 128) { // inf or NaN
        if (mant != 0) return static_cast<std::uint16_t>(sign | 0x7E00u); // quiet NaN
        return static_cast<std::uint16_t>(sign | 0x7C00u);
    }
    if (exp > 15) return static_cast<std::uint16_t>(sign | 0x7C00u); // overflow -> inf
    if (exp >= -14) {
        // Normal half: keep 10 mantissa bits, RNE on the 13 dropped.
        std::uint32_t base = static_cast<std::uint32_t>(exp + 15) << 10 | (mant >> 13);
        base = rne_bump(base, mant & 0x1FFFu, 0x1000u);
        // A mantissa carry walks into the exponent field on its own; it can
        // reach 0x7C00 exactly when the value rounds up to infinity.
        return static_cast<std::uint16_t>(sign | base);
    }
    if (exp < -25) return sign; // underflow to zero (below half of least subnormal)
    // Subnormal half: the implicit bit is restored and the whole 24-bit
    // significand shifted right by the exponent deficit; the result is the
    // subnormal code m in value = m * 2^-24.
    const std::uint32_t full = 0x800000u | mant; // 24-bit significand
    const int shift = -exp - 1;                  // 14..24 bits dropped
    std::uint32_t base = full >> shift;          // surviving bits (<= 10)
    const std::uint32_t dropped = full & ((1u << shift) - 1u);
    const std::uint32_t half = 1u << (shift - 1);
    base = rne_bump(base, dropped, half);
    return static_cast<std::uint16_t>(sign | base); // may carry into 0x0400 (least normal)
}

float half_bits_to_float(std::uint16_t bits) {
    const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
    const std::uint32_t exp = (bits >> 10) & 0x1Fu;
    std::uint32_t mant = bits & 0x3FFu;

    if (exp == 0x1Fu) { // inf / NaN
        return float_of(sign | 0x7F800000u | (mant << 13));
    }
    if (exp != 0) { // normal
        return float_of(sign | ((exp + 112u) << 23) | (mant << 13));
    }
    if (mant == 0) return float_of(sign); // signed zero
    // Subnormal half: renormalize into an f32 normal.
    std::uint32_t e = 113; // biased f32 exponent of 2^-14
    while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --e;
    }
    mant &= 0x3FFu; // drop the restored implicit bit
    return float_of(sign | (e << 23) | (mant << 13));
}

float snap_f16(float value) { return half_bits_to_float(float_to_half_bits(value)); }

// ============================================================================
// 8-bit absmax block codec
// ============================================================================

CodedBlock encode_block_i8(const DenseMatrix& block) {
    CodedBlock out;
    out.rows = block.rows;
    out.cols = block.cols;
    out.codes.resize(block.size());

    float absmax = 0.0f;
    for (float v : block.data) absmax = std::max(absmax, std::fabs(v));
    out.absmax = absmax;

    if (absmax == 0.0f) {
        out.values = DenseMatrix(block.rows, block.cols, 0.0f);
        return out;
    }
    const float scale = absmax / 127.0f;
    for (std::size_t t = 0; t < block.size(); ++t) {
        double q = std::nearbyint(static_cast<double>(block.data[t]) / scale);
        q = std::min(127.0, std::max(-127.0, q));
        out.codes[t] = static_cast<std::int8_t>(q);
    }
    out.values = decode_block_i8(out);
    return out;
}

DenseMatrix decode_block_i8(const CodedBlock& block) {
    DenseMatrix out(block.rows, block.cols);
    const float scale = block.absmax == 0.0f ? 0.0f : block.absmax / 127.0f;
    for (std::size_t t = 0; t < block.size(); ++t) {
        out.data[t] = static_cast<float>(block.codes[t]) * scale;
    }
    return out;
}

// ============================================================================
// bit packing
// ============================================================================

namespace {

void check_width(int bits) {
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8) {
        throw ParamError("bit packing supports widths {2,3,4,8}, got " + std::to_string(bits));
    }
}

} // namespace

std::size_t packed_byte_length(std::size_t count, int bits) {
    check_width(bits);
    return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

std::vector<std::uint8_t> pack_codes(const std::vector<std::uint32_t>& codes, int bits) {
    check_width(bits);
    const std::uint32_t limit = 1u << bits;
    std::vector<std::uint8_t> bytes(packed_byte_length(codes.size(), bits), 0);
    std::size_t bitpos = 0;
    for (std::size_t t = 0; t < codes.size(); ++t) {
        const std::uint32_t c = codes[t];
        if (c >= limit) {
            throw ParamError("code " + std::to_string(c) + " at index " + std::to_string(t) +
                             " does not fit in " + std::to_string(bits) + " bits");
        }
        for (int b = 0; b < bits; ++b, ++bitpos) {
            if (c & (1u << b)) bytes[bitpos >> 3] |= static_cast<std::uint8_t>(1u << (bitpos & 7));
        }
    }
    return bytes;
}

std::vector<std::uint32_t> unpack_codes(const std::vector<std::uint8_t>& bytes, int bits,
                                        std::size_t count) {
    check_width(bits);
    const std::size_t need = packed_byte_length(count, bits);
    if (bytes.size() != need) {
        throw ParamError("packed stream holds " + std::to_string(bytes.size()) +
                         " bytes, expected " + std::to_string(need) + " for " +
                         std::to_string(count) + " codes at " + std::to_string(bits) + " bits");
    }
    std::vector<std::uint32_t> codes(count, 0);
    std::size_t bitpos = 0;
    for (std::size_t t = 0; t < count; ++t) {
        std::uint32_t c = 0;
        for (int b = 0; b < bits; ++b, ++bitpos) {
            if (bytes[bitpos >> 3] & (1u << (bitpos & 7))) c |= 1u << b;
        }
        codes[t] = c;
    }
    // Padding bits beyond the last code must be zero; anything else means the
    // stream was truncated or rewritten sloppily.
    for (; bitpos < bytes.size() * 8; ++bitpos) {
        if (bytes[bitpos >> 3] & (1u << (bitpos & 7))) {
            throw FormatError("packed stream has nonzero padding past code " +
                              std::to_string(count));
        }
    }
    return codes;
}

} // namespace tileq
