#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tileq/matrix.hpp"

namespace tileq {

// Wire-level primitives every serialized number passes through: IEEE binary16
// conversion, the 8-bit absmax block codec used for shared factors, and the
// little-endian bit packer for sub-byte quantization codes. These definitions
// are normative for the artifact format (see docs/format.md), so all rounding
// rules are spelled out and covered by frozen-value tests.

// ============================================================================
// IEEE 754 binary16
// ============================================================================

/// f32 -> binary16 bit pattern, round-to-nearest-even. Overflow saturates to
/// infinity; subnormal halves are produced where needed; NaN payloads collapse
/// to a quiet NaN.
std::uint16_t float_to_half_bits(float value);

/// binary16 bit pattern -> f32 (exact; every half is representable in f32).
float half_bits_to_float(std::uint16_t bits);

/// Round-trip through binary16: the nearest f16-representable value.
/// Idempotent: snap_f16(snap_f16(x)) == snap_f16(x) bitwise.
float snap_f16(float value);

// ============================================================================
// 8-bit absmax block codec (shared low-rank factors)
// ============================================================================

/// One factor block on the wire: symmetric int8 codes plus a single f32
/// absolute maximum. The stored codes/absmax are the ground truth; `values`
/// is the decoded f32 matrix derived from them (kept alongside so the math
/// path never re-derives, and writers never re-encode -- re-encoding decoded
/// floats can move absmax by one ulp and break byte-identical round trips).
struct CodedBlock {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> codes; // rows * cols, row-major
    float absmax = 0.0f;
    DenseMatrix values; // decoded floats: code * (absmax / 127)

    std::size_t size() const { return rows * cols; }
};

/// Encode a block: scale = absmax / 127, code = clamp(rne(v / scale), -127, 127)
/// (rne = round half to even). An all-zero block gets absmax 0 and zero codes.
CodedBlock encode_block_i8(const DenseMatrix& block);

/// Rebuild the decoded matrix from codes + absmax (what `values` holds).
DenseMatrix decode_block_i8(const CodedBlock& block);

// ============================================================================
// sub-byte code packing
// ============================================================================

/// Pack `codes` at `bits` per code (2, 3, 4 or 8) into a byte stream. Code t
/// occupies stream bits [t*bits, (t+1)*bits), LSB-first within each byte.
/// Throws ParamError for an unsupported width or a code >= 2^bits.
std::vector<std::uint8_t> pack_codes(const std::vector<std::uint32_t>& codes, int bits);

/// Inverse of pack_codes for a known code count. Throws ParamError on a bad
/// width or a byte count that cannot hold `count` codes, FormatError if the
/// stream has trailing padding bits set (stray bits mean corruption).
std::vector<std::uint32_t> unpack_codes(const std::vector<std::uint8_t>& bytes, int bits,
                                        std::size_t count);

/// Bytes needed to hold `count` codes at `bits` per code.
std::size_t packed_byte_length(std::size_t count, int bits);

} // namespace tileq
