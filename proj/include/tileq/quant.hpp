#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tileq/matrix.hpp"

namespace tileq {

// Residual quantizers: group-wise affine round-to-nearest, the error-
// compensated column-recurrence variant (Hessian-weighted), and a codebook
// vector quantizer. All share one packed artifact type and one dequantizer.

/// Damped activation second-moment proxy H = (1/T) X^T X + lambda I.
struct HessianProxy {
    DenseMatrix h;              // i x i, symmetric
    double damping = 0.0;       // lambda actually added to the diagonal
    std::size_t sample_count = 0;
};

/// One affine group: dequantized value = (code - zero_point) * scale.
/// Scales are binary16 round-tripped at construction so the 16-bit storage
/// charge in the accounting module is honest.
struct QuantGrid {
    float scale = 0.0f;          // > 0, f16-representable
    std::int32_t zero_point = 0; // in [0, 2^bits)
};

enum class QuantMode { scalar, vector };

/// Packed quantized matrix. Scalar mode: one code per element, one QuantGrid
/// per contiguous run of group_size elements along the input dimension (the
/// final group of a row may be short). Vector mode: one code per sub_dim-long
/// subvector, decoded through the codebook. Codes are packed LSB-first
/// within each byte, row-major, `bits` bits per code.
struct QuantizedExpert {
    std::size_t out_dim = 0;
    std::size_t in_dim = 0;
    int bits = 0;
    QuantMode mode = QuantMode::scalar;

    std::vector<std::uint8_t> packed; // the bit-packed code stream

    // scalar mode
    std::size_t group_size = 0;
    std::vector<QuantGrid> grids; // out_dim * groups_per_row, row-major

    // vector mode
    std::size_t sub_dim = 0;
    DenseMatrix codebook; // 2^bits x sub_dim, entries f16-snapped

    std::size_t groups_per_row() const {
        return group_size == 0 ? 0 : (in_dim + group_size - 1) / group_size;
    }
    std::size_t subvectors_per_row() const {
        return sub_dim == 0 ? 0 : (in_dim + sub_dim - 1) / sub_dim;
    }
    /// Total codes in the packed stream (elements or subvectors).
    std::size_t code_count() const {
        return mode == QuantMode::scalar ? out_dim * in_dim : out_dim * subvectors_per_row();
    }
};

/// H = (1/T) X^T X + lambda I with lambda = damping_fraction * mean(diag).
/// Throws DataError when the calibration set is empty.
HessianProxy estimate_hessian(const DenseMatrix& calib_inputs, double damping_fraction);

/// Group-wise affine round-to-nearest (ties to even). Per group the range is
/// extended to include zero, scale = (rmax - rmin)/(2^bits - 1) with a 1e-8
/// floor for all-zero groups, zero_point = round(-rmin/scale); both are then
/// clamped/snapped so zero_point lies in [0, 2^bits) and scale is f16-exact.
/// Throws ParamError for bits outside {2,3,4,8} or group_size < 1.
QuantizedExpert quantize_rtn(const DenseMatrix& r, int bits, std::size_t group_size);

/// Column-by-column quantization in natural order with error feedback: after
/// each column's rounding, the induced error is propagated into not-yet-
/// quantized columns through the inverse Hessian (per-row recurrence). Grids
/// are the RTN grids of the original values. If the greedy recurrence ever
/// ends up above RTN's weighted loss the RTN solution is returned instead,
/// making the dominance contract (proxy loss <= RTN's) structural. With
/// H = I the compensation vanishes and the output equals quantize_rtn's.
/// Throws ShapeError when H's dimension is not in_dim; NumericError (advising
/// a larger damping_fraction) when the damped H is not positive definite.
QuantizedExpert quantize_gptq(const DenseMatrix& r, const HessianProxy& h, int bits,
                              std::size_t group_size);

/// Codebook vector quantizer: rows are split into sub_dim-long subvectors
/// (the last padded with zeros), a 2^bits-entry codebook is learned by seeded
/// kmeans over all subvectors, each subvector stores the index of its nearest
/// (f16-snapped) codebook entry. The Hessian argument is accepted for
/// interface parity but unused (no Hessian weighting in this quantizer).
/// Throws ParamError when the codebook would exceed the number of subvectors
/// or bits is outside {2,3,4,8}.
QuantizedExpert quantize_vq(const DenseMatrix& r, const HessianProxy& h, int bits,
                            std::size_t sub_dim, std::uint64_t seed);

/// Decode to a dense matrix. Throws FormatError on corrupt packing (nonzero
/// trailing bits), ParamError on a malformed artifact.
DenseMatrix dequantize(const QuantizedExpert& q);

/// tr(E H E^T) with E = original - dequantize(q): the Hessian-weighted proxy
/// loss both scalar quantizers are judged by.
double proxy_loss(const DenseMatrix& original, const QuantizedExpert& q, const HessianProxy& h);

} // namespace tileq
