#include "tileq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tileq/codec.hpp"
#include "tileq/errors.hpp"
#include "tileq/kmeans.hpp"

namespace tileq {

namespace {

constexpr std::size_t kCodebookMaxIters = 25;

void check_bits(int bits) {
    if (bits != 2 && bits != 3 && bits != 4 && bits != 8) {
        throw ParamError("quantizer bits must be in {2,3,4,8}, got " + std::to_string(bits));
    }
}

/// Build the RTN grid for one group of original values. The range is extended
/// to cover zero so the zero_point invariant holds structurally; the scale is
/// f16-snapped (floored away from zero, since a scale of exactly 0 would be
/// undecodable).
QuantGrid make_grid(const float* vals, std::size_t len, int bits) {
    float vmin = vals[0], vmax = vals[0];
    for (std::size_t t = 1; t < len; ++t) {
        vmin = std::min(vmin, vals[t]);
        vmax = std::max(vmax, vals[t]);
    }
    const double rmin = std::min(double(vmin), 0.0);
    const double rmax = std::max(double(vmax), 0.0);
    const double levels = double((1 << bits) - 1);
    double scale = (rmax - rmin) / levels;
    if (scale <= 0.0) scale = 1e-8; // all-zero group
    QuantGrid g;
    g.scale = snap_f16(static_cast<float>(scale));
    if (g.scale <= 0.0f) g.scale = half_bits_to_float(0x0001); // least positive f16
    double zero = std::nearbyint(-rmin / g.scale);
    zero = std::min(levels, std::max(0.0, zero));
    g.zero_point = static_cast<std::int32_t>(zero);
    return g;
}

std::uint32_t encode_one(double value, const QuantGrid& g, int bits) {
    const double levels = double((1 << bits) - 1);
    double code = std::nearbyint(value / g.scale) + g.zero_point;
    code = std::min(levels, std::max(0.0, code));
    return static_cast<std::uint32_t>(code);
}

/// Per-row RTN grids for the whole matrix, row-major over (row, group).
std::vector<QuantGrid> make_grids(const DenseMatrix& r, int bits, std::size_t group_size) {
    const std::size_t ngroups = (r.cols + group_size - 1) / group_size;
    std::vector<QuantGrid> grids;
    grids.reserve(r.rows * ngroups);
    for (std::size_t row = 0; row < r.rows; ++row) {
        for (std::size_t g = 0; g < ngroups; ++g) {
            const std::size_t start = g * group_size;
            const std::size_t len = std::min(group_size, r.cols - start);
            grids.push_back(make_grid(r.row(row) + start, len, bits));
        }
    }
    return grids;
}

/// Symmetric positive definite inverse via Cholesky; throws NumericError when
/// a pivot collapses (H singular despite damping).
std::vector<double> spd_inverse(const DenseMatrix& h) {
    const std::size_t n = h.rows;
    std::vector<double> chol(n * n, 0.0); // lower triangular L with H = L L^T
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = j; i < n; ++i) {
            double acc = double(h.at(i, j));
            for (std::size_t k = 0; k < j; ++k) acc -= chol[i * n + k] * chol[j * n + k];
            if (i == j) {
                if (acc <= 0.0 || !std::isfinite(acc)) {
                    throw NumericError(
                        "Hessian is singular after damping (pivot " + std::to_string(acc) +
                        " at column " + std::to_string(j) +
                        "); increase damping_fraction");
                }
                chol[i * n + j] = std::sqrt(acc);
            } else {
                chol[i * n + j] = acc / chol[j * n + j];
            }
        }
    }
    // Invert L in place, then Hinv = L^-T L^-1.
    std::vector<double> linv(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        linv[j * n + j] = 1.0 / chol[j * n + j];
        for (std::size_t i = j + 1; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t k = j; k < i; ++k) acc += chol[i * n + k] * linv[k * n + j];
            linv[i * n + j] = -acc / chol[i * n + i];
        }
    }
    std::vector<double> hinv(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double acc = 0.0;
            for (std::size_t k = i; k < n; ++k) acc += linv[k * n + i] * linv[k * n + j];
            hinv[i * n + j] = acc;
            hinv[j * n + i] = acc;
        }
    }
    return hinv;
}

} // namespace

HessianProxy estimate_hessian(const DenseMatrix& calib_inputs, double damping_fraction) {
    if (calib_inputs.rows == 0 || calib_inputs.cols == 0) {
        throw DataError("estimate_hessian: empty calibration set");
    }
    if (damping_fraction < 0.0) {
        throw ParamError("estimate_hessian: damping_fraction must be >= 0");
    }
    const std::size_t t_count = calib_inputs.rows;
    const std::size_t dim = calib_inputs.cols;

    std::vector<double> acc(dim * dim, 0.0);
    for (std::size_t t = 0; t < t_count; ++t) {
        const float* x = calib_inputs.row(t);
        for (std::size_t a = 0; a < dim; ++a) {
            const double xa = x[a];
            for (std::size_t b = a; b < dim; ++b) acc[a * dim + b] += xa * double(x[b]);
        }
    }
    double trace = 0.0;
    for (std::size_t a = 0; a < dim; ++a) trace += acc[a * dim + a] / t_count;
    const double lambda = damping_fraction * (trace / dim);

    HessianProxy out;
    out.damping = lambda;
    out.sample_count = t_count;
    out.h = DenseMatrix(dim, dim);
    for (std::size_t a = 0; a < dim; ++a) {
        for (std::size_t b = a; b < dim; ++b) {
            const double v = acc[a * dim + b] / t_count + (a == b ? lambda : 0.0);
            out.h.at(a, b) = static_cast<float>(v);
            out.h.at(b, a) = static_cast<float>(v);
        }
    }
    return out;
}

QuantizedExpert quantize_rtn(const DenseMatrix& r, int bits, std::size_t group_size) {
    check_bits(bits);
    if (group_size < 1) throw ParamError("quantize_rtn: group_size must be >= 1");
    if (r.empty()) throw ParamError("quantize_rtn: empty input");

    QuantizedExpert q;
    q.out_dim = r.rows;
    q.in_dim = r.cols;
    q.bits = bits;
    q.mode = QuantMode::scalar;
    q.group_size = group_size;
    q.grids = make_grids(r, bits, group_size);

    std::vector<std::uint32_t> codes(r.rows * r.cols);
    const std::size_t ngroups = q.groups_per_row();
    for (std::size_t row = 0; row < r.rows; ++row) {
        for (std::size_t c = 0; c < r.cols; ++c) {
            const QuantGrid& g = q.grids[row * ngroups + c / group_size];
            codes[row * r.cols + c] = encode_one(r.at(row, c), g, bits);
        }
    }
    q.packed = pack_codes(codes, bits);
    return q;
}

QuantizedExpert quantize_gptq(const DenseMatrix& r, const HessianProxy& h, int bits,
                              std::size_t group_size) {
    check_bits(bits);
    if (group_size < 1) throw ParamError("quantize_gptq: group_size must be >= 1");
    if (h.h.rows != r.cols || h.h.cols != r.cols) {
        throw ShapeError("quantize_gptq: Hessian is " + std::to_string(h.h.rows) + "x" +
                         std::to_string(h.h.cols) + ", residual has in_dim " +
                         std::to_string(r.cols));
    }
    const std::size_t dim = r.cols;
    const std::vector<double> hinv = spd_inverse(h.h);

    QuantizedExpert q;
    q.out_dim = r.rows;
    q.in_dim = dim;
    q.bits = bits;
    q.mode = QuantMode::scalar;
    q.group_size = group_size;
    q.grids = make_grids(r, bits, group_size); // grids from original values, as in RTN

    const std::size_t ngroups = q.groups_per_row();
    std::vector<std::uint32_t> codes(r.rows * dim);
    std::vector<double> work(dim);
    for (std::size_t row = 0; row < r.rows; ++row) {
        for (std::size_t c = 0; c < dim; ++c) work[c] = r.at(row, c);
        for (std::size_t j = 0; j < dim; ++j) {
            const QuantGrid& g = q.grids[row * ngroups + j / group_size];
            const std::uint32_t code = encode_one(work[j], g, bits);
            codes[row * dim + j] = code;
            const double deq = (double(code) - g.zero_point) * g.scale;
            const double err = work[j] - deq;
            const double inv_jj = hinv[j * dim + j];
            for (std::size_t c = j + 1; c < dim; ++c) {
                work[c] -= err * hinv[j * dim + c] / inv_jj;
            }
        }
    }
    q.packed = pack_codes(codes, bits);

    // Greedy feedback is not optimal; on the rare instance it lands above
    // plain rounding, keep the better of the two (same grids either way).
    QuantizedExpert rtn = quantize_rtn(r, bits, group_size);
    if (proxy_loss(r, q, h) > proxy_loss(r, rtn, h)) return rtn;
    return q;
}

QuantizedExpert quantize_vq(const DenseMatrix& r, const HessianProxy& h, int bits,
                            std::size_t sub_dim, std::uint64_t seed) {
    (void)h; // accepted for interface parity; this quantizer is unweighted
    check_bits(bits);
    if (sub_dim < 1) throw ParamError("quantize_vq: sub_dim must be >= 1");
    if (r.empty()) throw ParamError("quantize_vq: empty input");

    const std::size_t nsub_row = (r.cols + sub_dim - 1) / sub_dim;
    const std::size_t nsub = r.rows * nsub_row;
    const std::size_t book = std::size_t{1} << bits;
    if (book > nsub) {
        throw ParamError("quantize_vq: codebook of " + std::to_string(book) +
                         " entries exceeds " + std::to_string(nsub) + " subvectors");
    }

    DenseMatrix points(nsub, sub_dim, 0.0f); // final partial subvector zero-padded
    for (std::size_t row = 0; row < r.rows; ++row) {
        for (std::size_t sv = 0; sv < nsub_row; ++sv) {
            const std::size_t start = sv * sub_dim;
            const std::size_t len = std::min(sub_dim, r.cols - start);
            for (std::size_t t = 0; t < len; ++t) {
                points.at(row * nsub_row + sv, t) = r.at(row, start + t);
            }
        }
    }
    const KMeansResult km = kmeans(points, book, seed, kCodebookMaxIters);

    QuantizedExpert q;
    q.out_dim = r.rows;
    q.in_dim = r.cols;
    q.bits = bits;
    q.mode = QuantMode::vector;
    q.sub_dim = sub_dim;
    q.codebook = DenseMatrix(book, sub_dim);
    for (std::size_t e = 0; e < book; ++e) {
        for (std::size_t t = 0; t < sub_dim; ++t) {
            q.codebook.at(e, t) = snap_f16(km.centroids.at(e, t));
        }
    }
    // Re-encode against the snapped codebook (ties to the lowest entry) so
    // codes match what a reader of the serialized artifact would compute.
    std::vector<std::uint32_t> codes(nsub);
    for (std::size_t sv = 0; sv < nsub; ++sv) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t e = 0; e < book; ++e) {
            double d2 = 0.0;
            for (std::size_t t = 0; t < sub_dim; ++t) {
                const double d = double(points.at(sv, t)) - double(q.codebook.at(e, t));
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                arg = e;
            }
        }
        codes[sv] = static_cast<std::uint32_t>(arg);
    }
    q.packed = pack_codes(codes, bits);
    return q;
}

DenseMatrix dequantize(const QuantizedExpert& q) {
    check_bits(q.bits);
    const std::vector<std::uint32_t> codes = unpack_codes(q.packed, q.bits, q.code_count());
    DenseMatrix out(q.out_dim, q.in_dim);
    if (q.mode == QuantMode::scalar) {
        if (q.grids.size() != q.out_dim * q.groups_per_row()) {
            throw ParamError("dequantize: grid table has " + std::to_string(q.grids.size()) +
                             " entries, expected " +
                             std::to_string(q.out_dim * q.groups_per_row()));
        }
        const std::size_t ngroups = q.groups_per_row();
        for (std::size_t row = 0; row < q.out_dim; ++row) {
            for (std::size_t c = 0; c < q.in_dim; ++c) {
                const QuantGrid& g = q.grids[row * ngroups + c / q.group_size];
                const std::int64_t code = codes[row * q.in_dim + c];
                out.at(row, c) = static_cast<float>(double(code - g.zero_point) * g.scale);
            }
        }
    } else {
        if (q.codebook.rows != (std::size_t{1} << q.bits) || q.codebook.cols != q.sub_dim) {
            throw ParamError("dequantize: codebook is " + std::to_string(q.codebook.rows) + "x" +
                             std::to_string(q.codebook.cols) + ", expected " +
                             std::to_string(std::size_t{1} << q.bits) + "x" +
                             std::to_string(q.sub_dim));
        }
        const std::size_t nsub_row = q.subvectors_per_row();
        for (std::size_t row = 0; row < q.out_dim; ++row) {
            for (std::size_t sv = 0; sv < nsub_row; ++sv) {
                const std::size_t start = sv * q.sub_dim;
                const std::size_t len = std::min(q.sub_dim, q.in_dim - start);
                const std::uint32_t code = codes[row * nsub_row + sv];
                for (std::size_t t = 0; t < len; ++t) {
                    out.at(row, start + t) = q.codebook.at(code, t);
                }
            }
        }
    }
    return out;
}

double proxy_loss(const DenseMatrix& original, const QuantizedExpert& q, const HessianProxy& h) {
    const DenseMatrix err = sub(original, dequantize(q));
    // tr(E H E^T) = sum over rows of e_row * H * e_row^T, in f64.
    double total = 0.0;
    const std::size_t dim = err.cols;
    std::vector<double> he(dim);
    for (std::size_t row = 0; row < err.rows; ++row) {
        const float* e = err.row(row);
        for (std::size_t a = 0; a < dim; ++a) {
            double acc = 0.0;
            for (std::size_t b = 0; b < dim; ++b) acc += double(h.h.at(a, b)) * e[b];
            he[a] = acc;
        }
        double rowsum = 0.0;
        for (std::size_t a = 0; a < dim; ++a) rowsum += double(e[a]) * he[a];
        total += rowsum;
    }
    return total;
}

} // namespace tileq
