#include "tileq/accounting.hpp"

#include <boost/rational.hpp>
#include <string>

#include "tileq/errors.hpp"

namespace tileq {

namespace {

using Rat = boost::rational<long long>;

long long ll(std::size_t v) { return static_cast<long long>(v); }

void check_common(int d, std::size_t g, int d_fp) {
    if (d < 1) throw ParamError("bit budget: code width d must be >= 1");
    if (g < 1) throw ParamError("bit budget: group size must be >= 1");
    if (d_fp < 1) throw ParamError("bit budget: d_fp must be >= 1");
}

void check_lowrank(int d_factor, std::size_t i, std::size_t o) {
    if (d_factor < 1) throw ParamError("bit budget: d_factor must be >= 1");
    if (i < 1 || o < 1) throw ParamError("bit budget: dims must be >= 1");
}

BitBudget assemble(Scheme scheme, Rat base, Rat scale, Rat lowrank, Rat singular, Rat metadata) {
    BitBudget b;
    b.scheme = scheme;
    b.base_bits = boost::rational_cast<double>(base);
    b.scale_bits = boost::rational_cast<double>(scale);
    b.lowrank_factor_bits = boost::rational_cast<double>(lowrank);
    b.singular_bits = boost::rational_cast<double>(singular);
    b.total_avg_bits = boost::rational_cast<double>(base + scale + lowrank + singular);
    b.metadata_bits = boost::rational_cast<double>(metadata);
    return b;
}

} // namespace

const char* scheme_name(Scheme scheme) {
    switch (scheme) {
        case Scheme::basic: return "basic";
        case Scheme::per_expert: return "per_expert";
        case Scheme::shared_1d: return "shared_1d";
        case Scheme::tileq_2d: return "tileq_2d";
    }
    return "unknown";
}

BitBudget bits_basic(int d, std::size_t g, int d_fp) {
    check_common(d, g, d_fp);
    return assemble(Scheme::basic, Rat(d), Rat(d_fp, ll(g)), Rat(0), Rat(0), Rat(0));
}

BitBudget bits_per_expert(int d, std::size_t g, int d_fp, int d_factor, std::size_t r,
                          std::size_t i, std::size_t o) {
    check_common(d, g, d_fp);
    check_lowrank(d_factor, i, o);
    const Rat lowrank = Rat(ll(r) * d_factor) * (Rat(1, ll(i)) + Rat(1, ll(o)));
    const Rat singular = Rat(ll(r) * ll(r) * d_fp, ll(o) * ll(i));
    return assemble(Scheme::per_expert, Rat(d), Rat(d_fp, ll(g)), lowrank, singular, Rat(0));
}

BitBudget bits_1d(int d, std::size_t g, int d_fp, int d_factor, std::size_t r, std::size_t i,
                  std::size_t o, std::size_t k) {
    check_common(d, g, d_fp);
    check_lowrank(d_factor, i, o);
    if (k < 1) throw ParamError("bit budget: K must be >= 1");
    const Rat lowrank = Rat(ll(r) * d_factor) * (Rat(1, ll(k) * ll(i)) + Rat(1, ll(o)));
    return assemble(Scheme::shared_1d, Rat(d), Rat(d_fp, ll(g)), lowrank, Rat(0), Rat(0));
}

BitBudget bits_tileq(int d, std::size_t g, int d_fp, int d_factor, std::size_t r, std::size_t i,
                     std::size_t o, std::size_t k, std::size_t m, std::size_t n) {
    check_common(d, g, d_fp);
    check_lowrank(d_factor, i, o);
    if (k < 1) throw ParamError("bit budget: K must be >= 1");
    if (m < 1 || n < 1) throw ParamError("bit budget: grid dims must be >= 1");
    const Rat lowrank =
        Rat(ll(r) * d_factor) * (Rat(ll(m), ll(k) * ll(o)) + Rat(ll(n), ll(k) * ll(i)));
    const Rat singular = Rat(ll(r) * ll(r) * d_fp, ll(k) * ll(o) * ll(i));
    // Placement pair (two u16) per expert plus one f32 scaling vector per
    // expert, spread over K*o*i weights.
    const Rat metadata = Rat(32, ll(o) * ll(i)) + Rat(32, ll(o));
    return assemble(Scheme::tileq_2d, Rat(d), Rat(d_fp, ll(g)), lowrank, singular, metadata);
}

std::uint64_t flops_estimate(Scheme scheme, std::size_t b, std::size_t i, std::size_t o,
                             std::size_t r, std::size_t m, std::size_t n, std::size_t k,
                             std::size_t topk) {
    (void)k;
    const std::uint64_t bb = b, ii = i, oo = o, rr = r, mm = m, nn = n, tt = topk;
    switch (scheme) {
        case Scheme::tileq_2d:
            return bb * (ii * mm * rr + nn * rr * oo + tt * rr);
        case Scheme::per_expert:
            return bb * tt * (ii * rr + rr * oo);
        case Scheme::shared_1d:
            return bb * (ii * rr + tt * rr * oo + tt * rr);
        case Scheme::basic:
            return bb * tt * ii * oo;
    }
    return 0;
}

} // namespace tileq
