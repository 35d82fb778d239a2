#include "tileq/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <utility>

#include <zlib.h>

#include "tileq/codec.hpp"
#include "tileq/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tileq {
namespace {

// Blobs are raw little-endian memory dumps; refuse to build elsewhere rather
// than silently produce byte-swapped containers.
static_assert(std::endian::native == std::endian::little,
              "container blobs are little-endian memory images");

constexpr int kFormatVersion = 1;
constexpr const char* kManifestName = "manifest.json";

// ----------------------------------------------------------------------------
// scalar <-> byte helpers
// ----------------------------------------------------------------------------

std::vector<std::uint8_t> bytes_of_f32(const float* values, std::size_t count) {
    std::vector<std::uint8_t> out(count * 4);
    if (count > 0) std::memcpy(out.data(), values, out.size());
    return out;
}

std::vector<std::uint8_t> bytes_of_u16(const std::uint16_t* values, std::size_t count) {
    std::vector<std::uint8_t> out(count * 2);
    if (count > 0) std::memcpy(out.data(), values, out.size());
    return out;
}

std::vector<std::uint8_t> bytes_of_i8(const std::int8_t* values, std::size_t count) {
    std::vector<std::uint8_t> out(count);
    if (count > 0) std::memcpy(out.data(), values, count);
    return out;
}

std::vector<float> f32_of_bytes(const std::vector<std::uint8_t>& bytes) {
    std::vector<float> out(bytes.size() / 4);
    if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

std::vector<std::uint16_t> u16_of_bytes(const std::vector<std::uint8_t>& bytes) {
    std::vector<std::uint16_t> out(bytes.size() / 2);
    if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

std::vector<std::int8_t> i8_of_bytes(const std::vector<std::uint8_t>& bytes) {
    std::vector<std::int8_t> out(bytes.size());
    if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

std::uint32_t crc_of(const std::vector<std::uint8_t>& bytes) {
    uLong crc = crc32_z(0L, Z_NULL, 0);
    crc = crc32_z(crc, bytes.data(), bytes.size());
    return static_cast<std::uint32_t>(crc);
}

/// Bytes one element of `dtype` occupies, or 0 for packed dtypes (whose
/// byte_length is not element-count * size).
std::size_t dtype_element_bytes(const std::string& dtype) {
    if (dtype == "f32") return 4;
    if (dtype == "f16-roundtrip" || dtype == "u16") return 2;
    if (dtype == "u8") return 1;
    return 0;
}

bool is_packed_dtype(const std::string& dtype, int* bits_out) {
    for (int b : {2, 3, 4, 8}) {
        if (dtype == "packed-u" + std::to_string(b)) {
            if (bits_out != nullptr) *bits_out = b;
            return true;
        }
    }
    return false;
}

std::size_t shape_element_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d)
            throw FormatError("tensor shape overflows element count");
        n *= d;
    }
    return n;
}

/// Expected blob length for a shape + dtype, the invariant both sides check.
std::size_t expected_byte_length(const std::vector<std::size_t>& shape, const std::string& dtype) {
    std::size_t count = shape_element_count(shape);
    int bits = 0;
    if (is_packed_dtype(dtype, &bits)) return packed_byte_length(count, bits);
    std::size_t per = dtype_element_bytes(dtype);
    if (per == 0) throw FormatError("unknown tensor dtype '" + dtype + "'");
    return count * per;
}

// ----------------------------------------------------------------------------
// container writer
// ----------------------------------------------------------------------------

class ContainerWriter {
  public:
    explicit ContainerWriter(std::string kind) : kind_(std::move(kind)) {}

    void add(std::string name, std::vector<std::size_t> shape, std::string dtype,
             std::vector<std::uint8_t> bytes) {
        std::size_t expected = expected_byte_length(shape, dtype);
        if (bytes.size() != expected)
            throw ParamError("tensor '" + name + "': blob is " + std::to_string(bytes.size()) +
                             " bytes, shape/dtype require " + std::to_string(expected));
        entries_.push_back(Entry{std::move(name), std::move(shape), std::move(dtype),
                                 std::move(bytes)});
    }

    /// Write all blobs plus the manifest. Blob files are named `<tensor>.bin`;
    /// manifest keys are sorted, so identical content gives identical bytes.
    void finish(const std::string& dir, json meta) const {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create container directory '" + dir + "': " + ec.message());

        json tensors = json::object();
        for (const Entry& e : entries_) {
            std::string file = e.name + ".bin";
            write_file(fs::path(dir) / file, e.bytes);
            tensors[e.name] = {{"shape", e.shape},
                               {"dtype", e.dtype},
                               {"byte_length", e.bytes.size()},
                               {"crc32", crc_of(e.bytes)},
                               {"file", file}};
        }
        json manifest = {{"format_version", kFormatVersion},
                         {"kind", kind_},
                         {"meta", std::move(meta)},
                         {"tensors", std::move(tensors)}};
        std::string text = manifest.dump(2);
        text.push_back('\n');
        std::vector<std::uint8_t> bytes(text.begin(), text.end());
        write_file(fs::path(dir) / kManifestName, bytes);
    }

  private:
    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::string dtype;
        std::vector<std::uint8_t> bytes;
    };

    static void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("short write to '" + path.string() + "'");
    }

    std::string kind_;
    std::vector<Entry> entries_;
};

// ----------------------------------------------------------------------------
// container reader
// ----------------------------------------------------------------------------

class ContainerReader {
  public:
    ContainerReader(const std::string& dir, const std::string& expected_kind, bool verify_crc)
        : dir_(dir), verify_crc_(verify_crc) {
        fs::path path = fs::path(dir) / kManifestName;
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open '" + path.string() + "'");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
        try {
            manifest_ = json::parse(text);
        } catch (const json::parse_error& e) {
            throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
        }
        if (!manifest_.is_object() || !manifest_.contains("format_version") ||
            !manifest_["format_version"].is_number_integer())
            throw FormatError("manifest missing integer format_version");
        int version = manifest_["format_version"].get<int>();
        if (version != kFormatVersion)
            throw FormatError("unsupported container format_version " + std::to_string(version) +
                              " (expected " + std::to_string(kFormatVersion) + ")");
        std::string kind = manifest_.value("kind", std::string());
        if (kind != expected_kind)
            throw FormatError("expected a '" + expected_kind + "' container, found '" + kind + "'");
        if (!manifest_.contains("tensors") || !manifest_["tensors"].is_object())
            throw FormatError("manifest missing tensors object");
        if (!manifest_.contains("meta") || !manifest_["meta"].is_object())
            throw FormatError("manifest missing meta object");
    }

    const json& meta() const { return manifest_["meta"]; }

    bool has(const std::string& name) const { return manifest_["tensors"].contains(name); }

    /// Fetch one tensor's blob, validating dtype, declared vs. actual length,
    /// shape/dtype consistency and (optionally) the checksum.
    std::vector<std::uint8_t> bytes(const std::string& name, const std::string& dtype,
                                    std::vector<std::size_t>* shape_out = nullptr) const {
        const json& tensors = manifest_["tensors"];
        if (!tensors.contains(name)) throw FormatError("missing tensor '" + name + "'");
        const json& entry = tensors[name];
        if (!entry.is_object() || !entry.contains("shape") || !entry.contains("dtype") ||
            !entry.contains("byte_length") || !entry.contains("crc32") || !entry.contains("file"))
            throw FormatError("tensor '" + name + "': malformed manifest entry");
        std::string actual_dtype = entry["dtype"].get<std::string>();
        if (actual_dtype != dtype)
            throw FormatError("tensor '" + name + "': dtype is '" + actual_dtype +
                              "', expected '" + dtype + "'");
        std::vector<std::size_t> shape = entry["shape"].get<std::vector<std::size_t>>();
        std::size_t declared = entry["byte_length"].get<std::size_t>();
        if (expected_byte_length(shape, dtype) != declared)
            throw FormatError("tensor '" + name + "': byte_length does not match shape/dtype");

        fs::path path = fs::path(dir_) / entry["file"].get<std::string>();
        std::error_code ec;
        std::uintmax_t on_disk = fs::file_size(path, ec);
        if (ec) throw IoError("tensor '" + name + "': cannot stat '" + path.string() + "'");
        if (on_disk != declared)
            throw FormatError("tensor '" + name + "': blob is " + std::to_string(on_disk) +
                              " bytes, manifest says " + std::to_string(declared));

        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("tensor '" + name + "': cannot open '" + path.string() + "'");
        std::vector<std::uint8_t> data(declared);
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(declared));
        if (static_cast<std::size_t>(in.gcount()) != declared)
            throw IoError("tensor '" + name + "': short read from '" + path.string() + "'");

        if (verify_crc_) {
            std::uint32_t want = entry["crc32"].get<std::uint32_t>();
            std::uint32_t got = crc_of(data);
            if (want != got) throw FormatError("tensor '" + name + "': checksum mismatch");
        }
        if (shape_out != nullptr) *shape_out = std::move(shape);
        return data;
    }

    DenseMatrix f32_matrix(const std::string& name) const {
        std::vector<std::size_t> shape;
        std::vector<std::uint8_t> raw = bytes(name, "f32", &shape);
        if (shape.size() != 2)
            throw FormatError("tensor '" + name + "': expected 2 dimensions, found " +
                              std::to_string(shape.size()));
        DenseMatrix m(shape[0], shape[1]);
        m.data = f32_of_bytes(raw);
        return m;
    }

    std::vector<float> f32_vector(const std::string& name, std::size_t expected_len) const {
        std::vector<std::size_t> shape;
        std::vector<std::uint8_t> raw = bytes(name, "f32", &shape);
        if (shape.size() != 1 || shape[0] != expected_len)
            throw FormatError("tensor '" + name + "': expected shape [" +
                              std::to_string(expected_len) + "]");
        return f32_of_bytes(raw);
    }

    std::vector<std::uint16_t> f16_bits(const std::string& name,
                                        const std::vector<std::size_t>& expected_shape) const {
        std::vector<std::size_t> shape;
        std::vector<std::uint8_t> raw = bytes(name, "f16-roundtrip", &shape);
        if (shape != expected_shape) throw FormatError("tensor '" + name + "': unexpected shape");
        return u16_of_bytes(raw);
    }

  private:
    std::string dir_;
    bool verify_crc_;
    json manifest_;
};

// ----------------------------------------------------------------------------
// manifest meta helpers
// ----------------------------------------------------------------------------

const json& require_object(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_object())
        throw FormatError("manifest meta missing object '" + std::string(key) + "'");
    return j[key];
}

std::size_t require_size(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_number_unsigned())
        throw FormatError("manifest meta missing unsigned field '" + std::string(key) + "'");
    return j[key].get<std::size_t>();
}

std::string require_string(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_string())
        throw FormatError("manifest meta missing string field '" + std::string(key) + "'");
    return j[key].get<std::string>();
}

MoELayerSpec spec_from_meta(const json& meta) {
    const json& s = require_object(meta, "spec");
    MoELayerSpec spec;
    spec.num_experts = require_size(s, "num_experts");
    spec.top_k = require_size(s, "top_k");
    spec.in_dim = require_size(s, "in_dim");
    spec.out_dim = require_size(s, "out_dim");
    spec.num_shared = require_size(s, "num_shared");
    try {
        spec.validate();
    } catch (const Error& e) {
        throw FormatError("manifest spec invalid: " + std::string(e.what()));
    }
    return spec;
}

json spec_to_meta(const MoELayerSpec& spec) {
    return {{"num_experts", spec.num_experts},
            {"top_k", spec.top_k},
            {"in_dim", spec.in_dim},
            {"out_dim", spec.out_dim},
            {"num_shared", spec.num_shared}};
}

json merge_meta(json base, const json& extra) {
    if (!extra.is_object()) throw ParamError("extra_meta must be a JSON object");
    for (const auto& [key, value] : extra.items()) {
        if (base.contains(key))
            throw ParamError("extra_meta may not override reserved meta key '" + key + "'");
        base[key] = value;
    }
    return base;
}

// ----------------------------------------------------------------------------
// quantized-expert tensors
// ----------------------------------------------------------------------------

std::string packed_dtype(int bits) { return "packed-u" + std::to_string(bits); }

/// Check that every expert in `qs` shares `ref`'s decode-relevant settings;
/// the wire format stores them once.
void check_uniform_quant(const std::vector<QuantizedExpert>& qs, const QuantizedExpert& ref,
                         const char* what) {
    for (const QuantizedExpert& q : qs) {
        bool same = q.bits == ref.bits && q.mode == ref.mode &&
                    q.group_size == ref.group_size && q.sub_dim == ref.sub_dim;
        if (!same)
            throw ParamError(std::string(what) +
                             ": mixed quantization settings are not serializable");
    }
}

json quant_meta(const QuantizedExpert& q) {
    json j = {{"bits", q.bits},
              {"mode", q.mode == QuantMode::scalar ? "scalar" : "vector"}};
    if (q.mode == QuantMode::scalar)
        j["group_size"] = q.group_size;
    else
        j["sub_dim"] = q.sub_dim;
    return j;
}

void add_quantized(ContainerWriter& writer, const std::string& prefix, const QuantizedExpert& q) {
    if (q.packed.size() != packed_byte_length(q.code_count(), q.bits))
        throw ParamError("tensor '" + prefix + ".codes': packed stream length is inconsistent");
    if (q.mode == QuantMode::scalar) {
        std::size_t groups = q.groups_per_row();
        if (q.grids.size() != q.out_dim * groups)
            throw ShapeError("tensor '" + prefix + ".scales': grid count mismatch");
        writer.add(prefix + ".codes", {q.out_dim, q.in_dim}, packed_dtype(q.bits), q.packed);

        std::vector<std::uint16_t> scale_bits(q.grids.size());
        std::vector<std::uint32_t> zeros(q.grids.size());
        for (std::size_t g = 0; g < q.grids.size(); ++g) {
            scale_bits[g] = float_to_half_bits(q.grids[g].scale);
            if (half_bits_to_float(scale_bits[g]) != q.grids[g].scale)
                throw ParamError("tensor '" + prefix + ".scales': scale is not f16-representable");
            zeros[g] = static_cast<std::uint32_t>(q.grids[g].zero_point);
        }
        writer.add(prefix + ".scales", {q.out_dim, groups}, "f16-roundtrip",
                   bytes_of_u16(scale_bits.data(), scale_bits.size()));
        writer.add(prefix + ".zeros", {q.out_dim, groups}, packed_dtype(q.bits),
                   pack_codes(zeros, q.bits));
    } else {
        std::size_t subs = q.subvectors_per_row();
        std::size_t rows = std::size_t{1} << q.bits;
        if (q.codebook.rows != rows || q.codebook.cols != q.sub_dim)
            throw ShapeError("tensor '" + prefix + ".codebook': shape mismatch");
        writer.add(prefix + ".codes", {q.out_dim, subs}, packed_dtype(q.bits), q.packed);

        std::vector<std::uint16_t> book_bits(q.codebook.data.size());
        for (std::size_t t = 0; t < book_bits.size(); ++t) {
            book_bits[t] = float_to_half_bits(q.codebook.data[t]);
            if (half_bits_to_float(book_bits[t]) != q.codebook.data[t])
                throw ParamError("tensor '" + prefix +
                                 ".codebook': entry is not f16-representable");
        }
        writer.add(prefix + ".codebook", {rows, q.sub_dim}, "f16-roundtrip",
                   bytes_of_u16(book_bits.data(), book_bits.size()));
    }
}

QuantizedExpert read_quantized(const ContainerReader& reader, const std::string& prefix,
                               const json& qmeta, std::size_t out_dim, std::size_t in_dim) {
    QuantizedExpert q;
    q.out_dim = out_dim;
    q.in_dim = in_dim;
    int bits = 0;
    if (!qmeta.contains("bits") || !qmeta["bits"].is_number_integer() ||
        (bits = qmeta["bits"].get<int>(), bits != 2 && bits != 3 && bits != 4 && bits != 8))
        throw FormatError("manifest quant meta: bits must be one of 2, 3, 4, 8");
    q.bits = bits;
    std::string mode = require_string(qmeta, "mode");
    if (mode == "scalar") {
        q.mode = QuantMode::scalar;
        q.group_size = require_size(qmeta, "group_size");
        if (q.group_size == 0) throw FormatError("manifest quant meta: group_size must be >= 1");
        std::size_t groups = q.groups_per_row();

        std::vector<std::size_t> shape;
        q.packed = reader.bytes(prefix + ".codes", packed_dtype(bits), &shape);
        if (shape != std::vector<std::size_t>{out_dim, in_dim})
            throw FormatError("tensor '" + prefix + ".codes': unexpected shape");

        std::vector<std::uint16_t> scale_bits =
            reader.f16_bits(prefix + ".scales", {out_dim, groups});
        std::vector<std::uint8_t> zero_bytes = reader.bytes(prefix + ".zeros",
                                                            packed_dtype(bits), &shape);
        if (shape != std::vector<std::size_t>{out_dim, groups})
            throw FormatError("tensor '" + prefix + ".zeros': unexpected shape");
        std::vector<std::uint32_t> zeros;
        try {
            zeros = unpack_codes(zero_bytes, bits, out_dim * groups);
        } catch (const Error& e) {
            throw FormatError("tensor '" + prefix + ".zeros': " + std::string(e.what()));
        }

        q.grids.resize(out_dim * groups);
        for (std::size_t g = 0; g < q.grids.size(); ++g) {
            float scale = half_bits_to_float(scale_bits[g]);
            if (!(scale > 0.0f) || !std::isfinite(scale))
                throw FormatError("tensor '" + prefix + ".scales': non-positive scale");
            q.grids[g] = QuantGrid{scale, static_cast<std::int32_t>(zeros[g])};
        }
    } else if (mode == "vector") {
        q.mode = QuantMode::vector;
        q.sub_dim = require_size(qmeta, "sub_dim");
        if (q.sub_dim == 0) throw FormatError("manifest quant meta: sub_dim must be >= 1");
        std::size_t subs = q.subvectors_per_row();
        std::size_t rows = std::size_t{1} << bits;

        std::vector<std::size_t> shape;
        q.packed = reader.bytes(prefix + ".codes", packed_dtype(bits), &shape);
        if (shape != std::vector<std::size_t>{out_dim, subs})
            throw FormatError("tensor '" + prefix + ".codes': unexpected shape");

        std::vector<std::uint16_t> book_bits =
            reader.f16_bits(prefix + ".codebook", {rows, q.sub_dim});
        q.codebook = DenseMatrix(rows, q.sub_dim);
        for (std::size_t t = 0; t < book_bits.size(); ++t)
            q.codebook.data[t] = half_bits_to_float(book_bits[t]);
    } else {
        throw FormatError("manifest quant meta: unknown mode '" + mode + "'");
    }
    return q;
}

} // namespace

// ----------------------------------------------------------------------------
// model containers
// ----------------------------------------------------------------------------

void write_model(const std::string& dir, const ExpertSet& experts,
                 const DenseMatrix& gate_weights, const DenseMatrix& calib,
                 const nlohmann::json& extra_meta) {
    experts.validate();
    const MoELayerSpec& spec = experts.spec;
    if (gate_weights.rows != spec.num_experts || gate_weights.cols != spec.in_dim)
        throw ShapeError("gate_weights must be num_experts x in_dim");
    if (calib.rows > 0 && calib.cols != spec.in_dim)
        throw ShapeError("calibration tokens must have in_dim columns");

    ContainerWriter writer("expert_set");
    writer.add("gate_weights", {gate_weights.rows, gate_weights.cols}, "f32",
               bytes_of_f32(gate_weights.data.data(), gate_weights.data.size()));
    // An empty calibration set is stored as a 0 x in_dim tensor.
    writer.add("calib", {calib.rows, calib.rows == 0 ? spec.in_dim : calib.cols}, "f32",
               bytes_of_f32(calib.data.data(), calib.data.size()));
    for (std::size_t k = 0; k < spec.num_experts; ++k) {
        const DenseMatrix& w = experts.routed[k];
        writer.add("routed." + std::to_string(k), {w.rows, w.cols}, "f32",
                   bytes_of_f32(w.data.data(), w.data.size()));
    }
    for (std::size_t s = 0; s < spec.num_shared; ++s) {
        const DenseMatrix& w = experts.shared[s];
        writer.add("shared." + std::to_string(s), {w.rows, w.cols}, "f32",
                   bytes_of_f32(w.data.data(), w.data.size()));
    }
    writer.finish(dir, merge_meta(json{{"spec", spec_to_meta(spec)}}, extra_meta));
}

LoadedModel read_model(const std::string& dir, bool verify_crc) {
    ContainerReader reader(dir, "expert_set", verify_crc);
    LoadedModel model;
    model.meta = reader.meta();
    MoELayerSpec spec = spec_from_meta(model.meta);

    model.experts.spec = spec;
    model.experts.routed.reserve(spec.num_experts);
    for (std::size_t k = 0; k < spec.num_experts; ++k) {
        std::string name = "routed." + std::to_string(k);
        DenseMatrix w = reader.f32_matrix(name);
        if (w.rows != spec.out_dim || w.cols != spec.in_dim)
            throw FormatError("tensor '" + name + "': expected shape [" +
                              std::to_string(spec.out_dim) + ", " + std::to_string(spec.in_dim) +
                              "]");
        model.experts.routed.push_back(std::move(w));
    }
    model.experts.shared.reserve(spec.num_shared);
    for (std::size_t s = 0; s < spec.num_shared; ++s) {
        std::string name = "shared." + std::to_string(s);
        DenseMatrix w = reader.f32_matrix(name);
        if (w.rows != spec.out_dim || w.cols != spec.in_dim)
            throw FormatError("tensor '" + name + "': expected shape [" +
                              std::to_string(spec.out_dim) + ", " + std::to_string(spec.in_dim) +
                              "]");
        model.experts.shared.push_back(std::move(w));
    }

    model.gate_weights = reader.f32_matrix("gate_weights");
    if (model.gate_weights.rows != spec.num_experts || model.gate_weights.cols != spec.in_dim)
        throw FormatError("tensor 'gate_weights': expected shape [" +
                          std::to_string(spec.num_experts) + ", " + std::to_string(spec.in_dim) +
                          "]");
    model.calib = reader.f32_matrix("calib");
    if (model.calib.rows > 0 && model.calib.cols != spec.in_dim)
        throw FormatError("tensor 'calib': expected " + std::to_string(spec.in_dim) + " columns");
    return model;
}

// ----------------------------------------------------------------------------
// artifact containers
// ----------------------------------------------------------------------------

void write_artifact(const std::string& dir, const TileQLayer& layer,
                    const nlohmann::json& extra_meta) {
    const MoELayerSpec& spec = layer.spec;
    spec.validate();
    const std::size_t k_experts = spec.num_experts;
    const std::size_t o = spec.out_dim;
    const std::size_t i = spec.in_dim;
    const TiledLowRank& tiled = layer.tiled;
    const TileAssignment& asg = tiled.assignment;
    const std::size_t m = asg.grid_rows;
    const std::size_t n = asg.grid_cols;
    const std::size_t r = tiled.rank;

    if (layer.quantized.size() != k_experts)
        throw ShapeError("layer must hold one quantized residual per routed expert");
    if (layer.shared_quantized.size() != spec.num_shared)
        throw ShapeError("layer must hold one quantized matrix per shared expert");
    if (layer.gate_weights.rows != k_experts || layer.gate_weights.cols != i)
        throw ShapeError("gate_weights must be num_experts x in_dim");
    if (tiled.u_blocks.size() != m || tiled.v_blocks.size() != n || m == 0 || n == 0)
        throw ShapeError("tiled factors must match the grid geometry");
    if (tiled.singular_bits.size() != r || tiled.singulars.size() != r)
        throw ShapeError("tiled singular values must match the rank");
    if (asg.ideal.size() != k_experts || asg.placed.size() != k_experts)
        throw ShapeError("tile assignment must cover every expert");
    if (tiled.scaling.num_experts() != k_experts)
        throw ShapeError("scaling vectors must cover every expert");
    for (const CodedBlock& b : tiled.u_blocks)
        if (b.rows != o || b.cols != r || b.codes.size() != o * r)
            throw ShapeError("every u block must be out_dim x rank");
    for (const CodedBlock& b : tiled.v_blocks)
        if (b.rows != r || b.cols != i || b.codes.size() != r * i)
            throw ShapeError("every v block must be rank x in_dim");
    for (const std::vector<float>& s : tiled.scaling.s)
        if (s.size() != i) throw ShapeError("every scaling vector must have in_dim entries");
    for (const QuantizedExpert& q : layer.quantized)
        if (q.out_dim != o || q.in_dim != i)
            throw ShapeError("quantized residual dimensions must match the layer spec");
    for (const QuantizedExpert& q : layer.shared_quantized)
        if (q.out_dim != o || q.in_dim != i)
            throw ShapeError("quantized shared dimensions must match the layer spec");
    for (const auto& [pr, pc] : asg.placed)
        if (pr >= m || pc >= n) throw ParamError("placement cell outside the tile grid");
    if (m > 0xFFFF || n > 0xFFFF)
        throw ParamError("tile grid too large for 16-bit placement encoding");

    ContainerWriter writer("tileq_artifact");

    writer.add("gate_weights", {k_experts, i}, "f32",
               bytes_of_f32(layer.gate_weights.data.data(), layer.gate_weights.data.size()));

    std::vector<float> scaling_flat;
    scaling_flat.reserve(k_experts * i);
    for (const std::vector<float>& s : tiled.scaling.s)
        scaling_flat.insert(scaling_flat.end(), s.begin(), s.end());
    writer.add("scaling", {k_experts, i}, "f32",
               bytes_of_f32(scaling_flat.data(), scaling_flat.size()));

    std::vector<std::uint16_t> placement(k_experts * 2);
    for (std::size_t e = 0; e < k_experts; ++e) {
        placement[2 * e] = static_cast<std::uint16_t>(asg.placed[e].first);
        placement[2 * e + 1] = static_cast<std::uint16_t>(asg.placed[e].second);
    }
    writer.add("placement", {k_experts, 2}, "u16",
               bytes_of_u16(placement.data(), placement.size()));

    writer.add("tiled.singulars", {r}, "f16-roundtrip",
               bytes_of_u16(tiled.singular_bits.data(), tiled.singular_bits.size()));

    // Factor codes are the int8 wire values; dtype u8 stores their
    // two's-complement bytes (see docs/format.md).
    std::vector<std::int8_t> u_codes;
    std::vector<float> u_absmax;
    u_codes.reserve(m * o * r);
    for (const CodedBlock& b : tiled.u_blocks) {
        u_codes.insert(u_codes.end(), b.codes.begin(), b.codes.end());
        u_absmax.push_back(b.absmax);
    }
    writer.add("tiled.u.codes", {m, o, r}, "u8", bytes_of_i8(u_codes.data(), u_codes.size()));
    writer.add("tiled.u.absmax", {m}, "f32", bytes_of_f32(u_absmax.data(), u_absmax.size()));

    std::vector<std::int8_t> v_codes;
    std::vector<float> v_absmax;
    v_codes.reserve(n * r * i);
    for (const CodedBlock& b : tiled.v_blocks) {
        v_codes.insert(v_codes.end(), b.codes.begin(), b.codes.end());
        v_absmax.push_back(b.absmax);
    }
    writer.add("tiled.v.codes", {n, r, i}, "u8", bytes_of_i8(v_codes.data(), v_codes.size()));
    writer.add("tiled.v.absmax", {n}, "f32", bytes_of_f32(v_absmax.data(), v_absmax.size()));

    check_uniform_quant(layer.quantized, layer.quantized.front(), "routed residuals");
    for (std::size_t e = 0; e < k_experts; ++e)
        add_quantized(writer, "expert." + std::to_string(e), layer.quantized[e]);

    json meta = {{"spec", spec_to_meta(spec)},
                 {"quant", quant_meta(layer.quantized.front())},
                 {"tiling",
                  {{"grid_rows", m},
                   {"grid_cols", n},
                   {"rank", r},
                   {"total_l1_displacement", asg.total_l1_displacement},
                   {"ideal", asg.ideal}}}};
    if (spec.num_shared > 0) {
        check_uniform_quant(layer.shared_quantized, layer.shared_quantized.front(),
                            "shared experts");
        for (std::size_t s = 0; s < spec.num_shared; ++s)
            add_quantized(writer, "sharedexpert." + std::to_string(s),
                          layer.shared_quantized[s]);
        meta["shared_quant"] = quant_meta(layer.shared_quantized.front());
    }
    writer.finish(dir, merge_meta(std::move(meta), extra_meta));
}

LoadedArtifact read_artifact(const std::string& dir, bool verify_crc) {
    ContainerReader reader(dir, "tileq_artifact", verify_crc);
    LoadedArtifact out;
    out.meta = reader.meta();
    MoELayerSpec spec = spec_from_meta(out.meta);
    const std::size_t k_experts = spec.num_experts;
    const std::size_t o = spec.out_dim;
    const std::size_t i = spec.in_dim;

    const json& tiling = require_object(out.meta, "tiling");
    const std::size_t m = require_size(tiling, "grid_rows");
    const std::size_t n = require_size(tiling, "grid_cols");
    const std::size_t r = require_size(tiling, "rank");
    if (m == 0 || n == 0 || r == 0)
        throw FormatError("manifest tiling meta: grid and rank must be nonzero");

    TileQLayer& layer = out.layer;
    layer.spec = spec;
    layer.gate_weights = reader.f32_matrix("gate_weights");
    if (layer.gate_weights.rows != k_experts || layer.gate_weights.cols != i)
        throw FormatError("tensor 'gate_weights': expected shape [" + std::to_string(k_experts) +
                          ", " + std::to_string(i) + "]");

    TiledLowRank& tiled = layer.tiled;
    tiled.rank = r;

    DenseMatrix scaling = reader.f32_matrix("scaling");
    if (scaling.rows != k_experts || scaling.cols != i)
        throw FormatError("tensor 'scaling': expected shape [" + std::to_string(k_experts) + ", " +
                          std::to_string(i) + "]");
    tiled.scaling.s.resize(k_experts);
    for (std::size_t e = 0; e < k_experts; ++e) {
        const float* row = scaling.row(e);
        tiled.scaling.s[e].assign(row, row + i);
    }

    TileAssignment& asg = tiled.assignment;
    asg.grid_rows = m;
    asg.grid_cols = n;
    asg.total_l1_displacement = require_size(tiling, "total_l1_displacement");
    if (!tiling.contains("ideal") || !tiling["ideal"].is_array() ||
        tiling["ideal"].size() != k_experts)
        throw FormatError("manifest tiling meta: ideal must list every expert's cell");
    asg.ideal.resize(k_experts);
    for (std::size_t e = 0; e < k_experts; ++e) {
        const json& cell = tiling["ideal"][e];
        if (!cell.is_array() || cell.size() != 2 || !cell[0].is_number_unsigned() ||
            !cell[1].is_number_unsigned())
            throw FormatError("manifest tiling meta: malformed ideal cell");
        asg.ideal[e] = {cell[0].get<std::size_t>(), cell[1].get<std::size_t>()};
    }

    {
        std::vector<std::size_t> shape;
        std::vector<std::uint16_t> placement =
            u16_of_bytes(reader.bytes("placement", "u16", &shape));
        if (shape != std::vector<std::size_t>{k_experts, 2})
            throw FormatError("tensor 'placement': expected shape [" + std::to_string(k_experts) +
                              ", 2]");
        asg.placed.resize(k_experts);
        std::set<std::pair<std::size_t, std::size_t>> seen;
        for (std::size_t e = 0; e < k_experts; ++e) {
            std::pair<std::size_t, std::size_t> cell{placement[2 * e], placement[2 * e + 1]};
            if (cell.first >= m || cell.second >= n)
                throw FormatError("tensor 'placement': cell outside the tile grid");
            if (!seen.insert(cell).second)
                throw FormatError("tensor 'placement': duplicate cell (placement must be"
                                  " injective)");
            asg.placed[e] = cell;
        }
        // The stored displacement is redundant; recompute so silent manifest
        // edits cannot desynchronize it from the cells.
        std::size_t dist = 0;
        for (std::size_t e = 0; e < k_experts; ++e) {
            auto gap = [](std::size_t a, std::size_t b) { return a > b ? a - b : b - a; };
            dist += gap(asg.placed[e].first, asg.ideal[e].first) +
                    gap(asg.placed[e].second, asg.ideal[e].second);
        }
        if (dist != asg.total_l1_displacement)
            throw FormatError("manifest tiling meta: total_l1_displacement does not match the"
                              " stored cells");
    }

    tiled.singular_bits = reader.f16_bits("tiled.singulars", {r});
    tiled.singulars.resize(r);
    for (std::size_t j = 0; j < r; ++j)
        tiled.singulars[j] = half_bits_to_float(tiled.singular_bits[j]);

    {
        std::vector<std::size_t> shape;
        std::vector<std::int8_t> u_codes = i8_of_bytes(reader.bytes("tiled.u.codes", "u8", &shape));
        if (shape != std::vector<std::size_t>{m, o, r})
            throw FormatError("tensor 'tiled.u.codes': unexpected shape");
        std::vector<float> u_absmax = reader.f32_vector("tiled.u.absmax", m);
        tiled.u_blocks.resize(m);
        for (std::size_t p = 0; p < m; ++p) {
            CodedBlock& b = tiled.u_blocks[p];
            b.rows = o;
            b.cols = r;
            b.codes.assign(u_codes.begin() + static_cast<std::ptrdiff_t>(p * o * r),
                           u_codes.begin() + static_cast<std::ptrdiff_t>((p + 1) * o * r));
            b.absmax = u_absmax[p];
            b.values = decode_block_i8(b);
        }

        std::vector<std::int8_t> v_codes = i8_of_bytes(reader.bytes("tiled.v.codes", "u8", &shape));
        if (shape != std::vector<std::size_t>{n, r, i})
            throw FormatError("tensor 'tiled.v.codes': unexpected shape");
        std::vector<float> v_absmax = reader.f32_vector("tiled.v.absmax", n);
        tiled.v_blocks.resize(n);
        for (std::size_t q = 0; q < n; ++q) {
            CodedBlock& b = tiled.v_blocks[q];
            b.rows = r;
            b.cols = i;
            b.codes.assign(v_codes.begin() + static_cast<std::ptrdiff_t>(q * r * i),
                           v_codes.begin() + static_cast<std::ptrdiff_t>((q + 1) * r * i));
            b.absmax = v_absmax[q];
            b.values = decode_block_i8(b);
        }
    }

    const json& qmeta = require_object(out.meta, "quant");
    layer.quantized.reserve(k_experts);
    for (std::size_t e = 0; e < k_experts; ++e)
        layer.quantized.push_back(
            read_quantized(reader, "expert." + std::to_string(e), qmeta, o, i));
    if (spec.num_shared > 0) {
        const json& smeta = require_object(out.meta, "shared_quant");
        layer.shared_quantized.reserve(spec.num_shared);
        for (std::size_t s = 0; s < spec.num_shared; ++s)
            layer.shared_quantized.push_back(
                read_quantized(reader, "sharedexpert." + std::to_string(s), smeta, o, i));
    }
    return out;
}

std::size_t accounted_body_bytes(const std::string& dir) {
    fs::path path = fs::path(dir) / kManifestName;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    json manifest;
    try {
        manifest = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
    }
    if (!manifest.contains("tensors") || !manifest["tensors"].is_object())
        throw FormatError("manifest missing tensors object");
    std::size_t total = 0;
    for (const auto& [name, entry] : manifest["tensors"].items()) {
        // Residual payloads and shared factor blocks are what the bit budget
        // predicts; gates, scaling, placement and shared experts are the
        // metadata/side channels it excludes.
        if (name.rfind("expert.", 0) == 0 || name.rfind("tiled.", 0) == 0)
            total += entry["byte_length"].get<std::size_t>();
    }
    return total;
}

} // namespace tileq
