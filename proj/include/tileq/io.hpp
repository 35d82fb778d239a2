#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "tileq/infer.hpp"
#include "tileq/matrix.hpp"
#include "tileq/moe.hpp"

namespace tileq {

// Directory-of-blobs containers: `manifest.json` plus one little-endian
// binary blob per tensor, each carrying a CRC32 in the manifest. Two kinds
// share the format: full-precision expert sets ("expert_set") and quantized
// layers ("tileq_artifact"). docs/format.md is the wire documentation; the
// byte layout produced here is normative and round-trips bit-exactly.

/// Serialize an expert set with its gate matrix and calibration tokens.
/// `extra_meta` is merged into the manifest's "meta" object (must not collide
/// with the reserved "spec" key). Throws IoError on filesystem failure.
void write_model(const std::string& dir, const ExpertSet& experts,
                 const DenseMatrix& gate_weights, const DenseMatrix& calib,
                 const nlohmann::json& extra_meta = nlohmann::json::object());

struct LoadedModel {
    ExpertSet experts;
    DenseMatrix gate_weights; // K x i
    DenseMatrix calib;        // T x i (possibly T = 0)
    nlohmann::json meta;
};

/// Read a model container, validating manifest version, tensor presence,
/// byte lengths and (unless verify_crc is false) checksums. Failures name
/// the offending tensor. Lossless: matrices compare bitwise equal to what
/// write_model saw.
LoadedModel read_model(const std::string& dir, bool verify_crc = true);

/// Serialize a quantized layer (residual codes, grids, factor blocks,
/// singular values, scaling, placement, gates). Stored wire data (codes,
/// absmax, f16 bit patterns) is dumped verbatim from the layer, never
/// re-encoded, so write -> read -> write is byte-identical.
void write_artifact(const std::string& dir, const TileQLayer& layer,
                    const nlohmann::json& extra_meta = nlohmann::json::object());

struct LoadedArtifact {
    TileQLayer layer;
    nlohmann::json meta;
};

/// Read an artifact, validating version, shapes, packed lengths, placement
/// bounds and checksums. The returned layer's forward outputs are bitwise
/// identical to the pre-serialization layer's.
LoadedArtifact read_artifact(const std::string& dir, bool verify_crc = true);

/// Sum of byte_length over the tensors the bit accounting predicts (residual
/// codes/scales/zeros/codebooks and shared factor blocks); excludes metadata
/// tensors (gates, scaling vectors, placement) and shared-expert payloads.
std::size_t accounted_body_bytes(const std::string& dir);

} // namespace tileq
