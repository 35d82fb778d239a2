// Python bindings for the main operations: routing, sketch factorization,
// the full quantization pipeline, and artifact-backed inference. Arrays cross
// the boundary as contiguous float32 numpy arrays.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "tileq/errors.hpp"
#include "tileq/infer.hpp"
#include "tileq/io.hpp"
#include "tileq/lowrank.hpp"
#include "tileq/matrix.hpp"
#include "tileq/moe.hpp"
#include "tileq/pipeline.hpp"

namespace py = pybind11;
using namespace tileq;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

DenseMatrix matrix_from_array(const FloatArray& a, const char* name) {
    if (a.ndim() != 2) throw ParamError(std::string(name) + " must be a 2-D float array");
    DenseMatrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
    if (!m.data.empty()) std::memcpy(m.data.data(), a.data(), m.data.size() * sizeof(float));
    return m;
}

py::array_t<float> array_from_matrix(const DenseMatrix& m) {
    py::array_t<float> out({m.rows, m.cols});
    if (!m.data.empty())
        std::memcpy(out.mutable_data(), m.data.data(), m.data.size() * sizeof(float));
    return out;
}

std::vector<DenseMatrix> experts_from_array(const FloatArray& a, const char* name) {
    if (a.ndim() != 3) throw ParamError(std::string(name) + " must be a 3-D float array");
    std::vector<DenseMatrix> experts;
    const std::size_t k = static_cast<std::size_t>(a.shape(0));
    const std::size_t o = static_cast<std::size_t>(a.shape(1));
    const std::size_t i = static_cast<std::size_t>(a.shape(2));
    experts.reserve(k);
    const float* base = a.data();
    for (std::size_t e = 0; e < k; ++e) {
        DenseMatrix w(o, i);
        std::memcpy(w.data.data(), base + e * o * i, o * i * sizeof(float));
        experts.push_back(std::move(w));
    }
    return experts;
}

py::tuple py_route(const FloatArray& x, const FloatArray& gate, std::size_t top_k) {
    DenseMatrix xm = matrix_from_array(x, "x");
    DenseMatrix gm = matrix_from_array(gate, "gate_weights");
    RoutingDecision routing = route(xm, gm, top_k);
    py::array_t<std::int64_t> ids({routing.batch, routing.top_k});
    for (std::size_t b = 0; b < routing.batch; ++b)
        for (std::size_t t = 0; t < routing.top_k; ++t)
            ids.mutable_at(b, t) = static_cast<std::int64_t>(routing.id_at(b, t));
    return py::make_tuple(ids, array_from_matrix(routing.gates));
}

py::tuple py_sketch_lowrank(const FloatArray& w, std::size_t rank, int power_iters,
                            std::uint64_t seed) {
    LowRankFactor f = sketch_lowrank(matrix_from_array(w, "w"), rank, power_iters, seed);
    py::array_t<float> singulars(f.singulars.size());
    std::memcpy(singulars.mutable_data(), f.singulars.data(),
                f.singulars.size() * sizeof(float));
    return py::make_tuple(array_from_matrix(f.left), singulars, array_from_matrix(f.right));
}

py::dict py_quantize_moe(const FloatArray& routed, const FloatArray& gate, const FloatArray& calib,
                         std::size_t top_k, std::size_t grid_rows, std::size_t grid_cols,
                         std::size_t rank, int bits, std::size_t group_size,
                         const std::string& mode, std::uint64_t seed,
                         const std::string& artifact_dir) {
    ExpertSet experts;
    experts.routed = experts_from_array(routed, "routed");
    if (experts.routed.empty()) throw ParamError("routed must hold at least one expert");
    experts.spec = MoELayerSpec{experts.routed.size(), top_k, experts.routed[0].cols,
                                experts.routed[0].rows, 0};

    TileQConfig cfg;
    cfg.grid_rows = grid_rows;
    cfg.grid_cols = grid_cols;
    cfg.rank = rank;
    cfg.bits = bits;
    cfg.group_size = group_size;
    cfg.quantizer = parse_quantizer(mode);
    cfg.seed = seed;

    QuantizeResult result = quantize_moe(experts, matrix_from_array(gate, "gate_weights"),
                                         matrix_from_array(calib, "calib"), cfg);
    if (!artifact_dir.empty()) write_artifact(artifact_dir, result.layer);

    py::dict report;
    report["lowrank_mean_relative_error"] = result.report.lowrank_mean_relative_error;
    report["mean_relative_error"] = result.report.mean_relative_error;
    report["proxy_loss"] = result.report.total_proxy_loss;
    report["total_l1_displacement"] = result.report.total_l1_displacement;
    py::dict stages;
    for (const auto& [stage, secs] : result.report.stage_seconds)
        stages[py::str(stage)] = secs;
    report["stages_seconds"] = stages;
    return report;
}

py::array_t<float> py_forward_from_artifact(const std::string& artifact_dir, const FloatArray& x) {
    LoadedArtifact loaded = read_artifact(artifact_dir);
    DenseMatrix xm = matrix_from_array(x, "x");
    RoutingDecision routing = route(xm, loaded.layer.gate_weights, loaded.layer.spec.top_k);
    return array_from_matrix(tileq_forward(xm, loaded.layer, routing));
}

} // namespace

PYBIND11_MODULE(_tileq, m) {
    m.doc() = "tiled low-rank quantization for MoE expert weights";

    py::register_exception<Error>(m, "TileqError");

    m.def("route", &py_route, py::arg("x"), py::arg("gate_weights"), py::arg("top_k"),
          "Top-k softmax routing; returns (expert_ids, renormalized_gates).");
    m.def("sketch_lowrank", &py_sketch_lowrank, py::arg("w"), py::arg("rank"),
          py::arg("power_iters") = 4, py::arg("seed") = 0,
          "Randomized low-rank factorization; returns (left, singulars, right).");
    m.def("quantize_moe", &py_quantize_moe, py::arg("routed"), py::arg("gate_weights"),
          py::arg("calib"), py::arg("top_k") = 2, py::arg("grid_rows") = 0,
          py::arg("grid_cols") = 0, py::arg("rank") = 32, py::arg("bits") = 4,
          py::arg("group_size") = 128, py::arg("mode") = "rtn", py::arg("seed") = 0,
          py::arg("artifact_dir") = "",
          "Run the full pipeline on a [K, o, i] expert stack; optionally serialize the"
          " artifact; returns the pipeline report.");
    m.def("forward_from_artifact", &py_forward_from_artifact, py::arg("artifact_dir"),
          py::arg("x"), "Load an artifact and run the fused quantized forward pass.");
}
