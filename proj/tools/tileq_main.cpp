// tileq: command-line front end for the tiled low-rank MoE quantizer.
//
// Subcommands: synth (fixture generation), quantize (full pipeline), verify
// (equivalence suite on an artifact), bench (latency sweep), report (storage
// accounting). Human-readable progress goes to stderr; machine output (JSON
// or CSV) goes to stdout or --out. Exit codes: 0 success, 1 verification
// failure, 2 IO/config error, 3 numeric failure.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tileq/accounting.hpp"
#include "tileq/errors.hpp"
#include "tileq/infer.hpp"
#include "tileq/io.hpp"
#include "tileq/lowrank.hpp"
#include "tileq/matrix.hpp"
#include "tileq/moe.hpp"
#include "tileq/pipeline.hpp"
#include "tileq/rng.hpp"
#include "tileq/tiler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tileq;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

// Stream seeds for the CLI's own draws (the pipeline derives its stage seeds
// from the same user seed independently).
constexpr std::uint64_t kCalibStream = 5;
constexpr std::uint64_t kGateStream = 6;
constexpr std::uint64_t kVerifyStream = 21;

// ----------------------------------------------------------------------------
// run configuration: compiled defaults < TILEQ_SEED < --config file < flags
// ----------------------------------------------------------------------------

struct RunConfig {
    // layer geometry
    std::size_t k = 8;
    std::size_t topk = 2;
    std::size_t in_dim = 64;
    std::size_t out_dim = 64;
    std::size_t num_shared = 0;
    // tiling / factorization
    std::string grid; // "MxN", empty = auto (M = round(sqrt(K)), N = ceil(K/M))
    std::size_t rank = 32;
    std::size_t feature_rank = 0; // 0 = auto (rank / 2, at least 1)
    double scale_exp = 0.5;
    int power_iters = 4;
    // residual quantizer
    int bits = 4;
    std::size_t group_size = 128;
    double damping = 0.01;
    std::string mode = "rtn";
    std::size_t sub_dim = 2;
    // execution
    std::uint64_t seed = 0;
    int threads = 1;
    std::string out; // machine-output path; empty = stdout
    bool no_verify = false;
    // paths
    std::string model_dir;
    std::string artifact_dir;
    // synth
    double noise = 0.0;
    double mix_scale = 1.0;
    std::size_t calib_tokens = 256;
    // verify
    std::string check; // "" or "error-bound"
    double epsilon = 0.02;
    // bench
    std::size_t repeats = 20;
    std::size_t warmup = 3;
    bool json_rows = false;
    // report
    int d_factor = 8;
    int d_fp = 16;
    std::string scheme; // report filter; empty = all four
    std::size_t batch = 1;
};

/// Pre-scan argv for --config so file values can seed the defaults before
/// CLI11 parses the real flags (flags then override).
json load_config_file(int argc, char** argv) {
    std::string path;
    for (int a = 1; a < argc; ++a) {
        std::string arg = argv[a];
        if (arg == "--config" && a + 1 < argc) path = argv[a + 1];
        else if (arg.rfind("--config=", 0) == 0) path = arg.substr(9);
    }
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    json cfg;
    try {
        cfg = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError("config file '" + path + "' is not valid JSON: " + std::string(e.what()));
    }
    if (!cfg.is_object()) throw FormatError("config file '" + path + "' must hold a JSON object");
    return cfg;
}

template <typename T>
void cfg_num(const json& cfg, const char* key, T& slot) {
    if (!cfg.contains(key)) return;
    if (!cfg[key].is_number())
        throw ParamError("config key '" + std::string(key) + "' must be a number");
    slot = cfg[key].get<T>();
}

void cfg_str(const json& cfg, const char* key, std::string& slot) {
    if (!cfg.contains(key)) return;
    if (!cfg[key].is_string())
        throw ParamError("config key '" + std::string(key) + "' must be a string");
    slot = cfg[key].get<std::string>();
}

void cfg_bool(const json& cfg, const char* key, bool& slot) {
    if (!cfg.contains(key)) return;
    if (!cfg[key].is_boolean())
        throw ParamError("config key '" + std::string(key) + "' must be a boolean");
    slot = cfg[key].get<bool>();
}

/// Config-file keys are the long flag names without the leading dashes.
void apply_config(const json& cfg, RunConfig& rc) {
    cfg_num(cfg, "k", rc.k);
    cfg_num(cfg, "topk", rc.topk);
    cfg_num(cfg, "i", rc.in_dim);
    cfg_num(cfg, "o", rc.out_dim);
    cfg_num(cfg, "shared", rc.num_shared);
    cfg_str(cfg, "grid", rc.grid);
    cfg_num(cfg, "rank", rc.rank);
    cfg_num(cfg, "feature-rank", rc.feature_rank);
    cfg_num(cfg, "scale-exp", rc.scale_exp);
    cfg_num(cfg, "power-iters", rc.power_iters);
    cfg_num(cfg, "bits", rc.bits);
    cfg_num(cfg, "group-size", rc.group_size);
    cfg_num(cfg, "damping", rc.damping);
    cfg_str(cfg, "mode", rc.mode);
    cfg_num(cfg, "subdim", rc.sub_dim);
    cfg_num(cfg, "seed", rc.seed);
    cfg_num(cfg, "threads", rc.threads);
    cfg_str(cfg, "out", rc.out);
    cfg_bool(cfg, "no-verify", rc.no_verify);
    cfg_str(cfg, "model", rc.model_dir);
    cfg_str(cfg, "artifact", rc.artifact_dir);
    cfg_num(cfg, "noise", rc.noise);
    cfg_num(cfg, "mix-scale", rc.mix_scale);
    cfg_num(cfg, "calib", rc.calib_tokens);
    cfg_str(cfg, "check", rc.check);
    cfg_num(cfg, "epsilon", rc.epsilon);
    cfg_num(cfg, "repeats", rc.repeats);
    cfg_num(cfg, "warmup", rc.warmup);
    cfg_bool(cfg, "json", rc.json_rows);
    cfg_num(cfg, "d-factor", rc.d_factor);
    cfg_num(cfg, "d-fp", rc.d_fp);
    cfg_str(cfg, "scheme", rc.scheme);
    cfg_num(cfg, "batch", rc.batch);
}

void apply_env_seed(RunConfig& rc) {
    const char* env = std::getenv("TILEQ_SEED");
    if (env == nullptr || *env == '\0') return;
    try {
        std::size_t used = 0;
        rc.seed = std::stoull(env, &used);
        if (env[used] != '\0') throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
        throw ParamError("TILEQ_SEED must be an unsigned integer, got '" + std::string(env) + "'");
    }
}

/// "MxN" -> (M, N); empty -> (0, 0) meaning "derive from K".
std::pair<std::size_t, std::size_t> parse_grid(const std::string& text) {
    if (text.empty()) return {0, 0};
    std::size_t split = text.find_first_of("xX");
    try {
        if (split == std::string::npos) throw std::invalid_argument("no separator");
        std::size_t m_end = 0;
        std::size_t n_end = 0;
        std::size_t m = std::stoull(text.substr(0, split), &m_end);
        std::string n_text = text.substr(split + 1);
        std::size_t n = std::stoull(n_text, &n_end);
        if (m_end != split || n_end != n_text.size() || m == 0 || n == 0)
            throw std::invalid_argument("bad integers");
        return {m, n};
    } catch (const std::exception&) {
        throw ParamError("--grid must look like MxN with positive integers, got '" + text + "'");
    }
}

// ----------------------------------------------------------------------------
// output helpers
// ----------------------------------------------------------------------------

void emit_machine(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        if (text.empty() || text.back() != '\n') std::cout << '\n';
        return;
    }
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + out_path + "' for writing");
    out << text;
    if (text.empty() || text.back() != '\n') out << '\n';
    if (!out) throw IoError("short write to '" + out_path + "'");
}

json budget_to_json(const BitBudget& b) {
    return {{"scheme", scheme_name(b.scheme)},
            {"base_bits", b.base_bits},
            {"scale_bits", b.scale_bits},
            {"lowrank_factor_bits", b.lowrank_factor_bits},
            {"singular_bits", b.singular_bits},
            {"extra_bits", b.extra_bits()},
            {"total_avg_bits", b.total_avg_bits},
            {"metadata_bits", b.metadata_bits}};
}

// ----------------------------------------------------------------------------
// verification checks (shared between `quantize` and `verify`)
// ----------------------------------------------------------------------------

struct CheckResult {
    bool pass = false;
    std::string detail;
    double max_rel = 0.0;
};

json check_to_json(const CheckResult& c) {
    return {{"pass", c.pass}, {"detail", c.detail}, {"max_rel_err", c.max_rel}};
}

double relative_gap(const DenseMatrix& got, const DenseMatrix& want) {
    double scale = 0.0;
    for (float v : want.data) scale = std::max(scale, static_cast<double>(std::abs(v)));
    return max_abs_diff(got, want) / (scale + 1e-30);
}

/// Fused low-rank path against the materialized-expert oracle on a seeded
/// batch routed through the artifact's own gate.
CheckResult check_fused_vs_naive(const TileQLayer& layer, std::uint64_t seed) {
    CheckResult c;
    const MoELayerSpec& spec = layer.spec;
    CounterRng rng(CounterRng::derive(seed, kVerifyStream));
    DenseMatrix x = gaussian_matrix(8, spec.in_dim, rng);
    RoutingDecision routing = route(x, layer.gate_weights, spec.top_k);

    ExpertSet recon;
    recon.spec = spec;
    recon.spec.num_shared = 0;
    for (std::size_t k = 0; k < spec.num_experts; ++k)
        recon.routed.push_back(reconstruct_expert(layer.tiled, k));
    DenseMatrix naive = reference_forward(x, recon, routing);
    DenseMatrix fused = lotile_forward(x, layer.tiled, routing);

    c.max_rel = relative_gap(fused, naive);
    c.pass = c.max_rel <= 1e-5;
    c.detail = c.pass ? "fused low-rank path matches the naive oracle"
                      : "fused low-rank path diverges from the naive oracle";
    return c;
}

/// Full quantized forward (fused low-rank + dequantized residual) against one
/// dense reference over fully materialized experts.
CheckResult check_quantized_vs_reference(const TileQLayer& layer, std::uint64_t seed) {
    CheckResult c;
    const MoELayerSpec& spec = layer.spec;
    CounterRng rng(CounterRng::derive(seed, kVerifyStream + 1));
    DenseMatrix x = gaussian_matrix(8, spec.in_dim, rng);
    RoutingDecision routing = route(x, layer.gate_weights, spec.top_k);

    ExpertSet dense;
    dense.spec = spec;
    for (std::size_t k = 0; k < spec.num_experts; ++k)
        dense.routed.push_back(
            add(reconstruct_expert(layer.tiled, k), dequantize(layer.quantized[k])));
    for (std::size_t s = 0; s < spec.num_shared; ++s)
        dense.shared.push_back(dequantize(layer.shared_quantized[s]));
    DenseMatrix want = reference_forward(x, dense, routing);
    DenseMatrix got = tileq_forward(x, layer, routing);

    c.max_rel = relative_gap(got, want);
    c.pass = c.max_rel <= 1e-5;
    c.detail = c.pass ? "quantized forward matches the dense reference"
                      : "quantized forward diverges from the dense reference";
    return c;
}

std::vector<std::uint8_t> slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
}

/// Re-serialize the loaded artifact and require byte-identical blobs and a
/// semantically identical manifest.
CheckResult check_round_trip(const LoadedArtifact& loaded, const std::string& artifact_dir) {
    CheckResult c;
    fs::path tmp = fs::temp_directory_path() /
                   ("tileq-verify-" +
                    std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    json extra = loaded.meta;
    for (const char* reserved : {"spec", "quant", "shared_quant", "tiling"}) extra.erase(reserved);
    try {
        write_artifact(tmp.string(), loaded.layer, extra);
        json original = json::parse(slurp(fs::path(artifact_dir) / "manifest.json"));
        json rewritten = json::parse(slurp(tmp / "manifest.json"));
        if (original != rewritten) {
            c.detail = "re-serialized manifest differs from the original";
        } else {
            c.pass = true;
            for (const auto& [name, entry] : original["tensors"].items()) {
                std::string file = entry["file"].get<std::string>();
                if (slurp(fs::path(artifact_dir) / file) != slurp(tmp / file)) {
                    c.pass = false;
                    c.detail = "blob '" + file + "' changed across write -> read -> write";
                    break;
                }
            }
            if (c.pass) c.detail = "write -> read -> write is byte-identical";
        }
    } catch (const Error& e) {
        c.pass = false;
        c.detail = std::string("round trip failed: ") + e.what();
    }
    std::error_code ec;
    fs::remove_all(tmp, ec);
    return c;
}

// ----------------------------------------------------------------------------
// subcommands
// ----------------------------------------------------------------------------

int run_synth(const RunConfig& rc) {
    if (rc.model_dir.empty()) throw ParamError("synth requires --model <dir>");
    MoELayerSpec spec{rc.k, rc.topk, rc.in_dim, rc.out_dim, rc.num_shared};
    spec.validate();
    auto [m, n] = parse_grid(rc.grid);
    if (m == 0) {
        m = static_cast<std::size_t>(
            std::llround(std::sqrt(static_cast<double>(spec.num_experts))));
        if (m == 0) m = 1;
        n = (spec.num_experts + m - 1) / m;
    }
    if (rc.rank == 0) throw ParamError("synth requires --rank >= 1");

    SynthResult synth = synth_experts(spec, m, n, rc.rank, static_cast<float>(rc.mix_scale),
                                      static_cast<float>(rc.noise), rc.seed);
    CounterRng gate_rng(CounterRng::derive(rc.seed, kGateStream));
    DenseMatrix gate = gaussian_matrix(spec.num_experts, spec.in_dim, gate_rng);
    // Calibration tokens are random signs, not gaussians: every routed
    // subset then has per-channel mean absolute activation exactly 1, so
    // activation-aware scaling is exactly neutral (s_k = 1^p / sqrt(1*1))
    // and cannot blur the planted structure with per-expert sampling noise.
    // Routing still varies (gate scores are dense projections of the signs)
    // and the GPTQ Hessian stays well-conditioned with non-trivial
    // off-diagonals.
    CounterRng calib_rng(CounterRng::derive(rc.seed, kCalibStream));
    DenseMatrix calib(rc.calib_tokens, spec.in_dim);
    for (float& v : calib.data) v = calib_rng.next_unit() < 0.5 ? -1.0f : 1.0f;

    json synth_meta = {{"synth",
                        {{"grid_rows", m},
                         {"grid_cols", n},
                         {"rank", rc.rank},
                         {"mix_scale", rc.mix_scale},
                         {"noise", rc.noise},
                         {"calib_tokens", rc.calib_tokens},
                         {"seed", rc.seed}}}};
    write_model(rc.model_dir, synth.experts, gate, calib, synth_meta);

    json planted = {{"grid", {m, n}},
                    {"rank", rc.rank},
                    {"noise", rc.noise},
                    {"mix_scale", rc.mix_scale},
                    {"seed", rc.seed},
                    {"cells", synth.planted}};
    std::ofstream side(fs::path(rc.model_dir) / "planted.json", std::ios::binary | std::ios::trunc);
    if (!side) throw IoError("cannot write planted sidecar in '" + rc.model_dir + "'");
    side << planted.dump(2) << '\n';
    if (!side) throw IoError("short write to planted sidecar");

    std::cerr << "synth: wrote " << spec.num_experts << " experts (" << spec.out_dim << "x"
              << spec.in_dim << "), planted rank " << rc.rank << " on a " << m << "x" << n
              << " grid, " << rc.calib_tokens << " calibration tokens -> " << rc.model_dir
              << "\n";
    return kExitOk;
}

int run_quantize(const RunConfig& rc) {
    if (rc.model_dir.empty()) throw ParamError("quantize requires --model <dir>");
    if (rc.artifact_dir.empty()) throw ParamError("quantize requires --artifact <dir>");
    LoadedModel model = read_model(rc.model_dir);

    TileQConfig cfg;
    auto [m, n] = parse_grid(rc.grid);
    cfg.grid_rows = m;
    cfg.grid_cols = n;
    cfg.rank = rc.rank;
    cfg.feature_rank = rc.feature_rank;
    cfg.scale_exponent = rc.scale_exp;
    cfg.power_iters = rc.power_iters;
    cfg.bits = rc.bits;
    cfg.group_size = rc.group_size;
    cfg.damping_fraction = rc.damping;
    cfg.quantizer = parse_quantizer(rc.mode);
    cfg.sub_dim = rc.sub_dim;
    cfg.seed = rc.seed;
    TileQConfig resolved = cfg.resolved(model.experts.spec);

    QuantizeResult result = quantize_moe(model.experts, model.gate_weights, model.calib, cfg);
    const MoELayerSpec& spec = model.experts.spec;

    // Budget of what the artifact actually stores: 8-bit factor codes,
    // binary16 scales and singular values.
    BitBudget budget = bits_tileq(resolved.bits, resolved.group_size, 16, 8, resolved.rank,
                                  spec.in_dim, spec.out_dim, spec.num_experts,
                                  resolved.grid_rows, resolved.grid_cols);

    json pipeline_meta = {{"pipeline",
                           {{"quantizer", quantizer_name(resolved.quantizer)},
                            {"seed", resolved.seed},
                            {"scale_exponent", resolved.scale_exponent},
                            {"power_iters", resolved.power_iters},
                            {"feature_rank", resolved.feature_rank},
                            {"damping_fraction", resolved.damping_fraction}}}};
    write_artifact(rc.artifact_dir, result.layer, pipeline_meta);

    json out = {{"artifact", rc.artifact_dir},
                {"stages_seconds", result.report.stage_seconds},
                {"lowrank_mean_relative_error", result.report.lowrank_mean_relative_error},
                {"mean_relative_error", result.report.mean_relative_error},
                {"proxy_loss", result.report.total_proxy_loss},
                {"total_l1_displacement", result.report.total_l1_displacement},
                {"bit_budget", budget_to_json(budget)}};

    for (const auto& [stage, secs] : result.report.stage_seconds) {
        std::ostringstream line;
        line.setf(std::ios::fixed);
        line.precision(4);
        line << "stage " << stage << ": " << secs << " s";
        std::cerr << line.str() << "\n";
    }
    std::cerr << "low-rank mean relative error: " << result.report.lowrank_mean_relative_error
              << "\n"
              << "full mean relative error: " << result.report.mean_relative_error << "\n"
              << "proxy loss (" << rc.mode << "): " << result.report.total_proxy_loss << "\n"
              << "avg bits/weight: " << budget.total_avg_bits << " (extra "
              << budget.extra_bits() << ")\n"
              << "artifact: " << rc.artifact_dir << "\n";

    int exit_code = kExitOk;
    if (!rc.no_verify) {
        CheckResult fused = check_fused_vs_naive(result.layer, rc.seed);
        CheckResult quantized = check_quantized_vs_reference(result.layer, rc.seed);
        out["verify"] = {{"fused_vs_naive", check_to_json(fused)},
                         {"quantized_vs_reference", check_to_json(quantized)},
                         {"pass", fused.pass && quantized.pass}};
        if (!fused.pass || !quantized.pass) {
            std::cerr << "verify: FAILED\n";
            exit_code = kExitVerifyFailed;
        } else {
            std::cerr << "verify: ok\n";
        }
    }
    emit_machine(out.dump(2), rc.out);
    return exit_code;
}

int run_verify(const RunConfig& rc) {
    if (rc.artifact_dir.empty()) throw ParamError("verify requires --artifact <dir>");
    json checks = json::object();
    bool all_pass = true;

    LoadedArtifact loaded;
    try {
        loaded = read_artifact(rc.artifact_dir);
        checks["artifact_integrity"] = {{"pass", true}, {"detail", "manifest and checksums ok"}};
    } catch (const FormatError& e) {
        // Integrity damage is a verification verdict, not an IO failure:
        // report which check failed and exit 1.
        checks["artifact_integrity"] = {{"pass", false}, {"detail", e.what()}};
        json verdict = {{"pass", false}, {"checks", checks}};
        emit_machine(verdict.dump(2), rc.out);
        std::cerr << "verify: FAILED (artifact_integrity: " << e.what() << ")\n";
        return kExitVerifyFailed;
    }

    auto record = [&](const char* name, const CheckResult& c) {
        checks[name] = check_to_json(c);
        all_pass = all_pass && c.pass;
        std::cerr << "check " << name << ": " << (c.pass ? "ok" : "FAILED") << " (" << c.detail
                  << ")\n";
    };
    record("fused_vs_naive", check_fused_vs_naive(loaded.layer, rc.seed));
    record("quantized_vs_reference", check_quantized_vs_reference(loaded.layer, rc.seed));
    record("round_trip", check_round_trip(loaded, rc.artifact_dir));

    if (rc.check == "error-bound") {
        if (rc.model_dir.empty())
            throw ParamError("--check error-bound requires --model <dir> for the reference"
                             " experts");
        LoadedModel model = read_model(rc.model_dir);
        ErrorBoundReport rep =
            error_bound_report(model.experts, loaded.layer.tiled, rc.power_iters, rc.seed);
        CheckResult c;
        c.max_rel = rep.mean_gap;
        c.pass = rep.mean_gap <= rc.epsilon;
        {
            std::ostringstream d;
            d << "mean(E_tiled - E_independent) = " << rep.mean_gap << " at baseline rank "
              << rep.baseline_rank << " (epsilon " << rc.epsilon << ")";
            c.detail = d.str();
        }
        record("error_bound", c);
        checks["error_bound"]["per_expert_gap"] = json::array();
        for (std::size_t k = 0; k < rep.tiled_error.size(); ++k)
            checks["error_bound"]["per_expert_gap"].push_back(rep.tiled_error[k] -
                                                              rep.independent_error[k]);
        checks["error_bound"]["baseline_rank"] = rep.baseline_rank;
    } else if (!rc.check.empty()) {
        throw ParamError("unknown --check '" + rc.check + "' (supported: error-bound)");
    }

    json verdict = {{"pass", all_pass}, {"checks", checks}};
    emit_machine(verdict.dump(2), rc.out);
    std::cerr << (all_pass ? "verify: all checks passed\n" : "verify: FAILED\n");
    return all_pass ? kExitOk : kExitVerifyFailed;
}

int run_bench(const RunConfig& rc) {
    if (rc.artifact_dir.empty()) throw ParamError("bench requires --artifact <dir>");
    LoadedArtifact loaded = read_artifact(rc.artifact_dir);

    const std::vector<std::size_t> batches{1, 4, 16, 64};
    const BenchLayout layouts[] = {BenchLayout::fused_2d, BenchLayout::shared_1d,
                                   BenchLayout::element_wise};
    json rows = json::array();
    std::ostringstream csv;
    csv << "layout,batch,median_ns,p10_ns,p90_ns,dispatch_count\n";
    for (BenchLayout layout : layouts) {
        std::vector<BenchReport> reports =
            bench(layout, loaded.layer, batches, rc.repeats, rc.warmup, rc.threads, rc.seed);
        for (const BenchReport& rep : reports) {
            csv << layout_name(rep.layout) << ',' << rep.batch << ','
                << static_cast<long long>(std::llround(rep.median_ns())) << ','
                << static_cast<long long>(std::llround(rep.p10_ns())) << ','
                << static_cast<long long>(std::llround(rep.p90_ns())) << ',' << rep.dispatches
                << '\n';
            rows.push_back({{"layout", layout_name(rep.layout)},
                            {"batch", rep.batch},
                            {"median_ns", rep.median_ns()},
                            {"p10_ns", rep.p10_ns()},
                            {"p90_ns", rep.p90_ns()},
                            {"dispatch_count", rep.dispatches}});
            std::cerr << "bench " << layout_name(rep.layout) << " B=" << rep.batch << ": median "
                      << rep.median_ns() / 1e3 << " us, " << rep.dispatches << " dispatches\n";
        }
    }
    if (rc.json_rows)
        emit_machine(json{{"rows", rows}}.dump(2), rc.out);
    else
        emit_machine(csv.str(), rc.out);
    return kExitOk;
}

int run_report(const RunConfig& rc) {
    auto [m, n] = parse_grid(rc.grid);
    if (m == 0) {
        m = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(rc.k))));
        if (m == 0) m = 1;
        n = (rc.k + m - 1) / m;
    }
    if (rc.k == 0 || rc.in_dim == 0 || rc.out_dim == 0 || rc.rank == 0)
        throw ParamError("report requires positive --k, --i, --o and --rank");

    struct Entry {
        Scheme scheme;
        BitBudget budget;
    };
    std::vector<Entry> entries = {
        {Scheme::basic, bits_basic(rc.bits, rc.group_size, rc.d_fp)},
        {Scheme::per_expert, bits_per_expert(rc.bits, rc.group_size, rc.d_fp, rc.d_factor,
                                             rc.rank, rc.in_dim, rc.out_dim)},
        {Scheme::shared_1d, bits_1d(rc.bits, rc.group_size, rc.d_fp, rc.d_factor, rc.rank,
                                    rc.in_dim, rc.out_dim, rc.k)},
        {Scheme::tileq_2d, bits_tileq(rc.bits, rc.group_size, rc.d_fp, rc.d_factor, rc.rank,
                                      rc.in_dim, rc.out_dim, rc.k, m, n)},
    };

    json out;
    out["params"] = {{"k", rc.k},        {"topk", rc.topk},
                     {"i", rc.in_dim},   {"o", rc.out_dim},
                     {"grid_rows", m},   {"grid_cols", n},
                     {"rank", rc.rank},  {"bits", rc.bits},
                     {"group_size", rc.group_size}, {"d_factor", rc.d_factor},
                     {"d_fp", rc.d_fp},  {"batch", rc.batch}};
    json schemes = json::object();
    const BitBudget* tileq_budget = nullptr;
    for (const Entry& e : entries) {
        if (!rc.scheme.empty() && rc.scheme != scheme_name(e.scheme)) continue;
        schemes[scheme_name(e.scheme)] = budget_to_json(e.budget);
        schemes[scheme_name(e.scheme)]["flops"] =
            flops_estimate(e.scheme, rc.batch, rc.in_dim, rc.out_dim, rc.rank, m, n, rc.k,
                           rc.topk);
        if (e.scheme == Scheme::tileq_2d) tileq_budget = &e.budget;
        std::cerr << "scheme " << scheme_name(e.scheme) << ": total " << e.budget.total_avg_bits
                  << " bits/weight (extra " << e.budget.extra_bits() << ")\n";
    }
    if (schemes.empty())
        throw ParamError("unknown --scheme '" + rc.scheme +
                         "' (expected basic, per_expert, shared_1d or tileq_2d)");
    out["schemes"] = schemes;
    if (rc.scheme.empty() && tileq_budget != nullptr && tileq_budget->extra_bits() > 0.0) {
        double tq = tileq_budget->extra_bits();
        json ratios = json::object();
        for (const Entry& e : entries)
            if (e.scheme == Scheme::per_expert || e.scheme == Scheme::shared_1d)
                ratios[std::string(scheme_name(e.scheme)) + "_over_tileq_2d"] =
                    e.budget.extra_bits() / tq;
        out["ratios"] = ratios;
        std::cerr << "extra-bits ratio per_expert/tileq_2d: "
                  << ratios["per_expert_over_tileq_2d"].get<double>() << "\n";
    }
    emit_machine(out.dump(2), rc.out);
    return kExitOk;
}

// ----------------------------------------------------------------------------
// flag wiring
// ----------------------------------------------------------------------------

void add_common_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--config", "JSON config file; keys are long flag names without dashes")
        ->type_name("FILE");
    cmd->add_option("--seed", rc.seed, "RNG seed (TILEQ_SEED env as fallback)")
        ->capture_default_str();
    cmd->add_option("--out", rc.out, "write machine output here instead of stdout")
        ->type_name("FILE");
}

void add_geometry_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--k", rc.k, "number of routed experts K")->capture_default_str();
    cmd->add_option("--topk", rc.topk, "experts selected per token")->capture_default_str();
    cmd->add_option("--i", rc.in_dim, "expert input dimension")->capture_default_str();
    cmd->add_option("--o", rc.out_dim, "expert output dimension")->capture_default_str();
    cmd->add_option("--shared", rc.num_shared, "always-active shared experts")
        ->capture_default_str();
}

void add_tiling_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--grid", rc.grid, "tile grid MxN (default: M=round(sqrt(K)), N=ceil(K/M))")
        ->type_name("MxN");
    cmd->add_option("--rank", rc.rank, "shared factorization rank r")->capture_default_str();
    cmd->add_option("--feature-rank", rc.feature_rank,
                    "per-expert sketch rank for clustering features (0 = rank/2)")
        ->capture_default_str();
    cmd->add_option("--scale-exp", rc.scale_exp, "channel-scaling exponent p")
        ->capture_default_str();
    cmd->add_option("--power-iters", rc.power_iters, "sketch power iterations")
        ->capture_default_str();
}

void add_quant_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--bits", rc.bits, "residual code width (2, 3, 4 or 8)")
        ->capture_default_str();
    cmd->add_option("--group-size", rc.group_size, "weights per quantization group")
        ->capture_default_str();
    cmd->add_option("--damping", rc.damping, "Hessian damping fraction")->capture_default_str();
    cmd->add_option("--mode", rc.mode, "residual quantizer: rtn, gptq or vq")
        ->capture_default_str();
    cmd->add_option("--subdim", rc.sub_dim, "vector-quantizer subvector length")
        ->capture_default_str();
}

int run_cli(int argc, char** argv) {
    json cfg = load_config_file(argc, argv);
    RunConfig rc;
    apply_env_seed(rc);
    apply_config(cfg, rc);

    CLI::App app{"tiled low-rank quantization toolkit for MoE expert weights"};
    app.require_subcommand(1);

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic model container");
    add_common_flags(synth, rc);
    add_geometry_flags(synth, rc);
    synth->add_option("--model", rc.model_dir, "output model directory")->type_name("DIR");
    synth->add_option("--grid", rc.grid, "planted structure grid MxN")->type_name("MxN");
    synth->add_option("--rank", rc.rank, "planted per-expert rank")->capture_default_str();
    synth->add_option("--noise", rc.noise, "additive Gaussian noise sigma")
        ->capture_default_str();
    synth->add_option("--mix-scale", rc.mix_scale, "mixer magnitude")->capture_default_str();
    synth->add_option("--calib", rc.calib_tokens, "calibration tokens to generate")
        ->capture_default_str();

    CLI::App* quantize = app.add_subcommand("quantize", "run the full quantization pipeline");
    add_common_flags(quantize, rc);
    add_tiling_flags(quantize, rc);
    add_quant_flags(quantize, rc);
    quantize->add_option("--model", rc.model_dir, "input model directory")->type_name("DIR");
    quantize->add_option("--artifact", rc.artifact_dir, "output artifact directory")
        ->type_name("DIR");
    quantize->add_flag("--no-verify", rc.no_verify, "skip the post-quantization checks");

    CLI::App* verify = app.add_subcommand("verify", "run the equivalence suite on an artifact");
    add_common_flags(verify, rc);
    verify->add_option("--artifact", rc.artifact_dir, "artifact directory")->type_name("DIR");
    verify->add_option("--model", rc.model_dir, "model directory (error-bound check)")
        ->type_name("DIR");
    verify->add_option("--check", rc.check, "extra check to run (error-bound)")
        ->type_name("NAME");
    verify->add_option("--epsilon", rc.epsilon, "error-bound threshold on the mean gap")
        ->capture_default_str();
    verify->add_option("--power-iters", rc.power_iters, "sketch power iterations for baselines")
        ->capture_default_str();

    CLI::App* bench_cmd = app.add_subcommand("bench", "latency sweep over layouts and batches");
    add_common_flags(bench_cmd, rc);
    bench_cmd->add_option("--artifact", rc.artifact_dir, "artifact directory")->type_name("DIR");
    bench_cmd->add_option("--repeats", rc.repeats, "timed repeats per point (>= 5)")
        ->capture_default_str();
    bench_cmd->add_option("--warmup", rc.warmup, "untimed warmup runs (>= 1)")
        ->capture_default_str();
    bench_cmd->add_option("--threads", rc.threads, "GEMM row-split threads")
        ->capture_default_str();
    bench_cmd->add_flag("--json", rc.json_rows, "emit JSON rows instead of CSV");

    CLI::App* report = app.add_subcommand("report", "storage accounting for the four layouts");
    add_common_flags(report, rc);
    add_geometry_flags(report, rc);
    report->add_option("--grid", rc.grid, "tile grid MxN")->type_name("MxN");
    report->add_option("--rank", rc.rank, "shared factorization rank r")->capture_default_str();
    report->add_option("--bits", rc.bits, "base code width d")->capture_default_str();
    report->add_option("--group-size", rc.group_size, "weights per quantization group")
        ->capture_default_str();
    report->add_option("--d-factor", rc.d_factor, "bits per stored factor value")
        ->capture_default_str();
    report->add_option("--d-fp", rc.d_fp, "bits per stored scale/singular value")
        ->capture_default_str();
    report->add_option("--scheme", rc.scheme, "only this scheme (basic, per_expert, shared_1d,"
                       " tileq_2d)")
        ->type_name("NAME");
    report->add_option("--batch", rc.batch, "batch size for the flops estimate")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    if (synth->parsed()) return run_synth(rc);
    if (quantize->parsed()) return run_quantize(rc);
    if (verify->parsed()) return run_verify(rc);
    if (bench_cmd->parsed()) return run_bench(rc);
    if (report->parsed()) return run_report(rc);
    return kExitConfig;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        // Shape/param/format/io/data errors are all "bad input or config".
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitNumeric;
    }
}
