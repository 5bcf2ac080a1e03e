// evitq: census, PTQ, integer inference and accelerator simulation for
// softmax-free hybrid vision transformers.
//
// evitq census   --model cfg.json
// evitq quantize --model cfg.json --calib synth:32 [--no-migration] [--no-shifting]
//                [--divisor log2-4|uniform8] [--seed S] --out DIR
// evitq infer    --model cfg.json --quant DIR/quant.json --inputs synth:8
//                --mode float|int|crosscheck [--seed S] --out DIR
// evitq simulate --model cfg.json [--engine eng.json] [--sweep L=8,16,32] --out DIR
//
// Exit codes: 0 ok, 2 config error, 3 calibration error, 4 quantization
// artifact error, 5 simulation error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "evitq/accel_sim.hpp"
#include "evitq/int_exec.hpp"
#include "evitq/quant_io.hpp"

namespace fs = std::filesystem;
using namespace evitq;
using nlohmann::json;

namespace {

std::string default_out_dir() {
    if (const char* env = std::getenv("EVITQ_OUT")) return env;
    return "evitq-out";
}

void write_manifest(const fs::path& out, const std::string& command, const json& args, uint64_t seed) {
    json m;
    m["command"] = command;
    m["args"] = args;
    m["seed"] = seed;
    const auto now = std::chrono::system_clock::now();
    m["timestamp_unix"] = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
    fs::create_directories(out);
    std::ofstream os(out / "manifest.json");
    os << m.dump(1) << "\n";
}

Tensor synth_input(const ModelGraph& g, uint64_t seed, uint64_t index) {
    Tensor t = Tensor::zeros_f32({1, g.in_channels, g.resolution, g.resolution});
    auto rng = make_rng(seed, 9000 + index);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    for (float& v : t.f()) v = d(rng);
    return t;
}

// "synth:N" or a directory of .tqt tensors.
std::vector<Tensor> resolve_tensor_source(const std::string& src, const ModelGraph& g, uint64_t seed) {
    std::vector<Tensor> out;
    if (src.rfind("synth:", 0) == 0) {
        const int n = std::stoi(src.substr(6));
        if (n <= 0) throw CalibError("synthetic sample count must be positive");
        for (int i = 0; i < n; ++i) out.push_back(synth_input(g, seed, static_cast<uint64_t>(i)));
        return out;
    }
    if (!fs::is_directory(src)) throw CalibError("tensor source not found: " + src);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(src))
        if (e.path().extension() == ".tqt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw CalibError("no .tqt tensors in " + src);
    for (const auto& f : files) {
        Tensor t = load_tensor(f.string());
        if (t.dtype() != Dtype::F32 || t.rank() != 4)
            throw CalibError("expected rank-4 f32 tensor: " + f.string());
        out.push_back(std::move(t));
    }
    return out;
}

json census_json(const OpCensus& c) {
    return {{"macs",
             {{"generic_conv", c.generic_conv}, {"pwconv", c.pwconv}, {"dwconv", c.dwconv}, {"matmul", c.matmul}}},
            {"total_macs", c.total()},
            {"gmacs", c.gmacs()},
            {"gflops", c.gflops()},
            {"shares",
             {{"generic_conv", c.share(c.generic_conv)},
              {"pwconv", c.share(c.pwconv)},
              {"dwconv", c.share(c.dwconv)},
              {"matmul", c.share(c.matmul)}}}};
}

int cmd_census(const std::string& model_path, const std::string& out_dir) {
    ModelGraph g = build_model_from_file(model_path);
    OpCensus c = op_census(g);
    std::printf("model: %s\n", g.name.c_str());
    std::printf("%-14s %14s %8s\n", "kind", "macs", "share");
    std::printf("%-14s %14lld %7.2f%%\n", "generic_conv", static_cast<long long>(c.generic_conv),
                c.share(c.generic_conv));
    std::printf("%-14s %14lld %7.2f%%\n", "pwconv", static_cast<long long>(c.pwconv), c.share(c.pwconv));
    std::printf("%-14s %14lld %7.2f%%\n", "dwconv", static_cast<long long>(c.dwconv), c.share(c.dwconv));
    std::printf("%-14s %14lld %7.2f%%\n", "matmul", static_cast<long long>(c.matmul), c.share(c.matmul));
    std::printf("total: %lld MACs (%.4f GMACs, %.4f GFLOPs at 2 ops/MAC)\n", static_cast<long long>(c.total()),
                c.gmacs(), c.gflops());
    fs::create_directories(out_dir);
    std::ofstream os(fs::path(out_dir) / "census.json");
    os << census_json(c).dump(1) << "\n";
    return 0;
}

// Divisor reconstruction error: relative error of the division result under
// each scheme, the pathology that motivates log2 divisors.
json divisor_recon_report(const CalibRecord& calib, const ModelQuant& mq) {
    json rep = json::array();
    for (const auto& [name, aq] : mq.attn) {
        const PointStats& ps = calib.at(name + ".divisor");
        double log2_max = 0, log2_mean = 0, uni_max = 0, uni_mean = 0;
        int64_t n = 0, uni_dead = 0;
        float dmax = 0;
        for (const auto& [ch, v] : ps.reservoir) dmax = std::max(dmax, std::abs(v));
        const float s_uni = std::max(dmax, 1e-12f) / 255.0f;
        for (const auto& [ch, v] : ps.reservoir) {
            const double d = std::abs(v);
            if (d < 1e-9) continue;
            const double e_log2 = std::exp2(std::round(std::log2(d)));
            const double err_l = std::abs(d / e_log2 - 1.0);
            const int64_t q = std::clamp<int64_t>(quant_rne(d / s_uni), 0, 255);
            double err_u;
            if (q == 0) {
                ++uni_dead;  // divisor collapses to zero: unbounded division error
                err_u = 1e9;
            } else {
                err_u = std::abs(d / (static_cast<double>(q) * s_uni) - 1.0);
            }
            log2_max = std::max(log2_max, err_l);
            uni_max = std::max(uni_max, err_u);
            log2_mean += err_l;
            uni_mean += err_u;
            ++n;
        }
        if (n == 0) continue;
        rep.push_back({{"layer", name},
                       {"samples", n},
                       {"log2_4", {{"mean_rel_err", log2_mean / n}, {"max_rel_err", log2_max}}},
                       {"uniform_8",
                        {{"mean_rel_err", uni_mean / n}, {"max_rel_err", uni_max}, {"zero_collapsed", uni_dead}}}});
    }
    return rep;
}

int cmd_quantize(const std::string& model_path, const std::string& calib_src, uint64_t seed, QuantPolicy policy,
                 const std::string& out_dir, const json& args) {
    ModelGraph g = build_model_from_file(model_path);
    init_weights(g, seed);
    ModelGraph folded = fold_bn(g);
    std::vector<Tensor> samples = resolve_tensor_source(calib_src, folded, seed);
    CalibRecord calib;
    for (const Tensor& t : samples) accumulate_calibration(calib, folded, t);

    QuantizedModel qm = quantize_model(folded, calib, policy);
    qm.params.seed = seed;

    fs::path out(out_dir);
    fs::create_directories(out / "weights");
    save_quant(qm.params, (out / "quant.json").string());
    IntModel im = build_int_model(qm);
    for (const IntBlock& blk : im.blocks)
        for (const IntOp& op : blk.ops)
            if (std::holds_alternative<IntConvStage>(op)) {
                const auto& cs = std::get<IntConvStage>(op);
                save_tensor(cs.wq, (out / "weights" / (cs.spec.name + ".tqt")).string());
            }

    int migration = 0, shift = 0, log2_records = 0;
    for (const auto& [name, lq] : qm.params.layers) {
        migration += !lq.migration.empty();
        shift += !lq.shift.empty();
    }
    for (const auto& [name, aq] : qm.params.attn) log2_records += aq.divisor_scheme == QuantScheme::Log2;
    std::printf("quantized %s: %d migration, %d shift, %d log2 divisor records\n", qm.params.model_name.c_str(),
                migration, shift, log2_records);

    json summary;
    summary["coverage"] = {{"migration", migration}, {"shift", shift}, {"log2_divisors", log2_records}};
    summary["input_mse"] = json::object();
    for (const auto& [name, mse] : qm.params.input_mse) summary["input_mse"][name] = mse;

    // Ablation context: when a technique is disabled, report how the
    // per-layer input quantization MSE compares against the enabled run.
    if (!policy.migration || !policy.shifting) {
        QuantPolicy enabled = policy;
        enabled.migration = true;
        enabled.shifting = true;
        QuantizedModel ref = quantize_model(folded, calib, enabled);
        int regressed = 0;
        double worst_ratio = 0;
        std::string worst_layer;
        for (const auto& [name, mse] : qm.params.input_mse) {
            const double on = ref.params.input_mse.at(name);
            if (mse > on * 1.0000001 && on > 0) {
                ++regressed;
                if (mse / on > worst_ratio) {
                    worst_ratio = mse / on;
                    worst_layer = name;
                }
            }
        }
        if (regressed > 0)
            std::printf("warning: disabled techniques regress input quantization MSE on %d layers (worst %.1fx at %s)\n",
                        regressed, worst_ratio, worst_layer.c_str());
        summary["ablation"] = {{"regressed_layers", regressed}, {"worst_ratio", worst_ratio}};
    }

    if (!qm.params.attn.empty()) {
        summary["divisor_reconstruction"] = divisor_recon_report(calib, qm.params);
        if (policy.divisor == QuantPolicy::Divisor::Uniform8)
            std::printf("warning: uniform-8 divisors reconstruct divisions far worse than log2-4 (see summary.json)\n");
    }
    std::ofstream os(out / "summary.json");
    os << summary.dump(1) << "\n";
    write_manifest(out, "quantize", args, seed);
    return 0;
}

int cmd_infer(const std::string& model_path, const std::string& quant_path, const std::string& inputs_src,
              const std::string& mode, uint64_t seed, const std::string& out_dir, const json& args) {
    ModelGraph g = build_model_from_file(model_path);
    fs::path out(out_dir);
    fs::create_directories(out);

    if (mode == "float") {
        init_weights(g, seed);
        ModelGraph folded = fold_bn(g);
        std::vector<Tensor> inputs = resolve_tensor_source(inputs_src, folded, seed);
        json results = json::array();
        for (size_t i = 0; i < inputs.size(); ++i) {
            Tensor y = forward_float(folded, inputs[i]);
            save_tensor(y, (out / ("output_" + std::to_string(i) + ".tqt")).string());
            int64_t arg = 0;
            for (int64_t c = 0; c < y.numel(); ++c)
                if (y.f()[static_cast<size_t>(c)] > y.f()[static_cast<size_t>(arg)]) arg = c;
            results.push_back({{"input", i}, {"top1", arg}});
        }
        std::ofstream os(out / "results.json");
        os << json{{"mode", "float"}, {"results", results}}.dump(1) << "\n";
        write_manifest(out, "infer", args, seed);
        return 0;
    }

    // int / crosscheck need the quantization artifact.
    if (!fs::exists(quant_path)) throw ArtifactError("quantization dump not found: " + quant_path);
    ModelQuant params;
    try {
        params = load_quant(quant_path);
    } catch (const std::exception& e) {
        throw ArtifactError(std::string("invalid quantization dump: ") + e.what());
    }
    init_weights(g, params.seed);
    ModelGraph folded = fold_bn(g);
    // Reapply the recorded migration so the graph matches the dump.
    for (auto& blk : folded.blocks)
        for (auto& l : blk.layers) {
            if (l.spec.kind != LayerKind::DWConv) continue;
            const LayerQuant& lq = params.layer(l.spec.name);
            if (lq.migration.empty()) continue;
            const int64_t per = l.weight.numel() / l.spec.out_channels;
            for (int64_t ch = 0; ch < l.spec.out_channels; ++ch)
                for (int64_t i = 0; i < per; ++i)
                    l.weight.f()[static_cast<size_t>(ch * per + i)] *= lq.migration[static_cast<size_t>(ch)];
        }
    QuantizedModel qm{folded, params};
    IntModel im = build_int_model(qm);
    // Prefer the bit-exact weight dump when it sits next to the params.
    const fs::path wdir = fs::path(quant_path).parent_path() / "weights";
    if (fs::is_directory(wdir))
        for (IntBlock& blk : im.blocks)
            for (IntOp& op : blk.ops)
                if (std::holds_alternative<IntConvStage>(op)) {
                    auto& cs = std::get<IntConvStage>(op);
                    const fs::path f = wdir / (cs.spec.name + ".tqt");
                    if (!fs::exists(f)) throw ArtifactError("missing weight dump: " + f.string());
                    Tensor w = load_tensor(f.string());
                    if (w.shape() != cs.wq.shape() || w.dtype() != Dtype::I8)
                        throw ArtifactError("weight dump mismatch for " + cs.spec.name);
                    cs.wq = std::move(w);
                }

    std::vector<Tensor> inputs = resolve_tensor_source(inputs_src, folded, seed);
    json results = json::array();
    bool all_exact = true;
    InferDiagnostics diag_total;
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (mode == "int") {
            IntForwardResult r = forward_int(im, inputs[i]);
            save_tensor(r.logits, (out / ("output_" + std::to_string(i) + ".tqt")).string());
            int64_t arg = 0;
            double best = -1e300;
            for (int64_t c = 0; c < r.logits.numel(); ++c) {
                const double v = static_cast<double>(r.logits.i32()[static_cast<size_t>(c)]) *
                                 r.logit_scales[r.logit_scales.size() == 1 ? 0 : static_cast<size_t>(c)];
                if (v > best) {
                    best = v;
                    arg = c;
                }
            }
            diag_total.divisor_zero += r.diag.divisor_zero;
            diag_total.divisor_clip += r.diag.divisor_clip;
            results.push_back({{"input", i}, {"top1", arg}});
        } else if (mode == "crosscheck") {
            CrossCheckResult r = crosscheck(im, inputs[i]);
            all_exact = all_exact && r.bit_exact;
            results.push_back({{"input", i},
                               {"bit_exact", r.bit_exact},
                               {"mismatches", r.mismatches},
                               {"first_mismatch", r.first_mismatch}});
        } else {
            throw ConfigError("unknown infer mode: " + mode);
        }
    }
    json doc;
    doc["mode"] = mode;
    doc["results"] = results;
    doc["diagnostics"] = {{"divisor_zero", diag_total.divisor_zero}, {"divisor_clip", diag_total.divisor_clip}};
    if (mode == "crosscheck") {
        doc["bit_exact"] = all_exact;
        std::printf("bit-exact: %s\n", all_exact ? "true" : "false");
    }
    std::ofstream os(out / "results.json");
    os << doc.dump(1) << "\n";
    write_manifest(out, "infer", args, seed);
    return mode == "crosscheck" && !all_exact ? 4 : 0;
}

EngineConfig engine_from_json(const json& j) {
    EngineConfig cfg;
    cfg.n = j.value("N", cfg.n);
    cfg.m = j.value("M", cfg.m);
    cfg.t = j.value("T", cfg.t);
    cfg.s = j.value("S", cfg.s);
    cfg.cores = j.value("L", cfg.cores);
    cfg.clock_mhz = j.value("clock_mhz", cfg.clock_mhz);
    if (j.contains("dram_bytes_per_cycle") && j.at("dram_bytes_per_cycle").is_number())
        cfg.dram_bytes_per_cycle = j.at("dram_bytes_per_cycle").get<double>();
    cfg.dsp_pack = j.value("dsp_pack", cfg.dsp_pack);
    cfg.phase_switch = j.value("phase_switch", cfg.phase_switch);
    cfg.requant_latency = j.value("requant_latency", cfg.requant_latency);
    cfg.shifters_per_core = j.value("shifters_per_core", cfg.shifters_per_core);
    return cfg;
}

void apply_sweep_value(EngineConfig& cfg, const std::string& key, double v) {
    if (key == "L") cfg.cores = static_cast<int64_t>(v);
    else if (key == "N") cfg.n = static_cast<int64_t>(v);
    else if (key == "M") cfg.m = static_cast<int64_t>(v);
    else if (key == "T") cfg.t = static_cast<int64_t>(v);
    else if (key == "S") cfg.s = static_cast<int64_t>(v);
    else if (key == "clock_mhz") cfg.clock_mhz = v;
    else if (key == "dram_bytes_per_cycle") cfg.dram_bytes_per_cycle = v;
    else throw SimError("unknown sweep key: " + key);
}

int cmd_simulate(const std::string& model_path, const std::string& engine_path, const std::string& sweep,
                 const std::string& out_dir, const json& args) {
    ModelGraph g = build_model_from_file(model_path);
    EngineConfig base;
    if (!engine_path.empty()) {
        std::ifstream is(engine_path);
        if (!is) throw SimError("cannot open engine config: " + engine_path);
        json j;
        try {
            is >> j;
        } catch (const json::parse_error& e) {
            throw SimError(std::string("engine config parse error: ") + e.what());
        }
        base = engine_from_json(j);
    }
    fs::path out(out_dir);
    fs::create_directories(out);

    std::vector<std::pair<std::string, EngineConfig>> runs;
    if (sweep.empty()) {
        runs.emplace_back("default", base);
    } else {
        const auto eq = sweep.find('=');
        if (eq == std::string::npos) throw SimError("sweep format is key=v1,v2,...");
        const std::string key = sweep.substr(0, eq);
        std::string rest = sweep.substr(eq + 1);
        size_t pos = 0;
        while (pos != std::string::npos) {
            const size_t comma = rest.find(',', pos);
            const std::string tok = rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            EngineConfig cfg = base;
            apply_sweep_value(cfg, key, std::stod(tok));
            runs.emplace_back(key + "=" + tok, cfg);
            pos = comma == std::string::npos ? std::string::npos : comma + 1;
        }
    }

    std::printf("%-12s %10s %10s %9s %8s %10s\n", "run", "cycles", "latency", "fps", "gops", "gops/dsp");
    for (const auto& [label, cfg] : runs) {
        SimReport r = simulate(g, cfg);
        std::printf("%-12s %10lld %8.3fms %9.1f %8.1f %10.3f\n", label.c_str(),
                    static_cast<long long>(r.total_cycles), r.latency_ms, r.fps, r.gops, r.gops_per_dsp);
        std::ofstream os(out / ("report_" + label + ".json"));
        os << report_to_json(r).dump(1) << "\n";
    }
    write_manifest(out, "simulate", args, 0);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"integer PTQ and accelerator co-simulation for softmax-free hybrid ViTs"};
    app.require_subcommand(1);

    std::string model_path, out_dir = default_out_dir();
    std::string calib_src = "synth:32", inputs_src = "synth:8", quant_path, mode = "crosscheck";
    std::string engine_path, sweep, divisor = "log2-4";
    uint64_t seed = 0;
    bool no_migration = false, no_shifting = false;

    auto* census = app.add_subcommand("census", "operation census of a model config");
    census->add_option("--model", model_path, "model config JSON")->required();
    census->add_option("--out", out_dir, "output directory");

    auto* quantize = app.add_subcommand("quantize", "calibrate and quantize a model");
    quantize->add_option("--model", model_path)->required();
    quantize->add_option("--calib", calib_src, "synth:N or a directory of .tqt tensors");
    quantize->add_option("--seed", seed, "weight/synthetic-data seed (echoed in outputs)");
    quantize->add_flag("--no-migration", no_migration, "disable channel-wise migration");
    quantize->add_flag("--no-shifting", no_shifting, "disable filter-wise shifting");
    quantize->add_option("--divisor", divisor, "log2-4 | uniform8");
    quantize->add_option("--out", out_dir);

    auto* infer = app.add_subcommand("infer", "run float / integer / crosscheck inference");
    infer->add_option("--model", model_path)->required();
    infer->add_option("--quant", quant_path, "quant.json produced by quantize");
    infer->add_option("--inputs", inputs_src, "synth:N or a directory of .tqt tensors");
    infer->add_option("--mode", mode, "float | int | crosscheck");
    infer->add_option("--seed", seed);
    infer->add_option("--out", out_dir);

    auto* simulate_cmd = app.add_subcommand("simulate", "cycle-level accelerator simulation");
    simulate_cmd->add_option("--model", model_path)->required();
    simulate_cmd->add_option("--engine", engine_path, "engine config JSON (defaults to the paper setup)");
    simulate_cmd->add_option("--sweep", sweep, "key=v1,v2,... over an engine parameter");
    simulate_cmd->add_option("--out", out_dir);

    CLI11_PARSE(app, argc, argv);

    json args;
    for (int i = 1; i < argc; ++i) args.push_back(argv[i]);

    try {
        if (census->parsed()) return cmd_census(model_path, out_dir);
        if (quantize->parsed()) {
            QuantPolicy policy;
            policy.migration = !no_migration;
            policy.shifting = !no_shifting;
            if (divisor == "uniform8")
                policy.divisor = QuantPolicy::Divisor::Uniform8;
            else if (divisor != "log2-4")
                throw ConfigError("unknown divisor scheme: " + divisor);
            return cmd_quantize(model_path, calib_src, seed, policy, out_dir, args);
        }
        if (infer->parsed()) return cmd_infer(model_path, quant_path, inputs_src, mode, seed, out_dir, args);
        if (simulate_cmd->parsed()) return cmd_simulate(model_path, engine_path, sweep, out_dir, args);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const CalibError& e) {
        std::fprintf(stderr, "calibration error: %s\n", e.what());
        return 3;
    } catch (const ArtifactError& e) {
        std::fprintf(stderr, "quantization artifact error: %s\n", e.what());
        return 4;
    } catch (const SimError& e) {
        std::fprintf(stderr, "simulation error: %s\n", e.what());
        return 5;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
