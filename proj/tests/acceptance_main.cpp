// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Tolerances are pinned in code next to each check.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "evitq/accel_sim.hpp"
#include "evitq/int_exec.hpp"
#include "evitq/quant_model.hpp"

using namespace evitq;

namespace {

const std::string kConfigDir = EVITQ_CONFIG_DIR;

struct Outcome {
    bool pass = false;
    std::string detail;
};

Tensor abs_of(const Tensor& t) {
    Tensor a = t;
    for (float& v : a.f()) v = std::abs(v);
    return a;
}

CalibRecord calibrate_uniform(const ModelGraph& g, int samples, uint64_t seed) {
    CalibRecord rec;
    for (int i = 0; i < samples; ++i) {
        Tensor x = Tensor::zeros_f32({1, g.in_channels, g.resolution, g.resolution});
        auto rng = make_rng(seed, 900 + static_cast<uint64_t>(i));
        std::uniform_real_distribution<float> d(-1.0f, 1.0f);
        for (float& v : x.f()) v = d(rng);
        accumulate_calibration(rec, g, x);
    }
    return rec;
}

// ---- criterion bodies ------------------------------------------------------

Outcome c1_lod_golden() {
    const bool ok = log2_round(0b01100011) == 7 && lod(0b01100011) == 6;
    return {ok, "log2_round(0b01100011) = " + std::to_string(log2_round(0b01100011))};
}

Outcome c2_migration_exactness() {
    auto rng = make_rng(2025, 1);
    std::uniform_real_distribution<float> wd(-0.5f, 0.5f);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int c = 2 + static_cast<int>(rng() % 15);
        const int spatial = 4 + static_cast<int>(rng() % 7);
        const float span = 2.0f + static_cast<float>(rng() % 99);
        Tensor a = synth_variation(c, spatial, span, 10000 + static_cast<uint64_t>(trial));
        Tensor w = Tensor::zeros_f32({c, 1, 3, 3});
        for (float& v : w.f()) v = wd(rng);
        auto m = compute_migration_factors(channel_stats(a));
        auto [w_m, fused] = apply_channel_migration(w, 1.0f, m);
        Tensor a_m = a;
        const int64_t hw = a.dim(2) * a.dim(3);
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t i = 0; i < hw; ++i)
                a_m.f()[static_cast<size_t>(ch * hw + i)] /= m[static_cast<size_t>(ch)];
        Tensor y0 = conv2d_ref(a, w, {}, 1, 1, c);
        Tensor y1 = conv2d_ref(a_m, w_m, {}, 1, 1, c);
        Tensor kappa = conv2d_ref(abs_of(a), abs_of(w), {}, 1, 1, c);
        for (size_t i = 0; i < y0.f().size(); ++i) {
            const double rel = std::abs(y0.f()[i] - y1.f()[i]) / std::max(1e-12f, kappa.f()[i]);
            worst = std::max(worst, rel);
        }
    }
    return {worst < 1e-5, "1000 depthwise layers, worst relative error " + std::to_string(worst)};
}

Outcome c3_shifting_exactness() {
    auto rng = make_rng(2025, 2);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t cin = 2 + static_cast<int64_t>(rng() % 23);
        const int64_t cout = 1 + static_cast<int64_t>(rng() % 16);
        const int64_t hw = 4;
        Tensor a = Tensor::zeros_f32({1, cin, hw, hw});
        Tensor w = Tensor::zeros_f32({cout, cin, 1, 1});
        std::vector<float> bias(static_cast<size_t>(cout));
        for (float& v : w.f()) v = d(rng);
        for (float& v : bias) v = d(rng);
        auto arng = make_rng(20000 + static_cast<uint64_t>(trial), 4);
        for (int64_t ch = 0; ch < cin; ++ch) {
            const float off = 3.0f * d(arng);
            for (int64_t i = 0; i < hw * hw; ++i) a.f()[static_cast<size_t>(ch * hw * hw + i)] = off + d(arng);
        }
        auto c = compute_filter_shift(channel_stats(a));
        auto bh = update_bias_for_shift(w, bias, c);
        Tensor a_s = a;
        for (int64_t ch = 0; ch < cin; ++ch)
            for (int64_t i = 0; i < hw * hw; ++i)
                a_s.f()[static_cast<size_t>(ch * hw * hw + i)] -= c[static_cast<size_t>(ch)];
        Tensor y0 = conv2d_ref(a, w, bias, 1, 0, 1);
        Tensor y1 = conv2d_ref(a_s, w, bh, 1, 0, 1);
        for (size_t i = 0; i < y0.f().size(); ++i)
            worst = std::max(worst, static_cast<double>(std::abs(y0.f()[i] - y1.f()[i])));
    }
    return {worst < 1e-4, "1000 projection layers, worst absolute error " + std::to_string(worst)};
}

Outcome c4_pathology_relief() {
    const QuantRange r8 = quant_range(8, true);
    auto tensor_mse = [&](const Tensor& t, const std::vector<float>& per_ch_scale, float layer_scale,
                          const std::vector<float>* shift) {
        const int64_t c = t.dim(1), hw = t.dim(2) * t.dim(3);
        double mse = 0;
        for (int64_t ch = 0; ch < c; ++ch) {
            const double s = per_ch_scale.empty() ? layer_scale : per_ch_scale[static_cast<size_t>(ch)];
            for (int64_t i = 0; i < hw; ++i) {
                double x = t.f()[static_cast<size_t>(ch * hw + i)];
                if (shift) x -= (*shift)[static_cast<size_t>(ch)];
                const int64_t q = std::clamp(quant_rne(x / s), r8.lo, r8.hi);
                const double e = x - static_cast<double>(q) * s;
                mse += e * e;
            }
        }
        return mse / static_cast<double>(t.numel());
    };

    int migration_wins = 0, shift_wins = 0;
    const int trials = 500;
    for (int trial = 0; trial < trials; ++trial) {
        // migration on inter-channel variation
        Tensor t = synth_variation(8, 16, 100.0f, 30000 + static_cast<uint64_t>(trial));
        ChannelStats st = channel_stats(t);
        float absmax = std::max(std::abs(st.layer_min), std::abs(st.layer_max));
        const double mse_plain = tensor_mse(t, {}, absmax / 127.0f, nullptr);
        auto m = compute_migration_factors(st);
        float base = 0;
        for (size_t ch = 0; ch < 8; ++ch) {
            const float cm = std::max(std::abs(st.per_channel_min[ch]), std::abs(st.per_channel_max[ch]));
            base = std::max(base, cm / m[ch]);
        }
        std::vector<float> fused(8);
        for (size_t ch = 0; ch < 8; ++ch) fused[ch] = base / 127.0f * m[ch];
        const double mse_mig = tensor_mse(t, fused, 0, nullptr);
        migration_wins += mse_mig < mse_plain;

        // shifting on asymmetric channels
        Tensor t2 = synth_variation(8, 16, 100.0f, 40000 + static_cast<uint64_t>(trial));
        const int64_t hw = 16 * 16;
        ChannelStats st0 = channel_stats(t2);
        for (int64_t ch = 0; ch < 8; ++ch) {
            const float off = 1.2f * std::max(std::abs(st0.per_channel_min[static_cast<size_t>(ch)]),
                                              std::abs(st0.per_channel_max[static_cast<size_t>(ch)]));
            for (int64_t i = 0; i < hw; ++i) t2.f()[static_cast<size_t>(ch * hw + i)] += off;
        }
        ChannelStats st2 = channel_stats(t2);
        const float absmax2 = std::max(std::abs(st2.layer_min), std::abs(st2.layer_max));
        const double mse_raw = tensor_mse(t2, {}, absmax2 / 127.0f, nullptr);
        auto shifts = compute_filter_shift(st2);
        float shifted_max = 0;
        for (size_t ch = 0; ch < 8; ++ch)
            shifted_max = std::max(shifted_max, (st2.per_channel_max[ch] - st2.per_channel_min[ch]) * 0.5f);
        const double mse_shift = tensor_mse(t2, {}, shifted_max / 127.0f, &shifts);
        shift_wins += mse_shift < mse_raw;
    }
    const bool ok = migration_wins >= static_cast<int>(0.99 * trials) &&
                    shift_wins >= static_cast<int>(0.99 * trials);
    return {ok, "migration wins " + std::to_string(migration_wins) + "/500, shifting wins " +
                    std::to_string(shift_wins) + "/500"};
}

Outcome c5_dyadic_bound() {
    auto rng = make_rng(2025, 5);
    std::uniform_real_distribution<double> expo(-20.0, 20.0);
    double worst = 0;
    for (int i = 0; i < 10000; ++i) {
        const double s = std::exp2(expo(rng));
        const DyadicPair p = dyadic_approx(s, 16);
        if (p.b >= (1 << 16) || p.b < 1) return {false, "numerator out of the 16-bit budget"};
        worst = std::max(worst, std::abs(s - p.value()) / s);
    }
    return {worst < std::exp2(-15.0), "10000 scales, worst relative error 2^" + std::to_string(std::log2(worst))};
}

Outcome c6_shift_division_bound() {
    const double lo = std::exp2(-0.5), hi = std::exp2(0.5);
    double worst_lo = 1.0, worst_hi = 1.0;
    const int64_t chunk = 1 << 16;
    Tensor buf = Tensor::zeros_i32({chunk});
    for (int64_t base = 1; base <= (int64_t{1} << 20); base += chunk) {
        const int64_t n = std::min(chunk, (int64_t{1} << 20) - base + 1);
        for (int64_t i = 0; i < n; ++i) buf.i32()[static_cast<size_t>(i)] = static_cast<int32_t>(base + i);
        Log2Divisor ld = quantize_divisor_log2(buf, 0, {-64, 64});
        for (int64_t i = 0; i < n; ++i) {
            const double ratio = std::exp2(ld.exponents.i32()[static_cast<size_t>(i)]) /
                                 static_cast<double>(base + i);
            worst_lo = std::min(worst_lo, ratio);
            worst_hi = std::max(worst_hi, ratio);
        }
    }
    const bool ok = worst_lo >= lo - 1e-12 && worst_hi <= hi + 1e-12;
    return {ok, "exhaustive x in [1, 2^20], ratio in [" + std::to_string(worst_lo) + ", " +
                    std::to_string(worst_hi) + "]"};
}

Outcome c7_bit_exactness() {
    int64_t mismatches = 0;
    for (const auto& [config, seed] : std::vector<std::pair<std::string, uint64_t>>{{"toy-mbconv.json", 41},
                                                                                    {"toy-msa.json", 42}}) {
        ModelGraph g = build_model_from_file(kConfigDir + "/" + config);
        init_weights(g, seed);
        ModelGraph folded = fold_bn(g);
        CalibRecord calib = calibrate_uniform(folded, 8, seed + 1);
        IntModel im = build_int_model(quantize_model(folded, calib, QuantPolicy{}));
        for (int i = 0; i < 100; ++i) {
            Tensor x = Tensor::zeros_f32({1, folded.in_channels, folded.resolution, folded.resolution});
            auto rng = make_rng(seed, 7000 + static_cast<uint64_t>(i));
            std::uniform_real_distribution<float> d(-1.0f, 1.0f);
            for (float& v : x.f()) v = d(rng);
            CrossCheckResult r = crosscheck(im, x);
            mismatches += r.mismatches;
        }
    }
    return {mismatches == 0,
            "toy MBConv + toy MSA, 100 inputs each, " + std::to_string(mismatches) + " mismatched tensors"};
}

Outcome c8_linear_attention_equivalence() {
    auto rng = make_rng(2025, 8);
    std::uniform_real_distribution<float> dq(0.0f, 1.0f), dv(-1.0f, 1.0f);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t n = 1 + static_cast<int64_t>(rng() % 64);
        const int64_t dd = 1 + static_cast<int64_t>(rng() % 32);
        Tensor q({n, dd}, Dtype::F32), k({n, dd}, Dtype::F32), v({n, dd}, Dtype::F32);
        for (float& x : q.f()) x = dq(rng);
        for (float& x : k.f()) x = dq(rng);
        for (float& x : v.f()) x = dv(rng);
        Tensor lin = relu_linear_attention(q, k, v);
        for (int64_t i = 0; i < n; ++i) {
            std::vector<double> num(static_cast<size_t>(dd), 0.0);
            double den = 0;
            for (int64_t j = 0; j < n; ++j) {
                double sim = 0;
                for (int64_t a = 0; a < dd; ++a)
                    sim += static_cast<double>(std::max(q.f()[i * dd + a], 0.0f)) *
                           std::max(k.f()[j * dd + a], 0.0f);
                den += sim;
                for (int64_t b = 0; b < dd; ++b) num[static_cast<size_t>(b)] += sim * v.f()[j * dd + b];
            }
            den = std::max(den, 1e-6);
            for (int64_t b = 0; b < dd; ++b) {
                const double expect = num[static_cast<size_t>(b)] / den;
                const double rel = std::abs(lin.f()[i * dd + b] - expect) / std::max(1.0, std::abs(expect));
                worst = std::max(worst, rel);
            }
        }
    }
    return {worst < 1e-4, "1000 instances, worst relative error " + std::to_string(worst)};
}

Outcome c9_census_fidelity() {
    ModelGraph g = build_model_from_file(kConfigDir + "/effvit-b1-r224.json");
    OpCensus c = op_census(g);
    const bool macs_ok = std::abs(c.gmacs() - 0.52) / 0.52 <= 0.05;
    const bool mix_ok = std::abs(c.share(c.generic_conv) - 1.1) <= 1.0 &&
                        std::abs(c.share(c.pwconv) - 91.9) <= 1.0 &&
                        std::abs(c.share(c.dwconv) - 5.4) <= 1.0 && std::abs(c.share(c.matmul) - 1.6) <= 1.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "gmacs %.4f, mix (%.2f, %.2f, %.2f, %.2f)%%", c.gmacs(),
                  c.share(c.generic_conv), c.share(c.pwconv), c.share(c.dwconv), c.share(c.matmul));
    return {macs_ok && mix_ok, buf};
}

Outcome c10_simulator_peak() {
    EngineConfig cfg;
    const bool peak_ok = std::abs(cfg.peak_gops() - 819.2) < 1e-9;
    bool reports_ok = true;
    for (const char* name : {"effvit-b1-r224", "effvit-b1-r256", "effvit-b1-r288", "effvit-b2-r224",
                             "effvit-b2-r256", "toy-cls"}) {
        SimReport r = simulate(build_model_from_file(kConfigDir + "/" + std::string(name) + ".json"), cfg);
        reports_ok = reports_ok && r.gops <= cfg.peak_gops() + 1e-9;
    }
    return {peak_ok && reports_ok, "peak 819.2 GOPS, all shipped reports below it"};
}

Outcome c11_table_gate() {
    EngineConfig cfg;
    SimReport r1 = simulate(build_model_from_file(kConfigDir + "/effvit-b1-r288.json"), cfg);
    SimReport r2 = simulate(build_model_from_file(kConfigDir + "/effvit-b2-r224.json"), cfg);
    const bool lat1 = std::abs(r1.latency_ms - 2.24) / 2.24 <= 0.20;
    const bool fps1 = std::abs(r1.fps - 447.0) / 447.0 <= 0.20;
    const bool lat2 = std::abs(r2.latency_ms - 4.05) / 4.05 <= 0.20;
    const bool gops_ok = r1.gops >= 650.0 && r1.gops <= 819.2 && r2.gops >= 650.0 && r2.gops <= 819.2;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "b1-r288 %.3fms/%.0ffps/%.0fgops, b2-r224 %.3fms/%.0fgops", r1.latency_ms,
                  r1.fps, r1.gops, r2.latency_ms, r2.gops);
    return {lat1 && fps1 && lat2 && gops_ok, buf};
}

Outcome c12_cycle_oracle() {
    auto rng = make_rng(2025, 12);
    int checked = 0;
    for (int trial = 0; trial < 200; ++trial) {
        EngineConfig cfg;
        if (trial % 4 == 0) {
            cfg.t = 4;
            cfg.s = 16;
            cfg.n = 16;
            cfg.m = 4;
        }
        const int64_t cin = 1 + static_cast<int64_t>(rng() % 64);
        const int64_t cout = 1 + static_cast<int64_t>(rng() % 64);
        const int64_t hw = 4 + static_cast<int64_t>(rng() % 29);
        const int64_t stride = (rng() % 2) ? 1 : 2;
        const int64_t k = (rng() % 2) ? 3 : 5;
        LayerSpec l;
        l.h_in = hw;
        l.w_in = hw;
        const int64_t kind = static_cast<int64_t>(rng() % 4);
        if (kind == 0) {
            l.kind = LayerKind::DWConv;
            l.in_channels = l.out_channels = cin;
            l.groups = cin;
            l.kernel = k;
            l.stride = stride;
            l.padding = k / 2;
            l.h_out = (hw + 2 * (k / 2) - k) / stride + 1;
            l.w_out = l.h_out;
            if (cycles_rmac_dw(l, cfg) != event_sim_rmac_dw(l, cfg)) return {false, "dw mismatch"};
        } else {
            l.kind = kind == 1 ? LayerKind::GenericConv : kind == 2 ? LayerKind::PWConv : LayerKind::MatMul;
            l.in_channels = cin;
            l.out_channels = cout;
            l.groups = 1;
            l.kernel = l.kind == LayerKind::GenericConv ? k : 1;
            l.stride = l.kind == LayerKind::GenericConv ? stride : 1;
            l.padding = l.kernel / 2;
            l.h_out = (hw + 2 * l.padding - l.kernel) / l.stride + 1;
            l.w_out = l.h_out;
            if (cycles_mat(l, cfg) != event_sim_mat(l, cfg)) return {false, "mat mismatch"};
            if (cycles_rmac_dense(l, cfg) != event_sim_rmac_dense(l, cfg)) return {false, "rmac mismatch"};
        }
        ++checked;
    }
    return {checked == 200, "200 randomized layers, closed form == event simulation"};
}

Outcome c13_pipeline_gains() {
    EngineConfig cfg;
    int mbconv = 0, msa = 0;
    int64_t violations = 0;
    for (const char* name :
         {"effvit-b1-r224", "effvit-b1-r256", "effvit-b1-r288", "effvit-b2-r224", "effvit-b2-r256"}) {
        ModelGraph g = build_model_from_file(kConfigDir + "/" + std::string(name) + ".json");
        for (const Block& blk : g.blocks) {
            if (blk.type == BlockType::MBConv || blk.type == BlockType::DSConv) {
                Timeline tl = schedule_inter_layer(blk, cfg);
                violations += tl.violations;
                if (tl.makespan >= tl.serial) return {false, "no inter-layer gain in " + blk.name + " of " + name};
                ++mbconv;
            } else if (blk.type == BlockType::MSA) {
                Timeline tl = schedule_intra_layer(blk, cfg);
                violations += tl.violations;
                if (tl.makespan >= tl.serial) return {false, "no intra-layer gain in " + blk.name + " of " + name};
                ++msa;
            }
        }
    }
    return {violations == 0 && mbconv > 0 && msa > 0,
            std::to_string(mbconv) + " conv blocks and " + std::to_string(msa) +
                " attention blocks gain, 0 dependency violations"};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* label;
        std::function<Outcome()> body;
    };
    const std::vector<Criterion> criteria = {
        {1, "LOD golden value", c1_lod_golden},
        {2, "migration exactness (1e-5 relative)", c2_migration_exactness},
        {3, "shifting exactness (1e-4 absolute)", c3_shifting_exactness},
        {4, "pathology relief (>=99% of 500 trials)", c4_pathology_relief},
        {5, "dyadic bound (<2^-15, 16-bit numerators)", c5_dyadic_bound},
        {6, "shift-division ratio in [2^-1/2, 2^1/2]", c6_shift_division_bound},
        {7, "integer/fake-quant bit-exactness", c7_bit_exactness},
        {8, "linear-attention equivalence (1e-4 relative)", c8_linear_attention_equivalence},
        {9, "census fidelity (0.52 GMACs, mix +/-1pp)", c9_census_fidelity},
        {10, "simulator peak 819.2 GOPS", c10_simulator_peak},
        {11, "Table-V tolerance gate (+/-20%, GOPS 650..819.2)", c11_table_gate},
        {12, "cycle closed form == event simulation", c12_cycle_oracle},
        {13, "pipeline gains with zero violations", c13_pipeline_gains},
    };

    int failures = 0;
    for (const Criterion& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.body();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%s] criterion %2d: %s — %s (%.2fs)\n", o.pass ? "PASS" : "FAIL", c.id, c.label,
                    o.detail.c_str(), secs);
        failures += !o.pass;
    }
    if (failures) std::printf("%d criterion(s) failed\n", failures);
    else std::printf("all 13 criteria passed\n");
    return failures == 0 ? 0 : 1;
}
