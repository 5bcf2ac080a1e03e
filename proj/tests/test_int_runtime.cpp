#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "evitq/int_exec.hpp"
#include "evitq/int_model.hpp"
#include "evitq/int_ops.hpp"
#include "evitq/quant_model.hpp"

using namespace evitq;

namespace {

const std::string kConfigDir = EVITQ_CONFIG_DIR;

CalibRecord calibrate(const ModelGraph& g, int samples, uint64_t seed) {
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

IntModel quantized_toy(const std::string& config, uint64_t seed, int calib_samples = 8) {
    ModelGraph g = build_model_from_file(kConfigDir + "/" + config);
    init_weights(g, seed);
    ModelGraph folded = fold_bn(g);
    CalibRecord calib = calibrate(folded, calib_samples, seed + 1);
    QuantizedModel qm = quantize_model(folded, calib, QuantPolicy{});
    return build_int_model(qm);
}

Tensor random_input(const ModelGraph& g, uint64_t seed) {
    Tensor t = Tensor::zeros_f32({1, g.in_channels, g.resolution, g.resolution});
    auto rng = make_rng(seed, 17);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    for (float& v : t.f()) v = d(rng);
    return t;
}

DyadicPair identity_pair() { return DyadicPair{32768, 15}; }

}  // namespace

TEST_CASE("lod examples and oracle sweep") {
    REQUIRE(lod(1) == 0);
    REQUIRE(lod(0b01100011) == 6);  // 99
    REQUIRE_THROWS_AS(lod(0), std::invalid_argument);
    REQUIRE_THROWS_AS(lod(-4), std::invalid_argument);
    auto rng = make_rng(5, 1);
    for (int i = 0; i < 20000; ++i) {
        const int64_t x = 1 + static_cast<int64_t>(rng() % ((int64_t{1} << 30) - 1));
        REQUIRE(lod(x) == static_cast<int>(std::floor(std::log2(static_cast<double>(x)))));
    }
}

TEST_CASE("log2_round worked example and properties") {
    REQUIRE(log2_round(0b01100011) == 7);  // lod 6, next bit set -> 7
    REQUIRE(log2_round(4) == 2);           // exact power, next bit clear
    REQUIRE(log2_round(1) == 0);
    // Exhaustive: rounds to the linearly nearest power of two, exact
    // midpoints (3 * 2^(k-1)) upward.
    for (int64_t x = 1; x <= (int64_t{1} << 20); ++x) {
        const int e = log2_round(x);
        const int f = lod(x);
        REQUIRE((e == f || e == f + 1));
        const int64_t lo = int64_t{1} << f, hi = int64_t{1} << (f + 1);
        const int64_t d_lo = x - lo, d_hi = hi - x;
        if (d_lo < d_hi) REQUIRE(e == f);
        if (d_hi < d_lo) REQUIRE(e == f + 1);
        if (d_lo == d_hi) REQUIRE(e == f + 1);  // tie rounds up
    }
}

TEST_CASE("log2_round_geometric satisfies the relative-error bound") {
    REQUIRE(log2_round_geometric(0b01100011) == 7);
    REQUIRE(log2_round_geometric(4) == 2);
    // x = 23 separates the two rules: linearly nearer to 16, geometrically
    // nearer to 32.
    REQUIRE(log2_round(23) == 4);
    REQUIRE(log2_round_geometric(23) == 5);
    const double lo = std::exp2(-0.5), hi = std::exp2(0.5);
    for (int64_t x = 1; x <= (int64_t{1} << 20); ++x) {
        const double ratio = static_cast<double>(x) / std::exp2(log2_round_geometric(x));
        REQUIRE(ratio >= lo);
        REQUIRE(ratio <= hi);
    }
}

TEST_CASE("requantize evaluation, saturation, monotonicity") {
    Tensor acc = Tensor::zeros_i32({3});
    acc.i32() = {0, 100, 1 << 20};
    Tensor out = requantize(acc, DyadicPair{3, 3}, 8, true);
    REQUIRE(out.i8()[0] == 0);
    REQUIRE(out.i8()[1] == 38);  // 300/8 = 37.5, half-even -> 38
    REQUIRE(out.i8()[2] == 127);

    Tensor sat = Tensor::zeros_i32({1});
    sat.i32() = {1 << 20};
    REQUIRE(requantize(sat, DyadicPair{1, 0}, 8, true).i8()[0] == 127);

    // monotone in acc for fixed pair
    int64_t prev = INT64_MIN;
    for (int32_t a = -2000; a <= 2000; ++a) {
        const int64_t v = requant_scalar(a, DyadicPair{7, 5});
        REQUIRE(v >= prev);
        prev = v;
    }
    // negative c shifts left exactly
    REQUIRE(requant_scalar(3, DyadicPair{1, -4}) == 48);

    // numerator must respect the 16-bit budget
    Tensor one = Tensor::zeros_i32({1});
    REQUIRE_THROWS_AS(requantize(one, DyadicPair{1 << 16, 0}, 8, true), std::invalid_argument);
    REQUIRE_THROWS_AS(requantize(one, DyadicPair{0, 0}, 8, true), std::invalid_argument);
}

TEST_CASE("rounding shift matches f64 half-even across the range") {
    auto rng = make_rng(6, 2);
    for (int i = 0; i < 50000; ++i) {
        const int64_t v = static_cast<int64_t>(rng() % (1ull << 40)) - (int64_t{1} << 39);
        const int c = static_cast<int>(rng() % 20);
        const double expect = std::nearbyint(static_cast<double>(v) * std::exp2(-c));
        REQUIRE(static_cast<double>(rounding_shift_right(v, c)) == expect);
    }
}

TEST_CASE("int_conv2d scalar case and zero propagation") {
    Tensor a = Tensor::zeros_i8({1, 1, 1, 1});
    Tensor w = Tensor::zeros_i8({1, 1, 1, 1});
    a.i8()[0] = 2;
    w.i8()[0] = 3;
    Tensor y = int_conv2d(a, w, {4}, 1, 0, 1);
    REQUIRE(y.i32()[0] == 10);

    Tensor z = Tensor::zeros_i8({1, 4, 5, 5});
    Tensor wz = Tensor::zeros_i8({2, 4, 3, 3});
    Tensor yz = int_conv2d(z, wz, {}, 1, 1, 1);
    for (int32_t v : yz.i32()) REQUIRE(v == 0);
}

TEST_CASE("int kernels equal the f64 exact-integer oracle") {
    auto rng = make_rng(7, 3);
    for (int trial = 0; trial < 20; ++trial) {
        const int64_t cin = 1 + static_cast<int64_t>(rng() % 8);
        const int64_t cout = 1 + static_cast<int64_t>(rng() % 8);
        const int64_t hw = 4 + static_cast<int64_t>(rng() % 5);
        const int64_t k = (rng() % 2) ? 3 : 1;
        Tensor a = Tensor::zeros_i8({1, cin, hw, hw});
        Tensor w = Tensor::zeros_i8({cout, cin, k, k});
        for (auto& v : a.i8()) v = static_cast<int8_t>(static_cast<int>(rng() % 255) - 127);
        for (auto& v : w.i8()) v = static_cast<int8_t>(static_cast<int>(rng() % 255) - 127);
        Tensor y = int_conv2d(a, w, {}, 1, k / 2, 1);
        // f64 oracle: exact for sums below 2^53
        const int64_t ho = y.dim(2), wo = y.dim(3);
        for (int64_t oc = 0; oc < cout; ++oc)
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox) {
                    double acc = 0;
                    for (int64_t ic = 0; ic < cin; ++ic)
                        for (int64_t ky = 0; ky < k; ++ky)
                            for (int64_t kx = 0; kx < k; ++kx) {
                                const int64_t iy = oy + ky - k / 2, ix = ox + kx - k / 2;
                                if (iy < 0 || iy >= hw || ix < 0 || ix >= hw) continue;
                                acc += static_cast<double>(a.i8()[static_cast<size_t>((ic * hw + iy) * hw + ix)]) *
                                       static_cast<double>(w.i8()[static_cast<size_t>(((oc * cin + ic) * k + ky) * k + kx)]);
                            }
                    REQUIRE(static_cast<double>(y.i32()[static_cast<size_t>((oc * ho + oy) * wo + ox)]) == acc);
                }
    }
}

TEST_CASE("quantize_divisor_log2 examples") {
    Tensor d = Tensor::zeros_i32({2});
    d.i32() = {99, 99};
    Log2Divisor a = quantize_divisor_log2(d, 0, {-8, 7});
    REQUIRE(a.exponents.i32()[0] == 7);
    Log2Divisor b = quantize_divisor_log2(d, 3, {-8, 7});
    REQUIRE(b.exponents.i32()[0] == 7);  // clamp(10)
    REQUIRE(b.clip_count == 2);

    Tensor z = Tensor::zeros_i32({1});
    Log2Divisor c = quantize_divisor_log2(z, 0, {-8, 7});
    REQUIRE(c.exponents.i32()[0] == -8);
    REQUIRE(c.zero_count == 1);

    Tensor neg = Tensor::zeros_i32({1});
    neg.i32() = {-5};
    REQUIRE_THROWS_AS(quantize_divisor_log2(neg, 0, {-8, 7}), std::invalid_argument);

    // reconstruction ratio for unclipped entries
    auto rng = make_rng(8, 4);
    Tensor r = Tensor::zeros_i32({512});
    for (auto& v : r.i32()) v = 1 + static_cast<int32_t>(rng() % 200);
    Log2Divisor ld = quantize_divisor_log2(r, 0, {-30, 30});
    for (int64_t i = 0; i < r.numel(); ++i) {
        const double ratio = std::exp2(ld.exponents.i32()[static_cast<size_t>(i)]) /
                             static_cast<double>(r.i32()[static_cast<size_t>(i)]);
        REQUIRE(ratio >= std::exp2(-0.5));
        REQUIRE(ratio <= std::exp2(0.5));
    }
}

namespace {

// A hand-held attention stage: heads=2 (one per half), identity preps.
IntAttnStage craft_attn_stage(int64_t d, int64_t n_tok, DyadicPair s_pair, DyadicPair ksum_pair,
                              DyadicPair dd_pair, DyadicPair final_pair, int e_s_eff, int lo, int hi) {
    IntAttnStage as;
    as.spec.name = "attn";
    as.spec.kind = LayerKind::AttnCombine;
    as.spec.heads = 2;
    as.spec.head_dim = d;
    as.spec.in_channels = 6 * d;
    as.spec.out_channels = 2 * d;
    as.spec.h_in = as.spec.h_out = n_tok;
    as.spec.w_in = as.spec.w_out = 1;
    as.aq.e_s_eff = e_s_eff;
    as.aq.win_lo = lo;
    as.aq.win_hi = hi;
    as.prep_base.assign(static_cast<size_t>(3 * d), identity_pair());
    as.prep_ms.assign(static_cast<size_t>(3 * d), identity_pair());
    as.s_pair = s_pair;
    as.ksum_pair = ksum_pair;
    as.dd_pair = dd_pair;
    as.final_pair = final_pair;
    return as;
}

}  // namespace

TEST_CASE("attention single token with power-of-two divisor returns the value row") {
    const int64_t d = 4, n = 1;
    // Q = [16,0,0,0], K = [8,0,0,0]: divisor = 16*8 = 128 = 2^7 exactly, so
    // the shift divides exactly and the output equals the requantized V row.
    IntAttnStage as = craft_attn_stage(d, n, DyadicPair{4096, 15} /* /8 */, identity_pair(),
                                       DyadicPair{2048, 15} /* /16 */, identity_pair(), -7, -16, 15);
    Tensor qkv = Tensor::zeros_i8({1, 3 * d, n, 1});
    Tensor ms = Tensor::zeros_i8({1, 3 * d, n, 1});
    qkv.i8()[0] = 16;      // q[0]
    qkv.i8()[4] = 8;       // k[0]
    const int8_t vrow[4] = {40, -24, 7, 0};
    for (int64_t b = 0; b < d; ++b) qkv.i8()[static_cast<size_t>(2 * d + b)] = vrow[b];
    InferDiagnostics diag;
    Tensor out = detail::attn_stage_int(as, qkv, ms, diag, nullptr);
    // base head occupies channels [0, d)
    for (int64_t b = 0; b < d; ++b) {
        const int got = out.i8()[static_cast<size_t>(b * n)];
        REQUIRE(std::abs(got - vrow[b]) <= 1);
    }
    REQUIRE(diag.divisor_zero == 1);  // the all-zero multi-scale head
}

TEST_CASE("attention shift-division tracks the float reference within the log2 bound") {
    const int64_t d = 4, n = 4;
    auto rng = make_rng(10, 5);
    for (int trial = 0; trial < 200; ++trial) {
        IntAttnStage as = craft_attn_stage(d, n, DyadicPair{512, 15} /* /64 */, identity_pair(),
                                           identity_pair(), identity_pair(), 0, -30, 30);
        Tensor qkv = Tensor::zeros_i8({1, 3 * d, n, 1});
        Tensor ms = Tensor::zeros_i8({1, 3 * d, n, 1});
        auto fill = [&](int64_t part, int lo, int hi) {
            for (int64_t a = 0; a < d; ++a)
                for (int64_t t = 0; t < n; ++t)
                    qkv.i8()[static_cast<size_t>((part * d + a) * n + t)] =
                        static_cast<int8_t>(lo + static_cast<int>(rng() % (hi - lo + 1)));
        };
        fill(0, 4, 15);   // q
        fill(1, 4, 15);   // k
        fill(2, 32, 63);  // v, positive so outputs stay well away from zero
        ms = qkv;
        InferDiagnostics diag;
        Tensor out = detail::attn_stage_int(as, qkv, ms, diag, nullptr);
        // f64 reference of the five steps on the same grids, with the same
        // S8 rounding but true division instead of the shift.
        for (int64_t t = 0; t < n; ++t) {
            double div = 0;
            std::vector<double> s8(static_cast<size_t>(d * d), 0.0);
            for (int64_t a = 0; a < d; ++a) {
                double ks = 0, s_raw;
                for (int64_t b = 0; b < d; ++b) {
                    s_raw = 0;
                    for (int64_t tt = 0; tt < n; ++tt)
                        s_raw += static_cast<double>(qkv.i8()[static_cast<size_t>((d + a) * n + tt)]) *
                                 qkv.i8()[static_cast<size_t>((2 * d + b) * n + tt)];
                    s8[static_cast<size_t>(a * d + b)] = std::nearbyint(s_raw / 64.0);
                }
                for (int64_t tt = 0; tt < n; ++tt) ks += qkv.i8()[static_cast<size_t>((d + a) * n + tt)];
                div += static_cast<double>(qkv.i8()[static_cast<size_t>(a * n + t)]) * ks;
            }
            for (int64_t b = 0; b < d; ++b) {
                double dividend = 0;
                for (int64_t a = 0; a < d; ++a)
                    dividend += static_cast<double>(qkv.i8()[static_cast<size_t>(a * n + t)]) *
                                s8[static_cast<size_t>(a * d + b)];
                const double ref = dividend / div;  // true division result (in S8 units)
                const double got = out.i8()[static_cast<size_t>(b * n + t)];
                // Shift-division error bounded by the log2 ratio (2^0.5 - 1
                // relative) plus one output LSB and the S8 rounding drift.
                REQUIRE(std::abs(got - ref) <= (std::exp2(0.5) - 1.0) * ref + 1.6);
            }
        }
    }
}

TEST_CASE("attention stage is deterministic") {
    IntModel im = quantized_toy("toy-msa.json", 31);
    Tensor x = random_input(im.graph, 991);
    IntForwardResult a = forward_int(im, x);
    IntForwardResult b = forward_int(im, x);
    REQUIRE(a.boundaries.size() == b.boundaries.size());
    for (size_t i = 0; i < a.boundaries.size(); ++i) {
        REQUIRE(a.boundaries[i].first == b.boundaries[i].first);
        if (a.boundaries[i].second.dtype() == Dtype::I8)
            REQUIRE(a.boundaries[i].second.i8() == b.boundaries[i].second.i8());
        else
            REQUIRE(a.boundaries[i].second.i32() == b.boundaries[i].second.i32());
    }
}

TEST_CASE("integer and fake-quant paths agree bit-exactly on the toy MBConv") {
    IntModel im = quantized_toy("toy-mbconv.json", 41);
    for (int i = 0; i < 10; ++i) {
        CrossCheckResult r = crosscheck(im, random_input(im.graph, 500 + static_cast<uint64_t>(i)));
        INFO("mismatch at " << r.first_mismatch);
        REQUIRE(r.bit_exact);
    }
}

TEST_CASE("integer and fake-quant paths agree bit-exactly on the toy MSA") {
    IntModel im = quantized_toy("toy-msa.json", 42);
    for (int i = 0; i < 10; ++i) {
        CrossCheckResult r = crosscheck(im, random_input(im.graph, 600 + static_cast<uint64_t>(i)));
        INFO("mismatch at " << r.first_mismatch);
        REQUIRE(r.bit_exact);
    }
}

TEST_CASE("integer and fake-quant paths agree bit-exactly on the toy classifier") {
    IntModel im = quantized_toy("toy-cls.json", 43);
    for (int i = 0; i < 5; ++i) {
        CrossCheckResult r = crosscheck(im, random_input(im.graph, 700 + static_cast<uint64_t>(i)));
        INFO("mismatch at " << r.first_mismatch);
        REQUIRE(r.bit_exact);
    }
}

TEST_CASE("zero input propagates bias only") {
    IntModel im = quantized_toy("toy-mbconv.json", 44);
    Tensor zero = Tensor::zeros_f32({1, 16, 8, 8});
    IntForwardResult r = forward_int(im, zero);
    // Boundary 0 is the quantized input; all zeros.
    REQUIRE(r.boundaries[0].first == "model.in");
    for (int8_t v : r.boundaries[0].second.i8()) REQUIRE(v == 0);
    // The first conv output must equal the hand-computed bias-only pass.
    const IntConvStage& pw1 = std::get<IntConvStage>(im.blocks[0].ops[0]);
    const Tensor& got = r.boundaries[1].second;
    const int64_t hw = 8 * 8;
    for (int64_t c = 0; c < pw1.spec.out_channels; ++c) {
        int64_t q = std::clamp<int64_t>(
            requant_scalar(pw1.bias_i32[static_cast<size_t>(c)], pw1.acc_pairs[static_cast<size_t>(c)]), -128, 127);
        if (pw1.lut_active) q = pw1.luts[pw1.luts.size() == 1 ? 0 : static_cast<size_t>(c)][static_cast<size_t>(q + 128)];
        for (int64_t i = 0; i < hw; ++i)
            REQUIRE(got.i8()[static_cast<size_t>(c * hw + i)] == static_cast<int8_t>(q));
    }
}

TEST_CASE("toy classifier: integer top-1 agrees with the float reference") {
    ModelGraph g = build_model_from_file(kConfigDir + "/toy-cls.json");
    init_weights(g, 3);
    ModelGraph folded = fold_bn(g);
    CalibRecord calib = calibrate(folded, 16, 4);
    QuantizedModel qm = quantize_model(folded, calib, QuantPolicy{});
    IntModel im = build_int_model(qm);
    int agree = 0;
    const int trials = 200;
    for (int i = 0; i < trials; ++i) {
        Tensor x = random_input(folded, 800 + static_cast<uint64_t>(i));
        Tensor fy = forward_float(folded, x);
        IntForwardResult iy = forward_int(im, x);
        int64_t f_arg = 0, i_arg = 0;
        double f_best = -1e30, i_best = -1e30;
        for (int64_t c = 0; c < fy.numel(); ++c) {
            if (fy.f()[static_cast<size_t>(c)] > f_best) {
                f_best = fy.f()[static_cast<size_t>(c)];
                f_arg = c;
            }
            const double deq = static_cast<double>(iy.logits.i32()[static_cast<size_t>(c)]) *
                               iy.logit_scales[static_cast<size_t>(c)];
            if (deq > i_best) {
                i_best = deq;
                i_arg = c;
            }
        }
        agree += (f_arg == i_arg);
    }
    REQUIRE(agree >= static_cast<int>(0.95 * trials));
}
