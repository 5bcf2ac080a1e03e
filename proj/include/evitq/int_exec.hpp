#pragma once

// The two execution routes over an IntModel. The integer route works in
// i8/i32 with dyadic multiply-shift rescaling. The fake-quant route simulates
// the same pipeline in f64: it dequantizes each point, re-quantizes at the
// consumer, and performs exact-integer float arithmetic, so any divergence
// from the integer route is a rounding or overflow bug, not noise.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "evitq/int_model.hpp"

namespace evitq {

namespace detail {

// --- integer route ---------------------------------------------------------

struct IntTensor {
    Tensor t;  // i8
    const Tensor& tensor() const { return t; }
};

inline Tensor conv_stage_int(const IntConvStage& cs, const Tensor& in, std::vector<std::pair<std::string, Tensor>>* trace) {
    Tensor acc;
    if (cs.spec.kind == LayerKind::MatMul) {
        Tensor a = Tensor::zeros_i8({in.dim(0), in.dim(1)});
        a.i8() = in.i8();
        Tensor w2 = Tensor::zeros_i8({cs.spec.out_channels, cs.spec.in_channels});
        w2.i8() = cs.wq.i8();
        Tensor mm = int_matmul(a, w2, cs.bias_i32);
        acc = Tensor::zeros_i32({in.dim(0), cs.spec.out_channels, 1, 1});
        acc.i32() = mm.i32();
    } else {
        acc = int_conv2d(in, cs.wq, cs.bias_i32, cs.spec.stride, cs.spec.padding, cs.spec.groups);
    }
    Tensor out = Tensor::zeros_i8(acc.shape());
    const int64_t cout = acc.dim(1), hw = acc.dim(2) * acc.dim(3);
    for (int64_t n = 0; n < acc.dim(0); ++n)
        for (int64_t c = 0; c < cout; ++c) {
            const DyadicPair p = cs.acc_pairs[static_cast<size_t>(c)];
            const auto* lut = cs.lut_active ? &cs.luts[cs.luts.size() == 1 ? 0 : static_cast<size_t>(c)] : nullptr;
            for (int64_t i = 0; i < hw; ++i) {
                const size_t idx = static_cast<size_t>((n * cout + c) * hw + i);
                int64_t q = std::clamp<int64_t>(requant_scalar(acc.i32()[idx], p), -128, 127);
                if (lut) q = (*lut)[static_cast<size_t>(q + 128)];
                out.i8()[idx] = static_cast<int8_t>(q);
            }
        }
    if (trace) trace->emplace_back(cs.spec.name, out);
    return out;
}

inline Tensor pool_stage_int(const IntPoolStage& ps, const Tensor& in, std::vector<std::pair<std::string, Tensor>>* trace) {
    const int64_t n = in.dim(0), c = in.dim(1), hw = in.dim(2) * in.dim(3);
    Tensor out = Tensor::zeros_i8({n, c, 1, 1});
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            int64_t sum = 0;
            for (int64_t i = 0; i < hw; ++i) sum += in.i8()[static_cast<size_t>((b * c + ch) * hw + i)];
            out.i8()[static_cast<size_t>(b * c + ch)] =
                static_cast<int8_t>(std::clamp<int64_t>(requant_scalar(sum, ps.pair), -128, 127));
        }
    if (trace) trace->emplace_back(ps.spec.name, out);
    return out;
}

inline Tensor attn_stage_int(const IntAttnStage& as, const Tensor& qkv, const Tensor& ms,
                             InferDiagnostics& diag, std::vector<std::pair<std::string, Tensor>>* trace) {
    if (as.aq.divisor_scheme != QuantScheme::Log2)
        throw ArtifactError("integer attention requires the log2 divisor scheme (layer " + as.spec.name + ")");
    const int64_t d = as.spec.head_dim, heads = as.spec.heads, n_tok = as.spec.tokens();
    const int64_t half = heads / 2;
    Tensor out = Tensor::zeros_i8({1, heads * d, as.spec.h_out, as.spec.w_out});
    Tensor exps_all = Tensor::zeros_i32({heads, n_tok});
    for (int64_t hh = 0; hh < heads; ++hh) {
        const bool base = hh < half;
        const Tensor& src = base ? qkv : ms;
        const auto& preps = base ? as.prep_base : as.prep_ms;
        const int64_t group = base ? hh : hh - half;
        const int64_t c0 = group * 3 * d;
        // Part prep: requantize the q/k/v channel slices onto their shared scales.
        std::vector<int32_t> Q(static_cast<size_t>(n_tok * d)), K(static_cast<size_t>(n_tok * d)),
            V(static_cast<size_t>(n_tok * d));
        for (int64_t a = 0; a < d; ++a)
            for (int64_t t = 0; t < n_tok; ++t) {
                const int64_t qv = src.i8()[static_cast<size_t>((c0 + a) * n_tok + t)];
                const int64_t kv = src.i8()[static_cast<size_t>((c0 + d + a) * n_tok + t)];
                const int64_t vv = src.i8()[static_cast<size_t>((c0 + 2 * d + a) * n_tok + t)];
                Q[static_cast<size_t>(t * d + a)] = static_cast<int32_t>(
                    std::clamp<int64_t>(requant_scalar(qv, preps[static_cast<size_t>(c0 + a)]), 0, 127));
                K[static_cast<size_t>(t * d + a)] = static_cast<int32_t>(
                    std::clamp<int64_t>(requant_scalar(kv, preps[static_cast<size_t>(c0 + d + a)]), 0, 127));
                V[static_cast<size_t>(t * d + a)] = static_cast<int32_t>(
                    std::clamp<int64_t>(requant_scalar(vv, preps[static_cast<size_t>(c0 + 2 * d + a)]),
                                        -128, 127));
            }
        // step i: S = K^T V; step ii: ksum = column sums of K.
        std::vector<int32_t> s_int(static_cast<size_t>(d * d), 0), ksum(static_cast<size_t>(d), 0);
        for (int64_t t = 0; t < n_tok; ++t)
            for (int64_t a = 0; a < d; ++a) {
                const int32_t kv = K[static_cast<size_t>(t * d + a)];
                ksum[static_cast<size_t>(a)] += kv;
                for (int64_t b = 0; b < d; ++b)
                    s_int[static_cast<size_t>(a * d + b)] += kv * V[static_cast<size_t>(t * d + b)];
            }
        std::vector<int32_t> s8(static_cast<size_t>(d * d)), ksum8(static_cast<size_t>(d));
        for (size_t i = 0; i < s8.size(); ++i)
            s8[i] = static_cast<int32_t>(std::clamp<int64_t>(requant_scalar(s_int[i], as.s_pair), -128, 127));
        for (size_t i = 0; i < ksum8.size(); ++i)
            ksum8[i] = static_cast<int32_t>(std::clamp<int64_t>(requant_scalar(ksum[i], as.ksum_pair), 0, 127));
        // steps iii/iv: dividend = Q S8, divisor = Q ksum8.
        Tensor div_int = Tensor::zeros_i32({n_tok});
        std::vector<int32_t> d16(static_cast<size_t>(n_tok * d));
        for (int64_t t = 0; t < n_tok; ++t) {
            int32_t dv = 0;
            for (int64_t a = 0; a < d; ++a) dv += Q[static_cast<size_t>(t * d + a)] * ksum8[static_cast<size_t>(a)];
            div_int.i32()[static_cast<size_t>(t)] = dv;
            for (int64_t b = 0; b < d; ++b) {
                int32_t acc = 0;
                for (int64_t a = 0; a < d; ++a)
                    acc += Q[static_cast<size_t>(t * d + a)] * s8[static_cast<size_t>(a * d + b)];
                d16[static_cast<size_t>(t * d + b)] = static_cast<int32_t>(
                    std::clamp<int64_t>(requant_scalar(acc, as.dd_pair), -32768, 32767));
            }
        }
        // step v: divisor -> exponent, dividend >> exponent, final rescale.
        Log2Divisor ld = quantize_divisor_log2(div_int, as.aq.e_s_eff, {as.aq.win_lo, as.aq.win_hi});
        diag.divisor_zero += ld.zero_count;
        diag.divisor_clip += ld.clip_count;
        for (int64_t t = 0; t < n_tok; ++t) {
            const int e = ld.exponents.i32()[static_cast<size_t>(t)];
            exps_all.i32()[static_cast<size_t>(hh * n_tok + t)] = e;
            for (int64_t b = 0; b < d; ++b) {
                const int64_t shifted = rounding_shift_right(d16[static_cast<size_t>(t * d + b)], e);
                const int64_t q = std::clamp<int64_t>(requant_scalar(shifted, as.final_pair), -128, 127);
                out.i8()[static_cast<size_t>((hh * d + b) * n_tok + t)] = static_cast<int8_t>(q);
            }
        }
    }
    if (trace) {
        trace->emplace_back(as.spec.name + ".exp", exps_all);
        trace->emplace_back(as.spec.name, out);
    }
    return out;
}

// --- fake-quant route (f64) ------------------------------------------------

inline std::vector<double> grid_of(const std::vector<double>& vals, const PointDesc& d, int64_t channels,
                                   int64_t hw) {
    // Recover the integer grid from dequantized values; exact because the
    // values were produced as grid * scale in f64.
    std::vector<double> g(vals.size());
    for (size_t i = 0; i < vals.size(); ++i) {
        const int64_t ch = (static_cast<int64_t>(i) / hw) % channels;
        g[i] = static_cast<double>(rne_d(vals[i] / d.scale_for(ch)));
    }
    return g;
}

inline double fq_requant(double acc, DyadicPair p) {
    // Mirrors requant_scalar: (acc * b) / 2^c with ties to even; exact while
    // |acc * b| stays below 2^53.
    return std::nearbyint(acc * static_cast<double>(p.b) * std::exp2(static_cast<double>(-p.c)));
}

struct FakeTensor {
    std::vector<double> grid;  // integer-valued
    std::vector<int64_t> shape;
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
};

inline Tensor fake_to_i8(const FakeTensor& t) {
    Tensor out(t.shape, Dtype::I8);
    for (size_t i = 0; i < t.grid.size(); ++i) out.i8()[i] = static_cast<int8_t>(t.grid[i]);
    return out;
}

inline FakeTensor conv_stage_fake(const IntConvStage& cs, const FakeTensor& in,
                                  std::vector<std::pair<std::string, Tensor>>* trace) {
    const int64_t n = in.dim(0), c_in = in.dim(1), h = in.dim(2), w = in.dim(3);
    const int64_t cout = cs.spec.out_channels;
    int64_t h_out = cs.spec.h_out, w_out = cs.spec.w_out;
    FakeTensor out;
    out.shape = {n, cout, h_out, w_out};
    out.grid.assign(static_cast<size_t>(n * cout * h_out * w_out), 0.0);
    const int64_t cpg = c_in / cs.spec.groups, opg = cout / cs.spec.groups;
    const int64_t k = cs.spec.kind == LayerKind::MatMul ? 1 : cs.spec.kernel;
    const int64_t stride = cs.spec.kind == LayerKind::MatMul ? 1 : cs.spec.stride;
    const int64_t pad = cs.spec.kind == LayerKind::MatMul ? 0 : cs.spec.padding;
    for (int64_t b = 0; b < n; ++b)
        for (int64_t oc = 0; oc < cout; ++oc) {
            const int64_t g = oc / opg;
            for (int64_t oy = 0; oy < h_out; ++oy)
                for (int64_t ox = 0; ox < w_out; ++ox) {
                    double acc = static_cast<double>(cs.bias_i32[static_cast<size_t>(oc)]);
                    for (int64_t ic = 0; ic < cpg; ++ic) {
                        const int64_t cc = g * cpg + ic;
                        for (int64_t ky = 0; ky < k; ++ky)
                            for (int64_t kx = 0; kx < k; ++kx) {
                                const int64_t iy = oy * stride + ky - pad;
                                const int64_t ix = ox * stride + kx - pad;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += in.grid[static_cast<size_t>(((b * c_in + cc) * h + iy) * w + ix)] *
                                       static_cast<double>(
                                           cs.wq.i8()[static_cast<size_t>(((oc * cpg + ic) * k + ky) * k + kx)]);
                            }
                    }
                    const DyadicPair p = cs.acc_pairs[static_cast<size_t>(oc)];
                    double q = std::clamp<double>(fq_requant(acc, p), -128.0, 127.0);
                    if (cs.lut_active) {
                        const auto& lut = cs.luts[cs.luts.size() == 1 ? 0 : static_cast<size_t>(oc)];
                        q = static_cast<double>(lut[static_cast<size_t>(static_cast<int>(q) + 128)]);
                    }
                    out.grid[static_cast<size_t>(((b * cout + oc) * h_out + oy) * w_out + ox)] = q;
                }
        }
    if (trace) trace->emplace_back(cs.spec.name, fake_to_i8(out));
    return out;
}

inline FakeTensor pool_stage_fake(const IntPoolStage& ps, const FakeTensor& in,
                                  std::vector<std::pair<std::string, Tensor>>* trace) {
    const int64_t n = in.dim(0), c = in.dim(1), hw = in.dim(2) * in.dim(3);
    FakeTensor out;
    out.shape = {n, c, 1, 1};
    out.grid.assign(static_cast<size_t>(n * c), 0.0);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            double sum = 0.0;
            for (int64_t i = 0; i < hw; ++i) sum += in.grid[static_cast<size_t>((b * c + ch) * hw + i)];
            out.grid[static_cast<size_t>(b * c + ch)] = std::clamp<double>(fq_requant(sum, ps.pair), -128.0, 127.0);
        }
    if (trace) trace->emplace_back(ps.spec.name, fake_to_i8(out));
    return out;
}

inline FakeTensor attn_stage_fake(const IntAttnStage& as, const FakeTensor& qkv, const FakeTensor& ms,
                                  InferDiagnostics& diag, std::vector<std::pair<std::string, Tensor>>* trace) {
    if (as.aq.divisor_scheme != QuantScheme::Log2)
        throw ArtifactError("integer attention requires the log2 divisor scheme (layer " + as.spec.name + ")");
    const int64_t d = as.spec.head_dim, heads = as.spec.heads, n_tok = as.spec.tokens();
    const int64_t half = heads / 2;
    FakeTensor out;
    out.shape = {1, heads * d, as.spec.h_out, as.spec.w_out};
    out.grid.assign(static_cast<size_t>(heads * d * n_tok), 0.0);
    Tensor exps_all = Tensor::zeros_i32({heads, n_tok});
    for (int64_t hh = 0; hh < heads; ++hh) {
        const bool base = hh < half;
        const FakeTensor& src = base ? qkv : ms;
        const auto& preps = base ? as.prep_base : as.prep_ms;
        const int64_t group = base ? hh : hh - half;
        const int64_t c0 = group * 3 * d;
        std::vector<double> Q(static_cast<size_t>(n_tok * d)), K(static_cast<size_t>(n_tok * d)),
            V(static_cast<size_t>(n_tok * d));
        for (int64_t a = 0; a < d; ++a)
            for (int64_t t = 0; t < n_tok; ++t) {
                const double qv = src.grid[static_cast<size_t>((c0 + a) * n_tok + t)];
                const double kv = src.grid[static_cast<size_t>((c0 + d + a) * n_tok + t)];
                const double vv = src.grid[static_cast<size_t>((c0 + 2 * d + a) * n_tok + t)];
                Q[static_cast<size_t>(t * d + a)] =
                    std::clamp(fq_requant(qv, preps[static_cast<size_t>(c0 + a)]), 0.0, 127.0);
                K[static_cast<size_t>(t * d + a)] =
                    std::clamp(fq_requant(kv, preps[static_cast<size_t>(c0 + d + a)]), 0.0, 127.0);
                V[static_cast<size_t>(t * d + a)] =
                    std::clamp(fq_requant(vv, preps[static_cast<size_t>(c0 + 2 * d + a)]), -128.0, 127.0);
            }
        std::vector<double> s_int(static_cast<size_t>(d * d), 0.0), ksum(static_cast<size_t>(d), 0.0);
        for (int64_t t = 0; t < n_tok; ++t)
            for (int64_t a = 0; a < d; ++a) {
                const double kv = K[static_cast<size_t>(t * d + a)];
                ksum[static_cast<size_t>(a)] += kv;
                for (int64_t b = 0; b < d; ++b)
                    s_int[static_cast<size_t>(a * d + b)] += kv * V[static_cast<size_t>(t * d + b)];
            }
        std::vector<double> s8(static_cast<size_t>(d * d)), ksum8(static_cast<size_t>(d));
        for (size_t i = 0; i < s8.size(); ++i) s8[i] = std::clamp(fq_requant(s_int[i], as.s_pair), -128.0, 127.0);
        for (size_t i = 0; i < ksum8.size(); ++i)
            ksum8[i] = std::clamp(fq_requant(ksum[i], as.ksum_pair), 0.0, 127.0);
        for (int64_t t = 0; t < n_tok; ++t) {
            double dv = 0.0;
            for (int64_t a = 0; a < d; ++a) dv += Q[static_cast<size_t>(t * d + a)] * ksum8[static_cast<size_t>(a)];
            int e;
            if (dv == 0.0) {
                e = as.aq.win_lo;
                ++diag.divisor_zero;
            } else {
                const int raw = as.aq.e_s_eff + log2_round_geometric(static_cast<int64_t>(dv));
                e = std::clamp(raw, as.aq.win_lo, as.aq.win_hi);
                if (e != raw) ++diag.divisor_clip;
            }
            exps_all.i32()[static_cast<size_t>(hh * n_tok + t)] = e;
            for (int64_t b = 0; b < d; ++b) {
                double acc = 0.0;
                for (int64_t a = 0; a < d; ++a)
                    acc += Q[static_cast<size_t>(t * d + a)] * s8[static_cast<size_t>(a * d + b)];
                const double d16 = std::clamp(fq_requant(acc, as.dd_pair), -32768.0, 32767.0);
                // Rounding shift in f64: exact scaling by 2^-e then half-even.
                const double shifted = std::nearbyint(d16 * std::exp2(static_cast<double>(-e)));
                const double q = std::clamp(fq_requant(shifted, as.final_pair), -128.0, 127.0);
                out.grid[static_cast<size_t>((hh * d + b) * n_tok + t)] = q;
            }
        }
    }
    if (trace) {
        trace->emplace_back(as.spec.name + ".exp", exps_all);
        trace->emplace_back(as.spec.name, fake_to_i8(out));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline Tensor quantize_input(const IntModel& im, const Tensor& input) {
    return quantize_uniform(input, im.input_scale, 8, true);
}

inline IntForwardResult forward_int(const IntModel& im, const Tensor& input_f32) {
    IntForwardResult res;
    Tensor x = quantize_input(im, input_f32);
    res.boundaries.emplace_back("model.in", x);
    Tensor logits_acc;
    for (size_t bi = 0; bi < im.blocks.size(); ++bi) {
        const IntBlock& blk = im.blocks[bi];
        const Tensor block_in = x;
        if (blk.type == BlockType::MSA) {
            const auto& qkv = std::get<IntConvStage>(blk.ops[0]);
            const auto& agg = std::get<IntConvStage>(blk.ops[1]);
            const auto& attn = std::get<IntAttnStage>(blk.ops[2]);
            const auto& proj = std::get<IntConvStage>(blk.ops[3]);
            Tensor qkv_out = detail::conv_stage_int(qkv, x, &res.boundaries);
            Tensor ms_out = detail::conv_stage_int(agg, qkv_out, &res.boundaries);
            Tensor attn_out = detail::attn_stage_int(attn, qkv_out, ms_out, res.diag, &res.boundaries);
            x = detail::conv_stage_int(proj, attn_out, &res.boundaries);
        } else {
            for (const IntOp& op : blk.ops) {
                if (std::holds_alternative<IntConvStage>(op)) {
                    const auto& cs = std::get<IntConvStage>(op);
                    const bool is_final_fc = im.head_logits && bi + 1 == im.blocks.size() &&
                                             &op == &blk.ops.back();
                    if (is_final_fc) {
                        // Keep the classifier accumulators as logits, and emit
                        // the boundary grid as well.
                        Tensor a = Tensor::zeros_i8({x.dim(0), x.dim(1)});
                        a.i8() = x.i8();
                        Tensor w2 = Tensor::zeros_i8({cs.spec.out_channels, cs.spec.in_channels});
                        w2.i8() = cs.wq.i8();
                        logits_acc = int_matmul(a, w2, cs.bias_i32);
                    }
                    x = detail::conv_stage_int(cs, x, &res.boundaries);
                } else if (std::holds_alternative<IntPoolStage>(op)) {
                    x = detail::pool_stage_int(std::get<IntPoolStage>(op), x, &res.boundaries);
                }
            }
        }
        if (blk.residual) {
            Tensor sum = Tensor::zeros_i8(x.shape());
            const int64_t res_c = block_in.dim(1), res_hw = block_in.numel() / res_c;
            for (size_t i = 0; i < x.i8().size(); ++i) {
                const int64_t ch = (static_cast<int64_t>(i) / res_hw) % res_c;
                const DyadicPair sp = blk.skip.size() == 1 ? blk.skip[0] : blk.skip[static_cast<size_t>(ch)];
                const int64_t skip_q =
                    std::clamp<int64_t>(requant_scalar(block_in.i8()[i], sp), -128, 127);
                sum.i8()[i] = static_cast<int8_t>(std::clamp<int64_t>(skip_q + x.i8()[i], -128, 127));
            }
            x = std::move(sum);
            res.boundaries.emplace_back(blk.name + ".res", x);
        }
    }
    if (im.head_logits) {
        res.logits = std::move(logits_acc);
    } else {
        res.logits = Tensor::zeros_i32(x.shape());
        for (size_t i = 0; i < x.i8().size(); ++i) res.logits.i32()[i] = x.i8()[i];
    }
    res.logit_scales = im.logit_scales;
    return res;
}

inline IntForwardResult forward_fakequant(const IntModel& im, const Tensor& input_f32) {
    IntForwardResult res;
    Tensor x0 = quantize_input(im, input_f32);
    res.boundaries.emplace_back("model.in", x0);
    detail::FakeTensor x;
    x.shape = x0.shape();
    x.grid.resize(x0.i8().size());
    for (size_t i = 0; i < x.grid.size(); ++i) x.grid[i] = static_cast<double>(x0.i8()[i]);
    detail::FakeTensor logits_acc;
    bool have_logits = false;
    for (size_t bi = 0; bi < im.blocks.size(); ++bi) {
        const IntBlock& blk = im.blocks[bi];
        const detail::FakeTensor block_in = x;
        if (blk.type == BlockType::MSA) {
            const auto& qkv = std::get<IntConvStage>(blk.ops[0]);
            const auto& agg = std::get<IntConvStage>(blk.ops[1]);
            const auto& attn = std::get<IntAttnStage>(blk.ops[2]);
            const auto& proj = std::get<IntConvStage>(blk.ops[3]);
            detail::FakeTensor qkv_out = detail::conv_stage_fake(qkv, x, &res.boundaries);
            detail::FakeTensor ms_out = detail::conv_stage_fake(agg, qkv_out, &res.boundaries);
            detail::FakeTensor attn_out =
                detail::attn_stage_fake(attn, qkv_out, ms_out, res.diag, &res.boundaries);
            x = detail::conv_stage_fake(proj, attn_out, &res.boundaries);
        } else {
            for (const IntOp& op : blk.ops) {
                if (std::holds_alternative<IntConvStage>(op)) {
                    const auto& cs = std::get<IntConvStage>(op);
                    const bool is_final_fc = im.head_logits && bi + 1 == im.blocks.size() &&
                                             &op == &blk.ops.back();
                    if (is_final_fc) {
                        logits_acc.shape = {x.dim(0), cs.spec.out_channels};
                        logits_acc.grid.assign(static_cast<size_t>(x.dim(0) * cs.spec.out_channels), 0.0);
                        for (int64_t r = 0; r < x.dim(0); ++r)
                            for (int64_t j = 0; j < cs.spec.out_channels; ++j) {
                                double acc = cs.bias_i32[static_cast<size_t>(j)];
                                for (int64_t kk = 0; kk < cs.spec.in_channels; ++kk)
                                    acc += x.grid[static_cast<size_t>(r * cs.spec.in_channels + kk)] *
                                           static_cast<double>(
                                               cs.wq.i8()[static_cast<size_t>(j * cs.spec.in_channels + kk)]);
                                logits_acc.grid[static_cast<size_t>(r * cs.spec.out_channels + j)] = acc;
                            }
                        have_logits = true;
                    }
                    x = detail::conv_stage_fake(cs, x, &res.boundaries);
                } else if (std::holds_alternative<IntPoolStage>(op)) {
                    x = detail::pool_stage_fake(std::get<IntPoolStage>(op), x, &res.boundaries);
                }
            }
        }
        if (blk.residual) {
            const int64_t res_c = block_in.dim(1), res_hw = static_cast<int64_t>(block_in.grid.size()) / res_c;
            for (size_t i = 0; i < x.grid.size(); ++i) {
                const int64_t ch = (static_cast<int64_t>(i) / res_hw) % res_c;
                const DyadicPair sp = blk.skip.size() == 1 ? blk.skip[0] : blk.skip[static_cast<size_t>(ch)];
                const double skip_q =
                    std::clamp(detail::fq_requant(block_in.grid[i], sp), -128.0, 127.0);
                x.grid[i] = std::clamp(skip_q + x.grid[i], -128.0, 127.0);
            }
            res.boundaries.emplace_back(blk.name + ".res", detail::fake_to_i8(x));
        }
    }
    if (im.head_logits && have_logits) {
        res.logits = Tensor::zeros_i32({logits_acc.dim(0), logits_acc.dim(1)});
        for (size_t i = 0; i < logits_acc.grid.size(); ++i)
            res.logits.i32()[i] = static_cast<int32_t>(logits_acc.grid[i]);
    } else {
        res.logits = Tensor::zeros_i32(x.shape);
        for (size_t i = 0; i < x.grid.size(); ++i) res.logits.i32()[i] = static_cast<int32_t>(x.grid[i]);
    }
    res.logit_scales = im.logit_scales;
    return res;
}

struct CrossCheckResult {
    bool bit_exact = true;
    int64_t mismatches = 0;
    std::string first_mismatch;
};

inline CrossCheckResult crosscheck(const IntModel& im, const Tensor& input_f32) {
    IntForwardResult a = forward_int(im, input_f32);
    IntForwardResult b = forward_fakequant(im, input_f32);
    CrossCheckResult r;
    if (a.boundaries.size() != b.boundaries.size()) {
        r.bit_exact = false;
        r.first_mismatch = "boundary count differs";
        r.mismatches = 1;
        return r;
    }
    for (size_t i = 0; i < a.boundaries.size(); ++i) {
        const auto& [name_a, ta] = a.boundaries[i];
        const auto& [name_b, tb] = b.boundaries[i];
        const bool same = name_a == name_b && ta.dtype() == tb.dtype() && ta.shape() == tb.shape() &&
                          (ta.dtype() == Dtype::I8 ? ta.i8() == tb.i8() : ta.i32() == tb.i32());
        if (!same) {
            ++r.mismatches;
            if (r.bit_exact) r.first_mismatch = name_a;
            r.bit_exact = false;
        }
    }
    if (a.logits.i32() != b.logits.i32()) {
        r.bit_exact = false;
        ++r.mismatches;
        if (r.first_mismatch.empty()) r.first_mismatch = "logits";
    }
    return r;
}

}  // namespace evitq
