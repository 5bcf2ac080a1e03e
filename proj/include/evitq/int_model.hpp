#pragma once

// Materialized integer model and its two executors: the integer-only path
// (i8/i32 arithmetic, dyadic rescales, shift division) and a fake-quant float
// simulation that quantizes/dequantizes at every point in f64. The two must
// agree bit-exactly at every layer boundary; the crosscheck enforces it.

#include <array>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "evitq/int_ops.hpp"
#include "evitq/quant_model.hpp"

namespace evitq {

struct ArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IntConvStage {
    LayerSpec spec;
    PointDesc in_desc;                     // input point scales (+shift already folded upstream)
    Tensor wq;                             // i8
    std::vector<int32_t> bias_i32;
    std::vector<DyadicPair> acc_pairs;     // per out channel
    bool lut_active = false;
    std::vector<std::array<int8_t, 256>> luts;  // 1 or C_out tables
    std::vector<float> lut_out_scales;     // dequant scales of the LUT output point
    float out_scale = 0.0f;                // scalar point scale when !per-channel
};

struct IntPoolStage {
    LayerSpec spec;
    float in_scale = 0.0f;
    float out_scale = 0.0f;
    DyadicPair pair;
};

struct IntAttnStage {
    LayerSpec spec;
    AttnQuant aq;
    PointDesc base_desc;                   // qkv tensor point (per-channel when migrated)
    std::vector<DyadicPair> prep_base;     // per qkv channel -> part scale
    std::vector<DyadicPair> prep_ms;
    DyadicPair s_pair, ksum_pair, dd_pair, final_pair;
};

using IntOp = std::variant<IntConvStage, IntPoolStage, IntAttnStage>;

struct IntBlock {
    BlockType type = BlockType::MBConv;
    std::string name;
    bool residual = false;
    std::vector<DyadicPair> skip;  // size 1 or C
    float in_scale = 0.0f;   // block input point (skip source)
    float out_scale = 0.0f;  // post-add point
    std::vector<IntOp> ops;
};

struct IntModel {
    ModelGraph graph;  // folded, migration-scaled float reference
    ModelQuant params;
    std::vector<IntBlock> blocks;
    float input_scale = 0.0f;
    float output_scale = 0.0f;
    bool head_logits = false;              // final stage is a classifier matmul kept in i32
    std::vector<double> logit_scales;      // per-class dequant scales for the logits
};

struct InferDiagnostics {
    int64_t divisor_zero = 0;
    int64_t divisor_clip = 0;
};

struct IntForwardResult {
    Tensor logits;  // i32
    std::vector<double> logit_scales;
    std::vector<std::pair<std::string, Tensor>> boundaries;  // i8/i32 points in order
    InferDiagnostics diag;
};

namespace detail {

inline double hswish_d(double x) { return x * std::min(std::max(x + 3.0, 0.0), 6.0) / 6.0; }

inline int64_t rne_d(double v) { return std::llrint(v); }  // FE_TONEAREST: ties to even

inline std::array<int8_t, 256> build_hswish_lut(double pre_scale, double shift, double out_scale) {
    std::array<int8_t, 256> lut{};
    for (int q = -128; q <= 127; ++q) {
        const double x = static_cast<double>(q) * pre_scale;
        const int64_t o = std::clamp<int64_t>(rne_d((hswish_d(x) - shift) / out_scale), -128, 127);
        lut[static_cast<size_t>(q + 128)] = static_cast<int8_t>(o);
    }
    return lut;
}

inline void validate_accumulator(const LayerSpec& s, const std::vector<int32_t>& bias) {
    int64_t terms = 0;
    switch (s.kind) {
        case LayerKind::GenericConv:
        case LayerKind::PWConv:
        case LayerKind::DWConv:
            terms = (s.in_channels / s.groups) * s.kernel * s.kernel;
            break;
        case LayerKind::MatMul:
            terms = s.in_channels;
            break;
        case LayerKind::AttnCombine:
            terms = s.tokens();  // step i/ii reductions run over tokens
            break;
        default:
            return;
    }
    int64_t bias_mag = 0;
    for (int32_t b : bias) bias_mag = std::max<int64_t>(bias_mag, std::abs(static_cast<int64_t>(b)));
    const int64_t bound = 127ll * 127ll * terms + bias_mag;
    if (terms > (int64_t{1} << 15) || bound >= (int64_t{1} << 31))
        throw ArtifactError("accumulator bound exceeded in layer " + s.name + " (" + std::to_string(bound) + ")");
}

}  // namespace detail

inline IntModel build_int_model(const QuantizedModel& qm) {
    IntModel im;
    im.graph = qm.graph;
    im.params = qm.params;
    const ModelGraph& g = im.graph;
    const ModelQuant& mq = im.params;
    im.input_scale = mq.input_scale;
    im.output_scale = mq.output_scale;

    for (size_t bi = 0; bi < g.blocks.size(); ++bi) {
        const Block& blk = g.blocks[bi];
        IntBlock ib;
        ib.type = blk.type;
        ib.name = blk.name;
        ib.residual = blk.residual;
        if (blk.residual) {
            const ResidualQuant& rq = mq.residual.at(blk.name);
            ib.skip = rq.skip;
            ib.out_scale = rq.out_scale;
            for (const auto& l : blk.layers)
                if (l.spec.is_conv_like()) {
                    ib.in_scale = input_desc(mq.layer(l.spec.name)).scales[0];
                    break;
                }
        }
        for (size_t li = 0; li < blk.layers.size(); ++li) {
            const Layer& l = blk.layers[li];
            if (l.spec.kind == LayerKind::GlobalAvgPool) {
                IntPoolStage ps;
                ps.spec = l.spec;
                const LayerQuant& lq = mq.layer(l.spec.name);
                ps.in_scale = lq.act_scale;
                ps.pair = lq.out_requant.at(0);
                ps.out_scale = next_point_desc(g, mq, bi, li).scales[0];
                ib.ops.emplace_back(std::move(ps));
                continue;
            }
            if (l.spec.kind == LayerKind::AttnCombine) {
                IntAttnStage as;
                as.spec = l.spec;
                as.aq = mq.attn.at(l.spec.name);
                // The base half reads the qkv tensor point; the multi-scale
                // half reads the aggregation output point.
                const Block& owner = blk;
                as.base_desc = input_desc(mq.layer(owner.layers[1].spec.name));
                const int64_t d = l.spec.head_dim;
                const int64_t qkv_ch = owner.layers[0].spec.out_channels;
                as.prep_base.resize(static_cast<size_t>(qkv_ch));
                as.prep_ms.resize(static_cast<size_t>(qkv_ch));
                for (int64_t c = 0; c < qkv_ch; ++c) {
                    const int part = static_cast<int>((c % (3 * d)) / d);
                    const float tgt = part == 0 ? as.aq.s_q : part == 1 ? as.aq.s_k : as.aq.s_v;
                    as.prep_base[static_cast<size_t>(c)] =
                        dyadic_approx(static_cast<double>(as.base_desc.scale_for(c)) / tgt, mq.policy.dyadic_bits);
                    as.prep_ms[static_cast<size_t>(c)] =
                        dyadic_approx(static_cast<double>(as.aq.s_ms) / tgt, mq.policy.dyadic_bits);
                }
                as.s_pair = dyadic_approx(static_cast<double>(as.aq.s_k) * as.aq.s_v / as.aq.s_s,
                                          mq.policy.dyadic_bits);
                as.ksum_pair = dyadic_approx(static_cast<double>(as.aq.s_k) / as.aq.s_ks, mq.policy.dyadic_bits);
                as.dd_pair = dyadic_approx(static_cast<double>(as.aq.s_q) * as.aq.s_s / as.aq.s_dd,
                                           mq.policy.dyadic_bits);
                as.final_pair = dyadic_approx(as.aq.final_rescale, mq.policy.dyadic_bits);
                detail::validate_accumulator(l.spec, {});
                ib.ops.emplace_back(std::move(as));
                continue;
            }
            if (!l.spec.is_conv_like()) continue;

            IntConvStage cs;
            cs.spec = l.spec;
            const LayerQuant& lq = mq.layer(l.spec.name);
            cs.in_desc = input_desc(lq);
            cs.acc_pairs = lq.out_requant;

            // Weights on the per-filter grid.
            const int64_t cout = l.spec.out_channels;
            const int64_t per = l.weight.numel() / cout;
            cs.wq = Tensor(l.weight.shape(), Dtype::I8);
            for (int64_t j = 0; j < cout; ++j) {
                const double s = lq.weight_scales[static_cast<size_t>(j)];
                for (int64_t i = 0; i < per; ++i) {
                    const int64_t q = std::clamp<int64_t>(
                        detail::rne_d(static_cast<double>(l.weight.f()[j * per + i]) / s), -128, 127);
                    cs.wq.i8()[static_cast<size_t>(j * per + i)] = static_cast<int8_t>(q);
                }
            }
            // Bias in the accumulator domain; shifted projections use the
            // pre-computed updated bias.
            const std::vector<float>& bias_f = lq.updated_bias.empty() ? l.bias : lq.updated_bias;
            cs.bias_i32.resize(static_cast<size_t>(cout));
            for (int64_t j = 0; j < cout; ++j) {
                const double dom = static_cast<double>(lq.act_scale) * lq.weight_scales[static_cast<size_t>(j)];
                cs.bias_i32[static_cast<size_t>(j)] =
                    static_cast<int32_t>(std::clamp<int64_t>(detail::rne_d(bias_f[static_cast<size_t>(j)] / dom),
                                                             INT32_MIN, INT32_MAX));
            }
            detail::validate_accumulator(l.spec, cs.bias_i32);

            if (l.spec.has_act) {
                cs.lut_active = true;
                const PointDesc target = next_point_desc(g, mq, bi, li);
                const size_t tables = target.per_channel() ? static_cast<size_t>(cout) : 1;
                cs.luts.resize(tables);
                cs.lut_out_scales.resize(tables);
                for (size_t t = 0; t < tables; ++t) {
                    const int64_t ch = tables == 1 ? 0 : static_cast<int64_t>(t);
                    cs.luts[t] = detail::build_hswish_lut(lq.pre_act_scale, target.shift_for(ch),
                                                          target.scale_for(ch));
                    cs.lut_out_scales[t] = target.scale_for(ch);
                }
                cs.out_scale = target.scales[0];
            } else {
                const bool last_of_residual = blk.residual && l.spec.name == last_quantizable_name(blk);
                cs.out_scale = last_of_residual ? mq.residual.at(blk.name).out_scale
                                                : next_point_desc(g, mq, bi, li).scales[0];
            }
            ib.ops.emplace_back(std::move(cs));
        }
        im.blocks.push_back(std::move(ib));
    }

    // Final stage: classifier logits stay in i32 when the model ends in a head.
    const Block& last = g.blocks.back();
    if (last.type == BlockType::Head) {
        im.head_logits = true;
        const Layer& fc = last.layers.back();
        const LayerQuant& lq = mq.layer(fc.spec.name);
        im.logit_scales.resize(static_cast<size_t>(fc.spec.out_channels));
        for (int64_t j = 0; j < fc.spec.out_channels; ++j)
            im.logit_scales[static_cast<size_t>(j)] =
                static_cast<double>(lq.act_scale) * lq.weight_scales[static_cast<size_t>(j)];
    } else {
        im.logit_scales = {im.output_scale};
    }
    return im;
}

}  // namespace evitq
