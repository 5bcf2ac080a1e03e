#pragma once

// Whole-model quantization pass: resolves every scale in the graph, applies
// migration to depthwise inputs, shifting to post-depthwise projections, and
// sets up the log2 divisor path inside attention. Emits a JSON-serializable
// parameter set the integer runtime materializes.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "evitq/quantize.hpp"

namespace evitq {

struct QuantPolicy {
    bool migration = true;
    bool shifting = true;
    enum class Divisor { Log2_4, Uniform8 } divisor = Divisor::Log2_4;
    int weight_bits = 8;
    int act_bits = 8;
    int dividend_bits = 16;
    int dyadic_bits = 16;
    ShiftRule shift_rule = ShiftRule::Midpoint;
};

struct LayerQuant {
    std::string name;
    LayerKind kind = LayerKind::PWConv;
    QuantScheme scheme = QuantScheme::Uniform;
    int bits = 8;
    std::vector<float> weight_scales;   // per out channel
    float act_scale = 0.0f;             // layer-wise input scale; 0 when fused_scales set
    std::vector<float> fused_scales;    // per-in-channel S_am (migrated depthwise input)
    std::vector<float> migration;       // M_i
    std::vector<float> shift;           // c_i
    std::vector<float> updated_bias;    // float-domain b_hat when shift applied
    float pre_act_scale = 0.0f;         // scale ahead of the hswish table
    std::vector<DyadicPair> out_requant;  // acc -> next stage, per out channel
};

struct AttnQuant {
    std::string name;
    QuantScheme divisor_scheme = QuantScheme::Log2;
    int divisor_bits = 4;
    float s_q = 0, s_k = 0, s_v = 0;  // shared across base/multi-scale halves
    float s_ms = 0;                   // aggregated qkv point feeding the second half
    float s_s = 0;                    // K^T V matrix, 8-bit point
    float s_ks = 0;                   // key token-sum, 8-bit point
    float s_dd = 0;                   // dividend, 16-bit point
    float s_out = 0;                  // attention output point
    float s_div_uniform = 0;          // divisor scale in the uniform-8 ablation
    int e_s_eff = 0;                  // exponent offset handed to the divisor quantizer
    int e_c = 0;                      // calibrated window center (folded into rescales)
    int win_lo = -8, win_hi = 7;
    double final_rescale = 1.0;       // shifted dividend -> s_out
};

struct ResidualQuant {
    float out_scale = 0.0f;          // post-add point
    std::vector<DyadicPair> skip;    // block input -> out_scale, size 1 or C
};

struct ModelQuant {
    std::string model_name;
    uint64_t seed = 0;
    QuantPolicy policy;
    float input_scale = 0.0f;
    float output_scale = 0.0f;
    std::map<std::string, LayerQuant> layers;
    std::map<std::string, AttnQuant> attn;
    std::map<std::string, ResidualQuant> residual;  // keyed by block name
    std::map<std::string, double> input_mse;        // per-layer chosen-scheme quantization MSE

    const LayerQuant& layer(const std::string& n) const {
        auto it = layers.find(n);
        if (it == layers.end()) throw std::runtime_error("quant params missing for layer " + n);
        return it->second;
    }
};

// How a consumer wants its input tensor quantized: per-channel or layer-wise
// scales, plus an optional pre-quantization subtraction (filter-wise shift).
struct PointDesc {
    std::vector<float> scales;  // size 1 (layer-wise) or C (per-channel)
    std::vector<float> shift;   // empty or size C
    float scale_for(int64_t ch) const {
        return scales.size() == 1 ? scales[0] : scales[static_cast<size_t>(ch)];
    }
    float shift_for(int64_t ch) const {
        return shift.empty() ? 0.0f : shift[static_cast<size_t>(ch)];
    }
    bool per_channel() const { return scales.size() > 1 || !shift.empty(); }
};

inline PointDesc input_desc(const LayerQuant& lq) {
    PointDesc d;
    if (!lq.fused_scales.empty())
        d.scales = lq.fused_scales;
    else
        d.scales = {lq.act_scale};
    d.shift = lq.shift;
    return d;
}

// The point a tensor produced at (block bi, layer li) must land in: the next
// quantizable layer's input descriptor, the attention's multi-scale point,
// the post-residual point, or the model output point.
inline PointDesc next_point_desc(const ModelGraph& g, const ModelQuant& mq, size_t bi, size_t li) {
    const Block& blk = g.blocks[bi];
    for (size_t lj = li + 1; lj < blk.layers.size(); ++lj) {
        const LayerSpec& nxt = blk.layers[lj].spec;
        if (nxt.kind == LayerKind::AttnCombine) return PointDesc{{mq.attn.at(nxt.name).s_ms}, {}};
        if (nxt.is_conv_like() || nxt.kind == LayerKind::GlobalAvgPool)
            return input_desc(mq.layer(nxt.name));
    }
    if (blk.residual) return PointDesc{{mq.residual.at(blk.name).out_scale}, {}};
    for (size_t bj = bi + 1; bj < g.blocks.size(); ++bj)
        for (const auto& nl : g.blocks[bj].layers)
            if (nl.spec.is_conv_like() || nl.spec.kind == LayerKind::GlobalAvgPool)
                return input_desc(mq.layer(nl.spec.name));
    return PointDesc{{mq.output_scale}, {}};
}

// The scale of the point a residual block's add lands in (its consumer's
// input, or the model output point).
inline float block_out_scale(const ModelGraph& g, const ModelQuant& mq, size_t bi) {
    for (size_t bj = bi + 1; bj < g.blocks.size(); ++bj)
        for (const auto& nl : g.blocks[bj].layers)
            if (nl.spec.is_conv_like() || nl.spec.kind == LayerKind::GlobalAvgPool)
                return input_desc(mq.layer(nl.spec.name)).scales[0];
    return mq.output_scale;
}

namespace detail {

inline std::vector<float> filter_scales(const Tensor& w, int64_t cout, int bits) {
    const QuantRange r = quant_range(bits, true);
    const double qmax = static_cast<double>(r.hi);
    const int64_t per = w.numel() / cout;
    std::vector<float> s(static_cast<size_t>(cout));
    for (int64_t j = 0; j < cout; ++j) {
        float m = 0.0f;
        for (int64_t i = 0; i < per; ++i) m = std::max(m, std::abs(w.f()[j * per + i]));
        s[static_cast<size_t>(j)] = m > 0.0f ? static_cast<float>(m / qmax) : 1.0f;
    }
    return s;
}

// Median of |values| from a point reservoir; centers the divisor exponent window.
inline double reservoir_median_abs(const PointStats& ps) {
    std::vector<float> v;
    v.reserve(ps.reservoir.size());
    for (const auto& [ch, x] : ps.reservoir) v.push_back(std::abs(x));
    if (v.empty()) return 1.0;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    return std::max(1e-12, static_cast<double>(v[v.size() / 2]));
}

}  // namespace detail

inline std::string last_quantizable_name(const Block& blk) {
    for (auto it = blk.layers.rbegin(); it != blk.layers.rend(); ++it)
        if (it->spec.is_conv_like()) return it->spec.name;
    throw std::invalid_argument("block has no quantizable layer: " + blk.name);
}

// The quantized graph (with migrated depthwise weights) plus its parameter
// set; the integer runtime is built from both.
struct QuantizedModel {
    ModelGraph graph;  // folded, depthwise weights pre-scaled by migration
    ModelQuant params;
};

inline QuantizedModel quantize_model(const ModelGraph& graph, const CalibRecord& calib,
                                     const QuantPolicy& policy) {
    for (const auto* l : graph.all_layers())
        if (l->spec.has_bn)
            throw std::invalid_argument("quantize_model: fold_bn must run first (layer " + l->spec.name + ")");
    if (calib.sample_count == 0) throw CalibError("quantize_model: empty calibration record");

    QuantizedModel qm;
    qm.graph = graph;
    ModelGraph& g = qm.graph;
    ModelQuant& mq = qm.params;
    mq.model_name = graph.name;
    mq.policy = policy;
    mq.input_scale = scale_search_point(calib.at("model.in"), policy.act_bits, true);
    mq.output_scale = calib.has("model.out")
                          ? scale_search_point(calib.at("model.out"), policy.act_bits, true)
                          : 1.0f;

    // Pass 1: input-side parameters per quantizable layer, migration folded
    // into depthwise weights before filter scales are taken.
    for (auto& blk : g.blocks) {
        for (size_t li = 0; li < blk.layers.size(); ++li) {
            Layer& l = blk.layers[li];
            if (l.spec.kind == LayerKind::GlobalAvgPool) {
                LayerQuant lq;
                lq.name = l.spec.name;
                lq.kind = l.spec.kind;
                lq.act_scale = scale_search_point(calib.at(l.spec.name + ".in"), policy.act_bits, true);
                mq.layers.emplace(lq.name, std::move(lq));
                continue;
            }
            if (!l.spec.is_conv_like()) continue;
            LayerQuant lq;
            lq.name = l.spec.name;
            lq.kind = l.spec.kind;
            lq.bits = policy.act_bits;
            const PointStats& in_stats = calib.at(l.spec.name + ".in");

            const bool is_dw = l.spec.kind == LayerKind::DWConv;
            const bool after_dw = li > 0 && blk.layers[li - 1].spec.kind == LayerKind::DWConv &&
                                  l.spec.kind == LayerKind::PWConv;

            if (is_dw && policy.migration) {
                lq.migration = compute_migration_factors(in_stats.stats);
                const float base = scale_search_point(in_stats, policy.act_bits, true, &lq.migration);
                auto [w_scaled, fused] = apply_channel_migration(l.weight, base, lq.migration);
                l.weight = std::move(w_scaled);
                lq.fused_scales = std::move(fused);
                // base scale kept: in the accumulator the migration factor
                // cancels between the fused input scale and the scaled weight,
                // leaving acc = y / (base * S_w).
                lq.act_scale = base;
                mq.input_mse[l.spec.name] =
                    point_quant_mse(in_stats, 0.0f, policy.act_bits, true, &lq.fused_scales);
            } else if (after_dw && policy.shifting) {
                lq.shift = compute_filter_shift(in_stats.stats, policy.shift_rule);
                lq.act_scale = scale_search_point(in_stats, policy.act_bits, true, nullptr, &lq.shift);
                lq.updated_bias = update_bias_for_shift(l.weight, l.bias, lq.shift);
                mq.input_mse[l.spec.name] =
                    point_quant_mse(in_stats, lq.act_scale, policy.act_bits, true, nullptr, &lq.shift);
            } else {
                lq.act_scale = scale_search_point(in_stats, policy.act_bits, true);
                mq.input_mse[l.spec.name] = point_quant_mse(in_stats, lq.act_scale, policy.act_bits, true);
            }

            lq.weight_scales = detail::filter_scales(l.weight, l.spec.out_channels, policy.weight_bits);
            if (l.spec.has_act)
                lq.pre_act_scale = scale_search_point(calib.at(l.spec.name + ".preact"), policy.act_bits, true);
            mq.layers.emplace(lq.name, std::move(lq));
        }

        if (blk.type == BlockType::MSA) {
            const Layer& attn = blk.layers[2];
            AttnQuant aq;
            aq.name = attn.spec.name;
            aq.s_q = scale_search_point(calib.at(aq.name + ".q"), policy.act_bits, true);
            aq.s_k = scale_search_point(calib.at(aq.name + ".k"), policy.act_bits, true);
            aq.s_v = scale_search_point(calib.at(aq.name + ".v"), policy.act_bits, true);
            aq.s_ms = scale_search_point(calib.at(aq.name + ".ms"), policy.act_bits, true);
            aq.s_s = scale_search_point(calib.at(aq.name + ".s"), policy.act_bits, true);
            aq.s_ks = scale_search_point(calib.at(aq.name + ".ksum"), policy.act_bits, true);
            aq.s_dd = scale_search_point(calib.at(aq.name + ".dividend"), policy.dividend_bits, true);
            aq.s_out = scale_search_point(calib.at(blk.layers[3].spec.name + ".in"), policy.act_bits, true);
            if (policy.divisor == QuantPolicy::Divisor::Log2_4) {
                aq.divisor_scheme = QuantScheme::Log2;
                aq.divisor_bits = 4;
                const double f = static_cast<double>(aq.s_q) * aq.s_ks;
                const double med_div = detail::reservoir_median_abs(calib.at(aq.name + ".divisor"));
                aq.e_c = static_cast<int>(std::lround(std::log2(med_div)));
                const int round_log2_f = static_cast<int>(std::lround(std::log2(f)));
                aq.e_s_eff = round_log2_f - aq.e_c;
                // result = (dividend/s_dd) >> r with 2^r ~ divisor/2^{e_c};
                // the e_s rounding residual and the window center fold into
                // this constant so only the per-element log2 error remains.
                aq.final_rescale = static_cast<double>(aq.s_dd) * std::exp2(round_log2_f) /
                                   (std::exp2(aq.e_c) * f * aq.s_out);
            } else {
                aq.divisor_scheme = QuantScheme::Uniform;
                aq.divisor_bits = 8;
                aq.s_div_uniform = scale_search_point(calib.at(aq.name + ".divisor"), 8, false);
            }
            mq.attn.emplace(aq.name, std::move(aq));
        }
    }

    // Pass 2a: residual (post-add) points.
    for (size_t bi = 0; bi < g.blocks.size(); ++bi) {
        const Block& blk = g.blocks[bi];
        if (!blk.residual) continue;
        ResidualQuant rq;
        rq.out_scale = block_out_scale(g, mq, bi);
        for (const auto& l : blk.layers)
            if (l.spec.is_conv_like()) {
                const PointDesc in_pt = input_desc(mq.layer(l.spec.name));
                for (const float s : in_pt.scales)
                    rq.skip.push_back(dyadic_approx(static_cast<double>(s) / rq.out_scale, policy.dyadic_bits));
                break;
            }
        mq.residual.emplace(blk.name, rq);
    }

    // Pass 2b: output-side dyadic pairs. A layer with an activation requants
    // into the hswish-table scale; the table lands in the consumer point. A
    // bare layer requants straight into the consumer point (per channel when
    // the consumer is a migrated depthwise input).
    for (size_t bi = 0; bi < g.blocks.size(); ++bi) {
        const Block& blk = g.blocks[bi];
        for (size_t li = 0; li < blk.layers.size(); ++li) {
            const Layer& l = blk.layers[li];
            if (l.spec.kind == LayerKind::GlobalAvgPool) {
                LayerQuant& lq = mq.layers.at(l.spec.name);
                const PointDesc nxt = next_point_desc(g, mq, bi, li);
                const double hw = static_cast<double>(l.spec.h_in * l.spec.w_in);
                lq.out_requant = {dyadic_approx(static_cast<double>(lq.act_scale) / (nxt.scales[0] * hw),
                                                policy.dyadic_bits)};
                continue;
            }
            if (!l.spec.is_conv_like()) continue;
            LayerQuant& lq = mq.layers.at(l.spec.name);
            const bool last_of_residual =
                blk.residual && l.spec.name == last_quantizable_name(blk);
            PointDesc target;
            if (l.spec.has_act) {
                target = PointDesc{{lq.pre_act_scale}, {}};
            } else if (last_of_residual) {
                target = PointDesc{{mq.residual.at(blk.name).out_scale}, {}};
            } else {
                target = next_point_desc(g, mq, bi, li);
                if (!target.shift.empty())
                    throw std::invalid_argument("quantize_model: shifted consumer requires an activation stage on " +
                                                l.spec.name);
            }
            lq.out_requant.resize(static_cast<size_t>(l.spec.out_channels));
            for (int64_t j = 0; j < l.spec.out_channels; ++j) {
                // Accumulator domain is always act_scale * S_w_j: for migrated
                // depthwise layers the per-channel factor cancels against the
                // pre-scaled weights.
                const double acc_scale =
                    static_cast<double>(lq.act_scale) * lq.weight_scales[static_cast<size_t>(j)];
                const double tgt = target.scale_for(j);
                lq.out_requant[static_cast<size_t>(j)] = dyadic_approx(acc_scale / tgt, policy.dyadic_bits);
            }
        }
    }
    return qm;
}

}  // namespace evitq
