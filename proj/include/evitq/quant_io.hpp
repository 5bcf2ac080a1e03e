#pragma once

// Quant-parameter dump: one JSON document per quantized model, layer records
// carrying {name, scheme, bits, weight_scales, act_scale|fused_scales,
// migration, shift, updated_bias, dyadic pairs}, plus the attention divisor
// records and residual-point bookkeeping the runtime needs to rebuild the
// integer model byte-for-byte.

#include <fstream>
#include <string>

#include <json.hpp>

#include "evitq/quant_model.hpp"

namespace evitq {

namespace detail {

inline nlohmann::json pairs_to_json(const std::vector<DyadicPair>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const DyadicPair& p : v) a.push_back({{"b", p.b}, {"c", p.c}});
    return a;
}

inline std::vector<DyadicPair> pairs_from_json(const nlohmann::json& a) {
    std::vector<DyadicPair> v;
    for (const auto& e : a) v.push_back(DyadicPair{e.at("b").get<int32_t>(), e.at("c").get<int32_t>()});
    return v;
}

}  // namespace detail

inline nlohmann::json quant_to_json(const ModelQuant& mq) {
    nlohmann::json j;
    j["model"] = mq.model_name;
    j["seed"] = mq.seed;
    j["input_scale"] = mq.input_scale;
    j["output_scale"] = mq.output_scale;
    j["policy"] = {{"migration", mq.policy.migration},
                   {"shifting", mq.policy.shifting},
                   {"divisor", mq.policy.divisor == QuantPolicy::Divisor::Log2_4 ? "log2-4" : "uniform8"},
                   {"weight_bits", mq.policy.weight_bits},
                   {"act_bits", mq.policy.act_bits},
                   {"shift_rule", mq.policy.shift_rule == ShiftRule::Midpoint ? "midpoint" : "half-range"}};
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& [name, lq] : mq.layers) {
        nlohmann::json e;
        e["name"] = name;
        e["kind"] = kind_name(lq.kind);
        e["scheme"] = "uniform";
        e["bits"] = lq.bits;
        e["weight_scales"] = lq.weight_scales;
        // act_scale is the (post-migration) base scale; fused_scales carry the
        // per-channel view when migration is active.
        e["act_scale"] = lq.act_scale;
        if (!lq.fused_scales.empty()) e["fused_scales"] = lq.fused_scales;
        if (!lq.migration.empty()) e["migration"] = lq.migration;
        if (!lq.shift.empty()) e["shift"] = lq.shift;
        if (!lq.updated_bias.empty()) e["updated_bias"] = lq.updated_bias;
        if (lq.pre_act_scale != 0.0f) e["pre_act_scale"] = lq.pre_act_scale;
        e["dyadic"] = detail::pairs_to_json(lq.out_requant);
        layers.push_back(std::move(e));
    }
    j["layers"] = std::move(layers);
    nlohmann::json attns = nlohmann::json::array();
    for (const auto& [name, aq] : mq.attn) {
        nlohmann::json e;
        e["name"] = name;
        e["scheme"] = aq.divisor_scheme == QuantScheme::Log2 ? "log2" : "uniform";
        e["bits"] = aq.divisor_bits;
        e["s_q"] = aq.s_q;
        e["s_k"] = aq.s_k;
        e["s_v"] = aq.s_v;
        e["s_ms"] = aq.s_ms;
        e["s_s"] = aq.s_s;
        e["s_ks"] = aq.s_ks;
        e["s_dd"] = aq.s_dd;
        e["s_out"] = aq.s_out;
        if (aq.divisor_scheme == QuantScheme::Uniform) e["s_div_uniform"] = aq.s_div_uniform;
        e["e_s"] = aq.e_s_eff;
        e["e_c"] = aq.e_c;
        e["clip"] = {aq.win_lo, aq.win_hi};
        e["final_rescale"] = aq.final_rescale;
        attns.push_back(std::move(e));
    }
    j["attention"] = std::move(attns);
    nlohmann::json res = nlohmann::json::object();
    for (const auto& [name, rq] : mq.residual)
        res[name] = {{"out_scale", rq.out_scale}, {"skip", detail::pairs_to_json(rq.skip)}};
    j["residual"] = std::move(res);
    nlohmann::json mse = nlohmann::json::object();
    for (const auto& [name, v] : mq.input_mse) mse[name] = v;
    j["input_mse"] = std::move(mse);
    return j;
}

inline ModelQuant quant_from_json(const nlohmann::json& j) {
    ModelQuant mq;
    mq.model_name = j.at("model").get<std::string>();
    mq.seed = j.value("seed", uint64_t{0});
    mq.input_scale = j.at("input_scale").get<float>();
    mq.output_scale = j.at("output_scale").get<float>();
    const auto& pol = j.at("policy");
    mq.policy.migration = pol.at("migration").get<bool>();
    mq.policy.shifting = pol.at("shifting").get<bool>();
    mq.policy.divisor = pol.at("divisor").get<std::string>() == "log2-4" ? QuantPolicy::Divisor::Log2_4
                                                                         : QuantPolicy::Divisor::Uniform8;
    mq.policy.weight_bits = pol.at("weight_bits").get<int>();
    mq.policy.act_bits = pol.at("act_bits").get<int>();
    mq.policy.shift_rule =
        pol.value("shift_rule", std::string("midpoint")) == "midpoint" ? ShiftRule::Midpoint : ShiftRule::HalfRange;
    for (const auto& e : j.at("layers")) {
        LayerQuant lq;
        lq.name = e.at("name").get<std::string>();
        const std::string kind = e.at("kind").get<std::string>();
        for (LayerKind k : {LayerKind::GenericConv, LayerKind::PWConv, LayerKind::DWConv, LayerKind::MatMul,
                            LayerKind::GlobalAvgPool})
            if (kind == kind_name(k)) lq.kind = k;
        lq.bits = e.at("bits").get<int>();
        lq.weight_scales = e.value("weight_scales", std::vector<float>{});
        lq.act_scale = e.value("act_scale", 0.0f);
        lq.fused_scales = e.value("fused_scales", std::vector<float>{});
        lq.migration = e.value("migration", std::vector<float>{});
        lq.shift = e.value("shift", std::vector<float>{});
        lq.updated_bias = e.value("updated_bias", std::vector<float>{});
        lq.pre_act_scale = e.value("pre_act_scale", 0.0f);
        lq.out_requant = detail::pairs_from_json(e.at("dyadic"));
        mq.layers.emplace(lq.name, std::move(lq));
    }
    for (const auto& e : j.at("attention")) {
        AttnQuant aq;
        aq.name = e.at("name").get<std::string>();
        aq.divisor_scheme = e.at("scheme").get<std::string>() == "log2" ? QuantScheme::Log2 : QuantScheme::Uniform;
        aq.divisor_bits = e.at("bits").get<int>();
        aq.s_q = e.at("s_q").get<float>();
        aq.s_k = e.at("s_k").get<float>();
        aq.s_v = e.at("s_v").get<float>();
        aq.s_ms = e.at("s_ms").get<float>();
        aq.s_s = e.at("s_s").get<float>();
        aq.s_ks = e.at("s_ks").get<float>();
        aq.s_dd = e.at("s_dd").get<float>();
        aq.s_out = e.at("s_out").get<float>();
        aq.s_div_uniform = e.value("s_div_uniform", 0.0f);
        aq.e_s_eff = e.at("e_s").get<int>();
        aq.e_c = e.at("e_c").get<int>();
        aq.win_lo = e.at("clip")[0].get<int>();
        aq.win_hi = e.at("clip")[1].get<int>();
        aq.final_rescale = e.at("final_rescale").get<double>();
        mq.attn.emplace(aq.name, std::move(aq));
    }
    for (const auto& [name, e] : j.at("residual").items()) {
        ResidualQuant rq;
        rq.out_scale = e.at("out_scale").get<float>();
        rq.skip = detail::pairs_from_json(e.at("skip"));
        mq.residual.emplace(name, rq);
    }
    if (j.contains("input_mse"))
        for (const auto& [name, v] : j.at("input_mse").items()) mq.input_mse[name] = v.get<double>();
    return mq;
}

inline void save_quant(const ModelQuant& mq, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write quant dump: " + path);
    os << quant_to_json(mq).dump(1) << "\n";
}

inline ModelQuant load_quant(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open quant dump: " + path);
    nlohmann::json j;
    is >> j;
    return quant_from_json(j);
}

}  // namespace evitq
