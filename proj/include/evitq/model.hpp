#pragma once

// Softmax-free hybrid model graph: MBConv / DSConv blocks, lightweight MSA
// with ReLU linear attention, stem and classifier head. Built from a JSON
// config, executed in float as the reference path, and analyzed for its
// operation mix.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "evitq/reference_ops.hpp"
#include "evitq/tensor.hpp"

namespace evitq {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class LayerKind { GenericConv, PWConv, DWConv, MatMul, ReLU, Hswish, AttnCombine, GlobalAvgPool };

inline const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::GenericConv: return "generic_conv";
        case LayerKind::PWConv: return "pwconv";
        case LayerKind::DWConv: return "dwconv";
        case LayerKind::MatMul: return "matmul";
        case LayerKind::ReLU: return "relu";
        case LayerKind::Hswish: return "hswish";
        case LayerKind::AttnCombine: return "attn_combine";
        case LayerKind::GlobalAvgPool: return "global_avg_pool";
    }
    return "?";
}

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::PWConv;
    int64_t in_channels = 0;
    int64_t out_channels = 0;
    int64_t kernel = 1;   // 1, 3 or 5
    int64_t stride = 1;   // 1 or 2
    int64_t padding = 0;
    int64_t groups = 1;
    int64_t h_in = 0, w_in = 0;
    int64_t h_out = 0, w_out = 0;
    bool has_bn = false;
    bool has_act = false;  // Hswish after BN when set
    // Attention-only fields.
    int64_t heads = 0;     // effective heads over the concatenated multi-scale groups
    int64_t head_dim = 0;

    int64_t out_pixels() const { return h_out * w_out; }
    int64_t tokens() const { return h_out * w_out; }

    bool is_conv_like() const {
        return kind == LayerKind::GenericConv || kind == LayerKind::PWConv || kind == LayerKind::DWConv ||
               kind == LayerKind::MatMul;
    }

    // Multiply-accumulate count using the closed forms
    // conv: pixels * C_out * (C_in/groups) * k^2, matmul: m*k*n.
    int64_t macs() const {
        switch (kind) {
            case LayerKind::GenericConv:
            case LayerKind::PWConv:
            case LayerKind::DWConv:
                return out_pixels() * out_channels * (in_channels / groups) * kernel * kernel;
            case LayerKind::MatMul:
                return out_pixels() * in_channels * out_channels;  // m * k * n
            case LayerKind::AttnCombine: {
                // Five-step decomposition, MAC-bearing steps only:
                // i) K^T V per head (d x N x d), iii) Q S (N x d x d), iv) Q ksum (N x d).
                const int64_t n = tokens(), d = head_dim;
                return heads * (d * n * d + n * d * d + n * d);
            }
            default:
                return 0;
        }
    }
};

struct BnParams {
    std::vector<float> gamma, beta, mean, var;
    float eps = 1e-5f;
};

struct Layer {
    LayerSpec spec;
    Tensor weight;              // OIHW for convs, [out,in] for matmul
    std::vector<float> bias;    // per out channel
    std::optional<BnParams> bn;
};

enum class BlockType { Stem, MBConv, DSConv, MSA, Head };

inline const char* block_type_name(BlockType t) {
    switch (t) {
        case BlockType::Stem: return "stem";
        case BlockType::MBConv: return "mbconv";
        case BlockType::DSConv: return "dsconv";
        case BlockType::MSA: return "msa";
        case BlockType::Head: return "head";
    }
    return "?";
}

struct Block {
    BlockType type = BlockType::MBConv;
    std::string name;
    std::vector<Layer> layers;
    bool residual = false;
};

struct ModelGraph {
    std::string name;
    int64_t in_channels = 3;
    int64_t resolution = 224;
    int64_t num_classes = 0;
    std::vector<Block> blocks;

    std::vector<const Layer*> all_layers() const {
        std::vector<const Layer*> v;
        for (const auto& b : blocks)
            for (const auto& l : b.layers) v.push_back(&l);
        return v;
    }
    std::vector<Layer*> all_layers() {
        std::vector<Layer*> v;
        for (auto& b : blocks)
            for (auto& l : b.layers) v.push_back(&l);
        return v;
    }
};

// ---------------------------------------------------------------------------
// Graph construction from the JSON config document:
// {stages:[{blocks:[{type, channels, expansion, kernel, stride, heads, dim}]}],
//  input:{resolution, channels}}

namespace detail {

inline Layer make_conv(std::string name, LayerKind kind, int64_t cin, int64_t cout, int64_t k, int64_t s,
                       int64_t groups, int64_t h, int64_t w, bool bn, bool act) {
    Layer l;
    l.spec.name = std::move(name);
    l.spec.kind = kind;
    l.spec.in_channels = cin;
    l.spec.out_channels = cout;
    l.spec.kernel = k;
    l.spec.stride = s;
    l.spec.padding = k / 2;
    l.spec.groups = groups;
    l.spec.h_in = h;
    l.spec.w_in = w;
    const auto os = conv_output_shape(h, w, k, s, l.spec.padding);
    l.spec.h_out = os.h_out;
    l.spec.w_out = os.w_out;
    l.spec.has_bn = bn;
    l.spec.has_act = act;
    if (kind == LayerKind::PWConv && k != 1) throw ConfigError("pwconv requires kernel 1");
    if (kind == LayerKind::DWConv && cin != cout) throw ConfigError("dwconv requires in==out channels");
    if (s != 1 && s != 2) throw ConfigError("stride must be 1 or 2 in layer " + l.spec.name);
    if (k != 1 && k != 3 && k != 5) throw ConfigError("kernel must be 1, 3 or 5 in layer " + l.spec.name);
    l.weight = Tensor::zeros_f32({cout, cin / groups, k, k});
    l.bias.assign(static_cast<size_t>(cout), 0.0f);
    if (bn) {
        BnParams p;
        p.gamma.assign(static_cast<size_t>(cout), 1.0f);
        p.beta.assign(static_cast<size_t>(cout), 0.0f);
        p.mean.assign(static_cast<size_t>(cout), 0.0f);
        p.var.assign(static_cast<size_t>(cout), 1.0f);
        l.bn = p;
    }
    return l;
}

inline Layer make_matmul(std::string name, int64_t k_dim, int64_t n_dim, bool bn, bool act) {
    Layer l;
    l.spec.name = std::move(name);
    l.spec.kind = LayerKind::MatMul;
    l.spec.in_channels = k_dim;
    l.spec.out_channels = n_dim;
    l.spec.kernel = 1;
    l.spec.h_in = l.spec.w_in = 1;
    l.spec.h_out = l.spec.w_out = 1;
    l.spec.has_bn = bn;
    l.spec.has_act = act;
    l.weight = Tensor::zeros_f32({n_dim, k_dim, 1, 1});
    l.bias.assign(static_cast<size_t>(n_dim), 0.0f);
    if (bn) {
        BnParams p;
        p.gamma.assign(static_cast<size_t>(n_dim), 1.0f);
        p.beta.assign(static_cast<size_t>(n_dim), 0.0f);
        p.mean.assign(static_cast<size_t>(n_dim), 0.0f);
        p.var.assign(static_cast<size_t>(n_dim), 1.0f);
        l.bn = p;
    }
    return l;
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

}  // namespace detail

inline ModelGraph build_model(const nlohmann::json& cfg) {
    ModelGraph g;
    try {
        g.name = detail::get_or<std::string>(cfg, "name", "model");
        if (!cfg.contains("input")) throw ConfigError("config missing 'input'");
        g.resolution = cfg.at("input").at("resolution").get<int64_t>();
        g.in_channels = detail::get_or<int64_t>(cfg.at("input"), "channels", 3);
        if (g.resolution <= 0 || g.in_channels <= 0) throw ConfigError("non-positive input geometry");
        if (!cfg.contains("stages")) throw ConfigError("config missing 'stages'");

        int64_t ch = g.in_channels;
        int64_t h = g.resolution, w = g.resolution;
        int stage_idx = 0;
        for (const auto& stage : cfg.at("stages")) {
            int block_idx = 0;
            for (const auto& bj : stage.at("blocks")) {
                const std::string type = bj.at("type").get<std::string>();
                const std::string bname = "s" + std::to_string(stage_idx) + ".b" + std::to_string(block_idx);
                Block blk;
                blk.name = bname;
                if (type == "stem") {
                    const int64_t cout = bj.at("channels").get<int64_t>();
                    const int64_t k = detail::get_or<int64_t>(bj, "kernel", 3);
                    const int64_t s = detail::get_or<int64_t>(bj, "stride", 2);
                    blk.type = BlockType::Stem;
                    blk.layers.push_back(detail::make_conv(bname + ".conv", LayerKind::GenericConv, ch, cout, k,
                                                           s, 1, h, w, true, true));
                    ch = cout;
                    h = blk.layers.back().spec.h_out;
                    w = blk.layers.back().spec.w_out;
                } else if (type == "mbconv") {
                    const int64_t cout = bj.at("channels").get<int64_t>();
                    const int64_t e = detail::get_or<int64_t>(bj, "expansion", 4);
                    const int64_t k = detail::get_or<int64_t>(bj, "kernel", 3);
                    const int64_t s = detail::get_or<int64_t>(bj, "stride", 1);
                    if (e == 1) {
                        // Expansion 1 degenerates to a depthwise-separable pair.
                        blk.type = BlockType::DSConv;
                        auto dw = detail::make_conv(bname + ".dw", LayerKind::DWConv, ch, ch, k, s, ch, h, w,
                                                    true, true);
                        h = dw.spec.h_out;
                        w = dw.spec.w_out;
                        blk.layers.push_back(std::move(dw));
                        blk.layers.push_back(detail::make_conv(bname + ".pw", LayerKind::PWConv, ch, cout, 1, 1,
                                                               1, h, w, true, false));
                        blk.residual = (s == 1 && ch == cout);
                        ch = cout;
                    } else {
                        blk.type = BlockType::MBConv;
                        const int64_t mid = ch * e;
                        blk.layers.push_back(detail::make_conv(bname + ".pw1", LayerKind::PWConv, ch, mid, 1, 1,
                                                               1, h, w, true, true));
                        auto dw = detail::make_conv(bname + ".dw", LayerKind::DWConv, mid, mid, k, s, mid, h, w,
                                                    true, true);
                        const int64_t ho = dw.spec.h_out, wo = dw.spec.w_out;
                        blk.layers.push_back(std::move(dw));
                        blk.layers.push_back(detail::make_conv(bname + ".pw2", LayerKind::PWConv, mid, cout, 1,
                                                               1, 1, ho, wo, true, false));
                        blk.residual = (s == 1 && ch == cout);
                        ch = cout;
                        h = ho;
                        w = wo;
                    }
                } else if (type == "msa") {
                    const int64_t c = detail::get_or<int64_t>(bj, "channels", ch);
                    if (c != ch) throw ConfigError("msa channels must match incoming channels in " + bname);
                    const int64_t dim = detail::get_or<int64_t>(bj, "dim", 16);
                    const int64_t heads = detail::get_or<int64_t>(bj, "heads", c / dim);
                    const int64_t agg_k = detail::get_or<int64_t>(bj, "kernel", 5);
                    if (heads * dim != c) throw ConfigError("msa heads*dim must equal channels in " + bname);
                    blk.type = BlockType::MSA;
                    blk.residual = true;
                    blk.layers.push_back(detail::make_conv(bname + ".qkv", LayerKind::PWConv, c, 3 * c, 1, 1, 1,
                                                           h, w, false, false));
                    // Multi-scale token aggregation, modeled as one depthwise
                    // conv over the concatenated q/k/v channels.
                    blk.layers.push_back(detail::make_conv(bname + ".aggreg", LayerKind::DWConv, 3 * c, 3 * c,
                                                           agg_k, 1, 3 * c, h, w, false, false));
                    Layer attn;
                    attn.spec.name = bname + ".attn";
                    attn.spec.kind = LayerKind::AttnCombine;
                    attn.spec.in_channels = 6 * c;  // base qkv + aggregated qkv
                    attn.spec.out_channels = 2 * c;
                    attn.spec.h_in = attn.spec.h_out = h;
                    attn.spec.w_in = attn.spec.w_out = w;
                    attn.spec.heads = 2 * heads;
                    attn.spec.head_dim = dim;
                    blk.layers.push_back(std::move(attn));
                    blk.layers.push_back(detail::make_conv(bname + ".proj", LayerKind::PWConv, 2 * c, c, 1, 1, 1,
                                                           h, w, true, false));
                } else if (type == "head") {
                    const int64_t c1 = bj.at("channels").get<int64_t>();
                    const int64_t hidden = detail::get_or<int64_t>(bj, "hidden", c1);
                    const int64_t classes = detail::get_or<int64_t>(bj, "classes", 1000);
                    blk.type = BlockType::Head;
                    blk.layers.push_back(detail::make_conv(bname + ".conv", LayerKind::PWConv, ch, c1, 1, 1, 1,
                                                           h, w, true, true));
                    Layer pool;
                    pool.spec.name = bname + ".pool";
                    pool.spec.kind = LayerKind::GlobalAvgPool;
                    pool.spec.in_channels = pool.spec.out_channels = c1;
                    pool.spec.h_in = h;
                    pool.spec.w_in = w;
                    pool.spec.h_out = pool.spec.w_out = 1;
                    blk.layers.push_back(std::move(pool));
                    blk.layers.push_back(detail::make_matmul(bname + ".fc1", c1, hidden, true, true));
                    blk.layers.push_back(detail::make_matmul(bname + ".fc2", hidden, classes, false, false));
                    g.num_classes = classes;
                    ch = classes;
                    h = w = 1;
                } else {
                    throw ConfigError("unknown block type '" + type + "' in " + bname);
                }
                g.blocks.push_back(std::move(blk));
                ++block_idx;
            }
            ++stage_idx;
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config schema error: ") + e.what());
    }
    if (g.blocks.empty()) throw ConfigError("config defines no blocks");
    return g;
}

inline ModelGraph build_model_from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open model config: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return build_model(j);
}

// Deterministic He-uniform weight init plus synthetic BN statistics; per-layer
// RNG streams keyed by layer index so graphs edit stably.
inline void init_weights(ModelGraph& g, uint64_t seed) {
    uint64_t idx = 0;
    for (auto& blk : g.blocks)
        for (auto& l : blk.layers) {
            ++idx;
            if (!l.spec.is_conv_like()) continue;
            auto rng = make_rng(seed, idx);
            const int64_t fan_in = (l.spec.in_channels / std::max<int64_t>(l.spec.groups, 1)) * l.spec.kernel *
                                   l.spec.kernel;
            const float bound = std::sqrt(6.0f / static_cast<float>(std::max<int64_t>(fan_in, 1)));
            std::uniform_real_distribution<float> wd(-bound, bound);
            for (float& v : l.weight.f()) v = wd(rng);
            std::uniform_real_distribution<float> bd(-0.05f, 0.05f);
            for (float& v : l.bias) v = bd(rng);
            if (l.bn) {
                std::uniform_real_distribution<float> gd(0.7f, 1.3f), btd(-0.1f, 0.1f), md(-0.1f, 0.1f),
                    vd(0.5f, 1.5f);
                for (float& v : l.bn->gamma) v = gd(rng);
                for (float& v : l.bn->beta) v = btd(rng);
                for (float& v : l.bn->mean) v = md(rng);
                for (float& v : l.bn->var) v = vd(rng);
            }
        }
}

// ---------------------------------------------------------------------------
// BN folding: w' = w * g / sqrt(var + eps), b' = (b - mean) * g / sqrt(var + eps) + beta.

inline ModelGraph fold_bn(const ModelGraph& graph) {
    ModelGraph g = graph;
    for (auto& blk : g.blocks)
        for (auto& l : blk.layers) {
            if (!l.bn) continue;
            const BnParams& p = *l.bn;
            const int64_t cout = l.spec.out_channels;
            if (static_cast<int64_t>(p.gamma.size()) != cout) throw std::invalid_argument("fold_bn: BN size mismatch");
            const int64_t per_filter = l.weight.numel() / cout;
            float* wp = l.weight.f().data();
            for (int64_t oc = 0; oc < cout; ++oc) {
                const float var = p.var[static_cast<size_t>(oc)];
                if (var <= 0.0f && p.eps <= 0.0f) throw std::invalid_argument("fold_bn: non-positive variance");
                if (var + p.eps <= 0.0f) throw std::invalid_argument("fold_bn: non-positive variance");
                const float k = p.gamma[static_cast<size_t>(oc)] / std::sqrt(var + p.eps);
                for (int64_t i = 0; i < per_filter; ++i) wp[oc * per_filter + i] *= k;
                l.bias[static_cast<size_t>(oc)] =
                    (l.bias[static_cast<size_t>(oc)] - p.mean[static_cast<size_t>(oc)]) * k +
                    p.beta[static_cast<size_t>(oc)];
            }
            l.bn.reset();
            l.spec.has_bn = false;
        }
    return g;
}

// ---------------------------------------------------------------------------
// ReLU linear attention, single head: out = R(Q) (sum_j R(K_j)^T V_j) / (R(Q) sum_j R(K_j)^T).
// Zero denominators are guarded with eps_div and counted.

struct AttnDiagnostics {
    int64_t guard_count = 0;
};

inline Tensor relu_linear_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    AttnDiagnostics* diag = nullptr, float eps_div = 1e-6f) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw std::invalid_argument("relu_linear_attention: rank-2 tensors required");
    if (!q.same_shape(k) || q.dim(0) != v.dim(0))
        throw std::invalid_argument("relu_linear_attention: token/dim mismatch");
    const int64_t n = q.dim(0), d = q.dim(1), dv = v.dim(1);
    // kv[d][dv] = sum_j R(K_j)^T V_j, ksum[d] = sum_j R(K_j)^T
    std::vector<float> kv(static_cast<size_t>(d * dv), 0.0f), ksum(static_cast<size_t>(d), 0.0f);
    for (int64_t j = 0; j < n; ++j)
        for (int64_t a = 0; a < d; ++a) {
            const float kj = relu(k.f()[j * d + a]);
            if (kj == 0.0f) continue;
            ksum[static_cast<size_t>(a)] += kj;
            for (int64_t b = 0; b < dv; ++b) kv[static_cast<size_t>(a * dv + b)] += kj * v.f()[j * dv + b];
        }
    Tensor out = Tensor::zeros_f32({n, dv});
    for (int64_t i = 0; i < n; ++i) {
        float den = 0.0f;
        std::vector<float> num(static_cast<size_t>(dv), 0.0f);
        for (int64_t a = 0; a < d; ++a) {
            const float qi = relu(q.f()[i * d + a]);
            if (qi == 0.0f) continue;
            den += qi * ksum[static_cast<size_t>(a)];
            for (int64_t b = 0; b < dv; ++b) num[static_cast<size_t>(b)] += qi * kv[static_cast<size_t>(a * dv + b)];
        }
        if (den < eps_div) {
            den = eps_div;
            if (diag) ++diag->guard_count;
        }
        for (int64_t b = 0; b < dv; ++b) out.f()[i * dv + b] = num[static_cast<size_t>(b)] / den;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Float forward with optional per-layer activation capture for calibration.

struct ForwardCapture {
    // Keyed by layer name: the tensor feeding each quantizable layer and the
    // pre-activation conv output.
    std::map<std::string, Tensor> layer_input;
    std::map<std::string, Tensor> pre_act;
    // MSA internals, keyed by the attn layer name.
    std::map<std::string, Tensor> attn_q;        // post-ReLU queries, [heads*n, d]
    std::map<std::string, Tensor> attn_k;        // post-ReLU keys, [heads*n, d]
    std::map<std::string, Tensor> attn_v;        // values, [heads*n, d]
    std::map<std::string, Tensor> attn_ms;       // aggregated multi-scale qkv map
    std::map<std::string, Tensor> attn_s;        // per head K^T V, stacked [heads*d, d]
    std::map<std::string, Tensor> attn_ksum;     // [heads, d]
    std::map<std::string, Tensor> attn_dividend; // [heads*n, d]
    std::map<std::string, Tensor> attn_divisor;  // [heads, n]
    std::map<std::string, Tensor> block_output;  // post-residual block outputs
    AttnDiagnostics attn_diag;
};

namespace detail {

inline Tensor apply_act(const Tensor& x, bool act) {
    if (!act) return x;
    Tensor y = x;
    for (float& v : y.f()) v = hardswish(v);
    return y;
}

inline Tensor run_conv_layer(const Layer& l, const Tensor& x, ForwardCapture* cap) {
    if (cap) cap->layer_input.emplace(l.spec.name, x);
    Tensor y;
    if (l.spec.kind == LayerKind::MatMul) {
        // [N, C, 1, 1] -> rows of a matmul against weight [out, in].
        const int64_t n = x.dim(0), cin = x.dim(1);
        Tensor a = Tensor::zeros_f32({n, cin});
        a.f() = x.f();
        Tensor b = Tensor::zeros_f32({cin, l.spec.out_channels});
        for (int64_t o = 0; o < l.spec.out_channels; ++o)
            for (int64_t i = 0; i < cin; ++i) b.f()[i * l.spec.out_channels + o] = l.weight.f()[o * cin + i];
        Tensor mm = matmul_ref(a, b);
        y = Tensor::zeros_f32({n, l.spec.out_channels, 1, 1});
        for (int64_t r = 0; r < n; ++r)
            for (int64_t o = 0; o < l.spec.out_channels; ++o)
                y.f()[r * l.spec.out_channels + o] = mm.f()[r * l.spec.out_channels + o] + l.bias[static_cast<size_t>(o)];
    } else {
        y = conv2d_ref(x, l.weight, l.bias, l.spec.stride, l.spec.padding, l.spec.groups);
    }
    if (l.bn) {
        const BnParams& p = *l.bn;
        const int64_t c = y.dim(1), hw = y.dim(2) * y.dim(3);
        for (int64_t b = 0; b < y.dim(0); ++b)
            for (int64_t ch = 0; ch < c; ++ch) {
                const float k = p.gamma[static_cast<size_t>(ch)] / std::sqrt(p.var[static_cast<size_t>(ch)] + p.eps);
                const float off = p.beta[static_cast<size_t>(ch)] - p.mean[static_cast<size_t>(ch)] * k;
                float* row = y.f().data() + (b * c + ch) * hw;
                for (int64_t i = 0; i < hw; ++i) row[i] = row[i] * k + off;
            }
    }
    if (cap) cap->pre_act.emplace(l.spec.name, y);
    return apply_act(y, l.spec.has_act);
}

// The MSA attention core over the concatenated base + aggregated qkv maps.
// Channel layout per head group: [q(d), k(d), v(d)].
inline Tensor run_attention(const Layer& attn, const Tensor& qkv_base, const Tensor& qkv_ms,
                            ForwardCapture* cap) {
    const int64_t d = attn.spec.head_dim;
    const int64_t heads = attn.spec.heads;
    const int64_t n_tok = attn.spec.tokens();
    const int64_t batch = qkv_base.dim(0);
    if (batch != 1) throw std::invalid_argument("attention: batch 1 expected per forward call");
    Tensor out = Tensor::zeros_f32({batch, heads * d, attn.spec.h_out, attn.spec.w_out});

    Tensor s_cap, ksum_cap, div_cap, dnd_cap, q_cap, k_cap, v_cap;
    if (cap) {
        s_cap = Tensor::zeros_f32({heads * d, d});
        ksum_cap = Tensor::zeros_f32({heads, d});
        dnd_cap = Tensor::zeros_f32({heads * n_tok, d});
        div_cap = Tensor::zeros_f32({heads, n_tok});
        q_cap = Tensor::zeros_f32({heads * n_tok, d});
        k_cap = Tensor::zeros_f32({heads * n_tok, d});
        v_cap = Tensor::zeros_f32({heads * n_tok, d});
    }

    const int64_t half = heads / 2;
    for (int64_t hh = 0; hh < heads; ++hh) {
        const Tensor& src = hh < half ? qkv_base : qkv_ms;
        const int64_t group = hh < half ? hh : hh - half;
        const int64_t c0 = group * 3 * d;
        Tensor q = Tensor::zeros_f32({n_tok, d});
        Tensor k = Tensor::zeros_f32({n_tok, d});
        Tensor v = Tensor::zeros_f32({n_tok, d});
        const int64_t hw = n_tok;
        for (int64_t j = 0; j < d; ++j)
            for (int64_t t = 0; t < n_tok; ++t) {
                q.f()[t * d + j] = src.f()[(c0 + j) * hw + t];
                k.f()[t * d + j] = src.f()[(c0 + d + j) * hw + t];
                v.f()[t * d + j] = src.f()[(c0 + 2 * d + j) * hw + t];
            }
        Tensor o = relu_linear_attention(q, k, v, cap ? &cap->attn_diag : nullptr);
        for (int64_t j = 0; j < d; ++j)
            for (int64_t t = 0; t < n_tok; ++t) out.f()[(hh * d + j) * hw + t] = o.f()[t * d + j];

        if (cap) {
            // Re-derive the intermediates the integer pipeline needs to calibrate.
            for (int64_t t = 0; t < n_tok; ++t)
                for (int64_t a = 0; a < d; ++a) {
                    q_cap.f()[(hh * n_tok + t) * d + a] = relu(q.f()[t * d + a]);
                    k_cap.f()[(hh * n_tok + t) * d + a] = relu(k.f()[t * d + a]);
                    v_cap.f()[(hh * n_tok + t) * d + a] = v.f()[t * d + a];
                    const float kr = relu(k.f()[t * d + a]);
                    ksum_cap.f()[hh * d + a] += kr;
                    for (int64_t b = 0; b < d; ++b) s_cap.f()[(hh * d + a) * d + b] += kr * v.f()[t * d + b];
                }
            for (int64_t t = 0; t < n_tok; ++t) {
                float den = 0.0f;
                for (int64_t a = 0; a < d; ++a) {
                    const float qr = relu(q.f()[t * d + a]);
                    den += qr * ksum_cap.f()[hh * d + a];
                    for (int64_t b = 0; b < d; ++b)
                        dnd_cap.f()[(hh * n_tok + t) * d + b] += qr * s_cap.f()[(hh * d + a) * d + b];
                }
                div_cap.f()[hh * n_tok + t] = den;
            }
        }
    }
    if (cap) {
        cap->attn_q.emplace(attn.spec.name, std::move(q_cap));
        cap->attn_k.emplace(attn.spec.name, std::move(k_cap));
        cap->attn_v.emplace(attn.spec.name, std::move(v_cap));
        cap->attn_ms.emplace(attn.spec.name, qkv_ms);
        cap->attn_s.emplace(attn.spec.name, std::move(s_cap));
        cap->attn_ksum.emplace(attn.spec.name, std::move(ksum_cap));
        cap->attn_dividend.emplace(attn.spec.name, std::move(dnd_cap));
        cap->attn_divisor.emplace(attn.spec.name, std::move(div_cap));
    }
    return out;
}

}  // namespace detail

inline Tensor forward_block(const Block& blk, const Tensor& input, ForwardCapture* cap) {
    Tensor x = input;
    if (blk.type == BlockType::MSA) {
        const Layer& qkv = blk.layers[0];
        const Layer& agg = blk.layers[1];
        const Layer& attn = blk.layers[2];
        const Layer& proj = blk.layers[3];
        Tensor qkv_out = detail::run_conv_layer(qkv, x, cap);
        Tensor ms_out = detail::run_conv_layer(agg, qkv_out, cap);
        Tensor attn_out = detail::run_attention(attn, qkv_out, ms_out, cap);
        Tensor y = detail::run_conv_layer(proj, attn_out, cap);
        if (blk.residual) {
            for (size_t i = 0; i < y.f().size(); ++i) y.f()[i] += x.f()[i];
        }
        return y;
    }
    for (const Layer& l : blk.layers) {
        if (l.spec.kind == LayerKind::GlobalAvgPool) {
            if (cap) cap->layer_input.emplace(l.spec.name, x);
            Tensor y = Tensor::zeros_f32({x.dim(0), x.dim(1), 1, 1});
            const int64_t hw = x.dim(2) * x.dim(3);
            for (int64_t n = 0; n < x.dim(0); ++n)
                for (int64_t c = 0; c < x.dim(1); ++c) {
                    double acc = 0.0;
                    const float* row = x.f().data() + (n * x.dim(1) + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) acc += row[i];
                    y.f()[n * x.dim(1) + c] = static_cast<float>(acc / static_cast<double>(hw));
                }
            x = std::move(y);
        } else {
            x = detail::run_conv_layer(l, x, cap);
        }
    }
    if (blk.residual) {
        if (!x.same_shape(input)) throw std::invalid_argument("residual shape mismatch in block " + blk.name);
        for (size_t i = 0; i < x.f().size(); ++i) x.f()[i] += input.f()[i];
    }
    return x;
}

inline Tensor forward_float(const ModelGraph& g, const Tensor& input, ForwardCapture* cap = nullptr) {
    if (input.rank() != 4) throw std::invalid_argument("forward_float: NCHW input required");
    const Layer& first = g.blocks.front().layers.front();
    if (input.dim(1) != first.spec.in_channels || input.dim(2) != first.spec.h_in ||
        input.dim(3) != first.spec.w_in)
        throw std::invalid_argument("forward_float: input shape does not match stem");
    Tensor x = input;
    for (const Block& blk : g.blocks) {
        x = forward_block(blk, x, cap);
        if (cap) cap->block_output.emplace(blk.name, x);
    }
    return x;
}

// ---------------------------------------------------------------------------
// Operation census.

struct OpCensus {
    int64_t generic_conv = 0;
    int64_t pwconv = 0;
    int64_t dwconv = 0;
    int64_t matmul = 0;

    int64_t total() const { return generic_conv + pwconv + dwconv + matmul; }
    double gmacs() const { return static_cast<double>(total()) / 1e9; }
    // 2 MACs per multiply-accumulate when counting FLOPs.
    double gflops() const { return 2.0 * static_cast<double>(total()) / 1e9; }

    double share(int64_t part) const { return total() ? 100.0 * static_cast<double>(part) / static_cast<double>(total()) : 0.0; }
};

inline OpCensus op_census(const ModelGraph& g) {
    OpCensus c;
    for (const Block& blk : g.blocks)
        for (const Layer& l : blk.layers) {
            const int64_t m = l.spec.macs();
            switch (l.spec.kind) {
                case LayerKind::GenericConv: c.generic_conv += m; break;
                case LayerKind::PWConv: c.pwconv += m; break;
                case LayerKind::DWConv: c.dwconv += m; break;
                case LayerKind::MatMul:
                case LayerKind::AttnCombine: c.matmul += m; break;
                default: break;
            }
        }
    return c;
}

}  // namespace evitq
