#pragma once

// Post-training quantization engine. Symmetric layer-wise activation /
// filter-wise weight uniform quantization, with three refinements aimed at
// the hybrid model's problem spots:
//   - channel-wise migration of depthwise-conv input variation into weights,
//   - filter-wise shifting (per-channel centering) of the projection conv
//     inputs with a pre-computed bias update,
//   - log2 quantization of attention divisors so division becomes a shift.
// All inter-stage rescales are dyadic (integer multiply + shift).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "evitq/model.hpp"
#include "evitq/tensor.hpp"

namespace evitq {

struct CalibError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class QuantScheme { Uniform, Log2 };

// ---------------------------------------------------------------------------
// Uniform quantization, Eq.-of-record: q = clip(rne(x / s), lo, hi).

inline int64_t quant_rne(double v) { return static_cast<int64_t>(std::llrint(v)); }  // FE_TONEAREST default

struct QuantRange {
    int64_t lo = -128, hi = 127;
};

inline QuantRange quant_range(int bits, bool is_signed) {
    if (bits < 2 || bits > 16) throw std::invalid_argument("quant_range: bits out of range");
    QuantRange r;
    if (is_signed) {
        r.lo = -(int64_t{1} << (bits - 1));
        r.hi = (int64_t{1} << (bits - 1)) - 1;
    } else {
        r.lo = 0;
        r.hi = (int64_t{1} << bits) - 1;
    }
    return r;
}

inline Tensor quantize_uniform(const Tensor& x, float scale, int bits, bool is_signed) {
    if (!(scale > 0.0f) || !std::isfinite(scale)) throw std::invalid_argument("quantize_uniform: scale must be positive");
    const QuantRange r = quant_range(bits, is_signed);
    const bool fits_i8 = r.lo >= -128 && r.hi <= 127;
    Tensor q(x.shape(), fits_i8 ? Dtype::I8 : Dtype::I32);
    const auto& src = x.f();
    for (size_t i = 0; i < src.size(); ++i) {
        if (!std::isfinite(src[i])) throw std::invalid_argument("quantize_uniform: non-finite input");
        const int64_t v = std::clamp(quant_rne(static_cast<double>(src[i]) / scale), r.lo, r.hi);
        if (fits_i8)
            q.i8()[i] = static_cast<int8_t>(v);
        else
            q.i32()[i] = static_cast<int32_t>(v);
    }
    return q;
}

inline Tensor dequantize(const Tensor& q, float scale) {
    Tensor x = Tensor::zeros_f32(q.shape());
    if (q.dtype() == Dtype::I8)
        for (size_t i = 0; i < x.f().size(); ++i) x.f()[i] = static_cast<float>(q.i8()[i]) * scale;
    else
        for (size_t i = 0; i < x.f().size(); ++i) x.f()[i] = static_cast<float>(q.i32()[i]) * scale;
    return x;
}

// ---------------------------------------------------------------------------
// Dyadic rescale factors: s ~ b / 2^c with the largest admissible c, so b
// lands in [2^(max_bits-1), 2^max_bits). c may be negative for very large
// scales, which the requantizer realizes as a left shift.

struct DyadicPair {
    int32_t b = 1;
    int32_t c = 0;
    double value() const { return static_cast<double>(b) * std::exp2(static_cast<double>(-c)); }
};

inline DyadicPair dyadic_approx(double s, int max_bits = 16) {
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("dyadic_approx: scale must be positive and finite");
    if (max_bits < 2 || max_bits > 30) throw std::invalid_argument("dyadic_approx: max_bits out of range");
    const int64_t limit = int64_t{1} << max_bits;
    int c = max_bits - 1 - static_cast<int>(std::floor(std::log2(s)));
    // Land on the largest c with round(s * 2^c) < 2^max_bits.
    while (std::llrint(s * std::exp2(c)) >= limit) --c;
    while (std::llrint(s * std::exp2(c + 1)) < limit) ++c;
    const int64_t b = std::llrint(s * std::exp2(c));
    DyadicPair p;
    p.b = static_cast<int32_t>(b);
    p.c = c;
    return p;
}

// ---------------------------------------------------------------------------
// Channel-wise migration factors: mean over channels of the per-channel
// maxima, M_i = max_i / mean. Channels whose maximum is not positive keep
// the identity factor.

inline std::vector<float> compute_migration_factors(const ChannelStats& stats) {
    const size_t n = stats.channels();
    if (n == 0) throw std::invalid_argument("compute_migration_factors: empty stats");
    double sum = 0.0;
    size_t positive = 0;
    for (size_t i = 0; i < n; ++i) {
        const float m = stats.per_channel_max[i];
        if (!std::isfinite(m)) throw std::invalid_argument("compute_migration_factors: non-finite maxima");
        sum += m;
        if (m > 0.0f) ++positive;
    }
    if (positive == 0) throw std::invalid_argument("compute_migration_factors: all channel maxima non-positive");
    double mean = sum / static_cast<double>(n);
    if (mean <= 0.0) {
        // Degenerate mix of strongly negative channels; fall back to the mean
        // over the channels migration can act on.
        mean = 0.0;
        for (size_t i = 0; i < n; ++i)
            if (stats.per_channel_max[i] > 0.0f) mean += stats.per_channel_max[i];
        mean /= static_cast<double>(positive);
    }
    std::vector<float> m(n, 1.0f);
    for (size_t i = 0; i < n; ++i)
        if (stats.per_channel_max[i] > 0.0f) m[i] = static_cast<float>(stats.per_channel_max[i] / mean);
    return m;
}

// Scales depthwise weights by M per channel and fuses M into the activation
// scale: channel i is quantized with S_am_i = act_scale * M_i.
inline std::pair<Tensor, std::vector<float>> apply_channel_migration(const Tensor& dw_weights, float act_scale,
                                                                     const std::vector<float>& m) {
    if (dw_weights.rank() != 4) throw std::invalid_argument("apply_channel_migration: OIHW weights required");
    const int64_t ch = dw_weights.dim(0);
    if (static_cast<int64_t>(m.size()) != ch)
        throw std::invalid_argument("apply_channel_migration: factor count != channel count");
    Tensor w = dw_weights;
    const int64_t per = w.numel() / ch;
    std::vector<float> fused(m.size());
    for (int64_t i = 0; i < ch; ++i) {
        if (!(m[static_cast<size_t>(i)] > 0.0f)) throw std::invalid_argument("apply_channel_migration: factor <= 0");
        for (int64_t j = 0; j < per; ++j) w.f()[i * per + j] *= m[static_cast<size_t>(i)];
        fused[static_cast<size_t>(i)] = act_scale * m[static_cast<size_t>(i)];
    }
    return {std::move(w), std::move(fused)};
}

// ---------------------------------------------------------------------------
// Filter-wise shifting: per-channel centering offset. The midpoint makes the
// shifted channel symmetric; the half-range variant is kept selectable for
// comparison.

enum class ShiftRule { Midpoint, HalfRange };

inline std::vector<float> compute_filter_shift(const ChannelStats& stats, ShiftRule rule = ShiftRule::Midpoint) {
    std::vector<float> c(stats.channels());
    for (size_t i = 0; i < c.size(); ++i) {
        const float lo = stats.per_channel_min[i], hi = stats.per_channel_max[i];
        if (!std::isfinite(lo) || !std::isfinite(hi)) throw std::invalid_argument("compute_filter_shift: non-finite stats");
        c[i] = rule == ShiftRule::Midpoint ? (hi + lo) * 0.5f : (hi - lo) * 0.5f;
    }
    return c;
}

// b_hat_j = sum_i c_i * w[j,i] + b_j for a 1x1 projection conv (OIHW, k=1).
inline std::vector<float> update_bias_for_shift(const Tensor& pw_weights, const std::vector<float>& bias,
                                                const std::vector<float>& c) {
    if (pw_weights.rank() != 4 || pw_weights.dim(2) != 1 || pw_weights.dim(3) != 1)
        throw std::invalid_argument("update_bias_for_shift: 1x1 OIHW weights required");
    const int64_t cout = pw_weights.dim(0), cin = pw_weights.dim(1);
    if (static_cast<int64_t>(c.size()) != cin || static_cast<int64_t>(bias.size()) != cout)
        throw std::invalid_argument("update_bias_for_shift: size mismatch");
    std::vector<float> b(bias.size());
    for (int64_t j = 0; j < cout; ++j) {
        double acc = bias[static_cast<size_t>(j)];
        for (int64_t i = 0; i < cin; ++i)
            acc += static_cast<double>(c[static_cast<size_t>(i)]) * pw_weights.f()[j * cin + i];
        b[static_cast<size_t>(j)] = static_cast<float>(acc);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Calibration: running per-point extrema plus a bounded channel-tagged
// reservoir used by the MSE scale search.

struct PointStats {
    ChannelStats stats;
    std::vector<std::pair<int32_t, float>> reservoir;  // (channel, value)
    int64_t seen = 0;
    int64_t keep_stride = 1;
    static constexpr size_t kCap = 16384;

    void add_tensor(const Tensor& t) {
        ChannelStats s = t.rank() == 4 ? channel_stats(t) : flat_stats(t);
        stats.merge(s);
        const int64_t ch_count = t.rank() == 4 ? t.dim(1) : t.dim(t.rank() - 1);
        const int64_t hw = t.rank() == 4 ? t.dim(2) * t.dim(3) : 1;
        const auto& v = t.f();
        for (size_t i = 0; i < v.size(); ++i) {
            if (seen++ % keep_stride == 0) {
                int64_t chan;
                if (t.rank() == 4) {
                    chan = (static_cast<int64_t>(i) / hw) % ch_count;
                } else {
                    chan = static_cast<int64_t>(i) % ch_count;
                }
                reservoir.emplace_back(static_cast<int32_t>(chan), v[i]);
                if (reservoir.size() >= kCap) compact();
            }
        }
    }

private:
    static ChannelStats flat_stats(const Tensor& t) {
        // Non-NCHW tensors (attention internals) are treated as [rows, channels].
        const int64_t ch_count = t.dim(t.rank() - 1);
        ChannelStats s;
        s.per_channel_min.assign(static_cast<size_t>(ch_count), std::numeric_limits<float>::max());
        s.per_channel_max.assign(static_cast<size_t>(ch_count), std::numeric_limits<float>::lowest());
        const auto& v = t.f();
        for (size_t i = 0; i < v.size(); ++i) {
            const size_t c = i % static_cast<size_t>(ch_count);
            s.per_channel_min[c] = std::min(s.per_channel_min[c], v[i]);
            s.per_channel_max[c] = std::max(s.per_channel_max[c], v[i]);
        }
        s.layer_min = *std::min_element(s.per_channel_min.begin(), s.per_channel_min.end());
        s.layer_max = *std::max_element(s.per_channel_max.begin(), s.per_channel_max.end());
        return s;
    }

    void compact() {
        std::vector<std::pair<int32_t, float>> half;
        half.reserve(reservoir.size() / 2);
        for (size_t i = 0; i < reservoir.size(); i += 2) half.push_back(reservoir[i]);
        reservoir.swap(half);
        keep_stride *= 2;
    }
};

struct CalibRecord {
    std::map<std::string, PointStats> points;
    int64_t sample_count = 0;

    const PointStats& at(const std::string& key) const {
        auto it = points.find(key);
        if (it == points.end()) throw CalibError("calibration stats missing for '" + key + "'");
        return it->second;
    }
    bool has(const std::string& key) const { return points.count(key) != 0; }
};

// Point naming: "<layer>.in", "<layer>.preact", "<attn>.q|.k|.v|.ms|.s|.ksum|.dividend|.divisor",
// "model.in", "model.out".
inline void accumulate_calibration(CalibRecord& rec, const ModelGraph& g, const Tensor& input) {
    ForwardCapture cap;
    forward_float(g, input, &cap);
    rec.points["model.in"].add_tensor(input);
    for (const auto& [name, t] : cap.layer_input) rec.points[name + ".in"].add_tensor(t);
    for (const auto& [name, t] : cap.pre_act) rec.points[name + ".preact"].add_tensor(t);
    for (const auto& [name, t] : cap.attn_q) rec.points[name + ".q"].add_tensor(t);
    for (const auto& [name, t] : cap.attn_k) rec.points[name + ".k"].add_tensor(t);
    for (const auto& [name, t] : cap.attn_v) rec.points[name + ".v"].add_tensor(t);
    for (const auto& [name, t] : cap.attn_ms) rec.points[name + ".ms"].add_tensor(t);
    for (const auto& [name, t] : cap.attn_s) rec.points[name + ".s"].add_tensor(t);
    for (const auto& [name, t] : cap.attn_ksum) rec.points[name + ".ksum"].add_tensor(t);
    for (const auto& [name, t] : cap.attn_dividend) rec.points[name + ".dividend"].add_tensor(t);
    for (const auto& [name, t] : cap.attn_divisor) rec.points[name + ".divisor"].add_tensor(t);
    if (!g.blocks.empty()) {
        auto it = cap.block_output.find(g.blocks.back().name);
        if (it != cap.block_output.end()) rec.points["model.out"].add_tensor(it->second);
    }
    ++rec.sample_count;
}

// ---------------------------------------------------------------------------
// MSE grid search over clipping percentiles 99.0 .. 100.0 (step 0.1) of |x|.
// Ties break toward the larger scale. An optional per-channel transform maps
// each reservoir value before the search (migration divides, shifting
// subtracts).

inline float percentile_abs(std::vector<float>& abs_sorted, double p) {
    if (abs_sorted.empty()) return 0.0f;
    const size_t n = abs_sorted.size();
    size_t idx = static_cast<size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
    idx = std::clamp<size_t>(idx, 1, n) - 1;
    return abs_sorted[idx];
}

inline float scale_search(const std::vector<float>& values, int bits, bool is_signed) {
    const QuantRange r = quant_range(bits, is_signed);
    const double qmax = static_cast<double>(r.hi);  // symmetric grid never uses -2^(b-1)
    std::vector<float> av(values.size());
    for (size_t i = 0; i < values.size(); ++i) av[i] = std::abs(values[i]);
    std::sort(av.begin(), av.end());
    double best_scale = 1.0, best_mse = std::numeric_limits<double>::max();
    bool any = false;
    for (int step = 0; step <= 10; ++step) {
        const double p = 99.0 + 0.1 * step;
        const double thr = percentile_abs(av, p);
        if (!(thr > 0.0)) continue;
        const double s = thr / qmax;
        double mse = 0.0;
        for (float v : values) {
            const int64_t q = std::clamp(quant_rne(v / s), r.lo, r.hi);
            const double d = static_cast<double>(v) - static_cast<double>(q) * s;
            mse += d * d;
        }
        // >= : later (larger-percentile, larger-scale) candidates win ties.
        if (!any || mse <= best_mse) {
            best_mse = mse;
            best_scale = s;
            any = true;
        }
    }
    return any ? static_cast<float>(best_scale) : 1.0f;
}

inline float scale_search_point(const PointStats& ps, int bits, bool is_signed,
                                const std::vector<float>* div_by = nullptr,
                                const std::vector<float>* subtract = nullptr) {
    std::vector<float> vals;
    vals.reserve(ps.reservoir.size());
    for (const auto& [ch, v] : ps.reservoir) {
        float x = v;
        if (div_by) x /= (*div_by)[static_cast<size_t>(ch)];
        if (subtract) x -= (*subtract)[static_cast<size_t>(ch)];
        vals.push_back(x);
    }
    return scale_search(vals, bits, is_signed);
}

// Mean squared dequantization error of a point under a quantizer; the
// ablation harness compares this with and without migration/shifting.
inline double point_quant_mse(const PointStats& ps, float scale, int bits, bool is_signed,
                              const std::vector<float>* per_channel_scale = nullptr,
                              const std::vector<float>* subtract = nullptr) {
    const QuantRange r = quant_range(bits, is_signed);
    double mse = 0.0;
    if (ps.reservoir.empty()) return 0.0;
    for (const auto& [ch, v] : ps.reservoir) {
        const double s = per_channel_scale ? (*per_channel_scale)[static_cast<size_t>(ch)] : scale;
        const double x = subtract ? v - (*subtract)[static_cast<size_t>(ch)] : v;
        const int64_t q = std::clamp(quant_rne(x / s), r.lo, r.hi);
        const double d = x - static_cast<double>(q) * s;
        mse += d * d;
    }
    return mse / static_cast<double>(ps.reservoir.size());
}

}  // namespace evitq
