#pragma once

// Float reference kernels: plain cross-correlation conv2d and matmul.
// These are the oracles every quantized path is measured against, so they
// stay deliberately simple.

#include <cmath>
#include <stdexcept>
#include <string>

#include "evitq/tensor.hpp"

namespace evitq {

struct ConvShape {
    int64_t h_out = 0;
    int64_t w_out = 0;
};

inline ConvShape conv_output_shape(int64_t h, int64_t w, int64_t k, int64_t stride, int64_t padding) {
    ConvShape s;
    s.h_out = (h + 2 * padding - k) / stride + 1;
    s.w_out = (w + 2 * padding - k) / stride + 1;
    if (s.h_out <= 0 || s.w_out <= 0) throw std::invalid_argument("conv: empty output for given geometry");
    return s;
}

// input NCHW, weight OIHW (I = C_in / groups). groups == C_in gives depthwise
// semantics. Accumulates in f32 to match deployment numerics; test oracles
// re-derive in f64.
inline Tensor conv2d_ref(const Tensor& input, const Tensor& weight, const std::vector<float>& bias,
                         int64_t stride, int64_t padding, int64_t groups = 1) {
    if (input.rank() != 4 || weight.rank() != 4) throw std::invalid_argument("conv2d_ref: rank-4 tensors required");
    if (input.dtype() != Dtype::F32 || weight.dtype() != Dtype::F32)
        throw std::invalid_argument("conv2d_ref: f32 tensors required");
    const int64_t n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int64_t c_out = weight.dim(0), wc_in = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    if (kh != kw) throw std::invalid_argument("conv2d_ref: only square kernels supported");
    if (groups < 1 || c_in % groups != 0 || c_out % groups != 0)
        throw std::invalid_argument("conv2d_ref: channels not divisible by groups");
    if (wc_in != c_in / groups)
        throw std::invalid_argument("conv2d_ref: weight in-channels " + std::to_string(wc_in) +
                                    " != input channels/groups " + std::to_string(c_in / groups));
    if (!bias.empty() && static_cast<int64_t>(bias.size()) != c_out)
        throw std::invalid_argument("conv2d_ref: bias length != out channels");

    const auto [h_out, w_out] = conv_output_shape(h, w, kh, stride, padding);
    Tensor out = Tensor::zeros_f32({n, c_out, h_out, w_out});
    const float* in = input.f().data();
    const float* wt = weight.f().data();
    float* op = out.f().data();
    const int64_t ch_per_group = c_in / groups;
    const int64_t out_per_group = c_out / groups;

    for (int64_t b = 0; b < n; ++b)
        for (int64_t oc = 0; oc < c_out; ++oc) {
            const int64_t g = oc / out_per_group;
            const float bb = bias.empty() ? 0.0f : bias[static_cast<size_t>(oc)];
            for (int64_t oy = 0; oy < h_out; ++oy)
                for (int64_t ox = 0; ox < w_out; ++ox) {
                    float acc = 0.0f;
                    for (int64_t ic = 0; ic < ch_per_group; ++ic) {
                        const int64_t cc = g * ch_per_group + ic;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = oy * stride + ky - padding;
                            if (iy < 0 || iy >= h) continue;
                            const float* in_row = in + ((b * c_in + cc) * h + iy) * w;
                            const float* w_row = wt + ((oc * ch_per_group + ic) * kh + ky) * kw;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ix = ox * stride + kx - padding;
                                if (ix < 0 || ix >= w) continue;
                                acc += in_row[ix] * w_row[kx];
                            }
                        }
                    }
                    op[((b * c_out + oc) * h_out + oy) * w_out + ox] = acc + bb;
                }
        }
    return out;
}

// a [m,k] x b [k,n] -> [m,n].
inline Tensor matmul_ref(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul_ref: rank-2 tensors required");
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul_ref: inner dims disagree: " + std::to_string(a.dim(1)) + " vs " +
                                    std::to_string(b.dim(0)));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros_f32({m, n});
    const float* pa = a.f().data();
    const float* pb = b.f().data();
    float* pc = out.f().data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
            const float av = pa[i * k + kk];
            const float* brow = pb + kk * n;
            float* crow = pc + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    return out;
}

inline float hardswish(float x) { return x * std::min(std::max(x + 3.0f, 0.0f), 6.0f) / 6.0f; }
inline float relu(float x) { return x > 0.0f ? x : 0.0f; }

}  // namespace evitq
