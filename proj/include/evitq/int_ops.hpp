#pragma once

// Integer-only primitives: leading-one detection, log2 rounding, dyadic
// requantization with round-half-even shifts, and the i8 x i8 -> i32 kernels.

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <utility>

#include "evitq/quantize.hpp"
#include "evitq/tensor.hpp"

namespace evitq {

// Index of the first non-zero bit == floor(log2(x)).
inline int lod(int64_t x) {
    if (x <= 0) throw std::invalid_argument("lod: argument must be positive");
    return std::bit_width(static_cast<uint64_t>(x)) - 1;
}

// Leading-one detector rule: add the bit below the leading one. Rounds to
// the linearly nearest power of two, exact midpoints upward.
inline int log2_round(int64_t x) {
    const int i = lod(x);
    if (i == 0) return 0;
    return i + static_cast<int>((x >> (i - 1)) & 1);
}

// Geometric variant: rounds to the exponent with the smaller relative error,
// i.e. up exactly when x > 2^(i+1/2). The comparison x^2 >= 2^(2i+1) keeps it
// integer-only (2^odd is never a perfect square, so there are no ties).
inline int log2_round_geometric(int64_t x) {
    const int i = lod(x);
    const unsigned __int128 sq = static_cast<unsigned __int128>(x) * static_cast<unsigned __int128>(x);
    return i + (sq >= (static_cast<unsigned __int128>(1) << (2 * i + 1)) ? 1 : 0);
}

// (v * 1) >> c with round-half-even; negative c shifts left (exact).
inline int64_t rounding_shift_right(int64_t v, int c) {
    if (c <= 0) {
        if (-c > 62) throw std::invalid_argument("rounding_shift_right: left shift too large");
        return v << (-c);
    }
    if (c > 62) return 0;
    const int64_t q = v >> c;  // arithmetic shift, floors
    const int64_t r = v - (q << c);  // in [0, 2^c)
    const int64_t half = int64_t{1} << (c - 1);
    return q + ((r > half || (r == half && (q & 1))) ? 1 : 0);
}

inline int64_t requant_scalar(int64_t acc, DyadicPair p) { return rounding_shift_right(acc * p.b, p.c); }

// Eq.-of-record requantization: out = clip(rne((acc * b) >> c)).
inline Tensor requantize(const Tensor& acc, DyadicPair p, int out_bits, bool is_signed) {
    if (acc.dtype() != Dtype::I32) throw std::invalid_argument("requantize: i32 accumulator tensor required");
    if (p.b <= 0 || p.b >= (1 << 16)) throw std::invalid_argument("requantize: numerator out of range");
    const QuantRange r = quant_range(out_bits, is_signed);
    const bool fits_i8 = r.lo >= -128 && r.hi <= 127;
    Tensor out(acc.shape(), fits_i8 ? Dtype::I8 : Dtype::I32);
    for (int64_t i = 0; i < acc.numel(); ++i) {
        const int64_t v = std::clamp(requant_scalar(acc.i32()[static_cast<size_t>(i)], p), r.lo, r.hi);
        if (fits_i8)
            out.i8()[static_cast<size_t>(i)] = static_cast<int8_t>(v);
        else
            out.i32()[static_cast<size_t>(i)] = static_cast<int32_t>(v);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Integer kernels. Loop structure mirrors conv2d_ref; accumulators stay in
// i32, which graph validation guarantees cannot overflow.

inline Tensor int_conv2d(const Tensor& input, const Tensor& weight, const std::vector<int32_t>& bias,
                         int64_t stride, int64_t padding, int64_t groups = 1) {
    if (input.dtype() != Dtype::I8 || weight.dtype() != Dtype::I8)
        throw std::invalid_argument("int_conv2d: i8 tensors required");
    const int64_t n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int64_t c_out = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != c_in / groups) throw std::invalid_argument("int_conv2d: weight/in-channel mismatch");
    if (!bias.empty() && static_cast<int64_t>(bias.size()) != c_out)
        throw std::invalid_argument("int_conv2d: bias length != out channels");
    const int64_t h_out = (h + 2 * padding - kh) / stride + 1;
    const int64_t w_out = (w + 2 * padding - kw) / stride + 1;
    if (h_out <= 0 || w_out <= 0) throw std::invalid_argument("int_conv2d: empty output");
    Tensor out = Tensor::zeros_i32({n, c_out, h_out, w_out});
    const int8_t* in = input.i8().data();
    const int8_t* wt = weight.i8().data();
    int32_t* op = out.i32().data();
    const int64_t cpg = c_in / groups, opg = c_out / groups;
    for (int64_t b = 0; b < n; ++b)
        for (int64_t oc = 0; oc < c_out; ++oc) {
            const int64_t g = oc / opg;
            const int32_t bb = bias.empty() ? 0 : bias[static_cast<size_t>(oc)];
            for (int64_t oy = 0; oy < h_out; ++oy)
                for (int64_t ox = 0; ox < w_out; ++ox) {
                    int32_t acc = 0;
                    for (int64_t ic = 0; ic < cpg; ++ic) {
                        const int64_t cc = g * cpg + ic;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = oy * stride + ky - padding;
                            if (iy < 0 || iy >= h) continue;
                            const int8_t* in_row = in + ((b * c_in + cc) * h + iy) * w;
                            const int8_t* w_row = wt + ((oc * cpg + ic) * kh + ky) * kw;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ix = ox * stride + kx - padding;
                                if (ix < 0 || ix >= w) continue;
                                acc += static_cast<int32_t>(in_row[ix]) * static_cast<int32_t>(w_row[kx]);
                            }
                        }
                    }
                    op[((b * c_out + oc) * h_out + oy) * w_out + ox] = acc + bb;
                }
        }
    return out;
}

// a [m,k] x w [n,k] (filter-major, matching OIHW) -> [m,n] i32.
inline Tensor int_matmul(const Tensor& a, const Tensor& w, const std::vector<int32_t>& bias) {
    if (a.dtype() != Dtype::I8 || w.dtype() != Dtype::I8)
        throw std::invalid_argument("int_matmul: i8 tensors required");
    const int64_t m = a.dim(0), k = a.dim(1), n = w.dim(0);
    if (w.numel() != n * k) throw std::invalid_argument("int_matmul: weight shape mismatch");
    Tensor out = Tensor::zeros_i32({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            int32_t acc = bias.empty() ? 0 : bias[static_cast<size_t>(j)];
            for (int64_t kk = 0; kk < k; ++kk)
                acc += static_cast<int32_t>(a.i8()[i * k + kk]) * static_cast<int32_t>(w.i8()[j * k + kk]);
            out.i32()[static_cast<size_t>(i * n + j)] = acc;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Log2 divisor quantization: exponent = clamp(e_s + log2(x) rounded, lo, hi).
// Zero divisors clamp to the window floor and are counted, mirroring what a
// shifter array would do.

struct Log2Divisor {
    Tensor exponents;  // i32, same shape as the divisor tensor
    int e_s = 0;
    int lo = -8, hi = 7;
    int64_t zero_count = 0;
    int64_t clip_count = 0;
};

inline Log2Divisor quantize_divisor_log2(const Tensor& div, int e_s, std::pair<int, int> clip) {
    if (div.dtype() != Dtype::I32) throw std::invalid_argument("quantize_divisor_log2: i32 divisors required");
    Log2Divisor out;
    out.exponents = Tensor::zeros_i32(div.shape());
    out.e_s = e_s;
    out.lo = clip.first;
    out.hi = clip.second;
    for (int64_t i = 0; i < div.numel(); ++i) {
        const int32_t x = div.i32()[static_cast<size_t>(i)];
        if (x < 0) throw std::invalid_argument("quantize_divisor_log2: negative divisor");
        int e;
        if (x == 0) {
            e = clip.first;
            ++out.zero_count;
        } else {
            const int raw = e_s + log2_round_geometric(x);
            e = std::clamp(raw, clip.first, clip.second);
            if (e != raw) ++out.clip_count;
        }
        out.exponents.i32()[static_cast<size_t>(i)] = e;
    }
    return out;
}

}  // namespace evitq
