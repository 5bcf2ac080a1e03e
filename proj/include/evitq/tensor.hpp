#pragma once

// Dense tensor substrate: NCHW/OIHW row-major storage for f32/i8/i32,
// per-channel statistics, synthetic calibration data, and the .tqt
// binary container.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace evitq {

enum class Dtype : uint8_t { F32 = 0, I8 = 1, I32 = 2 };

inline const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F32: return "f32";
        case Dtype::I8: return "i8";
        case Dtype::I32: return "i32";
    }
    return "?";
}

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros_f32(std::vector<int64_t> shape) { return Tensor(std::move(shape), Dtype::F32); }
    static Tensor zeros_i8(std::vector<int64_t> shape) { return Tensor(std::move(shape), Dtype::I8); }
    static Tensor zeros_i32(std::vector<int64_t> shape) { return Tensor(std::move(shape), Dtype::I32); }

    Tensor(std::vector<int64_t> shape, Dtype dtype) : shape_(std::move(shape)), dtype_(dtype) {
        for (int64_t d : shape_)
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
        const size_t n = static_cast<size_t>(numel());
        switch (dtype_) {
            case Dtype::F32: data_ = std::vector<float>(n, 0.0f); break;
            case Dtype::I8: data_ = std::vector<int8_t>(n, 0); break;
            case Dtype::I32: data_ = std::vector<int32_t>(n, 0); break;
        }
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    Dtype dtype() const { return dtype_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }

    int64_t numel() const {
        return std::accumulate(shape_.begin(), shape_.end(), int64_t{1}, std::multiplies<int64_t>());
    }

    int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }

    std::vector<float>& f() { return std::get<std::vector<float>>(data_); }
    const std::vector<float>& f() const { return std::get<std::vector<float>>(data_); }
    std::vector<int8_t>& i8() { return std::get<std::vector<int8_t>>(data_); }
    const std::vector<int8_t>& i8() const { return std::get<std::vector<int8_t>>(data_); }
    std::vector<int32_t>& i32() { return std::get<std::vector<int32_t>>(data_); }
    const std::vector<int32_t>& i32() const { return std::get<std::vector<int32_t>>(data_); }

    // Flat offset for a rank-4 tensor (n,c,h,w) / (o,i,h,w).
    int64_t at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    std::vector<int64_t> shape_;
    Dtype dtype_ = Dtype::F32;
    std::variant<std::vector<float>, std::vector<int8_t>, std::vector<int32_t>> data_;
};

// Extrema per channel of a rank-4 NCHW tensor plus the layer-wise envelope.
struct ChannelStats {
    std::vector<float> per_channel_min;
    std::vector<float> per_channel_max;
    float layer_min = 0.0f;
    float layer_max = 0.0f;

    size_t channels() const { return per_channel_min.size(); }

    void merge(const ChannelStats& o) {
        if (per_channel_min.empty()) {
            *this = o;
            return;
        }
        if (o.channels() != channels()) throw std::invalid_argument("ChannelStats::merge: channel count mismatch");
        for (size_t c = 0; c < channels(); ++c) {
            per_channel_min[c] = std::min(per_channel_min[c], o.per_channel_min[c]);
            per_channel_max[c] = std::max(per_channel_max[c], o.per_channel_max[c]);
        }
        layer_min = std::min(layer_min, o.layer_min);
        layer_max = std::max(layer_max, o.layer_max);
    }
};

inline ChannelStats channel_stats(const Tensor& x) {
    if (x.rank() != 4) throw std::invalid_argument("channel_stats: expected rank-4 NCHW tensor");
    if (x.dtype() != Dtype::F32) throw std::invalid_argument("channel_stats: expected f32 tensor");
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    ChannelStats s;
    s.per_channel_min.assign(static_cast<size_t>(c), std::numeric_limits<float>::max());
    s.per_channel_max.assign(static_cast<size_t>(c), std::numeric_limits<float>::lowest());
    const float* p = x.f().data();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const float* row = p + (b * c + ch) * hw;
            float lo = s.per_channel_min[static_cast<size_t>(ch)];
            float hi = s.per_channel_max[static_cast<size_t>(ch)];
            for (int64_t i = 0; i < hw; ++i) {
                lo = std::min(lo, row[i]);
                hi = std::max(hi, row[i]);
            }
            s.per_channel_min[static_cast<size_t>(ch)] = lo;
            s.per_channel_max[static_cast<size_t>(ch)] = hi;
        }
    s.layer_min = *std::min_element(s.per_channel_min.begin(), s.per_channel_min.end());
    s.layer_max = *std::max_element(s.per_channel_max.begin(), s.per_channel_max.end());
    return s;
}

// Deterministic per-stream RNG: one engine per (seed, stream) pair so adding
// a consumer never shifts another consumer's draws.
inline std::mt19937_64 make_rng(uint64_t seed, uint64_t stream) {
    std::seed_seq seq{seed, stream, uint64_t{0x9e3779b97f4a7c15ull}};
    return std::mt19937_64(seq);
}

// Synthetic inter-channel-variation tensor: channel c is drawn uniform in
// +/- span^(c/(C-1)), which spreads per-channel ranges geometrically from 1
// up to span.
inline Tensor synth_variation(int channels, int spatial, float scale_span, uint64_t seed) {
    if (channels < 1 || spatial < 1) throw std::invalid_argument("synth_variation: non-positive size");
    if (scale_span < 1.0f) throw std::invalid_argument("synth_variation: scale_span must be >= 1");
    if (channels < 2 && scale_span > 1.0f)
        throw std::invalid_argument("synth_variation: need >= 2 channels for a scale spread");
    Tensor t = Tensor::zeros_f32({1, channels, spatial, spatial});
    auto rng = make_rng(seed, /*stream=*/0x5d7a);
    float* p = t.f().data();
    const int64_t hw = int64_t{spatial} * spatial;
    for (int c = 0; c < channels; ++c) {
        const float expo = channels > 1 ? static_cast<float>(c) / static_cast<float>(channels - 1) : 0.0f;
        const float half_range = std::pow(scale_span, expo);
        std::uniform_real_distribution<float> dist(-half_range, half_range);
        for (int64_t i = 0; i < hw; ++i) p[c * hw + i] = dist(rng);
    }
    return t;
}

// ---------------------------------------------------------------------------
// .tqt binary container: "TQT1" magic, u32 LE rank, rank x u32 dims,
// u8 dtype code (0=f32, 1=i8, 2=i32), raw little-endian payload.

namespace detail {
inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("tqt: truncated header");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
}  // namespace detail

inline void save_tensor(const Tensor& t, std::ostream& os) {
    os.write("TQT1", 4);
    detail::put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) detail::put_u32(os, static_cast<uint32_t>(d));
    const uint8_t code = static_cast<uint8_t>(t.dtype());
    os.write(reinterpret_cast<const char*>(&code), 1);
    // Element payloads are written as-is: this code targets little-endian hosts.
    switch (t.dtype()) {
        case Dtype::F32:
            os.write(reinterpret_cast<const char*>(t.f().data()), static_cast<std::streamsize>(t.numel() * 4));
            break;
        case Dtype::I8:
            os.write(reinterpret_cast<const char*>(t.i8().data()), static_cast<std::streamsize>(t.numel()));
            break;
        case Dtype::I32:
            os.write(reinterpret_cast<const char*>(t.i32().data()), static_cast<std::streamsize>(t.numel() * 4));
            break;
    }
    if (!os) throw std::runtime_error("tqt: write failed");
}

inline void save_tensor(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("tqt: cannot open for write: " + path);
    save_tensor(t, os);
}

inline Tensor load_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TQT1", 4) != 0) throw std::runtime_error("tqt: bad magic");
    const uint32_t rank = detail::get_u32(is);
    if (rank > 8) throw std::runtime_error("tqt: implausible rank");
    std::vector<int64_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = detail::get_u32(is);
    uint8_t code = 0;
    is.read(reinterpret_cast<char*>(&code), 1);
    if (!is || code > 2) throw std::runtime_error("tqt: bad dtype code");
    Tensor t(shape, static_cast<Dtype>(code));
    switch (t.dtype()) {
        case Dtype::F32:
            is.read(reinterpret_cast<char*>(t.f().data()), static_cast<std::streamsize>(t.numel() * 4));
            break;
        case Dtype::I8:
            is.read(reinterpret_cast<char*>(t.i8().data()), static_cast<std::streamsize>(t.numel()));
            break;
        case Dtype::I32:
            is.read(reinterpret_cast<char*>(t.i32().data()), static_cast<std::streamsize>(t.numel() * 4));
            break;
    }
    if (!is) throw std::runtime_error("tqt: truncated payload");
    return t;
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("tqt: cannot open: " + path);
    return load_tensor(is);
}

}  // namespace evitq
