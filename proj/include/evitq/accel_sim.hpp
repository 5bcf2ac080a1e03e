#pragma once

// Cycle-level performance model of the hybrid accelerator: a MAT engine
// (multipliers + adder tree, input-channel parallel within a lane, output
// channels across lanes), a reconfigurable R-MAC engine (down-forward mode
// for dense work, self-accumulation mode for depthwise), an auxiliary adder
// tree and shifter array for the attention, and L identical cores tiling the
// output pixels.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "evitq/model.hpp"

namespace evitq {

struct SimError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EngineConfig {
    int64_t n = 8;  // R-MACs per R-MAC lane
    int64_t m = 8;  // R-MAC lanes per core
    int64_t t = 8;  // multipliers per MAT lane
    int64_t s = 8;  // MAT lanes per core
    int64_t cores = 16;
    double clock_mhz = 200.0;
    double dram_bytes_per_cycle = std::numeric_limits<double>::infinity();
    int dsp_pack = 2;
    int64_t phase_switch = 2;     // stride-2 odd/even weight reload, per row group
    int64_t requant_latency = 4;  // requant/log2 module pipeline depth per tile
    int64_t shifters_per_core = 8;

    int64_t total_multipliers() const { return (n * m + t * s) * cores; }
    int64_t dsp_count() const { return total_multipliers() / dsp_pack; }
    double peak_gops() const { return static_cast<double>(total_multipliers()) * 2.0 * clock_mhz * 1e6 / 1e9; }

    void validate() const {
        if (n <= 0 || m <= 0 || t <= 0 || s <= 0 || cores <= 0 || clock_mhz <= 0 || dsp_pack <= 0)
            throw SimError("engine config values must be positive");
    }
};

namespace simd {

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }
inline int64_t clog2(int64_t v) {
    int64_t c = 0;
    while ((int64_t{1} << c) < v) ++c;
    return c;
}

}  // namespace simd

// ---------------------------------------------------------------------------
// Closed-form single-core cycle counts.

// Dense work on the MAT engine: a lane reduces ceil(C_in k^2 / T) operand
// groups per output, S lanes cover output channels, plus one adder-tree fill.
inline int64_t cycles_mat(const LayerSpec& l, const EngineConfig& cfg, int64_t pixels = -1,
                          int64_t out_channels = -1) {
    if (l.kind == LayerKind::DWConv)
        throw SimError("depthwise conv is not routable to the MAT engine (layer " + l.name + ")");
    if (!l.is_conv_like()) throw SimError("layer kind not routable to MAT: " + l.name);
    const int64_t p = pixels < 0 ? l.out_pixels() : pixels;
    const int64_t cout = out_channels < 0 ? l.out_channels : out_channels;
    const int64_t cin_taps = (l.in_channels / l.groups) * l.kernel * l.kernel;
    if (p == 0 || cout == 0) return 0;
    return simd::ceil_div(cin_taps, cfg.t) * simd::ceil_div(cout, cfg.s) * p + simd::clog2(cfg.t);
}

// Dense work on the R-MAC engine in down-forward mode: same structure with
// (N, M) in place of (T, S).
inline int64_t cycles_rmac_dense(const LayerSpec& l, const EngineConfig& cfg, int64_t pixels = -1,
                                 int64_t out_channels = -1) {
    if (l.kind == LayerKind::DWConv)
        throw SimError("depthwise conv uses self-accumulation, not down-forward mode (layer " + l.name + ")");
    if (!l.is_conv_like()) throw SimError("layer kind not routable to R-MAC: " + l.name);
    const int64_t p = pixels < 0 ? l.out_pixels() : pixels;
    const int64_t cout = out_channels < 0 ? l.out_channels : out_channels;
    const int64_t cin_taps = (l.in_channels / l.groups) * l.kernel * l.kernel;
    if (p == 0 || cout == 0) return 0;
    return simd::ceil_div(cin_taps, cfg.n) * simd::ceil_div(cout, cfg.m) * p + simd::clog2(cfg.n);
}

// Depthwise rows on the R-MAC engine in self-accumulation mode: N R-MACs per
// lane cover channels, M lanes cover consecutive output pixels of a row, K^2
// weight taps stream per row group; stride 2 pays a phase switch per group.
inline int64_t cycles_rmac_dw(const LayerSpec& l, const EngineConfig& cfg, int64_t rows = -1) {
    if (l.kind != LayerKind::DWConv) throw SimError("cycles_rmac_dw requires a depthwise layer: " + l.name);
    if (l.kernel != 3 && l.kernel != 5) throw SimError("unsupported depthwise kernel in " + l.name);
    if (l.stride != 1 && l.stride != 2) throw SimError("unsupported depthwise stride in " + l.name);
    const int64_t r = rows < 0 ? l.h_out : rows;
    const int64_t groups = simd::ceil_div(l.out_channels, cfg.n) * r * simd::ceil_div(l.w_out, cfg.m);
    int64_t cycles = groups * l.kernel * l.kernel;
    if (l.stride == 2) cycles += cfg.phase_switch * groups;
    return cycles;
}

// Pixel split between the MAT and R-MAC engines working jointly on one dense
// layer: balance so both finish together.
struct JointSplit {
    int64_t pixels_mat = 0;
    int64_t pixels_rmac = 0;
    int64_t cycles = 0;
};

inline JointSplit joint_dense_split(const LayerSpec& l, const EngineConfig& cfg, int64_t pixels,
                                    int64_t out_channels = -1) {
    JointSplit best;
    best.cycles = std::numeric_limits<int64_t>::max();
    if (pixels == 0) return JointSplit{0, 0, 0};
    const int64_t cin_taps = (l.in_channels / l.groups) * l.kernel * l.kernel;
    const int64_t cout = out_channels < 0 ? l.out_channels : out_channels;
    const int64_t ppc_m = simd::ceil_div(cin_taps, cfg.t) * simd::ceil_div(cout, cfg.s);
    const int64_t ppc_r = simd::ceil_div(cin_taps, cfg.n) * simd::ceil_div(cout, cfg.m);
    const int64_t balance = (pixels * ppc_r) / (ppc_m + ppc_r);
    for (int64_t p = std::max<int64_t>(balance - 1, 0); p <= std::min(pixels, balance + 2); ++p) {
        const int64_t cm = p > 0 ? ppc_m * p + simd::clog2(cfg.t) : 0;
        const int64_t cr = pixels - p > 0 ? ppc_r * (pixels - p) + simd::clog2(cfg.n) : 0;
        const int64_t c = std::max(cm, cr);
        if (c < best.cycles) best = JointSplit{p, pixels - p, c};
    }
    return best;
}

// ---------------------------------------------------------------------------
// Event-driven single-core simulations. These walk the dataflow explicitly
// (operand group issues, pipeline drain, shift-register phases) and are the
// oracle the closed forms are checked against.

inline int64_t event_sim_mat(const LayerSpec& l, const EngineConfig& cfg, int64_t pixels = -1,
                             int64_t out_channels = -1) {
    if (l.kind == LayerKind::DWConv) throw SimError("event_sim_mat: depthwise not routable");
    const int64_t p = pixels < 0 ? l.out_pixels() : pixels;
    const int64_t cout = out_channels < 0 ? l.out_channels : out_channels;
    if (p == 0 || cout == 0) return 0;
    const int64_t cin_taps = (l.in_channels / l.groups) * l.kernel * l.kernel;
    const int64_t tree_depth = simd::clog2(cfg.t);
    int64_t cycle = 0;
    int64_t last_issue = -1;
    for (int64_t px = 0; px < p; ++px) {
        for (int64_t og = 0; og < cout; og += cfg.s) {
            // one accumulation chain: stream input-channel groups into the
            // lane, one group per cycle
            for (int64_t ig = 0; ig < cin_taps; ig += cfg.t) {
                last_issue = cycle;
                ++cycle;
            }
        }
    }
    // adder tree drains after the final issue; earlier chains overlap the
    // pipeline, so only one fill is visible.
    return last_issue + 1 + tree_depth;
}

inline int64_t event_sim_rmac_dense(const LayerSpec& l, const EngineConfig& cfg, int64_t pixels = -1,
                                    int64_t out_channels = -1) {
    if (l.kind == LayerKind::DWConv) throw SimError("event_sim_rmac_dense: depthwise not routable");
    const int64_t p = pixels < 0 ? l.out_pixels() : pixels;
    const int64_t cout = out_channels < 0 ? l.out_channels : out_channels;
    if (p == 0 || cout == 0) return 0;
    const int64_t cin_taps = (l.in_channels / l.groups) * l.kernel * l.kernel;
    const int64_t chain_depth = simd::clog2(cfg.n);
    int64_t cycle = 0;
    int64_t last_issue = -1;
    for (int64_t px = 0; px < p; ++px)
        for (int64_t og = 0; og < cout; og += cfg.m)
            for (int64_t ig = 0; ig < cin_taps; ig += cfg.n) {
                last_issue = cycle;
                ++cycle;
            }
    return last_issue + 1 + chain_depth;
}

inline int64_t event_sim_rmac_dw(const LayerSpec& l, const EngineConfig& cfg, int64_t rows = -1) {
    if (l.kind != LayerKind::DWConv) throw SimError("event_sim_rmac_dw: depthwise layer required");
    const int64_t r = rows < 0 ? l.h_out : rows;
    const int64_t k = l.kernel;
    int64_t cycle = 0;
    for (int64_t cg = 0; cg < l.out_channels; cg += cfg.n)
        for (int64_t row = 0; row < r; ++row)
            for (int64_t colg = 0; colg < l.w_out; colg += cfg.m) {
                // M output pixels accumulate K^2 taps in their psum registers
                int64_t taps = 0;
                if (l.stride == 1) {
                    for (int64_t krow = 0; krow < k; ++krow)
                        for (int64_t kw = 0; kw < k; ++kw) {
                            ++taps;
                            ++cycle;
                        }
                } else {
                    // odd-column phase first, then the even phase after a
                    // weight re-broadcast
                    for (int64_t krow = 0; krow < k; ++krow)
                        for (int64_t kw = 0; kw < k; kw += 2) {
                            ++taps;
                            ++cycle;
                        }
                    cycle += cfg.phase_switch;
                    for (int64_t krow = 0; krow < k; ++krow)
                        for (int64_t kw = 1; kw < k; kw += 2) {
                            ++taps;
                            ++cycle;
                        }
                }
                if (taps != k * k) throw SimError("event_sim_rmac_dw: psum accumulation mismatch");
            }
    return cycle;
}

// ---------------------------------------------------------------------------
// Tile timelines.

enum class Engine { MAT, RMAC, AdderTree, ShifterArray, Joint };

inline const char* engine_name(Engine e) {
    switch (e) {
        case Engine::MAT: return "mat";
        case Engine::RMAC: return "rmac";
        case Engine::AdderTree: return "adder_tree";
        case Engine::ShifterArray: return "shifter";
        case Engine::Joint: return "mat+rmac";
    }
    return "?";
}

struct TileOp {
    Engine engine = Engine::MAT;
    std::string label;
    double start = 0;
    double finish = 0;
    double dep_ready = 0;  // latest dependency completion (+ pipeline latency)
};

struct Timeline {
    std::vector<TileOp> tiles;
    double makespan = 0;
    double serial = 0;
    int64_t violations = 0;
    double mat_busy = 0;
    double rmac_busy = 0;
    double adder_busy = 0;
    double shifter_busy = 0;

    void audit() {
        violations = 0;
        for (const TileOp& t : tiles)
            if (t.start + 1e-9 < t.dep_ready || t.finish + 1e-9 < t.start) ++violations;
    }
};

namespace detail_sim {

// Per-core pixel/channel split: pixels tile across cores; when there are
// fewer pixels than cores the spare cores split the output channels.
struct CoreShare {
    int64_t pixels = 0;
    int64_t out_channels = 0;
};

inline CoreShare core_share(int64_t pixels, int64_t out_channels, const EngineConfig& cfg) {
    CoreShare sh;
    if (pixels >= cfg.cores) {
        sh.pixels = simd::ceil_div(pixels, cfg.cores);
        sh.out_channels = out_channels;
    } else {
        const int64_t pixel_groups = std::max<int64_t>(pixels, 1);
        const int64_t chan_groups = std::max<int64_t>(cfg.cores / pixel_groups, 1);
        sh.pixels = 1;
        sh.out_channels = simd::ceil_div(out_channels, chan_groups);
    }
    return sh;
}

inline int64_t dense_joint_cycles(const LayerSpec& l, const EngineConfig& cfg) {
    const CoreShare sh = core_share(l.out_pixels(), l.out_channels, cfg);
    return joint_dense_split(l, cfg, sh.pixels, sh.out_channels).cycles;
}

// Depthwise tiling across cores at (row x channel-group) granularity: each
// tile streams ceil(W/M) column groups of K^2 taps through one core's R-MAC
// lanes.
struct DwTiling {
    int64_t groups = 0;      // ceil(C/N)
    int64_t tile_cost = 0;   // cycles per (row, group) tile
    int64_t tiles = 0;
    int64_t chip_cycles = 0; // makespan over L cores

    // completion cycle (relative to the dw start) of output row r: the wave
    // that finishes its last channel-group tile, row-major tile order
    int64_t row_done(int64_t r, const EngineConfig& cfg) const {
        const int64_t last_tile = (r + 1) * groups - 1;
        return (last_tile / cfg.cores + 1) * tile_cost;
    }
};

inline DwTiling dw_tiling(const LayerSpec& l, const EngineConfig& cfg) {
    DwTiling t;
    t.groups = simd::ceil_div(l.out_channels, cfg.n);
    t.tile_cost = cycles_rmac_dw(l, cfg, 1) / t.groups;
    t.tiles = t.groups * l.h_out;
    t.chip_cycles = simd::ceil_div(t.tiles, cfg.cores) * t.tile_cost;
    return t;
}

inline int64_t dw_core_cycles(const LayerSpec& l, const EngineConfig& cfg) {
    return dw_tiling(l, cfg).chip_cycles;
}

}  // namespace detail_sim

// Inter-layer pipeline for an inverted-bottleneck block: the depthwise conv
// streams rows out of the R-MAC engine; finished rows feed the following
// pointwise conv on the idle MAT engine, and once the depthwise work drains
// the R-MAC engine joins in.
inline Timeline schedule_inter_layer(const Block& blk, const EngineConfig& cfg) {
    cfg.validate();
    const Layer* pw1 = nullptr;
    const Layer* dw = nullptr;
    const Layer* pw2 = nullptr;
    for (const Layer& l : blk.layers) {
        if (l.spec.kind == LayerKind::DWConv && !dw) dw = &l;
        else if (l.spec.kind == LayerKind::PWConv && !dw) pw1 = &l;
        else if (l.spec.kind == LayerKind::PWConv && dw && !pw2) pw2 = &l;
    }
    if (!dw || !pw2) throw SimError("schedule_inter_layer: block lacks a dw->pw pair: " + blk.name);

    Timeline tl;
    double t = 0;
    if (pw1) {
        const double d = static_cast<double>(detail_sim::dense_joint_cycles(pw1->spec, cfg));
        tl.tiles.push_back({Engine::Joint, pw1->spec.name, 0, d, 0});
        tl.mat_busy += d;
        tl.rmac_busy += d;
        t = d;
    }

    // Depthwise tiles at (row x channel-group) granularity across the cores.
    const int64_t rows = dw->spec.h_out;
    const detail_sim::DwTiling dwt = detail_sim::dw_tiling(dw->spec, cfg);
    const double dw_end = t + static_cast<double>(dwt.chip_cycles);
    std::vector<double> row_avail(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double done = t + static_cast<double>(dwt.row_done(r, cfg));
        row_avail[static_cast<size_t>(r)] = done + static_cast<double>(cfg.requant_latency);
        for (int64_t gidx = 0; gidx < dwt.groups; ++gidx) {
            const int64_t tile = r * dwt.groups + gidx;
            const double start = t + static_cast<double>((tile / cfg.cores) * dwt.tile_cost);
            tl.tiles.push_back({Engine::RMAC,
                                dw->spec.name + ".r" + std::to_string(r) + ".g" + std::to_string(gidx), start,
                                start + static_cast<double>(dwt.tile_cost), t});
        }
    }
    tl.rmac_busy += static_cast<double>(dwt.chip_cycles);

    // Pointwise consumption: the MAT engine drains rows as they land, the
    // R-MAC engine joins once the depthwise stream ends.
    const int64_t p_total = pw2->spec.out_pixels();
    const int64_t w_out = pw2->spec.w_out;
    const int64_t cin_taps = pw2->spec.in_channels;
    const int64_t ppc_m = simd::ceil_div(cin_taps, cfg.t) * simd::ceil_div(pw2->spec.out_channels, cfg.s);
    const int64_t ppc_r = simd::ceil_div(cin_taps, cfg.n) * simd::ceil_div(pw2->spec.out_channels, cfg.m);
    const double rate_mat = static_cast<double>(cfg.cores) / static_cast<double>(ppc_m);
    const double rate_joint = rate_mat + static_cast<double>(cfg.cores) / static_cast<double>(ppc_r);
    const double lat = static_cast<double>(cfg.requant_latency);

    double now = row_avail[0];
    double consumed = 0;
    double released = 0;
    double mat_pw2 = 0, rmac_pw2 = 0;
    int64_t next_row = 0;
    while (consumed + 1e-9 < static_cast<double>(p_total)) {
        while (next_row < rows && row_avail[static_cast<size_t>(next_row)] <= now + 1e-9) {
            released += static_cast<double>(w_out);
            tl.tiles.push_back({Engine::MAT, pw2->spec.name + ".row" + std::to_string(next_row),
                                std::max(now, row_avail[static_cast<size_t>(next_row)]), 0,
                                row_avail[static_cast<size_t>(next_row)]});
            ++next_row;
        }
        const bool joint = next_row >= rows && now + 1e-9 >= dw_end + lat;
        const double rate = joint ? rate_joint : rate_mat;
        const double avail = released - consumed;
        const double next_event = next_row < rows ? row_avail[static_cast<size_t>(next_row)]
                                                  : std::numeric_limits<double>::infinity();
        if (avail <= 1e-9) {
            now = next_event;  // starved until the next row lands
            continue;
        }
        const double finish_avail = now + avail / rate;
        const double stop = std::min(finish_avail, next_event);
        const double dt = stop - now;
        consumed += rate * dt;
        mat_pw2 += dt;
        if (joint) rmac_pw2 += dt;
        now = stop;
    }
    for (TileOp& tile : tl.tiles)
        if (tile.finish == 0 && tile.engine == Engine::MAT) tile.finish = now;
    tl.mat_busy += mat_pw2;
    tl.rmac_busy += rmac_pw2;

    tl.makespan = std::ceil(now);
    const double serial_pw1 = pw1 ? static_cast<double>(detail_sim::dense_joint_cycles(pw1->spec, cfg)) : 0.0;
    tl.serial = serial_pw1 + static_cast<double>(dwt.chip_cycles) +
                static_cast<double>(detail_sim::dense_joint_cycles(pw2->spec, cfg));
    tl.audit();
    return tl;
}

// Intra-layer pipeline for the attention: per head, step i streams on the
// R-MAC engine while the adder tree forms the key token-sum; the MAT engine
// runs steps iv then iii for the previous head; the shifter array performs
// step v as dividends retire. After the last step-i tile the R-MAC engine
// joins the dense steps.
inline Timeline schedule_intra_layer(const Block& blk, const EngineConfig& cfg) {
    cfg.validate();
    if (blk.type != BlockType::MSA) throw SimError("schedule_intra_layer: MSA block required: " + blk.name);
    const LayerSpec& attn = blk.layers[2].spec;
    const int64_t heads = attn.heads;
    const int64_t d = attn.head_dim;
    const int64_t n_tok = attn.tokens();
    const double lat = static_cast<double>(cfg.requant_latency);

    LayerSpec step_i;  // (d x N) x (N x d) per head
    step_i.kind = LayerKind::MatMul;
    step_i.in_channels = n_tok;
    step_i.out_channels = d;
    step_i.h_out = 1;
    step_i.w_out = 1;
    LayerSpec step_iii;  // (N x d) x (d x d)
    step_iii.kind = LayerKind::MatMul;
    step_iii.in_channels = d;
    step_iii.out_channels = d;
    LayerSpec step_iv;  // (N x d) x (d x 1)
    step_iv.kind = LayerKind::MatMul;
    step_iv.in_channels = d;
    step_iv.out_channels = 1;

    const auto sh_i = detail_sim::core_share(d, d, cfg);
    const double dur_i = static_cast<double>(cycles_rmac_dense(step_i, cfg, sh_i.pixels, sh_i.out_channels));
    const auto sh_tok = detail_sim::core_share(n_tok, d, cfg);
    const double dur_iii_mat = static_cast<double>(cycles_mat(step_iii, cfg, sh_tok.pixels, sh_tok.out_channels));
    const double dur_iii_rmac =
        static_cast<double>(cycles_rmac_dense(step_iii, cfg, sh_tok.pixels, sh_tok.out_channels));
    const auto sh_tok1 = detail_sim::core_share(n_tok, 1, cfg);
    const double dur_iv_mat = static_cast<double>(cycles_mat(step_iv, cfg, sh_tok1.pixels, sh_tok1.out_channels));
    const double dur_iv_rmac =
        static_cast<double>(cycles_rmac_dense(step_iv, cfg, sh_tok1.pixels, sh_tok1.out_channels));
    // step ii standalone cost (only charged in the serial baseline; it streams
    // for free alongside step i) and step v on the shifter array
    const double dur_ii = std::ceil(static_cast<double>(n_tok * d) /
                                    static_cast<double>(cfg.t * cfg.cores));
    const double dur_v = std::ceil(static_cast<double>(n_tok * d) /
                                   static_cast<double>(cfg.shifters_per_core * cfg.cores));

    Timeline tl;
    // R-MAC streams step i for every head back to back.
    std::vector<double> i_done(static_cast<size_t>(heads));
    double rmac_free = 0;
    for (int64_t h = 0; h < heads; ++h) {
        tl.tiles.push_back({Engine::RMAC, "head" + std::to_string(h) + ".i", rmac_free, rmac_free + dur_i, rmac_free});
        // adder tree finishes the token sum exactly when the last key column streams
        tl.tiles.push_back(
            {Engine::AdderTree, "head" + std::to_string(h) + ".ii", rmac_free, rmac_free + dur_i, rmac_free});
        rmac_free += dur_i;
        i_done[static_cast<size_t>(h)] = rmac_free;
        tl.rmac_busy += dur_i;
        tl.adder_busy += dur_i;
    }
    const double all_i_done = rmac_free;

    // Dense steps iv then iii per head, on MAT, with the R-MAC engine joining
    // once its stream is finished. Greedy head-ordered dispatch.
    double mat_free = 0;
    double rmac_dense_free = all_i_done;
    double shifter_free = 0;
    double last_iii = 0;
    for (int64_t h = 0; h < heads; ++h) {
        const double ready = i_done[static_cast<size_t>(h)] + lat;
        // step iv
        double start_mat = std::max(mat_free, ready);
        double start_rmac = std::max(rmac_dense_free, ready);
        bool use_rmac = start_rmac + dur_iv_rmac < start_mat + dur_iv_mat;
        double start = use_rmac ? start_rmac : start_mat;
        double dur = use_rmac ? dur_iv_rmac : dur_iv_mat;
        tl.tiles.push_back(
            {use_rmac ? Engine::RMAC : Engine::MAT, "head" + std::to_string(h) + ".iv", start, start + dur, ready});
        (use_rmac ? rmac_dense_free : mat_free) = start + dur;
        (use_rmac ? tl.rmac_busy : tl.mat_busy) += dur;
        const double iv_done = start + dur;
        // step iii
        start_mat = std::max(mat_free, ready);
        start_rmac = std::max(rmac_dense_free, ready);
        use_rmac = start_rmac + dur_iii_rmac < start_mat + dur_iii_mat;
        start = use_rmac ? start_rmac : start_mat;
        dur = use_rmac ? dur_iii_rmac : dur_iii_mat;
        tl.tiles.push_back(
            {use_rmac ? Engine::RMAC : Engine::MAT, "head" + std::to_string(h) + ".iii", start, start + dur, ready});
        (use_rmac ? rmac_dense_free : mat_free) = start + dur;
        (use_rmac ? tl.rmac_busy : tl.mat_busy) += dur;
        const double iii_done = start + dur;
        last_iii = std::max(last_iii, iii_done);
        // step v consumes the dividends once the divisor exponents are ready
        const double v_ready = std::max(iii_done, iv_done) + lat;
        const double v_start = std::max(shifter_free, v_ready);
        tl.tiles.push_back({Engine::ShifterArray, "head" + std::to_string(h) + ".v", v_start, v_start + dur_v, v_ready});
        shifter_free = v_start + dur_v;
        tl.shifter_busy += dur_v;
    }

    tl.makespan = std::ceil(shifter_free);
    tl.serial = static_cast<double>(heads) * (dur_i + dur_ii + dur_iv_mat + dur_iii_mat + dur_v);
    tl.audit();
    return tl;
}

// ---------------------------------------------------------------------------
// Whole-model simulation.

struct LayerSim {
    std::string name;
    LayerKind kind = LayerKind::PWConv;
    std::string engine;
    int64_t cycles = 0;      // standalone (serial) cost
    int64_t macs = 0;
    double utilization = 0;  // macs / (cycles * multipliers engaged)
    int64_t padding_waste = 0;
};

struct SimReport {
    EngineConfig cfg;
    std::string model;
    std::vector<LayerSim> layers;
    int64_t total_cycles = 0;
    int64_t serial_cycles = 0;
    int64_t overlap_saved_cycles = 0;
    int64_t total_macs = 0;
    double latency_ms = 0;
    double fps = 0;
    double gops = 0;
    int64_t dsp = 0;
    double gops_per_dsp = 0;
    double mat_busy = 0, rmac_busy = 0, adder_busy = 0, shifter_busy = 0;
    double mat_utilization = 0, rmac_utilization = 0;
    int64_t dependency_violations = 0;
};

namespace detail_sim {

inline int64_t layer_bytes(const LayerSpec& l) {
    const int64_t in_px = l.h_in * l.w_in;
    const int64_t weights = l.is_conv_like() ? (l.in_channels / l.groups) * l.out_channels * l.kernel * l.kernel : 0;
    return in_px * l.in_channels + weights + l.out_pixels() * l.out_channels;
}

inline int64_t apply_bandwidth(int64_t cycles, int64_t bytes, const EngineConfig& cfg) {
    if (!std::isfinite(cfg.dram_bytes_per_cycle)) return cycles;
    const double mem = static_cast<double>(bytes) / cfg.dram_bytes_per_cycle;
    return std::max<int64_t>(cycles, static_cast<int64_t>(std::ceil(mem)));
}

inline LayerSim dense_layer_sim(const LayerSpec& l, const EngineConfig& cfg) {
    LayerSim ls;
    ls.name = l.name;
    ls.kind = l.kind;
    ls.engine = engine_name(Engine::Joint);
    ls.macs = l.macs();
    ls.cycles = apply_bandwidth(dense_joint_cycles(l, cfg), layer_bytes(l), cfg);
    const double denom = static_cast<double>(ls.cycles) *
                         static_cast<double>((cfg.t * cfg.s + cfg.n * cfg.m) * cfg.cores);
    ls.utilization = denom > 0 ? static_cast<double>(ls.macs) / denom : 0;
    ls.padding_waste = static_cast<int64_t>(denom) - ls.macs;
    return ls;
}

inline LayerSim dw_layer_sim(const LayerSpec& l, const EngineConfig& cfg) {
    LayerSim ls;
    ls.name = l.name;
    ls.kind = l.kind;
    ls.engine = engine_name(Engine::RMAC);
    ls.macs = l.macs();
    ls.cycles = apply_bandwidth(dw_core_cycles(l, cfg), layer_bytes(l), cfg);
    const double denom = static_cast<double>(ls.cycles) * static_cast<double>(cfg.n * cfg.m * cfg.cores);
    ls.utilization = denom > 0 ? static_cast<double>(ls.macs) / denom : 0;
    ls.padding_waste = static_cast<int64_t>(denom) - ls.macs;
    return ls;
}

}  // namespace detail_sim

inline SimReport simulate(const ModelGraph& g, const EngineConfig& cfg) {
    cfg.validate();
    SimReport rep;
    rep.cfg = cfg;
    rep.model = g.name;
    double total = 0, serial_total = 0;

    for (const Block& blk : g.blocks) {
        // Standalone per-layer records (serial view) and routing validation.
        std::vector<LayerSim> blk_layers;
        for (const Layer& l : blk.layers) {
            switch (l.spec.kind) {
                case LayerKind::GenericConv:
                case LayerKind::PWConv:
                case LayerKind::MatMul:
                    blk_layers.push_back(detail_sim::dense_layer_sim(l.spec, cfg));
                    break;
                case LayerKind::DWConv:
                    blk_layers.push_back(detail_sim::dw_layer_sim(l.spec, cfg));
                    break;
                case LayerKind::AttnCombine:
                case LayerKind::GlobalAvgPool:
                case LayerKind::ReLU:
                case LayerKind::Hswish:
                    break;  // handled below / hidden in requant pipeline
                default:
                    throw SimError("unroutable layer kind in layer " + l.spec.name);
            }
        }

        double blk_serial = 0;
        for (const LayerSim& ls : blk_layers) blk_serial += static_cast<double>(ls.cycles);
        double blk_cycles = blk_serial;

        if (blk.type == BlockType::MBConv || blk.type == BlockType::DSConv) {
            Timeline tl = schedule_inter_layer(blk, cfg);
            rep.dependency_violations += tl.violations;
            blk_cycles = tl.makespan;
            blk_serial = tl.serial;
            rep.mat_busy += tl.mat_busy;
            rep.rmac_busy += tl.rmac_busy;
        } else if (blk.type == BlockType::MSA) {
            Timeline tl = schedule_intra_layer(blk, cfg);
            rep.dependency_violations += tl.violations;
            // qkv and aggregation serialize ahead of the attention steps; the
            // projection follows.
            const LayerSim& qkv = blk_layers[0];
            const LayerSim& agg = blk_layers[1];
            const LayerSim& proj = blk_layers[2];
            blk_cycles = static_cast<double>(qkv.cycles + agg.cycles + proj.cycles) + tl.makespan;
            blk_serial = static_cast<double>(qkv.cycles + agg.cycles + proj.cycles) + tl.serial;
            rep.mat_busy += tl.mat_busy + static_cast<double>(qkv.cycles + proj.cycles);
            rep.rmac_busy += tl.rmac_busy + static_cast<double>(qkv.cycles + agg.cycles + proj.cycles);
            rep.adder_busy += tl.adder_busy;
            rep.shifter_busy += tl.shifter_busy;
            LayerSim attn_ls;
            attn_ls.name = blk.layers[2].spec.name;
            attn_ls.kind = LayerKind::AttnCombine;
            attn_ls.engine = "mat+rmac+aux";
            attn_ls.macs = blk.layers[2].spec.macs();
            attn_ls.cycles = static_cast<int64_t>(tl.makespan);
            blk_layers.insert(blk_layers.begin() + 2, attn_ls);
        } else {
            for (const LayerSim& ls : blk_layers) {
                if (ls.engine == engine_name(Engine::Joint)) {
                    rep.mat_busy += static_cast<double>(ls.cycles);
                    rep.rmac_busy += static_cast<double>(ls.cycles);
                } else {
                    rep.rmac_busy += static_cast<double>(ls.cycles);
                }
            }
        }

        if (blk.type == BlockType::MBConv || blk.type == BlockType::DSConv) {
            int64_t bytes = 0;
            for (const Layer& l : blk.layers) bytes += detail_sim::layer_bytes(l.spec);
            blk_cycles = static_cast<double>(detail_sim::apply_bandwidth(
                static_cast<int64_t>(std::ceil(blk_cycles)), bytes, cfg));
        }

        total += blk_cycles;
        serial_total += blk_serial;
        for (LayerSim& ls : blk_layers) rep.layers.push_back(std::move(ls));
    }

    rep.total_cycles = static_cast<int64_t>(std::ceil(total));
    rep.serial_cycles = static_cast<int64_t>(std::ceil(serial_total));
    rep.overlap_saved_cycles = rep.serial_cycles - rep.total_cycles;
    OpCensus census = op_census(g);
    rep.total_macs = census.total();
    rep.latency_ms = static_cast<double>(rep.total_cycles) / (cfg.clock_mhz * 1e3);
    rep.fps = rep.latency_ms > 0 ? 1000.0 / rep.latency_ms : 0;
    rep.gops = rep.latency_ms > 0 ? 2.0 * static_cast<double>(rep.total_macs) / (rep.latency_ms * 1e6) : 0;
    rep.dsp = cfg.dsp_count();
    rep.gops_per_dsp = rep.dsp > 0 ? rep.gops / static_cast<double>(rep.dsp) : 0;
    rep.mat_utilization = rep.total_cycles > 0 ? rep.mat_busy / static_cast<double>(rep.total_cycles) : 0;
    rep.rmac_utilization = rep.total_cycles > 0 ? rep.rmac_busy / static_cast<double>(rep.total_cycles) : 0;
    if (rep.gops > cfg.peak_gops() + 1e-6)
        throw SimError("simulated throughput exceeds the configured peak");
    return rep;
}

inline nlohmann::json report_to_json(const SimReport& r) {
    nlohmann::json j;
    j["model"] = r.model;
    j["config"] = {{"N", r.cfg.n},           {"M", r.cfg.m},
                   {"T", r.cfg.t},           {"S", r.cfg.s},
                   {"L", r.cfg.cores},       {"clock_mhz", r.cfg.clock_mhz},
                   {"dsp_pack", r.cfg.dsp_pack},
                   {"dram_bytes_per_cycle", std::isfinite(r.cfg.dram_bytes_per_cycle)
                                                ? nlohmann::json(r.cfg.dram_bytes_per_cycle)
                                                : nlohmann::json("inf")}};
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerSim& ls : r.layers)
        layers.push_back({{"name", ls.name},
                          {"kind", kind_name(ls.kind)},
                          {"engine", ls.engine},
                          {"cycles", ls.cycles},
                          {"macs", ls.macs},
                          {"utilization", ls.utilization},
                          {"padding_waste", ls.padding_waste}});
    j["per_layer"] = std::move(layers);
    j["totals"] = {{"cycles", r.total_cycles},
                   {"serial_cycles", r.serial_cycles},
                   {"overlap_saved_cycles", r.overlap_saved_cycles},
                   {"macs", r.total_macs},
                   {"latency_ms", r.latency_ms},
                   {"fps", r.fps},
                   {"gops", r.gops},
                   {"dsp", r.dsp},
                   {"gops_per_dsp", r.gops_per_dsp},
                   {"dependency_violations", r.dependency_violations},
                   {"engine_busy",
                    {{"mat", r.mat_busy}, {"rmac", r.rmac_busy}, {"adder_tree", r.adder_busy},
                     {"shifter", r.shifter_busy}}}};
    return j;
}

}  // namespace evitq
