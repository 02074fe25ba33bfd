#pragma once

#include <array>
#include <cstdio>
#include <fstream>

#include "cats/aggregator.hpp"
#include "cats/correlation.hpp"
#include "cats/flow.hpp"

namespace cats {

struct EvalMetrics {
    double aepe = 0;
    double pck05 = 0, pck10 = 0, pck15 = 0;
};

// Metrics of one predicted flow against dense ground truth and keypoints.
inline EvalMetrics evaluate_flow(const FlowField& pred, const FlowField& gt,
                                 const KeypointSet& kps) {
    EvalMetrics m;
    m.aepe = double(aepe(pred, gt).item());
    const KeypointSet transferred = transfer_keypoints(pred, kps);
    m.pck05 = pck(transferred, kps, 0.05, pred.h, pred.w);
    m.pck10 = pck(transferred, kps, 0.10, pred.h, pred.w);
    m.pck15 = pck(transferred, kps, 0.15, pred.h, pred.w);
    return m;
}

struct GenConfig {
    std::size_t h = 16, w = 16;
    std::size_t levels = 2;
    std::size_t channels = 16;
    double rot_range_deg = 30.0;
    double scale_min = 0.75, scale_max = 1.33;
    double trans_frac = 0.15;
    double noise_sigma = 0.0;
    double field_scale = 1.0;   // stddev of the coarse field coefficients
    std::size_t lattice = 4;    // coarse-grid cell size of the random fields
    std::size_t keypoints = 20;
    std::uint64_t seed = 0;
};

// A feature pair whose dense correspondence is known in closed form: the
// target is the source resampled under the affine map x_t = A x_s + t (grid
// coordinates, centered), so gt_flow(x_s) = warp(x_s) - x_s exactly.
struct SyntheticPair {
    FeatureStack d_s, d_t;
    FlowField gt_flow;  // on the source grid
    KeypointSet kps;
    std::array<double, 6> warp{};  // row-major 2x3 [a b tx; c d ty]
    double noise_sigma = 0;
    std::uint64_t seed = 0;
};

namespace detail {

inline void apply_warp(const std::array<double, 6>& m, double x, double y, double& ox, double& oy) {
    ox = m[0] * x + m[1] * y + m[2];
    oy = m[3] * x + m[4] * y + m[5];
}

inline std::array<double, 6> invert_warp(const std::array<double, 6>& m) {
    const double det = m[0] * m[4] - m[1] * m[3];
    const double ia = m[4] / det, ib = -m[1] / det, ic = -m[3] / det, id = m[0] / det;
    return {ia, ib, -(ia * m[2] + ib * m[5]), ic, id, -(ic * m[2] + id * m[5])};
}

// Low-frequency random field: N(0,1) coefficients on a coarse lattice,
// bilinearly upsampled. Nearby cells correlate, distant cells do not.
inline Tensor smooth_field(Rng& rng, std::size_t h, std::size_t w, std::size_t c,
                           std::size_t lattice, real scale) {
    const std::size_t gh = std::max<std::size_t>(2, (h + lattice - 1) / lattice + 1);
    const std::size_t gw = std::max<std::size_t>(2, (w + lattice - 1) / lattice + 1);
    Tensor coarse = Tensor::randn({gh, gw, c}, rng, scale);
    return resize_bilinear(coarse, h, w);
}

inline Tensor warp_sample(const Tensor& level, const std::array<double, 6>& inv,
                          std::size_t h, std::size_t w, Rng& rng, real fill_scale) {
    const std::size_t c = level.dim(2);
    Tensor out = Tensor::zeros({h, w, c});
    const real* src = level.data();
    real* dst = out.data();
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double sx, sy;
            apply_warp(inv, double(x), double(y), sx, sy);
            if (sx < 0.0 || sx > double(w - 1) || sy < 0.0 || sy > double(h - 1)) {
                // no source content maps here; fill with unrelated features so
                // every target cell stays distinctive
                for (std::size_t ch = 0; ch < c; ++ch)
                    dst[(y * w + x) * c + ch] = real(rng.normal()) * fill_scale;
                continue;
            }
            const std::size_t x0 = std::min<std::size_t>(std::size_t(sx), w - 1);
            const std::size_t y0 = std::min<std::size_t>(std::size_t(sy), h - 1);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const real fx = real(sx) - real(x0), fy = real(sy) - real(y0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                auto at = [&](std::size_t yy, std::size_t xx) { return src[(yy * w + xx) * c + ch]; };
                const real top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
                const real bot = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
                dst[(y * w + x) * c + ch] = top + fy * (bot - top);
            }
        }
    return out;
}

}  // namespace detail

namespace detail {

inline std::size_t warp_inbounds(const std::array<double, 6>& warp, std::size_t h, std::size_t w,
                                 std::vector<std::uint8_t>& valid) {
    std::size_t inside = 0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double ox, oy;
            apply_warp(warp, double(x), double(y), ox, oy);
            const bool in = ox >= 0.0 && ox <= double(w - 1) && oy >= 0.0 && oy <= double(h - 1);
            valid[y * w + x] = in ? 1 : 0;
            inside += in ? 1 : 0;
        }
    return inside;
}

}  // namespace detail

// Builds the pair for one explicit affine map (grid coordinates, source to
// target); features, noise, and keypoints still come from cfg.seed.
inline SyntheticPair generate_pair_with_warp(const GenConfig& cfg,
                                             const std::array<double, 6>& warp) {
    if (cfg.h < 2 || cfg.w < 2 || cfg.levels == 0 || cfg.channels == 0)
        throw ConfigError("generate_pair: degenerate grid configuration");
    if (std::abs(warp[0] * warp[4] - warp[1] * warp[3]) < 1e-3)
        throw ConfigError("generate_pair: warp is near singular");
    Rng rng(cfg.seed ^ 0x5bf0a8b1c2d3e4f5ULL);

    std::vector<std::uint8_t> valid(cfg.h * cfg.w, 0);
    detail::warp_inbounds(warp, cfg.h, cfg.w, valid);

    SyntheticPair pair;
    pair.warp = warp;
    pair.noise_sigma = cfg.noise_sigma;
    pair.seed = cfg.seed;

    const auto inv = detail::invert_warp(warp);
    for (std::size_t l = 0; l < cfg.levels; ++l) {
        Tensor src = detail::smooth_field(rng, cfg.h, cfg.w, cfg.channels, cfg.lattice,
                                          real(cfg.field_scale));
        Tensor tgt = detail::warp_sample(src, inv, cfg.h, cfg.w, rng, real(cfg.field_scale));
        if (cfg.noise_sigma > 0) {
            real* p = tgt.data();
            for (std::size_t i = 0; i < tgt.numel(); ++i)
                p[i] += real(rng.normal() * cfg.noise_sigma);
        }
        pair.d_s.levels.push_back(src);
        pair.d_t.levels.push_back(tgt);
    }
    pair.d_s.image_id = "synthetic_src_" + std::to_string(cfg.seed);
    pair.d_t.image_id = "synthetic_tgt_" + std::to_string(cfg.seed);

    pair.gt_flow = FlowField::zeros(cfg.h, cfg.w);
    for (std::size_t y = 0; y < cfg.h; ++y)
        for (std::size_t x = 0; x < cfg.w; ++x) {
            double ox, oy;
            detail::apply_warp(warp, double(x), double(y), ox, oy);
            const std::size_t i = y * cfg.w + x;
            pair.gt_flow.vectors.data()[i * 2 + 0] = real(ox - double(x));
            pair.gt_flow.vectors.data()[i * 2 + 1] = real(oy - double(y));
            pair.gt_flow.valid[i] = valid[i];
        }

    // keypoints at distinct valid grid cells
    std::vector<std::size_t> cells;
    for (std::size_t i = 0; i < valid.size(); ++i)
        if (valid[i]) cells.push_back(i);
    for (std::size_t k = cells.size(); k > 1; --k)
        std::swap(cells[k - 1], cells[rng.uniform_index(k)]);
    const std::size_t nk = std::min(cfg.keypoints, cells.size());
    for (std::size_t k = 0; k < nk; ++k) {
        const std::size_t i = cells[k];
        Keypoint kp;
        kp.x_src = real(i % cfg.w);
        kp.y_src = real(i / cfg.w);
        double ox, oy;
        detail::apply_warp(warp, double(kp.x_src), double(kp.y_src), ox, oy);
        kp.x_tgt = real(ox);
        kp.y_tgt = real(oy);
        pair.kps.points.push_back(kp);
    }
    return pair;
}

// Draws rotation/scale/translation within cfg ranges, rejection-resampling
// until at least 80% of the grid stays in bounds and the map is nonsingular.
inline SyntheticPair generate_pair(const GenConfig& cfg) {
    if (cfg.h < 2 || cfg.w < 2 || cfg.levels == 0 || cfg.channels == 0)
        throw ConfigError("generate_pair: degenerate grid configuration");
    Rng rng(cfg.seed ^ 0x7c6e5d4c3b2a1908ULL);
    std::vector<std::uint8_t> valid(cfg.h * cfg.w, 0);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const double rot = rng.uniform(-cfg.rot_range_deg, cfg.rot_range_deg) * M_PI / 180.0;
        const double s = rng.uniform(cfg.scale_min, cfg.scale_max);
        const double tx = rng.uniform(-cfg.trans_frac, cfg.trans_frac) * double(cfg.w - 1);
        const double ty = rng.uniform(-cfg.trans_frac, cfg.trans_frac) * double(cfg.h - 1);
        const double cx = double(cfg.w - 1) / 2.0, cy = double(cfg.h - 1) / 2.0;
        const double a = s * std::cos(rot), b = -s * std::sin(rot);
        const double c = s * std::sin(rot), d = s * std::cos(rot);
        const std::array<double, 6> warp = {a, b, cx + tx - (a * cx + b * cy),
                                            c, d, cy + ty - (c * cx + d * cy)};
        if (std::abs(a * d - b * c) < 1e-3) continue;
        if (detail::warp_inbounds(warp, cfg.h, cfg.w, valid) * 5 < cfg.h * cfg.w * 4) continue;
        return generate_pair_with_warp(cfg, warp);
    }
    throw ConfigError("generate_pair: no acceptable warp after 1000 attempts");
}

// No-aggregation reference: normalized features, raw correlation, transpose
// to source rows, soft-argmax.
inline EvalMetrics wta_baseline(const SyntheticPair& pair, real tau) {
    const std::size_t h = pair.gt_flow.h, w = pair.gt_flow.w;
    const FeatureStack ns = resize_normalize(pair.d_s, h, w);
    const FeatureStack nt = resize_normalize(pair.d_t, h, w);
    const CorrelationStack corr = build_correlation(nt, ns);
    const Tensor rows_source = ops::mean_axis(ops::transpose_last2(corr.maps), 0);
    const FlowField pred = soft_argmax(rows_source, h, w, tau);
    return evaluate_flow(pred, pair.gt_flow, pair.kps);
}

// ---------------------------------------------------------------------------
// Feature file format: magic "CATF", u32 version=1, u32 L, then per level
// u32 h, u32 w, u32 c followed by h*w*c little-endian float32, row-major
// (y, x, channel).

namespace detail {

inline void put_u32(std::ofstream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>((v >> 8) & 0xff),
                                static_cast<unsigned char>((v >> 16) & 0xff),
                                static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::ifstream& in, const std::string& path, std::size_t& offset) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4)
        throw FormatError("load_features: " + path + ": truncated header at byte offset " +
                          std::to_string(offset));
    offset += 4;
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

}  // namespace detail

inline void save_features(const FeatureStack& stack, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_features: cannot open " + path);
    out.write("CATF", 4);
    detail::put_u32(out, 1);
    detail::put_u32(out, std::uint32_t(stack.levels.size()));
    for (const Tensor& level : stack.levels) {
        if (level.rank() != 3) throw DimError("save_features: levels must be [h, w, c]");
        detail::put_u32(out, std::uint32_t(level.dim(0)));
        detail::put_u32(out, std::uint32_t(level.dim(1)));
        detail::put_u32(out, std::uint32_t(level.dim(2)));
        for (const real v : level.values()) {
            const float f = float(v);
            static_assert(sizeof(float) == 4);
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
    }
    if (!out) throw IoError("save_features: write failed for " + path);
}

inline FeatureStack load_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_features: cannot open " + path);
    std::size_t offset = 0;
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::string(magic, 4) != "CATF")
        throw FormatError("load_features: " + path + ": bad magic at byte offset 0");
    offset = 4;
    const std::uint32_t version = detail::get_u32(in, path, offset);
    if (version != 1)
        throw FormatError("load_features: " + path + ": unsupported version " +
                          std::to_string(version) + " at byte offset 4");
    const std::uint32_t levels = detail::get_u32(in, path, offset);
    if (levels == 0)
        throw FormatError("load_features: " + path + ": zero levels at byte offset 8");
    if (levels > 4096)
        throw FormatError("load_features: " + path + ": implausible level count " +
                          std::to_string(levels) + " at byte offset 8");
    FeatureStack stack;
    stack.source_kind = SourceKind::imported;
    stack.image_id = path;
    for (std::uint32_t l = 0; l < levels; ++l) {
        const std::uint32_t h = detail::get_u32(in, path, offset);
        const std::uint32_t w = detail::get_u32(in, path, offset);
        const std::uint32_t c = detail::get_u32(in, path, offset);
        if (h == 0 || w == 0 || c == 0)
            throw FormatError("load_features: " + path + ": zero dimension in level " +
                              std::to_string(l) + " header at byte offset " +
                              std::to_string(offset - 12));
        const std::uint64_t count = std::uint64_t(h) * w * c;
        if (count > (std::uint64_t(1) << 28))
            throw FormatError("load_features: " + path + ": level " + std::to_string(l) +
                              " dimension overflow (" + std::to_string(count) +
                              " scalars) at byte offset " + std::to_string(offset - 12));
        Tensor level = Tensor::zeros({h, w, c});
        std::vector<float> buf(count);
        in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(count * 4));
        if (std::size_t(in.gcount()) != count * 4)
            throw FormatError("load_features: " + path + ": truncated level " + std::to_string(l) +
                              ": expected " + std::to_string(count * 4) + " bytes at offset " +
                              std::to_string(offset) + ", got " + std::to_string(in.gcount()));
        offset += count * 4;
        for (std::size_t i = 0; i < count; ++i) level.data()[i] = real(buf[i]);
        stack.levels.push_back(level);
    }
    return stack;
}

// ---------------------------------------------------------------------------
// Keypoint CSV: header "idx,x_src,y_src,x_tgt,y_tgt", grid-unit coordinates.

inline void save_keypoints(const KeypointSet& kps, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("save_keypoints: cannot open " + path);
    out << "idx,x_src,y_src,x_tgt,y_tgt\n";
    char line[160];
    for (std::size_t i = 0; i < kps.points.size(); ++i) {
        const Keypoint& k = kps.points[i];
        std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", i, double(k.x_src),
                      double(k.y_src), double(k.x_tgt), double(k.y_tgt));
        out << line;
    }
    if (!out) throw IoError("save_keypoints: write failed for " + path);
}

inline KeypointSet load_keypoints(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_keypoints: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "idx,x_src,y_src,x_tgt,y_tgt")
        throw FormatError("load_keypoints: " + path + ": missing or malformed header");
    KeypointSet kps;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t idx;
        double xs, ys, xt, yt;
        if (std::sscanf(line.c_str(), "%zu,%lg,%lg,%lg,%lg", &idx, &xs, &ys, &xt, &yt) != 5)
            throw FormatError("load_keypoints: " + path + ": bad row '" + line + "'");
        kps.points.push_back({real(xs), real(ys), real(xt), real(yt), true});
    }
    return kps;
}

}  // namespace cats
