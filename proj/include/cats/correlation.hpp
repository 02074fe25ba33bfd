#pragma once

#include <string>

#include "cats/ops.hpp"

namespace cats {

enum class SourceKind { synthetic, imported };

// Multi-level feature maps for one image; level l is [h_l, w_l, c_l].
struct FeatureStack {
    std::vector<Tensor> levels;
    std::string image_id;
    SourceKind source_kind = SourceKind::synthetic;

    std::size_t level_count() const { return levels.size(); }
};

enum class CorrOrientation { rows_target, rows_source };

// Stack of pairwise similarity maps, maps[l](i, j). For rows_target the row
// index i walks target positions; after the swapped pass rows index source
// positions. The tag travels with the data so a transpose cannot go missing.
struct CorrelationStack {
    Tensor maps;  // [L, hw, hw]
    CorrOrientation orientation = CorrOrientation::rows_target;
    std::size_t h = 0, w = 0;
};

// Bilinear resample of one [h, w, c] level to [oh, ow, c]; corner pixels map
// to corner pixels.
inline Tensor resize_bilinear(const Tensor& level, std::size_t oh, std::size_t ow) {
    if (level.rank() != 3) throw DimError("resize_bilinear: level must be [h, w, c]");
    if (oh == 0 || ow == 0) throw DimError("resize_bilinear: empty target size");
    const std::size_t h = level.dim(0), w = level.dim(1), c = level.dim(2);
    if (h == oh && w == ow) return level;
    Tensor out = Tensor::zeros({oh, ow, c});
    const real sy = oh > 1 ? real(h - 1) / real(oh - 1) : real(0);
    const real sx = ow > 1 ? real(w - 1) / real(ow - 1) : real(0);
    const real* src = level.data();
    real* dst = out.data();
    for (std::size_t oy = 0; oy < oh; ++oy) {
        const real y = real(oy) * sy;
        const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(y), h - 1);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const real fy = y - real(y0);
        for (std::size_t ox = 0; ox < ow; ++ox) {
            const real x = real(ox) * sx;
            const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(x), w - 1);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const real fx = x - real(x0);
            const real* p00 = src + (y0 * w + x0) * c;
            const real* p01 = src + (y0 * w + x1) * c;
            const real* p10 = src + (y1 * w + x0) * c;
            const real* p11 = src + (y1 * w + x1) * c;
            real* o = dst + (oy * ow + ox) * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
                // lerp form keeps constant fields bit-exact
                const real top = p00[ch] + fx * (p01[ch] - p00[ch]);
                const real bot = p10[ch] + fx * (p11[ch] - p10[ch]);
                o[ch] = top + fy * (bot - top);
            }
        }
    }
    return out;
}

// Scales each spatial position's channel vector to unit l2 norm; all-zero
// vectors stay zero.
inline Tensor l2_normalize_positions(const Tensor& level) {
    if (level.rank() != 3) throw DimError("l2_normalize_positions: level must be [h, w, c]");
    const std::size_t hw = level.dim(0) * level.dim(1), c = level.dim(2);
    Tensor out = level.clone();
    real* p = out.data();
    for (std::size_t i = 0; i < hw; ++i) {
        real acc = 0;
        for (std::size_t ch = 0; ch < c; ++ch) acc += p[i * c + ch] * p[i * c + ch];
        if (acc == real(0)) continue;
        const real inv = real(1) / std::sqrt(acc);
        for (std::size_t ch = 0; ch < c; ++ch) p[i * c + ch] *= inv;
    }
    return out;
}

inline FeatureStack resize_normalize(const FeatureStack& stack, std::size_t h, std::size_t w) {
    FeatureStack out;
    out.image_id = stack.image_id;
    out.source_kind = stack.source_kind;
    out.levels.reserve(stack.levels.size());
    for (const Tensor& level : stack.levels)
        out.levels.push_back(l2_normalize_positions(resize_bilinear(level, h, w)));
    return out;
}

// maps[l](i, j) = <D_t^l(i), D_s^l(j)> over row-major spatial positions.
inline CorrelationStack build_correlation(const FeatureStack& d_t, const FeatureStack& d_s) {
    if (d_t.level_count() != d_s.level_count() || d_t.levels.empty())
        throw ConfigError("build_correlation: level counts differ (" +
                          std::to_string(d_t.level_count()) + " vs " +
                          std::to_string(d_s.level_count()) + ")");
    const std::size_t h = d_t.levels[0].dim(0), w = d_t.levels[0].dim(1);
    std::vector<Tensor> maps;
    maps.reserve(d_t.level_count());
    for (std::size_t l = 0; l < d_t.level_count(); ++l) {
        const Tensor& t = d_t.levels[l];
        const Tensor& s = d_s.levels[l];
        if (t.dim(2) != s.dim(2))
            throw ConfigError("build_correlation: channel mismatch at level " + std::to_string(l) +
                              ": " + shape_str(t.shape()) + " vs " + shape_str(s.shape()));
        if (t.dim(0) != h || t.dim(1) != w || s.dim(0) != h || s.dim(1) != w)
            throw ConfigError("build_correlation: levels not resized to a common grid");
        const std::size_t hw = h * w, c = t.dim(2);
        Tensor tf = ops::reshape(t, {hw, c});
        Tensor sf = ops::reshape(s, {hw, c});
        maps.push_back(ops::matmul(tf, ops::transpose_last2(sf)));
    }
    CorrelationStack out;
    out.maps = ops::stack_axis0(maps);
    out.orientation = CorrOrientation::rows_target;
    out.h = h;
    out.w = w;
    return out;
}

}  // namespace cats
