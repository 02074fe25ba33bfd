#pragma once

#include <cstdio>
#include <fstream>
#include <string>

#include "cats/ops.hpp"

namespace cats {

// Dense displacement field on a grid, (dx, dy) per cell in grid-cell units.
// vectors stays a Tensor so a decoded flow can carry gradients back into the
// correlation that produced it.
struct FlowField {
    std::size_t h = 0, w = 0;
    Tensor vectors;                   // [h*w, 2]
    std::vector<std::uint8_t> valid;  // h*w

    static FlowField zeros(std::size_t h, std::size_t w) {
        FlowField f;
        f.h = h;
        f.w = w;
        f.vectors = Tensor::zeros({h * w, 2});
        f.valid.assign(h * w, 1);
        return f;
    }
};

struct Keypoint {
    real x_src = 0, y_src = 0;
    real x_tgt = 0, y_tgt = 0;
    bool valid = true;
};

struct KeypointSet {
    std::vector<Keypoint> points;
};

// Row-major grid coordinates, coord(j) = (j % w, j / w), as a [hw, 2] tensor.
inline Tensor grid_coords(std::size_t h, std::size_t w) {
    Tensor c = Tensor::zeros({h * w, 2});
    real* p = c.data();
    for (std::size_t j = 0; j < h * w; ++j) {
        p[j * 2 + 0] = real(j % w);
        p[j * 2 + 1] = real(j / w);
    }
    return c;
}

// Expected match coordinate under a temperature-scaled softmax over each row,
// minus the row's own coordinate. Rows of corr2d must index source positions.
inline FlowField soft_argmax(const Tensor& corr2d, std::size_t h, std::size_t w, real tau) {
    if (!(tau > real(0))) throw ParamError("soft_argmax: tau must be positive");
    const std::size_t hw = h * w;
    if (corr2d.rank() != 2 || corr2d.dim(0) != hw || corr2d.dim(1) != hw)
        throw DimError("soft_argmax: correlation " + shape_str(corr2d.shape()) +
                       " does not match grid " + std::to_string(w) + "x" + std::to_string(h));
    const Tensor coords = grid_coords(h, w);
    const Tensor weights = ops::softmax_lastdim(corr2d, tau);
    const Tensor expected = ops::matmul(weights, coords);
    FlowField f;
    f.h = h;
    f.w = w;
    f.vectors = ops::sub(expected, coords);
    f.valid.assign(hw, 1);
    return f;
}

// Mean Euclidean distance between the fields over their joint validity mask.
inline Tensor aepe(const FlowField& pred, const FlowField& gt) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw DimError("aepe: grids differ: " + std::to_string(pred.w) + "x" +
                       std::to_string(pred.h) + " vs " + std::to_string(gt.w) + "x" +
                       std::to_string(gt.h));
    const std::size_t hw = pred.h * pred.w;
    Tensor mask = Tensor::zeros({hw});
    std::size_t count = 0;
    for (std::size_t i = 0; i < hw; ++i) {
        if (pred.valid[i] && gt.valid[i]) {
            mask.data()[i] = 1;
            ++count;
        }
    }
    if (count == 0) throw EvalError("aepe: joint validity mask is empty");
    const Tensor diff = ops::sub(pred.vectors, gt.vectors);
    const Tensor norms = ops::norm_lastdim(diff);
    return ops::scale(ops::sum_all(ops::mul(norms, mask)), real(1) / real(count));
}

namespace detail {
inline void sample_flow(const FlowField& flow, real x, real y, real& dx, real& dy) {
    const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(x), flow.w - 1);
    const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(y), flow.h - 1);
    const std::size_t x1 = std::min(x0 + 1, flow.w - 1);
    const std::size_t y1 = std::min(y0 + 1, flow.h - 1);
    const real fx = x - real(x0), fy = y - real(y0);
    const real* v = flow.vectors.data();
    auto at = [&](std::size_t yy, std::size_t xx, std::size_t ch) {
        return v[(yy * flow.w + xx) * 2 + ch];
    };
    for (std::size_t ch = 0; ch < 2; ++ch) {
        const real top = at(y0, x0, ch) + fx * (at(y0, x1, ch) - at(y0, x0, ch));
        const real bot = at(y1, x0, ch) + fx * (at(y1, x1, ch) - at(y1, x0, ch));
        (ch == 0 ? dx : dy) = top + fy * (bot - top);
    }
}
}  // namespace detail

// Bilinearly samples the flow at each source keypoint; predicted target =
// source + flow. Out-of-grid keypoints come back invalid rather than raising.
inline KeypointSet transfer_keypoints(const FlowField& flow, const KeypointSet& kps) {
    KeypointSet out;
    out.points.reserve(kps.points.size());
    for (const Keypoint& kp : kps.points) {
        Keypoint pred = kp;
        if (!kp.valid || kp.x_src < 0 || kp.y_src < 0 || kp.x_src > real(flow.w - 1) ||
            kp.y_src > real(flow.h - 1)) {
            pred.valid = false;
            out.points.push_back(pred);
            continue;
        }
        real dx = 0, dy = 0;
        detail::sample_flow(flow, kp.x_src, kp.y_src, dx, dy);
        pred.x_tgt = kp.x_src + dx;
        pred.y_tgt = kp.y_src + dy;
        out.points.push_back(pred);
    }
    return out;
}

// Fraction of jointly valid keypoints whose error is within alpha*max(H, W);
// boundary equality counts as correct.
inline double pck(const KeypointSet& pred, const KeypointSet& gt, double alpha, std::size_t extent_h,
                  std::size_t extent_w) {
    if (!(alpha > 0)) throw ParamError("pck: alpha must be positive");
    if (extent_h == 0 || extent_w == 0) throw ParamError("pck: extent must be positive");
    if (pred.points.size() != gt.points.size())
        throw DimError("pck: keypoint counts differ: " + std::to_string(pred.points.size()) +
                       " vs " + std::to_string(gt.points.size()));
    const double threshold = alpha * double(std::max(extent_h, extent_w));
    std::size_t valid = 0, correct = 0;
    for (std::size_t i = 0; i < pred.points.size(); ++i) {
        if (!pred.points[i].valid || !gt.points[i].valid) continue;
        ++valid;
        const double ex = double(pred.points[i].x_tgt - gt.points[i].x_tgt);
        const double ey = double(pred.points[i].y_tgt - gt.points[i].y_tgt);
        if (std::sqrt(ex * ex + ey * ey) <= threshold) ++correct;
    }
    if (valid == 0) throw EvalError("pck: no jointly valid keypoints");
    return double(correct) / double(valid);
}

// ---------------------------------------------------------------------------
// Flow text format: one line per pixel, "x,y,dx,dy,valid".

inline void save_flow_text(const FlowField& flow, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("save_flow_text: cannot open " + path);
    char line[128];
    for (std::size_t y = 0; y < flow.h; ++y)
        for (std::size_t x = 0; x < flow.w; ++x) {
            const std::size_t i = y * flow.w + x;
            std::snprintf(line, sizeof line, "%zu,%zu,%.17g,%.17g,%d\n", x, y,
                          double(flow.vectors.values()[i * 2 + 0]),
                          double(flow.vectors.values()[i * 2 + 1]), flow.valid[i] ? 1 : 0);
            out << line;
        }
    if (!out) throw IoError("save_flow_text: write failed for " + path);
}

inline FlowField load_flow_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_flow_text: cannot open " + path);
    struct Row {
        std::size_t x, y;
        double dx, dy;
        int valid;
    };
    std::vector<Row> rows;
    std::string line;
    std::size_t w = 0, h = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        Row r{};
        if (std::sscanf(line.c_str(), "%zu,%zu,%lg,%lg,%d", &r.x, &r.y, &r.dx, &r.dy, &r.valid) != 5)
            throw FormatError("load_flow_text: bad line '" + line + "' in " + path);
        w = std::max(w, r.x + 1);
        h = std::max(h, r.y + 1);
        rows.push_back(r);
    }
    if (rows.size() != h * w)
        throw FormatError("load_flow_text: " + path + " has " + std::to_string(rows.size()) +
                          " rows for a " + std::to_string(w) + "x" + std::to_string(h) + " grid");
    FlowField f = FlowField::zeros(h, w);
    for (const Row& r : rows) {
        const std::size_t i = r.y * w + r.x;
        f.vectors.data()[i * 2 + 0] = real(r.dx);
        f.vectors.data()[i * 2 + 1] = real(r.dy);
        f.valid[i] = r.valid ? 1 : 0;
    }
    return f;
}

}  // namespace cats
