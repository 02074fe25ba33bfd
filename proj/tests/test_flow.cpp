#include <catch2/catch.hpp>

#include <cstdio>

#include "cats/flow.hpp"
#include "cats/gradcheck.hpp"

using namespace cats;
namespace O = cats::ops;

TEST_CASE("soft-argmax approaches the argmax at tiny temperature", "[flow]") {
    const std::size_t h = 2, w = 3, hw = h * w;
    Tensor corr = Tensor::zeros({hw, hw});
    // unique max per row at j* = (i + 2) % hw
    for (std::size_t i = 0; i < hw; ++i) corr.data()[i * hw + (i + 2) % hw] = 1.0;
    FlowField f = soft_argmax(corr, h, w, 1e-6);
    for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t j = (i + 2) % hw;
        const double ex = double(j % w) - double(i % w);
        const double ey = double(j / w) - double(i / w);
        REQUIRE(f.vectors.values()[i * 2 + 0] == Approx(ex).margin(1e-6));
        REQUIRE(f.vectors.values()[i * 2 + 1] == Approx(ey).margin(1e-6));
    }
}

TEST_CASE("soft-argmax of a uniform row is the grid centroid", "[flow]") {
    const std::size_t h = 2, w = 2;
    Tensor corr = Tensor::zeros({4, 4});
    FlowField f = soft_argmax(corr, h, w, 1.0);
    // expected coordinate (0.5, 0.5) for every row
    for (std::size_t i = 0; i < 4; ++i) {
        REQUIRE(f.vectors.values()[i * 2 + 0] + double(i % w) == Approx(0.5).margin(1e-15));
        REQUIRE(f.vectors.values()[i * 2 + 1] + double(i / w) == Approx(0.5).margin(1e-15));
    }
}

TEST_CASE("soft-argmax closed-form two-cell case", "[flow]") {
    // 1x2 grid, scores [0, ln 3]: weights (0.25, 0.75), expected x = 0.75
    Tensor corr = Tensor::from({2, 2}, {0.0, std::log(3.0), 0.0, std::log(3.0)});
    FlowField f = soft_argmax(corr, 1, 2, 1.0);
    REQUIRE(f.vectors.values()[0] == Approx(0.75 - 0.0).margin(1e-14));
    REQUIRE(f.vectors.values()[2] == Approx(0.75 - 1.0).margin(1e-14));
}

TEST_CASE("soft-argmax rejects bad temperature", "[flow]") {
    Tensor corr = Tensor::zeros({4, 4});
    REQUIRE_THROWS_AS(soft_argmax(corr, 2, 2, 0.0), ParamError);
}

TEST_CASE("soft-argmax targets stay inside the grid hull", "[flow][property]") {
    Rng rng(307);
    const std::size_t h = 3, w = 4, hw = h * w;
    for (int iter = 0; iter < 20; ++iter) {
        Tensor corr = Tensor::randn({hw, hw}, rng, 3.0);
        FlowField f = soft_argmax(corr, h, w, 0.05 + rng.uniform());
        for (std::size_t i = 0; i < hw; ++i) {
            const double tx = f.vectors.values()[i * 2 + 0] + double(i % w);
            const double ty = f.vectors.values()[i * 2 + 1] + double(i / w);
            REQUIRE(tx >= 0.0);
            REQUIRE(tx <= double(w - 1));
            REQUIRE(ty >= 0.0);
            REQUIRE(ty <= double(h - 1));
        }
    }
}

TEST_CASE("aepe of identical fields is zero", "[flow]") {
    Rng rng(311);
    FlowField a = FlowField::zeros(2, 3);
    a.vectors = Tensor::randn({6, 2}, rng);
    FlowField b = a;
    REQUIRE(aepe(a, b).item() == 0.0);
}

TEST_CASE("aepe 3-4-5 single pixel", "[flow]") {
    FlowField pred = FlowField::zeros(1, 1);
    FlowField gt = FlowField::zeros(1, 1);
    pred.vectors = Tensor::from({1, 2}, {3.0, 4.0});
    REQUIRE(aepe(pred, gt).item() == Approx(5.0).margin(1e-15));
}

TEST_CASE("aepe matches per-pixel loop on random fields", "[flow]") {
    Rng rng(313);
    const std::size_t h = 3, w = 4, hw = h * w;
    FlowField pred = FlowField::zeros(h, w);
    FlowField gt = FlowField::zeros(h, w);
    pred.vectors = Tensor::randn({hw, 2}, rng);
    gt.vectors = Tensor::randn({hw, 2}, rng);
    pred.valid[5] = 0;
    gt.valid[7] = 0;
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < hw; ++i) {
        if (!pred.valid[i] || !gt.valid[i]) continue;
        const double dx = pred.vectors.values()[i * 2] - gt.vectors.values()[i * 2];
        const double dy = pred.vectors.values()[i * 2 + 1] - gt.vectors.values()[i * 2 + 1];
        acc += std::sqrt(dx * dx + dy * dy);
        ++n;
    }
    REQUIRE(aepe(pred, gt).item() == Approx(acc / double(n)).margin(1e-12));
}

TEST_CASE("aepe with empty joint mask raises", "[flow]") {
    FlowField a = FlowField::zeros(1, 2);
    FlowField b = FlowField::zeros(1, 2);
    a.valid = {0, 1};
    b.valid = {1, 0};
    REQUIRE_THROWS_AS(aepe(a, b), EvalError);
}

TEST_CASE("aepe gradient through soft-argmax matches finite differences", "[flow][grad]") {
    Rng rng(317);
    const std::size_t h = 2, w = 3, hw = h * w;
    Tensor corr = Tensor::randn({hw, hw}, rng);
    FlowField gt = FlowField::zeros(h, w);
    gt.vectors = Tensor::randn({hw, 2}, rng, 0.5);
    const real err = finite_diff_check(
        [&](const Tensor& c) {
            FlowField pred = soft_argmax(c, h, w, 0.5);
            return aepe(pred, gt);
        },
        corr, 1e-5);
    REQUIRE(err <= 1e-5);
}

TEST_CASE("zero flow transfers keypoints to themselves", "[flow]") {
    FlowField flow = FlowField::zeros(4, 4);
    KeypointSet kps;
    kps.points.push_back({1.0, 2.0, 0, 0, true});
    kps.points.push_back({0.5, 3.0, 0, 0, true});
    KeypointSet pred = transfer_keypoints(flow, kps);
    REQUIRE(pred.points[0].x_tgt == 1.0);
    REQUIRE(pred.points[0].y_tgt == 2.0);
    REQUIRE(pred.points[1].x_tgt == 0.5);
    REQUIRE(pred.points[1].y_tgt == 3.0);
}

TEST_CASE("constant flow shifts every keypoint", "[flow]") {
    FlowField flow = FlowField::zeros(3, 3);
    for (std::size_t i = 0; i < 9; ++i) flow.vectors.data()[i * 2] = 1.0;
    KeypointSet kps;
    kps.points.push_back({0.0, 0.0, 0, 0, true});
    kps.points.push_back({1.5, 1.0, 0, 0, true});
    KeypointSet pred = transfer_keypoints(flow, kps);
    REQUIRE(pred.points[0].x_tgt == Approx(1.0));
    REQUIRE(pred.points[1].x_tgt == Approx(2.5));
    REQUIRE(pred.points[1].y_tgt == Approx(1.0));
}

TEST_CASE("keypoint sampling interpolates a linear flow", "[flow]") {
    // dx(y, x) = x + 2y, dy = 0; bilinear at a cell center gives the closed form
    FlowField flow = FlowField::zeros(3, 3);
    for (std::size_t y = 0; y < 3; ++y)
        for (std::size_t x = 0; x < 3; ++x) flow.vectors.data()[(y * 3 + x) * 2] = real(x) + 2.0 * real(y);
    KeypointSet kps;
    kps.points.push_back({0.5, 0.5, 0, 0, true});
    KeypointSet pred = transfer_keypoints(flow, kps);
    REQUIRE(pred.points[0].x_tgt == Approx(0.5 + (0.5 + 2.0 * 0.5)).margin(1e-14));
}

TEST_CASE("out-of-bounds keypoints are marked invalid", "[flow]") {
    FlowField flow = FlowField::zeros(2, 2);
    KeypointSet kps;
    kps.points.push_back({5.0, 0.0, 0, 0, true});
    KeypointSet pred = transfer_keypoints(flow, kps);
    REQUIRE_FALSE(pred.points[0].valid);
}

TEST_CASE("pck exact predictions score one", "[flow]") {
    KeypointSet gt, pred;
    gt.points.push_back({0, 0, 3.0, 4.0, true});
    pred.points.push_back({0, 0, 3.0, 4.0, true});
    REQUIRE(pck(pred, gt, 0.1, 10, 10) == 1.0);
}

TEST_CASE("pck boundary equality counts as correct", "[flow]") {
    KeypointSet gt, pred;
    gt.points.push_back({0, 0, 0.0, 0.0, true});
    pred.points.push_back({0, 0, 10.0, 0.0, true});  // error exactly 10 = 0.1 * 100
    REQUIRE(pck(pred, gt, 0.1, 100, 100) == 1.0);
    pred.points[0].x_tgt = 10.0001;
    REQUIRE(pck(pred, gt, 0.1, 100, 100) == 0.0);
}

TEST_CASE("pck counts half when one of two misses", "[flow]") {
    KeypointSet gt, pred;
    gt.points.push_back({0, 0, 0.0, 0.0, true});
    gt.points.push_back({0, 0, 0.0, 0.0, true});
    pred.points.push_back({0, 0, 0.0, 0.0, true});
    pred.points.push_back({0, 0, 20.0, 0.0, true});  // 2x the threshold
    REQUIRE(pck(pred, gt, 0.1, 100, 100) == 0.5);
}

TEST_CASE("pck is monotone in alpha", "[flow][property]") {
    Rng rng(331);
    KeypointSet gt, pred;
    for (int i = 0; i < 30; ++i) {
        Keypoint g{0, 0, real(rng.uniform(0, 50)), real(rng.uniform(0, 50)), true};
        Keypoint p = g;
        p.x_tgt += real(rng.normal() * 5.0);
        p.y_tgt += real(rng.normal() * 5.0);
        gt.points.push_back(g);
        pred.points.push_back(p);
    }
    double prev = 0.0;
    for (double alpha : {0.01, 0.05, 0.1, 0.15, 0.3, 1.0}) {
        const double v = pck(pred, gt, alpha, 50, 50);
        REQUIRE(v >= prev);
        prev = v;
    }
}

TEST_CASE("pck with no valid keypoints raises", "[flow]") {
    KeypointSet gt, pred;
    gt.points.push_back({0, 0, 0, 0, false});
    pred.points.push_back({0, 0, 0, 0, false});
    REQUIRE_THROWS_AS(pck(pred, gt, 0.1, 10, 10), EvalError);
}

TEST_CASE("flow text round-trip", "[flow]") {
    Rng rng(337);
    FlowField f = FlowField::zeros(2, 3);
    f.vectors = Tensor::randn({6, 2}, rng);
    f.valid[2] = 0;
    const std::string path = "flow_roundtrip_test.txt";
    save_flow_text(f, path);
    FlowField g = load_flow_text(path);
    REQUIRE(g.h == f.h);
    REQUIRE(g.w == f.w);
    REQUIRE(g.vectors.values() == f.vectors.values());
    REQUIRE(g.valid == f.valid);
    std::remove(path.c_str());
}
