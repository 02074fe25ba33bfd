#pragma once

#include "cats/flow.hpp"
#include "cats/gradcheck.hpp"
#include "cats/synthetic.hpp"
#include "cats/trainer.hpp"

namespace cats {

struct GradCheckEntry {
    std::string name;
    real err = 0;
    real tol = 0;
    bool pass() const { return err <= tol; }
};

// Finite-difference checks for every differentiable op, each against a random
// 64-bit input. Tolerance 1e-5.
inline std::vector<GradCheckEntry> op_gradient_suite(std::uint64_t seed = 1) {
    Rng rng(seed);
    std::vector<GradCheckEntry> results;
    const real tol = real(1e-5);
    auto check = [&](const char* name, Shape shape,
                     const std::function<Tensor(const Tensor&)>& f) {
        Tensor x = Tensor::randn(shape, rng);
        results.push_back({name, finite_diff_check(f, x, real(1e-5)), tol});
    };

    Tensor m = Tensor::randn({4, 3}, rng);
    Tensor w6 = Tensor::randn({6}, rng);
    check("add", {2, 6}, [&](const Tensor& t) {
        Tensor y = ops::add(t, w6);
        return ops::sum_all(ops::mul(y, y));
    });
    check("sub", {2, 6}, [&](const Tensor& t) {
        Tensor y = ops::sub(t, w6);
        return ops::sum_all(ops::mul(y, y));
    });
    check("mul", {6}, [&](const Tensor& t) { return ops::sum_all(ops::mul(t, ops::mul(t, w6))); });
    check("scale", {6}, [&](const Tensor& t) {
        Tensor y = ops::scale(t, real(1.7));
        return ops::sum_all(ops::mul(y, y));
    });
    check("matmul", {2, 4}, [&](const Tensor& t) {
        Tensor y = ops::matmul(t, m);
        return ops::sum_all(ops::mul(y, y));
    });
    check("matmul_batched", {3, 2, 4}, [&](const Tensor& t) {
        Tensor y = ops::matmul(t, m);
        return ops::sum_all(ops::mul(y, y));
    });
    check("softmax_lastdim", {3, 5}, [&](const Tensor& t) {
        Tensor y = ops::softmax_lastdim(t, real(0.7));
        return ops::sum_all(ops::mul(y, y));
    });
    {
        Tensor gamma = Tensor::randn({5}, rng);
        Tensor beta = Tensor::randn({5}, rng);
        check("layernorm", {3, 5}, [&, gamma, beta](const Tensor& t) {
            Tensor y = ops::layernorm(t, gamma, beta, real(1e-3));
            return ops::sum_all(ops::mul(y, y));
        });
        Tensor x = Tensor::randn({3, 5}, rng);
        results.push_back({"layernorm_affine",
                           finite_diff_check_params(
                               [&, x] {
                                   Tensor y = ops::layernorm(x, gamma, beta, real(1e-3));
                                   return ops::sum_all(ops::mul(y, y));
                               },
                               {gamma, beta}, real(1e-5)),
                           tol});
    }
    check("gelu", {7}, [&](const Tensor& t) {
        Tensor y = ops::gelu(t);
        return ops::sum_all(ops::mul(y, y));
    });
    check("transpose_last2", {2, 3, 4}, [&](const Tensor& t) {
        Tensor y = ops::transpose_last2(t);
        return ops::sum_all(ops::mul(y, y));
    });
    check("permute", {2, 3, 2}, [&](const Tensor& t) {
        Tensor y = ops::permute(t, {1, 2, 0});
        return ops::sum_all(ops::mul(y, y));
    });
    check("reshape", {2, 6}, [&](const Tensor& t) {
        Tensor y = ops::reshape(t, {3, 4});
        return ops::sum_all(ops::mul(y, y));
    });
    check("concat_lastdim", {2, 3}, [&](const Tensor& t) {
        Tensor y = ops::concat_lastdim(t, ops::scale(t, real(0.5)));
        return ops::sum_all(ops::mul(y, y));
    });
    check("slice_lastdim", {2, 5}, [&](const Tensor& t) {
        Tensor y = ops::slice_lastdim(t, 1, 3);
        return ops::sum_all(ops::mul(y, y));
    });
    check("stack_axis0", {3, 2}, [&](const Tensor& t) {
        Tensor y = ops::stack_axis0({t, ops::scale(t, real(-1))});
        return ops::sum_all(ops::mul(y, y));
    });
    check("sum_axis", {3, 4}, [&](const Tensor& t) {
        Tensor y = ops::sum_axis(t, 0);
        return ops::sum_all(ops::mul(y, y));
    });
    check("mean_axis", {3, 4}, [&](const Tensor& t) {
        Tensor y = ops::mean_axis(t, 1);
        return ops::sum_all(ops::mul(y, y));
    });
    check("sum_all", {5}, [&](const Tensor& t) { return ops::sum_all(t); });
    check("norm_lastdim", {4, 2}, [&](const Tensor& t) { return ops::sum_all(ops::norm_lastdim(t)); });
    {
        auto p = MlpParams::init(4, 8, rng, real(0.3));
        check("mlp", {3, 4}, [&, p](const Tensor& t) {
            Tensor y = mlp(t, p);
            return ops::sum_all(ops::mul(y, y));
        });
    }
    {
        auto p = AttentionParams::init(6, rng, real(0.3));
        check("multihead_attention", {4, 6}, [&, p](const Tensor& t) {
            Tensor y = multihead_attention(t, p, 2);
            return ops::sum_all(ops::mul(y, y));
        });
    }
    {
        FlowField gt = FlowField::zeros(2, 3);
        gt.vectors = Tensor::randn({6, 2}, rng, real(0.5));
        check("soft_argmax+aepe", {6, 6}, [&, gt](const Tensor& t) {
            return aepe(soft_argmax(t, 2, 3, real(0.5)), gt);
        });
    }
    return results;
}

// Composed-loss finite-difference check over every parameter of a toy model:
// correlation -> aggregation -> level mean -> soft-argmax -> AEPE. Tolerance
// 1e-4.
inline GradCheckEntry full_model_gradient_check(bool appearance_on = true,
                                                bool multi_level_on = true, bool swap_on = true,
                                                bool residual_on = true,
                                                std::uint64_t seed = 2) {
    Rng rng(seed);
    AggregatorConfig cfg;
    cfg.hw = 16;  // 4x4 grid
    cfg.p = 4;
    cfg.levels = 2;
    cfg.heads = 2;
    cfg.depth = 1;
    cfg.mlp_ratio = 2.0;
    cfg.appearance_on = appearance_on;
    cfg.multi_level_on = multi_level_on;
    cfg.swap_on = swap_on;
    cfg.residual_on = residual_on;
    cfg.level_channels = {5, 5};
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    // zero-init out_proj blocks most gradient paths; perturb it for the check
    Tensor wr = Tensor::randn(params.out_proj.w.shape(), rng, real(0.1));
    std::copy_n(wr.data(), wr.numel(), params.out_proj.w.data());

    GenConfig gen;
    gen.h = gen.w = 4;
    gen.levels = 2;
    gen.channels = 5;
    gen.lattice = 2;
    gen.keypoints = 4;
    gen.seed = seed;
    const SyntheticPair pair = generate_pair(gen);
    const FeatureStack ns = resize_normalize(pair.d_s, 4, 4);
    const FeatureStack nt = resize_normalize(pair.d_t, 4, 4);
    const CorrelationStack corr = build_correlation(nt, ns);

    GradCheckEntry entry;
    entry.name = "full_model_aepe";
    entry.tol = real(1e-4);
    entry.err = finite_diff_check_params(
        [&] {
            const CorrelationStack refined = cats_forward(corr, ns, nt, params, cfg);
            Tensor map = collapse_levels(refined);
            if (refined.orientation == CorrOrientation::rows_target)
                map = ops::transpose_last2(map);
            const FlowField pred = soft_argmax(map, 4, 4, real(0.5));
            return aepe(pred, pair.gt_flow);
        },
        params.all(), real(1e-5));
    return entry;
}

}  // namespace cats
