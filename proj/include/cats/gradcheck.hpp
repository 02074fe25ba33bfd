#pragma once

#include "cats/tensor.hpp"

namespace cats {

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued function of x. The numeric probes run with recording
// suspended; x is perturbed in place and restored.
inline real finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                              real h = real(1e-5)) {
    if (!(h > real(0))) throw ParamError("finite_diff_check: step must be positive");
    x.set_requires_grad(true);
    std::vector<real> analytic(x.numel());
    {
        Tape tape;
        x.zero_grad();
        Tensor y = f(x);
        if (y.numel() != 1) throw UsageError("finite_diff_check: f must be scalar-valued");
        tape.backward(y);
        std::copy_n(x.grad(), x.numel(), analytic.begin());
    }
    TapeSuspend no_tape;
    real worst = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const real saved = x.data()[i];
        x.data()[i] = saved + h;
        const real fp = f(x).item();
        x.data()[i] = saved - h;
        const real fm = f(x).item();
        x.data()[i] = saved;
        const real numeric = (fp - fm) / (2 * h);
        const real err = std::abs(analytic[i] - numeric) /
                         std::max(real(1), std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

// Same check for a closure over a set of leaf parameters (full-model losses).
inline real finite_diff_check_params(const std::function<Tensor()>& f,
                                     const std::vector<Tensor>& params, real h = real(1e-5)) {
    if (!(h > real(0))) throw ParamError("finite_diff_check_params: step must be positive");
    std::vector<std::vector<real>> analytic;
    {
        Tape tape;
        for (Tensor p : params) {
            p.set_requires_grad(true);
            p.zero_grad();
        }
        Tensor y = f();
        if (y.numel() != 1) throw UsageError("finite_diff_check_params: f must be scalar-valued");
        tape.backward(y);
        for (Tensor p : params) {
            analytic.emplace_back(p.numel());
            std::copy_n(p.grad(), p.numel(), analytic.back().begin());
        }
    }
    TapeSuspend no_tape;
    real worst = 0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const real saved = p.data()[i];
            p.data()[i] = saved + h;
            const real fp = f().item();
            p.data()[i] = saved - h;
            const real fm = f().item();
            p.data()[i] = saved;
            const real numeric = (fp - fm) / (2 * h);
            const real err = std::abs(analytic[pi][i] - numeric) /
                             std::max(real(1), std::abs(analytic[pi][i]));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace cats
