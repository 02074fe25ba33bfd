#pragma once

#include <string>
#include <utility>

#include "cats/ops.hpp"

namespace cats {

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;

    static AttentionParams init(std::size_t d, Rng& rng, real stddev = real(0.02)) {
        AttentionParams p;
        p.wq = Tensor::randn({d, d}, rng, stddev, true);
        p.bq = Tensor::zeros({d}, true);
        p.wk = Tensor::randn({d, d}, rng, stddev, true);
        p.bk = Tensor::zeros({d}, true);
        p.wv = Tensor::randn({d, d}, rng, stddev, true);
        p.bv = Tensor::zeros({d}, true);
        p.wo = Tensor::randn({d, d}, rng, stddev, true);
        p.bo = Tensor::zeros({d}, true);
        return p;
    }

    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".wq", wq);
        out.emplace_back(prefix + ".bq", bq);
        out.emplace_back(prefix + ".wk", wk);
        out.emplace_back(prefix + ".bk", bk);
        out.emplace_back(prefix + ".wv", wv);
        out.emplace_back(prefix + ".bv", bv);
        out.emplace_back(prefix + ".wo", wo);
        out.emplace_back(prefix + ".bo", bo);
    }
};

struct MlpParams {
    Tensor w1, b1, w2, b2;

    static MlpParams init(std::size_t d, std::size_t hidden, Rng& rng, real stddev = real(0.02)) {
        MlpParams p;
        p.w1 = Tensor::randn({d, hidden}, rng, stddev, true);
        p.b1 = Tensor::zeros({hidden}, true);
        p.w2 = Tensor::randn({hidden, d}, rng, stddev, true);
        p.b2 = Tensor::zeros({d}, true);
        return p;
    }

    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w1", w1);
        out.emplace_back(prefix + ".b1", b1);
        out.emplace_back(prefix + ".w2", w2);
        out.emplace_back(prefix + ".b2", b2);
    }
};

struct LayerNormParams {
    Tensor gamma, beta;

    static LayerNormParams init(std::size_t d) {
        LayerNormParams p;
        p.gamma = Tensor::full({d}, real(1), true);
        p.beta = Tensor::zeros({d}, true);
        return p;
    }

    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".gamma", gamma);
        out.emplace_back(prefix + ".beta", beta);
    }
};

// Standard multi-head self-attention over the rows of x[.., t, d] with scale
// 1/sqrt(d/heads). attn_sink, when given, receives the per-head softmax
// weights of the forward pass.
inline Tensor multihead_attention(const Tensor& x, const AttentionParams& p, std::size_t heads,
                                  std::vector<Tensor>* attn_sink = nullptr) {
    if (x.rank() < 2) throw DimError("multihead_attention: input must be rank >= 2");
    const std::size_t d = x.dim(x.rank() - 1);
    if (heads == 0 || d % heads != 0)
        throw ConfigError("multihead_attention: token dim " + std::to_string(d) +
                          " not divisible by " + std::to_string(heads) + " heads");
    if (p.wq.shape() != Shape{d, d} || p.wk.shape() != Shape{d, d} || p.wv.shape() != Shape{d, d} ||
        p.wo.shape() != Shape{d, d})
        throw DimError("multihead_attention: projection weights do not match token dim " +
                       std::to_string(d));
    const std::size_t dh = d / heads;
    const real att_scale = real(1) / std::sqrt(static_cast<real>(dh));

    const Tensor q = ops::affine(x, p.wq, p.bq);
    const Tensor k = ops::affine(x, p.wk, p.bk);
    const Tensor v = ops::affine(x, p.wv, p.bv);

    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Tensor qh = ops::slice_lastdim(q, h * dh, dh);
        const Tensor kh = ops::slice_lastdim(k, h * dh, dh);
        const Tensor vh = ops::slice_lastdim(v, h * dh, dh);
        const Tensor scores = ops::scale(ops::matmul(qh, ops::transpose_last2(kh)), att_scale);
        const Tensor weights = ops::softmax_lastdim(scores);
        if (attn_sink) attn_sink->push_back(weights);
        head_out.push_back(ops::matmul(weights, vh));
    }
    return ops::affine(ops::concat_lastdim(head_out), p.wo, p.bo);
}

// affine -> GELU -> affine along the last dimension.
inline Tensor mlp(const Tensor& x, const MlpParams& p) {
    if (x.rank() < 1) throw DimError("mlp: rank-0 input");
    const std::size_t d = x.dim(x.rank() - 1);
    if (p.w1.rank() != 2 || p.w1.dim(0) != d)
        throw DimError("mlp: first affine " + shape_str(p.w1.shape()) + " does not accept dim " +
                       std::to_string(d));
    if (p.w2.rank() != 2 || p.w2.dim(0) != p.w1.dim(1) || p.w2.dim(1) != d)
        throw DimError("mlp: second affine " + shape_str(p.w2.shape()) + " does not restore dim " +
                       std::to_string(d));
    return ops::affine(ops::gelu(ops::affine(x, p.w1, p.b1)), p.w2, p.b2);
}

}  // namespace cats
