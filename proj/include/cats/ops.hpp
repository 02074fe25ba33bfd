#pragma once

#include <cmath>
#include <numeric>
#include <span>

#include "cats/tensor.hpp"

namespace cats::ops {

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t d = s.size(); d-- > 1;) st[d - 1] = st[d] * s[d];
    return st;
}

// Right-aligned numpy-style broadcast of two shapes.
inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t d = 0; d < r; ++d) {
        const std::size_t da = d < r - a.size() ? 1 : a[d - (r - a.size())];
        const std::size_t db = d < r - b.size() ? 1 : b[d - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw DimError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
        out[d] = std::max(da, db);
    }
    return out;
}

// Effective per-output-dim strides of `in` when broadcast to `out`
// (0 on expanded dims).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    const auto ist = row_major_strides(in);
    std::vector<std::size_t> st(out.size(), 0);
    const std::size_t off = out.size() - in.size();
    for (std::size_t d = 0; d < in.size(); ++d)
        if (in[d] != 1) st[off + d] = ist[d];
    return st;
}

// Walks every flat index of `out`, tracking offsets into two broadcast
// operands. f(out_flat, a_off, b_off).
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
    const std::size_t n = shape_numel(out);
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ao = 0, bo = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, ao, bo);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            ao += sa[d];
            bo += sb[d];
            if (idx[d] < out[d]) break;
            ao -= sa[d] * out[d];
            bo -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

// C[i,:] += A[i,:] * B  (A: m x k, B: k x n). Row-parallel, each output row
// is written by exactly one worker, so results do not depend on thread count.
inline void gemm_nn_acc(const real* a, const real* b, real* c, std::size_t m, std::size_t k,
                        std::size_t n) {
    auto rows = [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            real* crow = c + i * n;
            const real* arow = a + i * k;
            for (std::size_t l = 0; l < k; ++l) {
                const real av = arow[l];
                const real* brow = b + l * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    };
    if (m * n * k >= 1u << 18)
        parallel_for(m, 8, rows);
    else
        rows(0, m);
}

// C[i,j] += dot(A[i,:], B[j,:])  (A: m x l, B: n x l).
inline void gemm_nt_acc(const real* a, const real* b, real* c, std::size_t m, std::size_t l,
                        std::size_t n) {
    auto rows = [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            const real* arow = a + i * l;
            real* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const real* brow = b + j * l;
                real acc = 0;
                for (std::size_t t = 0; t < l; ++t) acc += arow[t] * brow[t];
                crow[j] += acc;
            }
        }
    };
    if (m * n * l >= 1u << 18)
        parallel_for(m, 8, rows);
    else
        rows(0, m);
}

// C[i,j] += sum_l A[l,i] * B[l,j]  (A: l x m, B: l x n).
inline void gemm_tn_acc(const real* a, const real* b, real* c, std::size_t m, std::size_t l,
                        std::size_t n) {
    auto rows = [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
            real* crow = c + i * n;
            for (std::size_t t = 0; t < l; ++t) {
                const real av = a[t * m + i];
                const real* brow = b + t * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    };
    if (m * n * l >= 1u << 18)
        parallel_for(m, 8, rows);
    else
        rows(0, m);
}

inline void maybe_record(Tensor& out, std::initializer_list<Tensor> inputs,
                         std::function<void()> back) {
    bool needs = false;
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
    if (!needs || !Tape::recording()) return;
    out.set_requires_grad(true);
    Tape::current()->record(std::move(back), inputs, {out});
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast arithmetic

namespace detail {

template <class Fwd, class DA, class DB>
Tensor broadcast_binary(Tensor a, Tensor b, const char* name, Fwd fwd, DA da,
                        DB db) {
    const Shape oshape = broadcast_shapes(a.shape(), b.shape(), name);
    const auto sa = broadcast_strides(a.shape(), oshape);
    const auto sb = broadcast_strides(b.shape(), oshape);
    Tensor out = Tensor::zeros(oshape);
    {
        real* o = out.data();
        const real* pa = a.data();
        const real* pb = b.data();
        for_each_broadcast(oshape, sa, sb,
                           [&](std::size_t i, std::size_t ao, std::size_t bo) { o[i] = fwd(pa[ao], pb[bo]); });
    }
    check_all_finite(out, name);
    maybe_record(out, {a, b}, [a, b, out, oshape, sa, sb, da, db]() mutable {
        const real* g = out.grad();
        const real* pa = a.data();
        const real* pb = b.data();
        real* ga = a.requires_grad() ? a.grad() : nullptr;
        real* gb = b.requires_grad() ? b.grad() : nullptr;
        for_each_broadcast(oshape, sa, sb, [&](std::size_t i, std::size_t ao, std::size_t bo) {
            if (ga) ga[ao] += da(g[i], pa[ao], pb[bo]);
            if (gb) gb[bo] += db(g[i], pa[ao], pb[bo]);
        });
    });
    return out;
}

}  // namespace detail

inline Tensor add(Tensor a, Tensor b) {
    return detail::broadcast_binary(
        a, b, "add", [](real x, real y) { return x + y; },
        [](real g, real, real) { return g; }, [](real g, real, real) { return g; });
}

inline Tensor sub(Tensor a, Tensor b) {
    return detail::broadcast_binary(
        a, b, "sub", [](real x, real y) { return x - y; },
        [](real g, real, real) { return g; }, [](real g, real, real) { return -g; });
}

inline Tensor mul(Tensor a, Tensor b) {
    return detail::broadcast_binary(
        a, b, "mul", [](real x, real y) { return x * y; },
        [](real g, real, real y) { return g * y; }, [](real g, real x, real) { return g * x; });
}

inline Tensor scale(Tensor x, real c) {
    Tensor out = Tensor::zeros(x.shape());
    const real* px = x.data();
    real* po = out.data();
    for (std::size_t i = 0; i < x.numel(); ++i) po[i] = c * px[i];
    check_all_finite(out, "scale");
    detail::maybe_record(out, {x}, [x, out, c]() mutable {
        const real* g = out.grad();
        real* gx = x.grad();
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += c * g[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Matrix product with batch broadcasting over the leading dimensions.

inline Tensor matmul(Tensor a, Tensor b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw DimError("matmul: operands must be at least rank-2, got " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(a.rank() - 2), ka = a.dim(a.rank() - 1);
    const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (ka != kb)
        throw DimError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    const Shape abatch(a.shape().begin(), a.shape().end() - 2);
    const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    const Shape obatch = detail::broadcast_shapes(abatch, bbatch, "matmul");
    const auto sa = detail::broadcast_strides(abatch, obatch);
    const auto sb = detail::broadcast_strides(bbatch, obatch);

    Shape oshape = obatch;
    oshape.push_back(m);
    oshape.push_back(n);
    Tensor out = Tensor::zeros(oshape);

    const std::size_t asz = m * ka, bsz = ka * n, osz = m * n;
    {
        const real* pa = a.data();
        const real* pb = b.data();
        real* po = out.data();
        detail::for_each_broadcast(obatch, sa, sb, [&](std::size_t i, std::size_t ao, std::size_t bo) {
            detail::gemm_nn_acc(pa + ao * asz, pb + bo * bsz, po + i * osz, m, ka, n);
        });
    }
    check_all_finite(out, "matmul");
    detail::maybe_record(out, {a, b}, [a, b, out, obatch, sa, sb, m, ka, n, asz, bsz, osz]() mutable {
        const real* g = out.grad();
        const real* pa = a.data();
        const real* pb = b.data();
        real* ga = a.requires_grad() ? a.grad() : nullptr;
        real* gb = b.requires_grad() ? b.grad() : nullptr;
        detail::for_each_broadcast(obatch, sa, sb, [&](std::size_t i, std::size_t ao, std::size_t bo) {
            if (ga) detail::gemm_nt_acc(g + i * osz, pb + bo * bsz, ga + ao * asz, m, n, ka);
            if (gb) detail::gemm_tn_acc(pa + ao * asz, g + i * osz, gb + bo * bsz, ka, m, n);
        });
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax(x / temperature) along the last dimension, max-subtracted.

inline Tensor softmax_lastdim(Tensor x, real temperature = real(1)) {
    if (!(temperature > real(0)))
        throw ParamError("softmax_lastdim: temperature must be positive, got " +
                         std::to_string(temperature));
    if (x.rank() < 1) throw DimError("softmax_lastdim: rank-0 input");
    const std::size_t d = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    const real* px = x.data();
    real* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const real* xr = px + r * d;
        real* yr = po + r * d;
        real mx = xr[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        real sum = 0;
        for (std::size_t j = 0; j < d; ++j) {
            yr[j] = std::exp((xr[j] - mx) / temperature);
            sum += yr[j];
        }
        const real inv = real(1) / sum;
        for (std::size_t j = 0; j < d; ++j) yr[j] *= inv;
    }
    check_all_finite(out, "softmax_lastdim");
    detail::maybe_record(out, {x}, [x, out, d, rows, temperature]() mutable {
        const real* y = out.data();
        const real* g = out.grad();
        real* gx = x.grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const real* yr = y + r * d;
            const real* gr = g + r * d;
            real* gxr = gx + r * d;
            real dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
            for (std::size_t j = 0; j < d; ++j) gxr[j] += yr[j] * (gr[j] - dot) / temperature;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension (population variance + eps).

inline Tensor layernorm(Tensor x, Tensor gamma, Tensor beta,
                        real eps = real(1e-5)) {
    if (x.rank() < 1) throw DimError("layernorm: rank-0 input");
    const std::size_t d = x.dim(x.rank() - 1);
    if (gamma.numel() != d || beta.numel() != d)
        throw DimError("layernorm: affine shape " + shape_str(gamma.shape()) + "/" +
                       shape_str(beta.shape()) + " does not match last dim " + std::to_string(d));
    if (!(eps > real(0))) throw ParamError("layernorm: eps must be positive");
    const std::size_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<real> mu(rows), inv(rows);
    {
        const real* px = x.data();
        const real* pg = gamma.data();
        const real* pb = beta.data();
        real* po = out.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const real* xr = px + r * d;
            real* yr = po + r * d;
            real m = 0;
            for (std::size_t j = 0; j < d; ++j) m += xr[j];
            m /= real(d);
            real var = 0;
            for (std::size_t j = 0; j < d; ++j) var += (xr[j] - m) * (xr[j] - m);
            var /= real(d);
            const real iv = real(1) / std::sqrt(var + eps);
            mu[r] = m;
            inv[r] = iv;
            for (std::size_t j = 0; j < d; ++j) yr[j] = pg[j] * (xr[j] - m) * iv + pb[j];
        }
    }
    check_all_finite(out, "layernorm");
    detail::maybe_record(out, {x, gamma, beta},
                         [x, gamma, beta, out, d, rows, mu = std::move(mu), inv = std::move(inv)]() mutable {
        const real* px = x.data();
        const real* pg = gamma.data();
        const real* g = out.grad();
        real* gx = x.requires_grad() ? x.grad() : nullptr;
        real* gg = gamma.requires_grad() ? gamma.grad() : nullptr;
        real* gb = beta.requires_grad() ? beta.grad() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
            const real* xr = px + r * d;
            const real* gr = g + r * d;
            const real iv = inv[r], m = mu[r];
            real mean_dxhat = 0, mean_dxhat_xhat = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const real xhat = (xr[j] - m) * iv;
                const real dxhat = gr[j] * pg[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
                if (gg) gg[j] += gr[j] * xhat;
                if (gb) gb[j] += gr[j];
            }
            mean_dxhat /= real(d);
            mean_dxhat_xhat /= real(d);
            if (gx) {
                real* gxr = gx + r * d;
                for (std::size_t j = 0; j < d; ++j) {
                    const real xhat = (xr[j] - m) * iv;
                    const real dxhat = gr[j] * pg[j];
                    gxr[j] += iv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// tanh-approximation GELU

inline Tensor gelu(Tensor x) {
    constexpr real k0 = real(0.7978845608028654);  // sqrt(2/pi)
    constexpr real k1 = real(0.044715);
    Tensor out = Tensor::zeros(x.shape());
    const real* px = x.data();
    real* po = out.data();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const real v = px[i];
        po[i] = real(0.5) * v * (real(1) + std::tanh(k0 * (v + k1 * v * v * v)));
    }
    check_all_finite(out, "gelu");
    detail::maybe_record(out, {x}, [x, out]() mutable {
        const real* px = x.data();
        const real* g = out.grad();
        real* gx = x.grad();
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const real v = px[i];
            const real t = std::tanh(k0 * (v + k1 * v * v * v));
            const real dt = (real(1) - t * t) * k0 * (real(1) + real(3) * k1 * v * v);
            gx[i] += g[i] * (real(0.5) * (real(1) + t) + real(0.5) * v * dt);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Shape algebra

inline Tensor permute(Tensor x, const std::vector<std::size_t>& perm) {
    if (perm.size() != x.rank()) throw DimError("permute: axis list does not match rank");
    std::vector<bool> used(x.rank(), false);
    Shape oshape(x.rank());
    for (std::size_t d = 0; d < perm.size(); ++d) {
        if (perm[d] >= x.rank() || used[perm[d]]) throw DimError("permute: invalid axis list");
        used[perm[d]] = true;
        oshape[d] = x.dim(perm[d]);
    }
    const auto ist = detail::row_major_strides(x.shape());
    std::vector<std::size_t> walk(perm.size());
    for (std::size_t d = 0; d < perm.size(); ++d) walk[d] = ist[perm[d]];
    const std::vector<std::size_t> zero(perm.size(), 0);

    Tensor out = Tensor::zeros(oshape);
    {
        const real* px = x.data();
        real* po = out.data();
        detail::for_each_broadcast(oshape, walk, zero,
                                   [&](std::size_t i, std::size_t src, std::size_t) { po[i] = px[src]; });
    }
    detail::maybe_record(out, {x}, [x, out, oshape, walk, zero]() mutable {
        const real* g = out.grad();
        real* gx = x.grad();
        detail::for_each_broadcast(oshape, walk, zero,
                                   [&](std::size_t i, std::size_t src, std::size_t) { gx[src] += g[i]; });
    });
    return out;
}

inline Tensor transpose_last2(const Tensor& x) {
    if (x.rank() < 2) throw DimError("transpose_last2: needs rank >= 2, got " + shape_str(x.shape()));
    std::vector<std::size_t> perm(x.rank());
    std::iota(perm.begin(), perm.end(), std::size_t(0));
    std::swap(perm[x.rank() - 1], perm[x.rank() - 2]);
    return permute(x, perm);
}

inline Tensor reshape(Tensor x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw DimError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                       " changes element count");
    Tensor out = Tensor::from(std::move(new_shape), x.values());
    detail::maybe_record(out, {x}, [x, out]() mutable {
        const real* g = out.grad();
        real* gx = x.grad();
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g[i];
    });
    return out;
}

inline Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimError("concat_lastdim: empty input list");
    const Shape& s0 = parts[0].shape();
    if (s0.empty()) throw DimError("concat_lastdim: rank-0 input");
    std::size_t total_last = 0;
    for (const Tensor& t : parts) {
        if (t.rank() != s0.size()) throw DimError("concat_lastdim: rank mismatch");
        for (std::size_t d = 0; d + 1 < s0.size(); ++d)
            if (t.dim(d) != s0[d])
                throw DimError("concat_lastdim: leading dims differ: " + shape_str(s0) + " vs " +
                               shape_str(t.shape()));
        total_last += t.dim(t.rank() - 1);
    }
    Shape oshape = s0;
    oshape.back() = total_last;
    Tensor out = Tensor::zeros(oshape);
    const std::size_t rows = out.numel() / total_last;
    {
        real* po = out.data();
        std::size_t col = 0;
        for (const Tensor& t : parts) {
            const std::size_t w = t.dim(t.rank() - 1);
            const real* pt = t.data();
            for (std::size_t r = 0; r < rows; ++r)
                std::memcpy(po + r * total_last + col, pt + r * w, w * sizeof(real));
            col += w;
        }
    }
    bool needs = false;
    for (const Tensor& t : parts) needs = needs || t.requires_grad();
    if (needs && Tape::recording()) {
        out.set_requires_grad(true);
        std::function<void()> back = [parts, out, rows, total_last]() mutable {
            const real* g = out.grad();
            std::size_t col = 0;
            for (const Tensor& t : parts) {
                Tensor mt = t;
                const std::size_t w = mt.dim(mt.rank() - 1);
                if (mt.requires_grad()) {
                    real* gt = mt.grad();
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < w; ++j) gt[r * w + j] += g[r * total_last + col + j];
                }
                col += w;
            }
        };
        Tape::current()->record(std::move(back), parts, {out});
    }
    return out;
}

inline Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
    return concat_lastdim(std::vector<Tensor>{a, b});
}

inline Tensor slice_lastdim(Tensor x, std::size_t start, std::size_t len) {
    if (x.rank() < 1) throw DimError("slice_lastdim: rank-0 input");
    const std::size_t w = x.dim(x.rank() - 1);
    if (start + len > w)
        throw DimError("slice_lastdim: [" + std::to_string(start) + ", " +
                       std::to_string(start + len) + ") exceeds last dim " + std::to_string(w));
    Shape oshape = x.shape();
    oshape.back() = len;
    Tensor out = Tensor::zeros(oshape);
    const std::size_t rows = x.numel() / w;
    {
        const real* px = x.data();
        real* po = out.data();
        for (std::size_t r = 0; r < rows; ++r)
            std::memcpy(po + r * len, px + r * w + start, len * sizeof(real));
    }
    detail::maybe_record(out, {x}, [x, out, rows, w, start, len]() mutable {
        const real* g = out.grad();
        real* gx = x.grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) gx[r * w + start + j] += g[r * len + j];
    });
    return out;
}

inline Tensor stack_axis0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimError("stack_axis0: empty input list");
    const Shape& s0 = parts[0].shape();
    for (const Tensor& t : parts)
        if (t.shape() != s0)
            throw DimError("stack_axis0: shape mismatch: " + shape_str(s0) + " vs " +
                           shape_str(t.shape()));
    Shape oshape;
    oshape.push_back(parts.size());
    oshape.insert(oshape.end(), s0.begin(), s0.end());
    Tensor out = Tensor::zeros(oshape);
    const std::size_t chunk = shape_numel(s0);
    {
        real* po = out.data();
        for (std::size_t p = 0; p < parts.size(); ++p)
            std::memcpy(po + p * chunk, parts[p].data(), chunk * sizeof(real));
    }
    bool needs = false;
    for (const Tensor& t : parts) needs = needs || t.requires_grad();
    if (needs && Tape::recording()) {
        out.set_requires_grad(true);
        std::function<void()> back = [parts, out, chunk]() mutable {
            const real* g = out.grad();
            for (std::size_t p = 0; p < parts.size(); ++p) {
                Tensor mt = parts[p];
                if (!mt.requires_grad()) continue;
                real* gt = mt.grad();
                for (std::size_t i = 0; i < chunk; ++i) gt[i] += g[p * chunk + i];
            }
        };
        Tape::current()->record(std::move(back), parts, {out});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

namespace detail {
struct AxisSplit {
    std::size_t outer, n, inner;
};
inline AxisSplit axis_split(const Shape& s, std::size_t axis, const char* op) {
    if (axis >= s.size()) throw DimError(std::string(op) + ": axis out of range");
    AxisSplit a{1, s[axis], 1};
    for (std::size_t d = 0; d < axis; ++d) a.outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) a.inner *= s[d];
    return a;
}
}  // namespace detail

inline Tensor sum_axis(Tensor x, std::size_t axis) {
    const auto sp = detail::axis_split(x.shape(), axis, "sum_axis");
    Shape oshape = x.shape();
    oshape.erase(oshape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor out = Tensor::zeros(oshape);
    {
        const real* px = x.data();
        real* po = out.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t a = 0; a < sp.n; ++a)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    po[o * sp.inner + i] += px[(o * sp.n + a) * sp.inner + i];
    }
    check_all_finite(out, "sum_axis");
    detail::maybe_record(out, {x}, [x, out, sp]() mutable {
        const real* g = out.grad();
        real* gx = x.grad();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t a = 0; a < sp.n; ++a)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    gx[(o * sp.n + a) * sp.inner + i] += g[o * sp.inner + i];
    });
    return out;
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
    const auto sp = detail::axis_split(x.shape(), axis, "mean_axis");
    return scale(sum_axis(x, axis), real(1) / real(sp.n));
}

inline Tensor sum_all(Tensor x) {
    Tensor out = Tensor::scalar(real(0));
    real acc = 0;
    const real* px = x.data();
    for (std::size_t i = 0; i < x.numel(); ++i) acc += px[i];
    out.data()[0] = acc;
    check_all_finite(out, "sum_all");
    detail::maybe_record(out, {x}, [x, out]() mutable {
        const real g = out.grad()[0];
        real* gx = x.grad();
        for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
    return out;
}

// Euclidean norm over the last dimension; zero slices get subgradient 0.
inline Tensor norm_lastdim(Tensor x) {
    if (x.rank() < 1) throw DimError("norm_lastdim: rank-0 input");
    const std::size_t d = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / d;
    Shape oshape(x.shape().begin(), x.shape().end() - 1);
    Tensor out = Tensor::zeros(oshape);
    {
        const real* px = x.data();
        real* po = out.data();
        for (std::size_t r = 0; r < rows; ++r) {
            real acc = 0;
            for (std::size_t j = 0; j < d; ++j) acc += px[r * d + j] * px[r * d + j];
            po[r] = std::sqrt(acc);
        }
    }
    check_all_finite(out, "norm_lastdim");
    detail::maybe_record(out, {x}, [x, out, rows, d]() mutable {
        const real* px = x.data();
        const real* y = out.data();
        const real* g = out.grad();
        real* gx = x.grad();
        for (std::size_t r = 0; r < rows; ++r) {
            if (y[r] <= real(0)) continue;
            const real s = g[r] / y[r];
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += s * px[r * d + j];
        }
    });
    return out;
}

inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

}  // namespace cats::ops
