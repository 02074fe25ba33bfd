#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "cats/correlation.hpp"
#include "cats/nn.hpp"

namespace cats {

struct AggregatorConfig {
    std::size_t hw = 256;   // tokens per correlation map (h*w)
    std::size_t p = 128;    // appearance embedding channels
    std::size_t levels = 1; // correlation stack depth L
    std::size_t heads = 6;
    std::size_t depth = 1;
    double mlp_ratio = 4.0;
    real pos_embed_init_std = real(0.02);
    bool appearance_on = true;
    bool multi_level_on = true;
    bool swap_on = true;
    bool residual_on = true;
    std::vector<std::size_t> level_channels;  // c_l per level, feeds the projections

    std::size_t token_dim() const { return hw + p; }
    std::size_t mlp_hidden() const {
        return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(token_dim())));
    }
    // Stack depth actually aggregated; the multi-level ablation collapses to 1.
    std::size_t effective_levels() const { return multi_level_on ? levels : 1; }

    void validate() const {
        if (hw == 0 || levels == 0) throw ConfigError("aggregator: hw and levels must be positive");
        if (depth < 1) throw ConfigError("aggregator: depth must be >= 1");
        if (heads == 0 || token_dim() % heads != 0)
            throw ConfigError("aggregator: token dim " + std::to_string(token_dim()) +
                              " not divisible by " + std::to_string(heads) + " heads");
        if (level_channels.size() != levels)
            throw ConfigError("aggregator: level_channels has " +
                              std::to_string(level_channels.size()) + " entries for " +
                              std::to_string(levels) + " levels");
        if (mlp_ratio <= 0.0) throw ConfigError("aggregator: mlp_ratio must be positive");
    }
};

struct AffineParams {
    Tensor w, b;

    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

// One encoder block: intra-correlation attention over the hw rows, then
// inter-correlation attention across the L levels, each pre-LN with its own
// MLP, residuals throughout.
struct AggregatorBlock {
    LayerNormParams ln_attn_intra, ln_mlp_intra, ln_attn_inter, ln_mlp_inter;
    AttentionParams attn_intra, attn_inter;
    MlpParams mlp_intra, mlp_inter;

    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const {
        ln_attn_intra.collect(out, prefix + ".ln_attn_intra");
        attn_intra.collect(out, prefix + ".attn_intra");
        ln_mlp_intra.collect(out, prefix + ".ln_mlp_intra");
        mlp_intra.collect(out, prefix + ".mlp_intra");
        ln_attn_inter.collect(out, prefix + ".ln_attn_inter");
        attn_inter.collect(out, prefix + ".attn_inter");
        ln_mlp_inter.collect(out, prefix + ".ln_mlp_inter");
        mlp_inter.collect(out, prefix + ".mlp_inter");
    }
};

// All learnable state. One set serves both passes of the swapped aggregation;
// out_proj starts at zero so the initial model passes raw correlation through.
struct AggregatorParams {
    std::vector<AffineParams> proj;  // per level, c_l -> p
    Tensor pos_embed;                // [hw, hw+p], added before every encoder pass
    std::vector<AggregatorBlock> blocks;
    AffineParams out_proj;           // (hw+p) -> hw

    static AggregatorParams init(const AggregatorConfig& cfg, Rng& rng) {
        cfg.validate();
        const std::size_t d = cfg.token_dim();
        AggregatorParams p;
        p.proj.reserve(cfg.levels);
        for (std::size_t l = 0; l < cfg.levels; ++l) {
            AffineParams a;
            a.w = Tensor::randn({cfg.level_channels[l], cfg.p}, rng, cfg.pos_embed_init_std, true);
            a.b = Tensor::zeros({cfg.p}, true);
            p.proj.push_back(std::move(a));
        }
        p.pos_embed = Tensor::randn({cfg.hw, d}, rng, cfg.pos_embed_init_std, true);
        p.blocks.resize(cfg.depth);
        for (AggregatorBlock& blk : p.blocks) {
            blk.ln_attn_intra = LayerNormParams::init(d);
            blk.attn_intra = AttentionParams::init(d, rng, cfg.pos_embed_init_std);
            blk.ln_mlp_intra = LayerNormParams::init(d);
            blk.mlp_intra = MlpParams::init(d, cfg.mlp_hidden(), rng, cfg.pos_embed_init_std);
            blk.ln_attn_inter = LayerNormParams::init(d);
            blk.attn_inter = AttentionParams::init(d, rng, cfg.pos_embed_init_std);
            blk.ln_mlp_inter = LayerNormParams::init(d);
            blk.mlp_inter = MlpParams::init(d, cfg.mlp_hidden(), rng, cfg.pos_embed_init_std);
        }
        p.out_proj.w = Tensor::zeros({d, cfg.hw}, true);
        p.out_proj.b = Tensor::zeros({cfg.hw}, true);
        return p;
    }

    std::vector<std::pair<std::string, Tensor>> named() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t l = 0; l < proj.size(); ++l)
            proj[l].collect(out, "proj." + std::to_string(l));
        out.emplace_back("pos_embed", pos_embed);
        for (std::size_t k = 0; k < blocks.size(); ++k)
            blocks[k].collect(out, "block" + std::to_string(k));
        out_proj.collect(out, "out_proj");
        return out;
    }

    std::vector<Tensor> all() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named()) out.push_back(t);
        return out;
    }
};

// Forward-pass observation hook; cmd_viz drains it into PGM files.
struct AggTrace {
    struct Entry {
        std::string name;
        Tensor mat;
    };
    std::vector<Entry> entries;

    void put(std::string name, Tensor mat) { entries.push_back({std::move(name), std::move(mat)}); }
};

// Flattens each feature level to hw rows and applies its linear projection:
// [L, hw, p].
inline Tensor project_appearance(const FeatureStack& d, const AggregatorParams& params,
                                 const AggregatorConfig& cfg) {
    if (d.level_count() != params.proj.size())
        throw ConfigError("project_appearance: stack has " + std::to_string(d.level_count()) +
                          " levels, params expect " + std::to_string(params.proj.size()));
    std::vector<Tensor> embeds;
    embeds.reserve(d.level_count());
    for (std::size_t l = 0; l < d.level_count(); ++l) {
        const Tensor& level = d.levels[l];
        const std::size_t hw = level.dim(0) * level.dim(1);
        if (hw != cfg.hw)
            throw ConfigError("project_appearance: level grid " + shape_str(level.shape()) +
                              " does not match hw=" + std::to_string(cfg.hw));
        Tensor flat = ops::reshape(level, {hw, level.dim(2)});
        embeds.push_back(ops::affine(flat, params.proj[l].w, params.proj[l].b));
    }
    return ops::stack_axis0(embeds);
}

// One encoder pass over the augmented correlation stack [L, hw, hw+p]:
// add positional embedding, intra-correlation attention + MLP over the hw
// rows of each level, inter-correlation attention across levels at each row
// position, then the inter MLP; `depth` repetitions.
inline Tensor transformer_agg(Tensor x, const AggregatorParams& params,
                              const AggregatorConfig& cfg, AggTrace* trace = nullptr,
                              const std::string& tag = "") {
    if (x.rank() != 3 || x.dim(1) != cfg.hw || x.dim(2) != cfg.token_dim())
        throw ConfigError("transformer_agg: input " + shape_str(x.shape()) +
                          " does not match [L, " + std::to_string(cfg.hw) + ", " +
                          std::to_string(cfg.token_dim()) + "]");
    x = ops::add(x, params.pos_embed);
    for (std::size_t k = 0; k < params.blocks.size(); ++k) {
        const AggregatorBlock& blk = params.blocks[k];
        const std::string base = tag + ".depth" + std::to_string(k);

        std::vector<Tensor> intra_sink;
        Tensor a = multihead_attention(
            ops::layernorm(x, blk.ln_attn_intra.gamma, blk.ln_attn_intra.beta), blk.attn_intra,
            cfg.heads, trace ? &intra_sink : nullptr);
        x = ops::add(x, a);
        x = ops::add(x, mlp(ops::layernorm(x, blk.ln_mlp_intra.gamma, blk.ln_mlp_intra.beta),
                            blk.mlp_intra));

        Tensor across = ops::permute(x, {1, 0, 2});  // [hw, L, d]: level vectors as tokens
        std::vector<Tensor> inter_sink;
        Tensor b = multihead_attention(
            ops::layernorm(across, blk.ln_attn_inter.gamma, blk.ln_attn_inter.beta),
            blk.attn_inter, cfg.heads, trace ? &inter_sink : nullptr);
        across = ops::add(across, b);
        x = ops::permute(across, {1, 0, 2});
        x = ops::add(x, mlp(ops::layernorm(x, blk.ln_mlp_inter.gamma, blk.ln_mlp_inter.beta),
                            blk.mlp_inter));

        if (trace) {
            for (std::size_t h = 0; h < intra_sink.size(); ++h)
                trace->put(base + ".intra.h" + std::to_string(h), intra_sink[h]);
            for (std::size_t h = 0; h < inter_sink.size(); ++h)
                trace->put(base + ".inter.h" + std::to_string(h), inter_sink[h]);
        }
    }
    return x;
}

namespace detail {

inline Tensor appearance_or_zeros(const FeatureStack& d, const AggregatorParams& params,
                                  const AggregatorConfig& cfg) {
    if (!cfg.appearance_on) return Tensor::zeros({cfg.effective_levels(), cfg.hw, cfg.p});
    Tensor e = project_appearance(d, params, cfg);
    if (!cfg.multi_level_on && e.dim(0) > 1) e = ops::reshape(ops::mean_axis(e, 0), {1, cfg.hw, cfg.p});
    return e;
}

inline Tensor augmented(Tensor corr, Tensor embed, const AggregatorConfig& cfg) {
    return cfg.p > 0 ? ops::concat_lastdim(corr, embed) : corr;
}

}  // namespace detail

// Full cost aggregation: aggregate with target appearance, project back to hw
// columns, add the residual, swap source/target axes, aggregate again with
// source appearance through the same parameters, add the swapped residual.
inline CorrelationStack cats_forward(const CorrelationStack& corr, const FeatureStack& d_s,
                                     const FeatureStack& d_t, const AggregatorParams& params,
                                     const AggregatorConfig& cfg, AggTrace* trace = nullptr) {
    cfg.validate();
    if (corr.orientation != CorrOrientation::rows_target)
        throw UsageError("cats_forward: input correlation must be rows_target oriented");
    if (corr.maps.rank() != 3 || corr.maps.dim(0) != cfg.levels || corr.maps.dim(1) != cfg.hw ||
        corr.maps.dim(2) != cfg.hw)
        throw ConfigError("cats_forward: correlation " + shape_str(corr.maps.shape()) +
                          " does not match config [L=" + std::to_string(cfg.levels) +
                          ", hw=" + std::to_string(cfg.hw) + "]");

    Tensor raw = corr.maps;
    if (!cfg.multi_level_on && cfg.levels > 1)
        raw = ops::reshape(ops::mean_axis(raw, 0), {1, cfg.hw, cfg.hw});

    const Tensor tgt_embed = detail::appearance_or_zeros(d_t, params, cfg);
    Tensor x = detail::augmented(raw, tgt_embed, cfg);
    x = transformer_agg(x, params, cfg, trace, "stage0");
    x = ops::affine(x, params.out_proj.w, params.out_proj.b);
    if (cfg.residual_on) x = ops::add(x, raw);

    CorrelationStack out;
    out.h = corr.h;
    out.w = corr.w;

    if (!cfg.swap_on) {
        out.maps = x;
        out.orientation = CorrOrientation::rows_target;
        return out;
    }

    x = ops::transpose_last2(x);
    const Tensor src_embed = detail::appearance_or_zeros(d_s, params, cfg);
    x = detail::augmented(x, src_embed, cfg);
    x = transformer_agg(x, params, cfg, trace, "stage1");
    x = ops::affine(x, params.out_proj.w, params.out_proj.b);
    if (cfg.residual_on) x = ops::add(x, ops::transpose_last2(raw));

    out.maps = x;
    out.orientation = CorrOrientation::rows_source;
    return out;
}

// Mean over the level axis: the single map handed to flow decoding.
inline Tensor collapse_levels(const CorrelationStack& refined) {
    return ops::mean_axis(refined.maps, 0);
}

}  // namespace cats
