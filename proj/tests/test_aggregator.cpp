#include <catch2/catch.hpp>

#include "cats/aggregator.hpp"
#include "cats/gradcheck.hpp"
#include "oracles.hpp"

using namespace cats;
namespace O = cats::ops;

namespace {

AggregatorConfig toy_config(std::size_t L = 2, std::size_t hw = 4, std::size_t p = 2,
                            std::size_t heads = 2, std::size_t c = 3) {
    AggregatorConfig cfg;
    cfg.hw = hw;
    cfg.p = p;
    cfg.levels = L;
    cfg.heads = heads;
    cfg.depth = 1;
    cfg.mlp_ratio = 2.0;
    cfg.level_channels.assign(L, c);
    return cfg;
}

FeatureStack toy_features(Rng& rng, const AggregatorConfig& cfg, std::size_t h, std::size_t w) {
    FeatureStack fs;
    for (std::size_t l = 0; l < cfg.levels; ++l)
        fs.levels.push_back(Tensor::randn({h, w, cfg.level_channels[l]}, rng));
    return resize_normalize(fs, h, w);
}

void randomize_affine(AffineParams& a, Rng& rng, real stddev) {
    Tensor w = Tensor::randn(a.w.shape(), rng, stddev);
    std::copy_n(w.data(), w.numel(), a.w.data());
    Tensor b = Tensor::randn(a.b.shape(), rng, stddev);
    std::copy_n(b.data(), b.numel(), a.b.data());
}

void zero_block(AggregatorBlock& blk) {
    for (Tensor t : {blk.attn_intra.wq, blk.attn_intra.bq, blk.attn_intra.wk, blk.attn_intra.bk,
                     blk.attn_intra.wv, blk.attn_intra.bv, blk.attn_intra.wo, blk.attn_intra.bo,
                     blk.attn_inter.wq, blk.attn_inter.bq, blk.attn_inter.wk, blk.attn_inter.bk,
                     blk.attn_inter.wv, blk.attn_inter.bv, blk.attn_inter.wo, blk.attn_inter.bo,
                     blk.mlp_intra.w1, blk.mlp_intra.b1, blk.mlp_intra.w2, blk.mlp_intra.b2,
                     blk.mlp_inter.w1, blk.mlp_inter.b1, blk.mlp_inter.w2, blk.mlp_inter.b2})
        std::fill_n(t.data(), t.numel(), real(0));
}

std::vector<oracle::Mat> split_levels(const Tensor& t) {
    const std::size_t L = t.dim(0), chunk = t.numel() / L;
    std::vector<oracle::Mat> out;
    for (std::size_t l = 0; l < L; ++l)
        out.emplace_back(t.values().begin() + l * chunk, t.values().begin() + (l + 1) * chunk);
    return out;
}

}  // namespace

TEST_CASE("config validation", "[aggregator]") {
    AggregatorConfig cfg = toy_config();
    cfg.heads = 5;  // (4+2) % 5 != 0
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.depth = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.level_channels.pop_back();
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("projection matches loop-level affine", "[aggregator]") {
    Rng rng(211);
    AggregatorConfig cfg = toy_config(2, 4, 3, 1, 5);
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    for (auto& a : params.proj) randomize_affine(a, rng, 0.5);
    FeatureStack fs = toy_features(rng, cfg, 2, 2);
    Tensor e = project_appearance(fs, params, cfg);
    REQUIRE(e.shape() == Shape{2, 4, 3});
    for (std::size_t l = 0; l < 2; ++l) {
        oracle::Mat flat(fs.levels[l].values().begin(), fs.levels[l].values().end());
        const auto ref = oracle::affine(flat, 4, 5, oracle::to_mat(params.proj[l].w),
                                        oracle::to_mat(params.proj[l].b), 3);
        for (std::size_t i = 0; i < ref.size(); ++i)
            REQUIRE(std::abs(e.values()[l * 12 + i] - ref[i]) <= 1e-12);
    }
}

TEST_CASE("zero projection on zero features gives zero embedding", "[aggregator]") {
    Rng rng(213);
    AggregatorConfig cfg = toy_config(1, 4, 2, 1, 3);
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    std::fill_n(params.proj[0].w.data(), params.proj[0].w.numel(), real(0));
    FeatureStack fs;
    fs.levels.push_back(Tensor::zeros({2, 2, 3}));
    Tensor e = project_appearance(fs, params, cfg);
    for (real v : e.values()) REQUIRE(v == 0.0);
}

TEST_CASE("identity-shaped projection returns flattened features", "[aggregator]") {
    Rng rng(217);
    AggregatorConfig cfg = toy_config(1, 4, 3, 1, 3);  // p == c
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    std::fill_n(params.proj[0].w.data(), 9, real(0));
    params.proj[0].w.data()[0] = 1;
    params.proj[0].w.data()[4] = 1;
    params.proj[0].w.data()[8] = 1;
    FeatureStack fs = toy_features(rng, cfg, 2, 2);
    Tensor e = project_appearance(fs, params, cfg);
    for (std::size_t i = 0; i < 12; ++i)
        REQUIRE(e.values()[i] == Approx(fs.levels[0].values()[i]).margin(1e-15));
}

TEST_CASE("zeroed branches reduce encoder to positional add", "[aggregator]") {
    Rng rng(219);
    AggregatorConfig cfg = toy_config();
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    zero_block(params.blocks[0]);
    Tensor x = Tensor::randn({cfg.levels, cfg.hw, cfg.token_dim()}, rng);
    Tensor y = transformer_agg(x, params, cfg);
    Tensor expect = O::add(x, params.pos_embed);
    for (std::size_t i = 0; i < y.numel(); ++i)
        REQUIRE(y.values()[i] == Approx(expect.values()[i]).margin(1e-15));
}

TEST_CASE("single-level encoder matches oracle (inter attention over one token)", "[aggregator][oracle]") {
    Rng rng(223);
    AggregatorConfig cfg = toy_config(1, 4, 2, 2);
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    Tensor x = Tensor::randn({1, cfg.hw, cfg.token_dim()}, rng);
    Tensor y = transformer_agg(x, params, cfg);
    const auto ref = oracle::transformer_agg(split_levels(x), cfg.hw, cfg.token_dim(), params,
                                             cfg.heads);
    for (std::size_t i = 0; i < y.numel(); ++i) REQUIRE(std::abs(y.values()[i] - ref[0][i]) <= 1e-10);
}

TEST_CASE("encoder matches straight-line oracle on random toys", "[aggregator][oracle]") {
    Rng rng(227);
    for (int iter = 0; iter < 10; ++iter) {
        const std::size_t L = 1 + rng.uniform_index(3);
        AggregatorConfig cfg = toy_config(L, 4, 2, 1 + rng.uniform_index(2) * 2);  // heads 1 or 3
        AggregatorParams params = AggregatorParams::init(cfg, rng);
        Tensor x = Tensor::randn({L, cfg.hw, cfg.token_dim()}, rng);
        Tensor y = transformer_agg(x, params, cfg);
        const auto ref = oracle::transformer_agg(split_levels(x), cfg.hw, cfg.token_dim(), params,
                                                 cfg.heads);
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t i = 0; i < ref[l].size(); ++i)
                REQUIRE(std::abs(y.values()[l * ref[l].size() + i] - ref[l][i]) <= 1e-10);
    }
}

TEST_CASE("zero-initialized output projection passes raw correlation through", "[aggregator]") {
    Rng rng(229);
    AggregatorConfig cfg = toy_config();
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    FeatureStack d_s = toy_features(rng, cfg, 2, 2);
    FeatureStack d_t = toy_features(rng, cfg, 2, 2);
    CorrelationStack corr = build_correlation(d_t, d_s);
    CorrelationStack refined = cats_forward(corr, d_s, d_t, params, cfg);
    REQUIRE(refined.orientation == CorrOrientation::rows_source);
    Tensor expect = O::transpose_last2(corr.maps);
    for (std::size_t i = 0; i < expect.numel(); ++i)
        REQUIRE(std::abs(refined.maps.values()[i] - expect.values()[i]) <= 1e-12);
}

TEST_CASE("swap disabled keeps target orientation", "[aggregator]") {
    Rng rng(233);
    AggregatorConfig cfg = toy_config();
    cfg.swap_on = false;
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    FeatureStack d_s = toy_features(rng, cfg, 2, 2);
    FeatureStack d_t = toy_features(rng, cfg, 2, 2);
    CorrelationStack corr = build_correlation(d_t, d_s);
    CorrelationStack refined = cats_forward(corr, d_s, d_t, params, cfg);
    REQUIRE(refined.orientation == CorrOrientation::rows_target);
    for (std::size_t i = 0; i < corr.maps.numel(); ++i)
        REQUIRE(std::abs(refined.maps.values()[i] - corr.maps.values()[i]) <= 1e-12);
}

TEST_CASE("wrong input orientation is rejected", "[aggregator]") {
    Rng rng(239);
    AggregatorConfig cfg = toy_config();
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    FeatureStack d_s = toy_features(rng, cfg, 2, 2);
    FeatureStack d_t = toy_features(rng, cfg, 2, 2);
    CorrelationStack corr = build_correlation(d_t, d_s);
    corr.orientation = CorrOrientation::rows_source;
    REQUIRE_THROWS_AS(cats_forward(corr, d_s, d_t, params, cfg), UsageError);
}

TEST_CASE("full aggregation matches composed oracle", "[aggregator][oracle]") {
    Rng rng(241);
    AggregatorConfig cfg = toy_config();
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    randomize_affine(params.out_proj, rng, 0.3);
    for (auto& a : params.proj) randomize_affine(a, rng, 0.3);
    FeatureStack d_s = toy_features(rng, cfg, 2, 2);
    FeatureStack d_t = toy_features(rng, cfg, 2, 2);
    CorrelationStack corr = build_correlation(d_t, d_s);
    CorrelationStack refined = cats_forward(corr, d_s, d_t, params, cfg);

    const std::size_t hw = cfg.hw, d = cfg.token_dim(), p = cfg.p, L = cfg.levels;
    const Tensor tgt_embed = project_appearance(d_t, params, cfg);
    const Tensor src_embed = project_appearance(d_s, params, cfg);
    auto augment = [&](const std::vector<oracle::Mat>& maps, const Tensor& embed) {
        std::vector<oracle::Mat> out;
        for (std::size_t l = 0; l < L; ++l) {
            oracle::Mat m(hw * d);
            for (std::size_t r = 0; r < hw; ++r) {
                for (std::size_t j = 0; j < hw; ++j) m[r * d + j] = maps[l][r * hw + j];
                for (std::size_t j = 0; j < p; ++j)
                    m[r * d + hw + j] = embed.values()[(l * hw + r) * p + j];
            }
            out.push_back(std::move(m));
        }
        return out;
    };
    auto project_residual = [&](const std::vector<oracle::Mat>& x,
                                const std::vector<oracle::Mat>& res) {
        std::vector<oracle::Mat> out;
        for (std::size_t l = 0; l < L; ++l) {
            oracle::Mat y = oracle::affine(x[l], hw, d, oracle::to_mat(params.out_proj.w),
                                           oracle::to_mat(params.out_proj.b), hw);
            for (std::size_t i = 0; i < hw * hw; ++i) y[i] += res[l][i];
            out.push_back(std::move(y));
        }
        return out;
    };
    auto transpose_all = [&](const std::vector<oracle::Mat>& x) {
        std::vector<oracle::Mat> out;
        for (std::size_t l = 0; l < L; ++l) {
            oracle::Mat y(hw * hw);
            for (std::size_t i = 0; i < hw; ++i)
                for (std::size_t j = 0; j < hw; ++j) y[j * hw + i] = x[l][i * hw + j];
            out.push_back(std::move(y));
        }
        return out;
    };

    const auto raw = split_levels(corr.maps);
    auto stage1 = project_residual(
        oracle::transformer_agg(augment(raw, tgt_embed), hw, d, params, cfg.heads), raw);
    auto stage2 = project_residual(
        oracle::transformer_agg(augment(transpose_all(stage1), src_embed), hw, d, params, cfg.heads),
        transpose_all(raw));

    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t i = 0; i < hw * hw; ++i)
            REQUIRE(std::abs(refined.maps.values()[l * hw * hw + i] - stage2[l][i]) <= 1e-10);
}

TEST_CASE("collapse_levels averages the stack", "[aggregator]") {
    Rng rng(251);
    Tensor a = Tensor::randn({3, 3}, rng);
    CorrelationStack s;
    s.maps = O::stack_axis0({a, a, a});
    s.h = s.w = 3;  // 3x3 maps here are just data
    Tensor m = collapse_levels(s);
    for (std::size_t i = 0; i < 9; ++i) REQUIRE(m.values()[i] == Approx(a.values()[i]).margin(1e-16));

    CorrelationStack s2;
    s2.maps = O::stack_axis0({a, O::scale(a, -1.0)});
    Tensor z = collapse_levels(s2);
    for (real v : z.values()) REQUIRE(v == Approx(0.0).margin(1e-16));

    CorrelationStack s3;
    Tensor b = Tensor::randn({3, 3}, rng);
    Tensor c = Tensor::randn({3, 3}, rng);
    s3.maps = O::stack_axis0({a, b, c});
    Tensor m3 = collapse_levels(s3);
    for (std::size_t i = 0; i < 9; ++i)
        REQUIRE(std::abs(m3.values()[i] -
                         (a.values()[i] + b.values()[i] + c.values()[i]) / 3.0) <= 1e-15);
}

TEST_CASE("both stages read the same parameter storage", "[aggregator]") {
    Rng rng(257);
    AggregatorConfig cfg = toy_config();
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    randomize_affine(params.out_proj, rng, 0.3);
    FeatureStack d_s = toy_features(rng, cfg, 2, 2);
    FeatureStack d_t = toy_features(rng, cfg, 2, 2);
    CorrelationStack corr = build_correlation(d_t, d_s);

    AggTrace before, after;
    cats_forward(corr, d_s, d_t, params, cfg, &before);
    params.blocks[0].attn_intra.wq.data()[0] += 0.5;
    cats_forward(corr, d_s, d_t, params, cfg, &after);

    bool stage0_changed = false, stage1_changed = false;
    REQUIRE(before.entries.size() == after.entries.size());
    for (std::size_t i = 0; i < before.entries.size(); ++i) {
        if (before.entries[i].mat.values() == after.entries[i].mat.values()) continue;
        if (before.entries[i].name.starts_with("stage0")) stage0_changed = true;
        if (before.entries[i].name.starts_with("stage1")) stage1_changed = true;
    }
    REQUIRE(stage0_changed);
    REQUIRE(stage1_changed);
}

TEST_CASE("ablation flags gate each mechanism", "[aggregator]") {
    Rng rng(263);
    AggregatorConfig cfg = toy_config();
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    randomize_affine(params.out_proj, rng, 0.3);
    FeatureStack d_s = toy_features(rng, cfg, 2, 2);
    FeatureStack d_t = toy_features(rng, cfg, 2, 2);
    CorrelationStack corr = build_correlation(d_t, d_s);

    CorrelationStack full = cats_forward(corr, d_s, d_t, params, cfg);

    AggregatorConfig no_app = cfg;
    no_app.appearance_on = false;
    CorrelationStack va = cats_forward(corr, d_s, d_t, params, no_app);
    REQUIRE(va.maps.values() != full.maps.values());
    REQUIRE(va.maps.shape() == full.maps.shape());

    AggregatorConfig no_res = cfg;
    no_res.residual_on = false;
    CorrelationStack vr = cats_forward(corr, d_s, d_t, params, no_res);
    REQUIRE(vr.maps.values() != full.maps.values());

    AggregatorConfig no_ml = cfg;
    no_ml.multi_level_on = false;
    CorrelationStack vm = cats_forward(corr, d_s, d_t, params, no_ml);
    REQUIRE(vm.maps.dim(0) == 1);
}

TEST_CASE("gradients reach every parameter once out_proj is nonzero", "[aggregator][grad]") {
    Rng rng(269);
    AggregatorConfig cfg = toy_config();
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    randomize_affine(params.out_proj, rng, 0.3);
    FeatureStack d_s = toy_features(rng, cfg, 2, 2);
    FeatureStack d_t = toy_features(rng, cfg, 2, 2);
    CorrelationStack corr = build_correlation(d_t, d_s);
    Tensor weights = Tensor::randn({cfg.levels, cfg.hw, cfg.hw}, rng);
    {
        Tape tape;
        CorrelationStack refined = cats_forward(corr, d_s, d_t, params, cfg);
        tape.backward(O::sum_all(O::mul(refined.maps, weights)));
    }
    for (const auto& [name, t] : params.named()) {
        INFO(name);
        bool any = false;
        for (real g : t.grad_values()) any = any || g != 0.0;
        REQUIRE(any);
    }
}

TEST_CASE("full aggregation gradient matches finite differences", "[aggregator][grad]") {
    Rng rng(271);
    // ~2.9k parameters: hw=9, p=3, heads=2, mlp_ratio=2, L=2
    AggregatorConfig cfg = toy_config(2, 9, 3, 2, 4);
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    randomize_affine(params.out_proj, rng, 0.1);
    FeatureStack d_s = toy_features(rng, cfg, 3, 3);
    FeatureStack d_t = toy_features(rng, cfg, 3, 3);
    CorrelationStack corr = build_correlation(d_t, d_s);
    Tensor weights = Tensor::randn({cfg.levels, cfg.hw, cfg.hw}, rng);
    const real err = finite_diff_check_params(
        [&] {
            CorrelationStack refined = cats_forward(corr, d_s, d_t, params, cfg);
            return O::sum_all(O::mul(refined.maps, weights));
        },
        params.all(), 1e-5);
    REQUIRE(err <= 1e-4);
}

TEST_CASE("publication-scale configuration constructs and validates", "[aggregator]") {
    Rng rng(277);
    AggregatorConfig cfg;
    cfg.hw = 256;  // 16x16 grid
    cfg.p = 128;
    cfg.levels = 2;
    cfg.heads = 6;
    cfg.depth = 1;
    cfg.level_channels = {64, 96};
    cfg.validate();
    REQUIRE(cfg.token_dim() == 384);
    REQUIRE(cfg.token_dim() % cfg.heads == 0);
    AggregatorParams params = AggregatorParams::init(cfg, rng);
    REQUIRE(params.pos_embed.shape() == Shape{256, 384});
    REQUIRE(params.out_proj.w.shape() == Shape{384, 256});
    for (real v : params.out_proj.w.values()) REQUIRE(v == 0.0);
}
