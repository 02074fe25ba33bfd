#pragma once

#include <cstdio>
#include <fstream>
#include <optional>

#include "cats/synthetic.hpp"

namespace cats {

struct TrainConfig {
    double lr_aggregator = 3e-5;
    double lr_feature_path = 3e-6;  // config parity only; no backbone in synthetic mode
    double weight_decay = 0.05;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
    std::size_t batch_size = 32;
    std::size_t max_steps = 0;
    std::vector<std::pair<std::size_t, double>> lr_milestones;  // (step, multiplier)
    bool lr_auto_schedule = true;  // empty milestones fall back to the 50%/75% defaults
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;  // 0 disables in-training evaluation
    real tau = real(0.02);       // soft-argmax temperature

    void validate() const {
        if (!(lr_aggregator > 0)) throw ConfigError("train: lr must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("train: betas must lie in [0, 1)");
        if (!(eps > 0)) throw ConfigError("train: eps must be positive");
        if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
        if (!(tau > 0)) throw ConfigError("train: tau must be positive");
        for (std::size_t i = 1; i < lr_milestones.size(); ++i)
            if (lr_milestones[i].first <= lr_milestones[i - 1].first)
                throw ConfigError("train: lr milestones must be strictly increasing");
    }

    // 0.5 at 50% and 75% of the run when nothing is configured.
    std::vector<std::pair<std::size_t, double>> effective_milestones() const {
        if (!lr_milestones.empty() || !lr_auto_schedule || max_steps == 0) return lr_milestones;
        std::vector<std::pair<std::size_t, double>> ms;
        const std::size_t half = max_steps / 2, three_q = (max_steps * 3) / 4;
        ms.emplace_back(half, 0.5);
        if (three_q > half) ms.emplace_back(three_q, 0.5);
        return ms;
    }

    double lr_at_step(std::size_t step) const {
        double lr = lr_aggregator;
        for (const auto& [at, mult] : effective_milestones())
            if (step >= at) lr *= mult;
        return lr;
    }
};

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay.

struct AdamWState {
    std::vector<Tensor> m, v;  // first/second moments, shaped like the params
    std::size_t t = 0;

    static AdamWState init(const std::vector<Tensor>& params) {
        AdamWState s;
        for (const Tensor& p : params) {
            s.m.push_back(Tensor::zeros(p.shape()));
            s.v.push_back(Tensor::zeros(p.shape()));
        }
        return s;
    }
};

// One update over the gradients currently held by the params:
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2, bias-corrected, then
//   theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta.
// The decay term multiplies the pre-update theta: it never touches the
// adaptive step.
inline void adamw_step(std::vector<Tensor>& params, AdamWState& state, const TrainConfig& cfg,
                       double lr) {
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw UsageError("adamw_step: state does not match parameter list");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (state.m[i].shape() != p.shape())
            throw UsageError("adamw_step: moment shape mismatch at parameter " + std::to_string(i));
        const real* g = p.grad();
        real* pm = state.m[i].data();
        real* pv = state.v[i].data();
        real* pd = p.data();
        for (std::size_t j = 0; j < p.numel(); ++j) {
            pm[j] = real(cfg.beta1) * pm[j] + real(1.0 - cfg.beta1) * g[j];
            pv[j] = real(cfg.beta2) * pv[j] + real(1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = double(pm[j]) / bc1;
            const double vhat = double(pv[j]) / bc2;
            pd[j] = real(double(pd[j]) - lr * mhat / (std::sqrt(vhat) + cfg.eps) -
                         lr * cfg.weight_decay * double(pd[j]));
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint: magic "CATS", config, named parameter tensors, optimizer
// moments, step counter, RNG state.

struct Checkpoint {
    AggregatorConfig config;
    AggregatorParams params;
    AdamWState opt;
    std::size_t step = 0;
    Rng rng;
};

namespace detail {

inline void put_u64(std::ofstream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ofstream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

inline std::uint64_t get_u64(std::ifstream& in, const std::string& path) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (in.gcount() != 8) throw FormatError("load_checkpoint: " + path + ": truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::ifstream& in, const std::string& path) {
    const std::uint64_t bits = get_u64(in, path);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void put_tensor_data(std::ofstream& out, const Tensor& t) {
    for (const real v : t.values()) put_f64(out, double(v));
}

inline void get_tensor_data(std::ifstream& in, const std::string& path, Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = real(get_f64(in, path));
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    out.write("CATS", 4);
    detail::put_u64(out, 1);  // format version
    const AggregatorConfig& c = ck.config;
    detail::put_u64(out, c.hw);
    detail::put_u64(out, c.p);
    detail::put_u64(out, c.levels);
    detail::put_u64(out, c.heads);
    detail::put_u64(out, c.depth);
    detail::put_f64(out, c.mlp_ratio);
    detail::put_f64(out, double(c.pos_embed_init_std));
    const unsigned char flags[4] = {c.appearance_on, c.multi_level_on, c.swap_on, c.residual_on};
    out.write(reinterpret_cast<const char*>(flags), 4);
    detail::put_u64(out, c.level_channels.size());
    for (const std::size_t ch : c.level_channels) detail::put_u64(out, ch);

    const auto named = ck.params.named();
    detail::put_u64(out, named.size());
    for (const auto& [name, t] : named) {
        detail::put_u64(out, name.size());
        out.write(name.data(), std::streamsize(name.size()));
        detail::put_u64(out, t.rank());
        for (const std::size_t d : t.shape()) detail::put_u64(out, d);
        detail::put_tensor_data(out, t);
    }
    for (const Tensor& t : ck.opt.m) detail::put_tensor_data(out, t);
    for (const Tensor& t : ck.opt.v) detail::put_tensor_data(out, t);
    detail::put_u64(out, ck.opt.t);
    detail::put_u64(out, ck.step);
    detail::put_u64(out, ck.rng.state);
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::string(magic, 4) != "CATS")
        throw FormatError("load_checkpoint: " + path + ": bad magic");
    const std::uint64_t version = detail::get_u64(in, path);
    if (version != 1)
        throw FormatError("load_checkpoint: " + path + ": unsupported version " +
                          std::to_string(version));
    Checkpoint ck;
    AggregatorConfig& c = ck.config;
    c.hw = detail::get_u64(in, path);
    c.p = detail::get_u64(in, path);
    c.levels = detail::get_u64(in, path);
    c.heads = detail::get_u64(in, path);
    c.depth = detail::get_u64(in, path);
    c.mlp_ratio = detail::get_f64(in, path);
    c.pos_embed_init_std = real(detail::get_f64(in, path));
    unsigned char flags[4];
    in.read(reinterpret_cast<char*>(flags), 4);
    if (in.gcount() != 4) throw FormatError("load_checkpoint: " + path + ": truncated flags");
    c.appearance_on = flags[0];
    c.multi_level_on = flags[1];
    c.swap_on = flags[2];
    c.residual_on = flags[3];
    const std::uint64_t nch = detail::get_u64(in, path);
    if (nch > 4096) throw FormatError("load_checkpoint: " + path + ": implausible channel list");
    c.level_channels.resize(nch);
    for (auto& ch : c.level_channels) ch = detail::get_u64(in, path);
    c.validate();

    Rng init_rng(0);
    ck.params = AggregatorParams::init(c, init_rng);
    auto named = ck.params.named();
    const std::uint64_t count = detail::get_u64(in, path);
    if (count != named.size())
        throw FormatError("load_checkpoint: " + path + ": expected " +
                          std::to_string(named.size()) + " tensors, found " +
                          std::to_string(count));
    for (auto& [name, t] : named) {
        const std::uint64_t len = detail::get_u64(in, path);
        std::string got(len, '\0');
        in.read(got.data(), std::streamsize(len));
        if (in.gcount() != std::streamsize(len) || got != name)
            throw FormatError("load_checkpoint: " + path + ": tensor '" + got +
                              "' does not match expected '" + name + "'");
        const std::uint64_t rank = detail::get_u64(in, path);
        Shape shape(rank);
        for (auto& d : shape) d = detail::get_u64(in, path);
        if (shape != t.shape())
            throw FormatError("load_checkpoint: " + path + ": tensor '" + name + "' has shape " +
                              shape_str(shape) + ", expected " + shape_str(t.shape()));
        detail::get_tensor_data(in, path, t);
    }
    ck.opt = AdamWState::init(ck.params.all());
    for (Tensor& t : ck.opt.m) detail::get_tensor_data(in, path, t);
    for (Tensor& t : ck.opt.v) detail::get_tensor_data(in, path, t);
    ck.opt.t = detail::get_u64(in, path);
    ck.step = detail::get_u64(in, path);
    ck.rng.state = detail::get_u64(in, path);
    return ck;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRow {
    std::size_t step = 0;
    double loss = 0;
    bool has_eval = false;
    EvalMetrics eval;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<TrainLogRow> log;
};

namespace detail {

struct PreparedPair {
    CorrelationStack corr;
    FeatureStack norm_src, norm_tgt;
    const SyntheticPair* pair = nullptr;
};

inline PreparedPair prepare(const SyntheticPair& pair) {
    PreparedPair pp;
    pp.pair = &pair;
    pp.norm_src = resize_normalize(pair.d_s, pair.gt_flow.h, pair.gt_flow.w);
    pp.norm_tgt = resize_normalize(pair.d_t, pair.gt_flow.h, pair.gt_flow.w);
    pp.corr = build_correlation(pp.norm_tgt, pp.norm_src);
    return pp;
}

inline FlowField decode_flow(const PreparedPair& pp, const AggregatorParams& params,
                             const AggregatorConfig& cfg, real tau, AggTrace* trace = nullptr) {
    const CorrelationStack refined = cats_forward(pp.corr, pp.norm_src, pp.norm_tgt, params, cfg,
                                                  trace);
    if (refined.orientation != CorrOrientation::rows_source)
        throw UsageError("decode_flow: refined correlation is not source-oriented; "
                         "flow decoding needs swap_on or an explicit transpose");
    return soft_argmax(collapse_levels(refined), pp.pair->gt_flow.h, pp.pair->gt_flow.w, tau);
}

// The swap-ablated model emits rows_target maps; decode on the transpose so
// the flow stays defined over source positions.
inline FlowField decode_flow_any(const PreparedPair& pp, const AggregatorParams& params,
                                 const AggregatorConfig& cfg, real tau) {
    const CorrelationStack refined = cats_forward(pp.corr, pp.norm_src, pp.norm_tgt, params, cfg);
    Tensor map = collapse_levels(refined);
    if (refined.orientation == CorrOrientation::rows_target) map = ops::transpose_last2(map);
    return soft_argmax(map, pp.pair->gt_flow.h, pp.pair->gt_flow.w, tau);
}

}  // namespace detail

// Pooled metrics of a parameter set over a list of pairs: AEPE averaged per
// pair, PCK pooled over all keypoints. Never mutates the parameters.
inline EvalMetrics evaluate_set(const AggregatorParams& params, const AggregatorConfig& cfg,
                                const std::vector<SyntheticPair>& pairs, real tau) {
    if (pairs.empty()) throw EvalError("evaluate_set: empty evaluation set");
    TapeSuspend no_tape;
    double aepe_sum = 0;
    std::size_t n_kp = 0, c05 = 0, c10 = 0, c15 = 0;
    for (const SyntheticPair& pair : pairs) {
        const detail::PreparedPair pp = detail::prepare(pair);
        const FlowField pred = detail::decode_flow_any(pp, params, cfg, tau);
        aepe_sum += double(aepe(pred, pair.gt_flow).item());
        const KeypointSet transferred = transfer_keypoints(pred, pair.kps);
        const double h = double(pair.gt_flow.h), w = double(pair.gt_flow.w);
        const double ext = std::max(h, w);
        for (std::size_t i = 0; i < transferred.points.size(); ++i) {
            if (!transferred.points[i].valid || !pair.kps.points[i].valid) continue;
            const double ex = double(transferred.points[i].x_tgt - pair.kps.points[i].x_tgt);
            const double ey = double(transferred.points[i].y_tgt - pair.kps.points[i].y_tgt);
            const double err = std::sqrt(ex * ex + ey * ey);
            ++n_kp;
            c05 += err <= 0.05 * ext ? 1 : 0;
            c10 += err <= 0.10 * ext ? 1 : 0;
            c15 += err <= 0.15 * ext ? 1 : 0;
        }
    }
    if (n_kp == 0) throw EvalError("evaluate_set: no valid keypoints in the evaluation set");
    EvalMetrics m;
    m.aepe = aepe_sum / double(pairs.size());
    m.pck05 = double(c05) / double(n_kp);
    m.pck10 = double(c10) / double(n_kp);
    m.pck15 = double(c15) / double(n_kp);
    return m;
}

inline EvalMetrics evaluate(const Checkpoint& ck, const std::vector<SyntheticPair>& pairs,
                            real tau = real(0.02)) {
    return evaluate_set(ck.params, ck.config, pairs, tau);
}

// Pooled WTA reference over a set (transposed raw correlation, level mean).
inline EvalMetrics wta_baseline_set(const std::vector<SyntheticPair>& pairs, real tau) {
    if (pairs.empty()) throw EvalError("wta_baseline_set: empty set");
    double aepe_sum = 0;
    std::size_t n_kp = 0, c05 = 0, c10 = 0, c15 = 0;
    for (const SyntheticPair& pair : pairs) {
        const detail::PreparedPair pp = detail::prepare(pair);
        const Tensor map = ops::mean_axis(ops::transpose_last2(pp.corr.maps), 0);
        const FlowField pred = soft_argmax(map, pair.gt_flow.h, pair.gt_flow.w, tau);
        aepe_sum += double(aepe(pred, pair.gt_flow).item());
        const KeypointSet transferred = transfer_keypoints(pred, pair.kps);
        const double ext = double(std::max(pair.gt_flow.h, pair.gt_flow.w));
        for (std::size_t i = 0; i < transferred.points.size(); ++i) {
            if (!transferred.points[i].valid || !pair.kps.points[i].valid) continue;
            const double ex = double(transferred.points[i].x_tgt - pair.kps.points[i].x_tgt);
            const double ey = double(transferred.points[i].y_tgt - pair.kps.points[i].y_tgt);
            const double err = std::sqrt(ex * ex + ey * ey);
            ++n_kp;
            c05 += err <= 0.05 * ext ? 1 : 0;
            c10 += err <= 0.10 * ext ? 1 : 0;
            c15 += err <= 0.15 * ext ? 1 : 0;
        }
    }
    if (n_kp == 0) throw EvalError("wta_baseline_set: no valid keypoints");
    EvalMetrics m;
    m.aepe = aepe_sum / double(pairs.size());
    m.pck05 = double(c05) / double(n_kp);
    m.pck10 = double(c10) / double(n_kp);
    m.pck15 = double(c15) / double(n_kp);
    return m;
}

// Runs (or resumes) the optimization loop. Deterministic in (configs, seed):
// batch sampling comes from the checkpoint RNG, the learning rate is derived
// from the step counter, and evaluation never touches the RNG.
inline TrainResult train(const std::vector<SyntheticPair>& dataset, const TrainConfig& tcfg,
                         const AggregatorConfig& acfg,
                         const std::vector<SyntheticPair>* eval_set = nullptr,
                         std::optional<Checkpoint> resume = std::nullopt,
                         std::size_t stop_at_step = SIZE_MAX) {
    tcfg.validate();
    acfg.validate();
    if (dataset.empty()) throw ConfigError("train: empty dataset");

    TrainResult result;
    if (resume) {
        const AggregatorConfig& rc = resume->config;
        if (rc.hw != acfg.hw || rc.p != acfg.p || rc.levels != acfg.levels ||
            rc.heads != acfg.heads || rc.depth != acfg.depth || rc.mlp_ratio != acfg.mlp_ratio ||
            rc.level_channels != acfg.level_channels || rc.appearance_on != acfg.appearance_on ||
            rc.multi_level_on != acfg.multi_level_on || rc.swap_on != acfg.swap_on ||
            rc.residual_on != acfg.residual_on)
            throw ConfigError("train: checkpoint config does not match the requested config");
        result.checkpoint = std::move(*resume);
    } else {
        Rng init_rng(tcfg.seed ^ 0x243f6a8885a308d3ULL);
        result.checkpoint.config = acfg;
        result.checkpoint.params = AggregatorParams::init(acfg, init_rng);
        result.checkpoint.opt = AdamWState::init(result.checkpoint.params.all());
        result.checkpoint.rng = Rng(tcfg.seed ^ 0x13198a2e03707344ULL);
        result.checkpoint.step = 0;
    }
    Checkpoint& ck = result.checkpoint;

    std::vector<detail::PreparedPair> prepared;
    prepared.reserve(dataset.size());
    for (const SyntheticPair& pair : dataset) prepared.push_back(detail::prepare(pair));

    std::vector<Tensor> params = ck.params.all();

    while (ck.step < tcfg.max_steps && ck.step < stop_at_step) {
        const double lr = tcfg.lr_at_step(ck.step);
        std::vector<std::size_t> batch(tcfg.batch_size);
        for (auto& b : batch) b = std::size_t(ck.rng.uniform_index(dataset.size()));

        for (Tensor& p : params) p.zero_grad();
        double loss_value = 0;
        {
            Tape tape;
            Tensor loss;
            for (const std::size_t idx : batch) {
                const FlowField pred = detail::decode_flow_any(prepared[idx], ck.params, acfg,
                                                               tcfg.tau);
                const Tensor pair_loss = aepe(pred, prepared[idx].pair->gt_flow);
                loss = loss.defined() ? ops::add(loss, pair_loss) : pair_loss;
            }
            loss = ops::scale(loss, real(1) / real(tcfg.batch_size));
            loss_value = double(loss.item());
            if (!std::isfinite(loss_value)) {
                std::string seeds;
                for (const std::size_t idx : batch)
                    seeds += (seeds.empty() ? "" : ", ") + std::to_string(dataset[idx].seed);
                throw NumericError("train: non-finite loss at step " + std::to_string(ck.step) +
                                   "; batch pair seeds: " + seeds);
            }
            tape.backward(loss);
        }
        adamw_step(params, ck.opt, tcfg, lr);
        ck.step += 1;

        TrainLogRow row;
        row.step = ck.step;
        row.loss = loss_value;
        if (eval_set && tcfg.eval_every > 0 &&
            (ck.step % tcfg.eval_every == 0 || ck.step == tcfg.max_steps)) {
            row.has_eval = true;
            row.eval = evaluate_set(ck.params, acfg, *eval_set, tcfg.tau);
        }
        result.log.push_back(row);
    }
    return result;
}

// Metric log CSV: "step,loss,aepe,pck05,pck10,pck15"; metric columns stay
// empty on steps without an evaluation pass.
inline void save_metric_log(const std::vector<TrainLogRow>& log, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("save_metric_log: cannot open " + path);
    out << "step,loss,aepe,pck05,pck10,pck15\n";
    char line[256];
    for (const TrainLogRow& row : log) {
        if (row.has_eval)
            std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", row.step,
                          row.loss, row.eval.aepe, row.eval.pck05, row.eval.pck10, row.eval.pck15);
        else
            std::snprintf(line, sizeof line, "%zu,%.17g,,,,\n", row.step, row.loss);
        out << line;
    }
    if (!out) throw IoError("save_metric_log: write failed for " + path);
}

}  // namespace cats
