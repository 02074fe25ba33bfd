#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "cats/gradsuite.hpp"
#include "cats/runconfig.hpp"
#include "cats/trainer.hpp"
#include "cats/viz.hpp"

namespace fs = std::filesystem;
using namespace cats;

namespace {

// Tracks files written by one command; a failure removes everything that was
// created so a bad run leaves no partial output behind.
class OutputGuard {
  public:
    std::string track(std::string path) {
        paths_.push_back(path);
        return path;
    }
    void disarm() { armed_ = false; }
    ~OutputGuard() {
        if (!armed_) return;
        for (const std::string& p : paths_) {
            std::error_code ec;
            fs::remove(p, ec);
        }
    }

  private:
    std::vector<std::string> paths_;
    bool armed_ = true;
};

std::string pair_prefix(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "pair_%04zu", index);
    return buf;
}

void write_effective_config(const RunConfig& rc, const std::string& dir, OutputGuard& guard) {
    const std::string path = guard.track(dir + "/config_effective.ini");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << rc.echo();
}

SyntheticPair load_pair(const std::string& prefix) {
    SyntheticPair pair;
    pair.d_s = load_features(prefix + "_src.catf");
    pair.d_t = load_features(prefix + "_tgt.catf");
    pair.kps = load_keypoints(prefix + "_kps.csv");
    pair.gt_flow = load_flow_text(prefix + "_flow.txt");
    return pair;
}

std::vector<SyntheticPair> load_dataset(const std::string& dir) {
    const std::string manifest = dir + "/manifest.txt";
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open " + manifest);
    std::vector<SyntheticPair> pairs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        pairs.push_back(load_pair(dir + "/" + line));
    }
    return pairs;
}

std::vector<SyntheticPair> generate_dataset(const RunConfig& rc, std::size_t count, bool eval) {
    std::vector<SyntheticPair> pairs;
    pairs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) pairs.push_back(generate_pair(rc.generator(i, eval)));
    return pairs;
}

int cmd_synth(const std::string& config_path, const std::string& out_dir, long long count_flag) {
    const RunConfig rc = RunConfig::from_file(config_path);
    const std::size_t count = count_flag >= 0 ? std::size_t(count_flag) : rc.data_count();
    fs::create_directories(out_dir);
    OutputGuard guard;
    write_effective_config(rc, out_dir, guard);
    std::ofstream manifest(guard.track(out_dir + "/manifest.txt"), std::ios::trunc);
    if (!manifest) throw IoError("cannot write manifest in " + out_dir);
    for (std::size_t i = 0; i < count; ++i) {
        const SyntheticPair pair = generate_pair(rc.generator(i, false));
        const std::string prefix = pair_prefix(i);
        save_features(pair.d_s, guard.track(out_dir + "/" + prefix + "_src.catf"));
        save_features(pair.d_t, guard.track(out_dir + "/" + prefix + "_tgt.catf"));
        save_keypoints(pair.kps, guard.track(out_dir + "/" + prefix + "_kps.csv"));
        save_flow_text(pair.gt_flow, guard.track(out_dir + "/" + prefix + "_flow.txt"));
        manifest << prefix << "\n";
    }
    manifest.close();
    guard.disarm();
    std::cout << "pairs=" << count << "\nout=" << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    const RunConfig rc = RunConfig::from_file(config_path);
    const AggregatorConfig acfg = rc.aggregator();
    const TrainConfig tcfg = rc.trainer();
    const std::vector<SyntheticPair> train_set = generate_dataset(rc, rc.data_count(), false);
    const std::vector<SyntheticPair> eval_set = generate_dataset(rc, rc.eval_count(), true);

    fs::create_directories(out_dir);
    OutputGuard guard;
    write_effective_config(rc, out_dir, guard);
    TrainResult result = train(train_set, tcfg, acfg, eval_set.empty() ? nullptr : &eval_set);
    save_metric_log(result.log, guard.track(out_dir + "/metrics.csv"));
    save_checkpoint(result.checkpoint, guard.track(out_dir + "/checkpoint.cats"));
    guard.disarm();

    std::cout << "steps=" << result.checkpoint.step << "\n";
    if (!eval_set.empty()) {
        const EvalMetrics m = evaluate(result.checkpoint, eval_set, tcfg.tau);
        std::printf("aepe=%.6f\npck05=%.4f\npck10=%.4f\npck15=%.4f\n", m.aepe, m.pck05, m.pck10,
                    m.pck15);
    }
    std::cout << "checkpoint=" << out_dir << "/checkpoint.cats\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir, double tau) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    const std::vector<SyntheticPair> pairs = load_dataset(data_dir);
    if (pairs.empty()) throw EvalError("eval: dataset in " + data_dir + " is empty");
    const EvalMetrics m = evaluate(ck, pairs, real(tau));
    std::size_t kp = 0;
    for (const SyntheticPair& p : pairs) kp += p.kps.points.size();
    std::printf("pairs=%zu\nkeypoints=%zu\naepe=%.6f\npck05=%.4f\npck10=%.4f\npck15=%.4f\n",
                pairs.size(), kp, m.aepe, m.pck05, m.pck10, m.pck15);
    return 0;
}

int cmd_gradcheck(const std::string& config_path) {
    bool appearance_on = true, multi_level_on = true, swap_on = true, residual_on = true;
    if (!config_path.empty()) {
        const RunConfig rc = RunConfig::from_file(config_path);
        const AggregatorConfig acfg = rc.aggregator();
        appearance_on = acfg.appearance_on;
        multi_level_on = acfg.multi_level_on;
        swap_on = acfg.swap_on;
        residual_on = acfg.residual_on;
    }
    bool ok = true;
    for (const GradCheckEntry& e : op_gradient_suite()) {
        std::printf("%-22s rel_err=%.3e tol=%.0e %s\n", e.name.c_str(), double(e.err),
                    double(e.tol), e.pass() ? "PASS" : "FAIL");
        ok = ok && e.pass();
    }
    const GradCheckEntry full =
        full_model_gradient_check(appearance_on, multi_level_on, swap_on, residual_on);
    std::printf("%-22s rel_err=%.3e tol=%.0e %s\n", full.name.c_str(), double(full.err),
                double(full.tol), full.pass() ? "PASS" : "FAIL");
    ok = ok && full.pass();
    return ok ? 0 : 1;
}

int cmd_viz(const std::string& checkpoint_path, const std::string& pair_prefix,
            const std::string& what, long long row, const std::string& out_dir) {
    const Checkpoint ck = load_checkpoint(checkpoint_path);
    const SyntheticPair pair = load_pair(pair_prefix);
    const std::size_t h = pair.gt_flow.h, w = pair.gt_flow.w, hw = h * w;
    if (hw != ck.config.hw)
        throw ConfigError("viz: pair grid " + std::to_string(w) + "x" + std::to_string(h) +
                          " does not match checkpoint hw=" + std::to_string(ck.config.hw));
    if (row >= 0 && std::size_t(row) >= hw)
        throw UsageError("viz: row " + std::to_string(row) + " out of range for hw=" +
                         std::to_string(hw));

    const FeatureStack ns = resize_normalize(pair.d_s, h, w);
    const FeatureStack nt = resize_normalize(pair.d_t, h, w);
    const CorrelationStack corr = build_correlation(nt, ns);

    fs::create_directories(out_dir);
    OutputGuard guard;
    TapeSuspend no_tape;

    auto emit_stack = [&](const Tensor& maps, const std::string& stem) {
        for (std::size_t l = 0; l < maps.dim(0); ++l) {
            const real* m = maps.data() + l * hw * hw;
            if (row >= 0)
                write_matrix_pgm(guard.track(out_dir + "/" + stem + "_l" + std::to_string(l) +
                                             "_row" + std::to_string(row) + ".pgm"),
                                 m + std::size_t(row) * hw, h, w);
            else
                write_matrix_pgm(guard.track(out_dir + "/" + stem + "_l" + std::to_string(l) +
                                             ".pgm"),
                                 m, hw, hw);
        }
    };

    if (what == "raw_corr") {
        emit_stack(corr.maps, "raw_corr");
    } else if (what == "refined_corr") {
        const CorrelationStack refined = cats_forward(corr, ns, nt, ck.params, ck.config);
        emit_stack(refined.maps, "refined_corr");
    } else if (what == "attention") {
        AggTrace trace;
        cats_forward(corr, ns, nt, ck.params, ck.config, &trace);
        for (const auto& entry : trace.entries) {
            const Tensor& t = entry.mat;  // [batch, tokens, tokens]
            const std::size_t tok = t.dim(1);
            for (std::size_t b = 0; b < t.dim(0); ++b)
                write_matrix_pgm(guard.track(out_dir + "/attn_" + entry.name + "_b" +
                                             std::to_string(b) + ".pgm"),
                                 t.data() + b * tok * tok, tok, tok);
        }
    } else if (what == "flow") {
        const CorrelationStack refined = cats_forward(corr, ns, nt, ck.params, ck.config);
        Tensor map = collapse_levels(refined);
        if (refined.orientation == CorrOrientation::rows_target) map = ops::transpose_last2(map);
        const FlowField pred = soft_argmax(map, h, w, real(0.02));
        save_flow_text(pred, guard.track(out_dir + "/flow.txt"));
    } else {
        throw UsageError("viz: --what must be raw_corr, refined_corr, attention, or flow");
    }
    guard.disarm();
    std::cout << "out=" << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transformer cost aggregation for dense semantic correspondence"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint_path, data_dir, pair_prefix_arg, what;
    long long count = -1, row = -1;
    double tau = 0.02;

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic feature-pair dataset");
    synth->add_option("--config", config_path, "run configuration file")->required();
    synth->add_option("--out", out_dir, "output directory")->required();
    synth->add_option("--count", count, "pair count (default: data.count from the config)");

    CLI::App* train_cmd = app.add_subcommand("train", "train the aggregator on synthetic pairs");
    train_cmd->add_option("--config", config_path, "run configuration file")->required();
    train_cmd->add_option("--out", out_dir, "run directory")->required();

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
    eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval_cmd->add_option("--data", data_dir, "dataset directory (from synth)")->required();
    eval_cmd->add_option("--tau", tau, "soft-argmax temperature");

    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    grad->add_option("--config", config_path, "optional config; ablation flags are honored");

    CLI::App* viz = app.add_subcommand("viz", "dump correlation/attention/flow artifacts");
    viz->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    viz->add_option("--pair", pair_prefix_arg, "pair path prefix (…/pair_0000)")->required();
    viz->add_option("--what", what, "raw_corr | refined_corr | attention | flow")->required();
    viz->add_option("--row", row, "emit one correlation row as an h x w image");
    viz->add_option("--out", out_dir, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(config_path, out_dir, count);
        if (train_cmd->parsed()) return cmd_train(config_path, out_dir);
        if (eval_cmd->parsed()) return cmd_eval(checkpoint_path, data_dir, tau);
        if (grad->parsed()) return cmd_gradcheck(config_path);
        if (viz->parsed()) return cmd_viz(checkpoint_path, pair_prefix_arg, what, row, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
