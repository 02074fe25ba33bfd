#pragma once

#include <fstream>
#include <map>
#include <sstream>

#include "cats/aggregator.hpp"
#include "cats/synthetic.hpp"
#include "cats/trainer.hpp"

namespace cats {

// Plain key = value run configuration with [model]/[train]/[data]/[eval]
// sections. Every key has a default; unknown keys are hard errors. Model
// geometry (hw, levels, channels) derives from [data] so the two can never
// disagree.
class RunConfig {
  public:
    struct KeySpec {
        const char* section;
        const char* key;
        const char* def;
        const char* doc;
    };

    static const std::vector<KeySpec>& schema() {
        static const std::vector<KeySpec> keys = {
            {"model", "p", "8", "appearance embedding channels"},
            {"model", "heads", "6", "attention heads; (h*w + p) must divide"},
            {"model", "depth", "1", "encoder blocks"},
            {"model", "mlp_ratio", "4", "MLP hidden width / token dim"},
            {"model", "pos_embed_init_std", "0.02", "init stddev for learnable tensors"},
            {"model", "appearance_on", "true", "concatenate projected features"},
            {"model", "multi_level_on", "true", "keep the level stack (false: mean-collapse)"},
            {"model", "swap_on", "true", "second pass on the transposed map"},
            {"model", "residual_on", "true", "add raw correlation around each pass"},
            {"train", "lr", "3e-5", "aggregator learning rate"},
            {"train", "lr_feature_path", "3e-6", "reserved; no backbone in synthetic mode"},
            {"train", "weight_decay", "0.05", "decoupled AdamW decay"},
            {"train", "beta1", "0.9", "AdamW beta1"},
            {"train", "beta2", "0.999", "AdamW beta2"},
            {"train", "eps", "1e-8", "AdamW epsilon"},
            {"train", "batch_size", "32", "pairs per step"},
            {"train", "max_steps", "300", "optimization steps"},
            {"train", "milestones", "auto", "LR decay: auto | none | step:mult[,step:mult...]"},
            {"train", "seed", "0", "training RNG seed"},
            {"train", "eval_every", "0", "steps between eval rows (0: never)"},
            {"train", "tau", "0.02", "soft-argmax temperature"},
            {"data", "h", "16", "grid height"},
            {"data", "w", "16", "grid width"},
            {"data", "levels", "2", "feature levels per image"},
            {"data", "channels", "16", "channels per level"},
            {"data", "rot_deg", "30", "warp rotation range, degrees"},
            {"data", "scale_min", "0.75", "warp scale lower bound"},
            {"data", "scale_max", "1.33", "warp scale upper bound"},
            {"data", "trans_frac", "0.15", "warp translation range, fraction of extent"},
            {"data", "noise_sigma", "0", "additive feature noise stddev"},
            {"data", "field_scale", "1", "stddev of the coarse field coefficients"},
            {"data", "lattice", "4", "coarse cell size of the random fields"},
            {"data", "keypoints", "20", "keypoints per pair"},
            {"data", "seed", "0", "dataset seed; pair i uses seed + i"},
            {"data", "count", "200", "training pairs"},
            {"data", "augment", "none", "reserved image-augmentation stub; must be none"},
            {"eval", "count", "50", "held-out pairs"},
            {"eval", "seed", "1000000", "held-out seed base"},
        };
        return keys;
    }

    static RunConfig defaults() {
        RunConfig rc;
        for (const KeySpec& k : schema()) rc.values_[qualify(k.section, k.key)] = k.def;
        return rc;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("config: cannot open " + path);
        RunConfig rc = defaults();
        std::string line, section;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(strip_comment(line));
            if (t.empty()) continue;
            if (t.front() == '[') {
                if (t.back() != ']')
                    throw ConfigError(path + ":" + std::to_string(lineno) + ": malformed section");
                section = trim(t.substr(1, t.size() - 2));
                if (section != "model" && section != "train" && section != "data" &&
                    section != "eval")
                    throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown section [" +
                                      section + "]");
                continue;
            }
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(t.substr(0, eq));
            const std::string value = trim(t.substr(eq + 1));
            if (section.empty())
                throw ConfigError(path + ":" + std::to_string(lineno) + ": key '" + key +
                                  "' outside any section");
            const std::string q = qualify(section, key);
            if (!rc.values_.count(q))
                throw ConfigError(path + ":" + std::to_string(lineno) + ": unknown key '" + key +
                                  "' in section [" + section + "]");
            rc.values_[q] = value;
        }
        rc.validate();
        return rc;
    }

    void validate() const {
        if (get("data", "augment") != "none")
            throw ConfigError("config: data.augment is a reserved stub; only 'none' is supported");
        (void)aggregator();
        (void)trainer();
        (void)generator(0);
    }

    const std::string& get(const std::string& section, const std::string& key) const {
        const auto it = values_.find(qualify(section, key));
        if (it == values_.end()) throw ConfigError("config: unknown key " + section + "." + key);
        return it->second;
    }

    std::size_t get_size(const std::string& s, const std::string& k) const {
        return std::size_t(std::stoull(get(s, k)));
    }
    double get_double(const std::string& s, const std::string& k) const {
        return std::stod(get(s, k));
    }
    bool get_bool(const std::string& s, const std::string& k) const {
        const std::string& v = get(s, k);
        if (v == "true" || v == "1" || v == "on") return true;
        if (v == "false" || v == "0" || v == "off") return false;
        throw ConfigError("config: " + s + "." + k + " must be a boolean, got '" + v + "'");
    }

    AggregatorConfig aggregator() const {
        AggregatorConfig a;
        a.hw = get_size("data", "h") * get_size("data", "w");
        a.p = get_size("model", "p");
        a.levels = get_size("data", "levels");
        a.heads = get_size("model", "heads");
        a.depth = get_size("model", "depth");
        a.mlp_ratio = get_double("model", "mlp_ratio");
        a.pos_embed_init_std = real(get_double("model", "pos_embed_init_std"));
        a.appearance_on = get_bool("model", "appearance_on");
        a.multi_level_on = get_bool("model", "multi_level_on");
        a.swap_on = get_bool("model", "swap_on");
        a.residual_on = get_bool("model", "residual_on");
        a.level_channels.assign(a.levels, get_size("data", "channels"));
        a.validate();
        return a;
    }

    TrainConfig trainer() const {
        TrainConfig t;
        t.lr_aggregator = get_double("train", "lr");
        t.lr_feature_path = get_double("train", "lr_feature_path");
        t.weight_decay = get_double("train", "weight_decay");
        t.beta1 = get_double("train", "beta1");
        t.beta2 = get_double("train", "beta2");
        t.eps = get_double("train", "eps");
        t.batch_size = get_size("train", "batch_size");
        t.max_steps = get_size("train", "max_steps");
        t.seed = get_size("train", "seed");
        t.eval_every = get_size("train", "eval_every");
        t.tau = real(get_double("train", "tau"));
        const std::string ms = get("train", "milestones");
        if (ms == "none")
            t.lr_auto_schedule = false;
        else if (ms != "auto")
            t.lr_milestones = parse_milestones(ms);
        t.validate();
        return t;
    }

    GenConfig generator(std::size_t index, bool eval = false) const {
        GenConfig g;
        g.h = get_size("data", "h");
        g.w = get_size("data", "w");
        g.levels = get_size("data", "levels");
        g.channels = get_size("data", "channels");
        g.rot_range_deg = get_double("data", "rot_deg");
        g.scale_min = get_double("data", "scale_min");
        g.scale_max = get_double("data", "scale_max");
        g.trans_frac = get_double("data", "trans_frac");
        g.noise_sigma = get_double("data", "noise_sigma");
        g.field_scale = get_double("data", "field_scale");
        g.lattice = get_size("data", "lattice");
        g.keypoints = get_size("data", "keypoints");
        g.seed = (eval ? get_size("eval", "seed") : get_size("data", "seed")) + index;
        return g;
    }

    std::size_t data_count() const { return get_size("data", "count"); }
    std::size_t eval_count() const { return get_size("eval", "count"); }

    // Canonical effective-config text, suitable for echoing into a run
    // directory and for byte comparison across runs.
    std::string echo() const {
        std::ostringstream out;
        std::string section;
        for (const KeySpec& k : schema()) {
            if (section != k.section) {
                if (!section.empty()) out << "\n";
                section = k.section;
                out << "[" << section << "]\n";
            }
            out << k.key << " = " << values_.at(qualify(k.section, k.key)) << "\n";
        }
        return out.str();
    }

  private:
    static std::string qualify(const std::string& s, const std::string& k) { return s + "." + k; }

    static std::string strip_comment(const std::string& s) {
        const auto pos = s.find('#');
        return pos == std::string::npos ? s : s.substr(0, pos);
    }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static std::vector<std::pair<std::size_t, double>> parse_milestones(const std::string& s) {
        std::vector<std::pair<std::size_t, double>> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto colon = item.find(':');
            if (colon == std::string::npos)
                throw ConfigError("config: milestone '" + item + "' is not step:multiplier");
            out.push_back({std::size_t(std::stoull(trim(item.substr(0, colon)))),
                           std::stod(trim(item.substr(colon + 1)))});
        }
        return out;
    }

    std::map<std::string, std::string> values_;
};

}  // namespace cats
