#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "plora/data.hpp"
#include "plora/errors.hpp"
#include "plora/model.hpp"
#include "plora/rng.hpp"
#include "plora/sampler.hpp"
#include "plora/schedule.hpp"
#include "plora/vision.hpp"

namespace plora {

// Fully determines a run; two runs from the same RunConfig + seed produce
// identical metrics logs. Defaults are the desk-scale experiment; the
// schedule constants carry the full-scale recipe (peak 2e-4 / 5e-5, 1%
// warmup, LLDR 0.9, LLM scale 0.2). Full-scale batch/step counts (4906 over
// 2 epochs pretraining; 2048 over 3000 steps SFT) are not desk-runnable.
struct RunConfig {
    ModelConfig model;
    VisionConfig vision;
    int num_keys = 4;
    std::uint64_t seed = 0;
    int batch_size = 32;
    int stage1_steps = 2000;
    int stage2_steps = 1000;
    int calibration_steps = 800;
    double stage1_peak_lr = 2e-4;
    double stage2_peak_lr = 5e-5;
    double calibration_peak_lr = 1e-3;
    double warmup_fraction = 0.01;
    double llm_lr_scale = 0.2;
    double vision_lldr = 0.9;
    double vision_lr_scale = 0.05;
    bool vision_lldr_invert = false;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    double text_only_fraction = 0.1;
    std::string stage1_sources = "caption:1000";
    std::string stage2_sources = "caption:400,knowledge:300,multitask:200,compose:100";
    int eval_samples = 256;
    std::string out_dir = "out";

    void validate() const {
        model.validate();
        if (vision.depth < 1) throw ConfigError("vision.depth must be >= 1");
        if (vision.patch < 1 || vision.image_side % vision.patch != 0) {
            throw ConfigError("vision.image_side must be divisible by vision.patch");
        }
        if (num_keys < 1 || tok::kFact2Base + num_keys > model.vocab_size) {
            throw ConfigError("task.num_keys out of range for vocab_size");
        }
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (warmup_fraction <= 0.0 || warmup_fraction >= 1.0) {
            throw ConfigError("train.warmup_fraction must be in (0,1)");
        }
        if (vision_lldr <= 0.0 || vision_lldr > 1.0) {
            throw ConfigError("train.vision_lldr must be in (0,1]");
        }
        if (vision_lr_scale < 0.0) {
            throw ConfigError("train.vision_lr_scale must be >= 0");
        }
        if (text_only_fraction < 0.0 || text_only_fraction > 1.0) {
            throw ConfigError("train.text_only_fraction must be in [0,1]");
        }
    }

    std::uint64_t pattern_seed() const { return derive_seed(seed, "patterns"); }

    TaskSpec make_task(TaskKind kind, bool key_informative = true, bool text_only = false) const {
        TaskSpec t;
        t.kind = kind;
        t.num_keys = num_keys;
        t.image_side = vision.image_side;
        t.patch = vision.patch;
        t.key_informative = key_informative;
        t.text_only = text_only;
        t.pattern_seed = pattern_seed();
        t.vocab_size = model.vocab_size;
        return t;
    }

    ScheduleSpec stage1_schedule(int steps_override = 0) const {
        return {stage1_peak_lr, warmup_fraction,
                steps_override > 0 ? steps_override : stage1_steps};
    }
    ScheduleSpec stage2_schedule(int steps_override = 0) const {
        return {stage2_peak_lr, warmup_fraction,
                steps_override > 0 ? steps_override : stage2_steps};
    }
    ScheduleSpec calibration_schedule(int steps_override = 0) const {
        return {calibration_peak_lr, warmup_fraction,
                steps_override > 0 ? steps_override : calibration_steps};
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

struct KeyBinding {
    std::function<void(RunConfig&, const std::string&)> set;
};

inline long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline const std::map<std::string, KeyBinding>& config_keys() {
    static const std::map<std::string, KeyBinding> keys = {
        {"model.vocab_size",
         {[](RunConfig& c, const std::string& v) {
             c.model.vocab_size = static_cast<int>(parse_int("model.vocab_size", v));
         }}},
        {"model.d_model",
         {[](RunConfig& c, const std::string& v) {
             c.model.d_model = static_cast<int>(parse_int("model.d_model", v));
         }}},
        {"model.n_heads",
         {[](RunConfig& c, const std::string& v) {
             c.model.n_heads = static_cast<int>(parse_int("model.n_heads", v));
         }}},
        {"model.n_layers",
         {[](RunConfig& c, const std::string& v) {
             c.model.n_layers = static_cast<int>(parse_int("model.n_layers", v));
         }}},
        {"model.d_mlp",
         {[](RunConfig& c, const std::string& v) {
             c.model.d_mlp = static_cast<int>(parse_int("model.d_mlp", v));
         }}},
        {"model.max_seq_len",
         {[](RunConfig& c, const std::string& v) {
             c.model.max_seq_len = static_cast<int>(parse_int("model.max_seq_len", v));
         }}},
        {"model.plora_rank",
         {[](RunConfig& c, const std::string& v) {
             c.model.plora_rank = static_cast<int>(parse_int("model.plora_rank", v));
         }}},
        {"model.plora_scale",
         {[](RunConfig& c, const std::string& v) {
             c.model.plora_scale = parse_real("model.plora_scale", v);
         }}},
        {"vision.depth",
         {[](RunConfig& c, const std::string& v) {
             c.vision.depth = static_cast<int>(parse_int("vision.depth", v));
         }}},
        {"vision.image_side",
         {[](RunConfig& c, const std::string& v) {
             c.vision.image_side = static_cast<int>(parse_int("vision.image_side", v));
         }}},
        {"vision.patch",
         {[](RunConfig& c, const std::string& v) {
             c.vision.patch = static_cast<int>(parse_int("vision.patch", v));
         }}},
        {"task.num_keys",
         {[](RunConfig& c, const std::string& v) {
             c.num_keys = static_cast<int>(parse_int("task.num_keys", v));
         }}},
        {"train.batch_size",
         {[](RunConfig& c, const std::string& v) {
             c.batch_size = static_cast<int>(parse_int("train.batch_size", v));
         }}},
        {"train.stage1_steps",
         {[](RunConfig& c, const std::string& v) {
             c.stage1_steps = static_cast<int>(parse_int("train.stage1_steps", v));
         }}},
        {"train.stage2_steps",
         {[](RunConfig& c, const std::string& v) {
             c.stage2_steps = static_cast<int>(parse_int("train.stage2_steps", v));
         }}},
        {"train.calibration_steps",
         {[](RunConfig& c, const std::string& v) {
             c.calibration_steps = static_cast<int>(parse_int("train.calibration_steps", v));
         }}},
        {"train.stage1_peak_lr",
         {[](RunConfig& c, const std::string& v) {
             c.stage1_peak_lr = parse_real("train.stage1_peak_lr", v);
         }}},
        {"train.stage2_peak_lr",
         {[](RunConfig& c, const std::string& v) {
             c.stage2_peak_lr = parse_real("train.stage2_peak_lr", v);
         }}},
        {"train.calibration_peak_lr",
         {[](RunConfig& c, const std::string& v) {
             c.calibration_peak_lr = parse_real("train.calibration_peak_lr", v);
         }}},
        {"train.warmup_fraction",
         {[](RunConfig& c, const std::string& v) {
             c.warmup_fraction = parse_real("train.warmup_fraction", v);
         }}},
        {"train.llm_lr_scale",
         {[](RunConfig& c, const std::string& v) {
             c.llm_lr_scale = parse_real("train.llm_lr_scale", v);
         }}},
        {"train.vision_lldr",
         {[](RunConfig& c, const std::string& v) {
             c.vision_lldr = parse_real("train.vision_lldr", v);
         }}},
        {"train.vision_lr_scale",
         {[](RunConfig& c, const std::string& v) {
             c.vision_lr_scale = parse_real("train.vision_lr_scale", v);
         }}},
        {"train.vision_lldr_invert",
         {[](RunConfig& c, const std::string& v) {
             c.vision_lldr_invert = parse_int("train.vision_lldr_invert", v) != 0;
         }}},
        {"train.weight_decay",
         {[](RunConfig& c, const std::string& v) {
             c.weight_decay = parse_real("train.weight_decay", v);
         }}},
        {"train.clip_norm",
         {[](RunConfig& c, const std::string& v) {
             c.clip_norm = parse_real("train.clip_norm", v);
         }}},
        {"train.text_only_fraction",
         {[](RunConfig& c, const std::string& v) {
             c.text_only_fraction = parse_real("train.text_only_fraction", v);
         }}},
        {"train.stage1_sources",
         {[](RunConfig& c, const std::string& v) { c.stage1_sources = v; }}},
        {"train.stage2_sources",
         {[](RunConfig& c, const std::string& v) { c.stage2_sources = v; }}},
        {"run.seed",
         {[](RunConfig& c, const std::string& v) {
             c.seed = static_cast<std::uint64_t>(parse_int("run.seed", v));
         }}},
        {"run.eval_samples",
         {[](RunConfig& c, const std::string& v) {
             c.eval_samples = static_cast<int>(parse_int("run.eval_samples", v));
         }}},
        {"run.out_dir", {[](RunConfig& c, const std::string& v) { c.out_dir = v; }}},
    };
    return keys;
}

}  // namespace detail

// Plain-text key=value config with optional [section] headers and '#'
// comments. Unknown keys are hard errors so typos cannot pass silently.
inline RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" +
                              line + "'");
        }
        std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.find('.') == std::string::npos && !section.empty()) {
            key = section + "." + key;
        }
        const auto& keys = detail::config_keys();
        auto it = keys.find(key);
        if (it == keys.end()) {
            std::string valid;
            for (const auto& [k, unused] : keys) valid += (valid.empty() ? "" : ", ") + k;
            throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid);
        }
        it->second.set(cfg, value);
    }
    cfg.validate();
    return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config(text);
}

// "caption:400,knowledge:300,..." -> weighted DataSource list.
inline std::vector<DataSource> make_sources(const RunConfig& cfg, const std::string& spec_str) {
    std::vector<DataSource> out;
    std::istringstream in(spec_str);
    std::string entry;
    while (std::getline(in, entry, ',')) {
        entry = detail::trim(entry);
        if (entry.empty()) continue;
        const std::size_t colon = entry.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("source entry '" + entry + "' missing required count (kind:count)");
        }
        const std::string kind_s = detail::trim(entry.substr(0, colon));
        const std::string count_s = detail::trim(entry.substr(colon + 1));
        TaskKind kind;
        if (kind_s == "caption")
            kind = TaskKind::kCaption;
        else if (kind_s == "knowledge")
            kind = TaskKind::kKnowledge;
        else if (kind_s == "multitask")
            kind = TaskKind::kMultitask;
        else if (kind_s == "compose")
            kind = TaskKind::kCompose;
        else
            throw ConfigError("unknown source kind '" + kind_s +
                              "'; valid: caption, knowledge, multitask, compose");
        DataSource s;
        s.name = kind_s;
        s.count = static_cast<std::uint64_t>(detail::parse_int("source count", count_s));
        s.generator_seed = derive_seed(cfg.seed, "source", out.size());
        s.task = cfg.make_task(kind);
        out.push_back(std::move(s));
    }
    if (out.empty()) throw ConfigError("source list '" + spec_str + "' is empty");
    return out;
}

}  // namespace plora
