#include <catch2/catch.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "plora/experiment.hpp"
#include "plora/trainer.hpp"

using namespace plora;
namespace fs = std::filesystem;

namespace {

// compact config so integration runs finish in seconds; the stage-1 peak is
// raised above the paper value so 500 steps are enough to show contraction
RunConfig small_cfg(std::uint64_t seed = 11) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.model.d_model = 16;
    cfg.model.d_mlp = 32;
    cfg.model.plora_rank = 4;
    cfg.vision.patch = 2;
    cfg.batch_size = 8;
    cfg.calibration_steps = 400;
    cfg.calibration_peak_lr = 1.5e-3;
    cfg.stage1_peak_lr = 2e-3;
    cfg.eval_samples = 96;
    return cfg;
}

std::vector<Tensor> snapshot(const ParamStore& store, ParamGroup group) {
    std::vector<Tensor> out;
    for (const auto& e : store.items)
        if (e.group == group) out.push_back(e.value);
    return out;
}

bool group_equal(const ParamStore& store, ParamGroup group, const std::vector<Tensor>& snap) {
    std::size_t i = 0;
    for (const auto& e : store.items) {
        if (e.group != group) continue;
        if (!bitwise_equal(e.value, snap[i++])) return false;
    }
    return true;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("calibration trains the LLM only") {
    Experiment exp = Experiment::create(small_cfg());
    auto plora_before = snapshot(exp.model.store, ParamGroup::kPlora);
    auto vision_before = snapshot(exp.encoder.store, ParamGroup::kVision);
    auto llm_before = snapshot(exp.model.store, ParamGroup::kLlmBase);
    StageResult r = exp.calibrate(60);
    REQUIRE_FALSE(r.aborted);
    REQUIRE(r.log.size() == 60);
    REQUIRE(group_equal(exp.model.store, ParamGroup::kPlora, plora_before));
    REQUIRE(group_equal(exp.encoder.store, ParamGroup::kVision, vision_before));
    REQUIRE_FALSE(group_equal(exp.model.store, ParamGroup::kLlmBase, llm_before));
}

TEST_CASE("stage 1 freezes the base bitwise and preserves text-only loss") {
    Experiment exp = Experiment::create(small_cfg());
    exp.calibrate(200);
    auto llm_before = snapshot(exp.model.store, ParamGroup::kLlmBase);
    const double text_before = exp.eval_text_only();
    auto plora_before = snapshot(exp.model.store, ParamGroup::kPlora);
    auto vision_before = snapshot(exp.encoder.store, ParamGroup::kVision);

    StageResult r = exp.pretrain(50);
    REQUIRE_FALSE(r.aborted);
    REQUIRE(group_equal(exp.model.store, ParamGroup::kLlmBase, llm_before));
    REQUIRE_FALSE(group_equal(exp.model.store, ParamGroup::kPlora, plora_before));
    REQUIRE_FALSE(group_equal(exp.encoder.store, ParamGroup::kVision, vision_before));

    const double text_after = exp.eval_text_only();
    REQUIRE(std::abs(text_after - text_before) <= 1e-12);
}

TEST_CASE("identical configs replay identical metrics CSV bytes") {
    const std::string p1 = (fs::temp_directory_path() / "plora_metrics_a.csv").string();
    const std::string p2 = (fs::temp_directory_path() / "plora_metrics_b.csv").string();
    fs::remove(p1);
    fs::remove(p2);
    {
        Experiment exp = Experiment::create(small_cfg(21));
        exp.calibrate(25, p1);
        exp.pretrain(25, p1);
    }
    {
        Experiment exp = Experiment::create(small_cfg(21));
        exp.calibrate(25, p2);
        exp.pretrain(25, p2);
    }
    const std::string a = slurp(p1), b = slurp(p2);
    REQUIRE_FALSE(a.empty());
    REQUIRE(a == b);
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("metrics CSV carries the stage-2 effective LLM peak exactly") {
    const std::string csv = (fs::temp_directory_path() / "plora_metrics_sft.csv").string();
    fs::remove(csv);
    RunConfig cfg = small_cfg(31);
    Experiment exp = Experiment::create(cfg);
    exp.calibrate(120);
    // enough steps that the warmup boundary (1% of total) is crossed
    StageResult r = exp.sft(120, csv);
    REQUIRE_FALSE(r.aborted);

    double max_lr_llm = 0.0, max_lr_plora = 0.0;
    for (const auto& m : r.log) {
        max_lr_llm = std::max(max_lr_llm, m.lr_llm);
        max_lr_plora = std::max(max_lr_plora, m.lr_plora);
    }
    REQUIRE(max_lr_llm == cfg.llm_lr_scale * cfg.stage2_peak_lr);
    REQUIRE(max_lr_plora == cfg.stage2_peak_lr);

    // parse the CSV back: shortest-round-trip formatting must reproduce it
    std::ifstream f(csv);
    std::string line;
    std::getline(f, line);
    REQUIRE(line == metrics_csv_header());
    double csv_max = 0.0;
    while (std::getline(f, line)) {
        std::size_t p = 0;
        for (int c = 0; c < 3; ++c) p = line.find(',', p) + 1;
        csv_max = std::max(csv_max, std::stod(line.substr(p)));
    }
    REQUIRE(csv_max == cfg.llm_lr_scale * cfg.stage2_peak_lr);
    fs::remove(csv);
}

TEST_CASE("stage 1 on the small task contracts the loss within 500 steps") {
    Experiment exp = Experiment::create(small_cfg());
    exp.calibrate();
    const double ev0 = exp.eval_visual();
    REQUIRE(ev0 > 0.95 * std::log(4.0));
    REQUIRE(ev0 < 1.05 * std::log(4.0));
    StageResult r = exp.pretrain(500);
    REQUIRE_FALSE(r.aborted);
    REQUIRE(r.final_loss() < 0.7 * r.initial_loss());
    REQUIRE(exp.eval_visual() < 0.7 * ev0);
}

TEST_CASE("stage 2 LLM drift shrinks strictly under the 0.2 scale") {
    RunConfig cfg = small_cfg(41);
    Experiment base = Experiment::create(cfg);
    base.calibrate(200);
    base.pretrain(120);
    std::vector<Tensor> all_params;
    for (const auto& e : base.model.store.items) all_params.push_back(e.value);
    std::vector<Tensor> enc_params;
    for (const auto& e : base.encoder.store.items) enc_params.push_back(e.value);

    auto run_drift = [&](double scale) {
        Experiment exp = Experiment::create(cfg);
        for (std::size_t i = 0; i < all_params.size(); ++i)
            exp.model.store.items[i].value = all_params[i];
        for (std::size_t i = 0; i < enc_params.size(); ++i)
            exp.encoder.store.items[i].value = enc_params[i];
        exp.cfg.llm_lr_scale = scale;
        auto snap = exp.llm_snapshot();
        StageResult r = exp.sft(150);
        REQUIRE_FALSE(r.aborted);
        return exp.llm_drift_from(snap);
    };
    const double drift_scaled = run_drift(0.2);
    const double drift_full = run_drift(1.0);
    REQUIRE(drift_scaled > 0.0);
    REQUIRE(drift_scaled < drift_full);
}

TEST_CASE("non-finite training aborts the step and rolls back") {
    RunConfig cfg = small_cfg(51);
    Experiment exp = Experiment::create(cfg);
    std::vector<Tensor> before;
    for (const auto& e : exp.model.store.items) before.push_back(e.value);

    TrainOptions opt = exp.train_options("", "nan-probe");
    std::vector<DataSource> sources(1);
    sources[0].name = "caption";
    sources[0].count = 1;
    sources[0].task = cfg.make_task(TaskKind::kCaption);
    ScheduleSpec poisoned{std::nan(""), 0.01, 20};
    StageResult r = run_stage(exp.model, exp.encoder, StageKind::kPretrain, poisoned, sources,
                              opt);
    REQUIRE(r.aborted);
    REQUIRE_FALSE(r.abort_reason.empty());
    REQUIRE(r.log.empty());  // first step already poisoned
    for (std::size_t i = 0; i < before.size(); ++i)
        REQUIRE(bitwise_equal(exp.model.store.items[i].value, before[i]));
}

TEST_CASE("inverting the vision lldr direction changes bottom-layer updates") {
    auto run_once = [](bool invert) {
        RunConfig cfg = small_cfg(71);
        cfg.vision_lldr_invert = invert;
        Experiment exp = Experiment::create(cfg);
        exp.pretrain(3);
        return exp.encoder.store.value(exp.encoder.patch_w);
    };
    Tensor normal = run_once(false);
    Tensor inverted = run_once(true);
    REQUIRE_FALSE(bitwise_equal(normal, inverted));
}

TEST_CASE("training rejects an empty source list") {
    RunConfig cfg = small_cfg(61);
    Experiment exp = Experiment::create(cfg);
    TrainOptions opt = exp.train_options("", "empty");
    REQUIRE_THROWS_AS(run_stage(exp.model, exp.encoder, StageKind::kPretrain,
                                cfg.stage1_schedule(10), {}, opt),
                      ContractError);
}
