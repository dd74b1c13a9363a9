#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "plora/config.hpp"
#include "plora/data.hpp"
#include "plora/model.hpp"
#include "plora/sampler.hpp"
#include "plora/trainer.hpp"
#include "plora/vision.hpp"

namespace plora {

// The end-to-end desk experiment.
//
// calibrate() is the stand-in for starting from a pretrained LLM: the base
// model alone (adapters and encoder frozen) learns the templates' text
// structure and answer marginals from decoy data whose images are
// uninformative, landing at the no-visual entropy floor. Stage 1 then
// freezes the LLM and trains adapters + encoder on key-informative data;
// stage 2 jointly tunes everything with the LLM slowed by a fixed factor.
struct Experiment {
    RunConfig cfg;
    Model model;
    VisionEncoder encoder;

    static Experiment create(const RunConfig& cfg) {
        cfg.validate();
        Experiment e{cfg, build_model(cfg.model, derive_seed(cfg.seed, "model")),
                     build_encoder(cfg.vision, cfg.model.d_model, derive_seed(cfg.seed, "vision"))};
        return e;
    }

    TrainOptions train_options(const std::string& metrics_path, std::string_view stage_tag) const {
        TrainOptions opt;
        opt.batch_size = cfg.batch_size;
        opt.weight_decay = cfg.weight_decay;
        opt.clip_norm = cfg.clip_norm;
        opt.llm_lr_scale = cfg.llm_lr_scale;
        opt.vision_lldr = cfg.vision_lldr;
        opt.vision_lr_scale = cfg.vision_lr_scale;
        opt.vision_lldr_invert = cfg.vision_lldr_invert;
        opt.text_task = cfg.make_task(TaskKind::kCaption, /*key_informative=*/true,
                                      /*text_only=*/true);
        opt.metrics_path = metrics_path;
        opt.seed = derive_seed(cfg.seed, stage_tag);
        return opt;
    }

    // Text-structure calibration: decoy captions whose answers are
    // independent of the image, plus a share of pure text. Only the LLM
    // group trains; it lands on the no-visual entropy floor.
    StageResult calibrate(int steps_override = 0, const std::string& metrics_path = "") {
        TrainOptions opt = train_options(metrics_path, "calibration");
        opt.text_only_fraction = 0.2;
        std::vector<DataSource> sources(1);
        sources[0].name = "caption_decoy";
        sources[0].count = 1000;
        sources[0].generator_seed = derive_seed(cfg.seed, "decoy");
        sources[0].task = cfg.make_task(TaskKind::kCaption, /*key_informative=*/false);
        return run_stage(model, encoder, StageKind::kTextCalibration,
                         cfg.calibration_schedule(steps_override), sources, opt);
    }

    StageResult pretrain(int steps_override = 0, const std::string& metrics_path = "") {
        TrainOptions opt = train_options(metrics_path, "stage1");
        return run_stage(model, encoder, StageKind::kPretrain,
                         cfg.stage1_schedule(steps_override),
                         make_sources(cfg, cfg.stage1_sources), opt);
    }

    StageResult sft(int steps_override = 0, const std::string& metrics_path = "") {
        TrainOptions opt = train_options(metrics_path, "stage2");
        opt.text_only_fraction = cfg.text_only_fraction;
        return run_stage(model, encoder, StageKind::kSft, cfg.stage2_schedule(steps_override),
                         make_sources(cfg, cfg.stage2_sources), opt);
    }

    double eval_visual(int n = 0, std::uint64_t salt = 17) const {
        return eval_task_loss(model, encoder, cfg.make_task(TaskKind::kCaption),
                              n > 0 ? n : cfg.eval_samples, derive_seed(cfg.seed, "heldout", salt));
    }

    double eval_text_only(int n = 0, std::uint64_t salt = 17) const {
        return eval_task_loss(model, encoder,
                              cfg.make_task(TaskKind::kCaption, true, /*text_only=*/true),
                              n > 0 ? n : cfg.eval_samples, derive_seed(cfg.seed, "heldout", salt));
    }

    // Frozen-LLM drift diagnostics.
    std::vector<Tensor> llm_snapshot() const {
        std::vector<Tensor> snap;
        for (const auto& e : model.store.items) {
            if (e.group == ParamGroup::kLlmBase) snap.push_back(e.value);
        }
        return snap;
    }

    double llm_drift_from(const std::vector<Tensor>& snap) const {
        double s = 0.0;
        std::size_t i = 0;
        for (const auto& e : model.store.items) {
            if (e.group != ParamGroup::kLlmBase) continue;
            const Tensor& a = snap[i++];
            for (std::size_t j = 0; j < a.data.size(); ++j) {
                const double d = e.value.data[j] - a.data[j];
                s += d * d;
            }
        }
        return std::sqrt(s);
    }

    bool llm_bitwise_equal(const std::vector<Tensor>& snap) const {
        std::size_t i = 0;
        for (const auto& e : model.store.items) {
            if (e.group != ParamGroup::kLlmBase) continue;
            if (!bitwise_equal(e.value, snap[i++])) return false;
        }
        return true;
    }
};

}  // namespace plora
