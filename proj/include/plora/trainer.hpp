#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "plora/data.hpp"
#include "plora/errors.hpp"
#include "plora/logging.hpp"
#include "plora/model.hpp"
#include "plora/params.hpp"
#include "plora/sampler.hpp"
#include "plora/schedule.hpp"
#include "plora/vision.hpp"

namespace plora {

// kTextCalibration is the desk-scale stand-in for arriving with a pretrained
// LLM: the base model alone learns the tasks' text structure and answer
// marginals on sequences whose images carry no usable information. Stage 1
// (kPretrain) then freezes it, exactly like the full-scale recipe.
enum class StageKind { kTextCalibration, kPretrain, kSft };

inline const char* stage_name(StageKind s) {
    switch (s) {
        case StageKind::kTextCalibration: return "calibration";
        case StageKind::kPretrain: return "pretrain";
        case StageKind::kSft: return "sft";
    }
    return "?";
}

struct StagePolicies {
    ParamGroupPolicy llm, plora, vision;

    const ParamGroupPolicy& for_group(ParamGroup g) const {
        switch (g) {
            case ParamGroup::kLlmBase: return llm;
            case ParamGroup::kPlora: return plora;
            case ParamGroup::kVision: return vision;
        }
        return llm;
    }
};

// Stage 1: LLM constant, adapters + vision encoder train.
// Stage 2: everything trains; LLM slowed by a fixed scale factor.
// The vision group carries its own scale on top of LLDR: the stub stands in
// for a converged encoder, so its fine-tuning is gentle by design.
inline StagePolicies stage_policies(StageKind stage, double llm_scale, double vision_lldr,
                                    double vision_scale) {
    StagePolicies p;
    switch (stage) {
        case StageKind::kTextCalibration:
            p.llm = {true, 1.0, std::nullopt};
            p.plora = {false, 0.0, std::nullopt};
            p.vision = {false, 0.0, std::nullopt};
            break;
        case StageKind::kPretrain:
            p.llm = {false, 0.0, std::nullopt};
            p.plora = {true, 1.0, std::nullopt};
            p.vision = {true, vision_scale, vision_lldr};
            break;
        case StageKind::kSft:
            p.llm = {true, llm_scale, std::nullopt};
            p.plora = {true, 1.0, std::nullopt};
            p.vision = {true, vision_scale, vision_lldr};
            break;
    }
    return p;
}

struct StepMetrics {
    std::int64_t step = 0;
    StageKind stage = StageKind::kPretrain;
    double loss = 0.0;
    double lr_llm = 0.0;
    double lr_plora = 0.0;
    double lr_vision_top = 0.0;
    double grad_norm = 0.0;
};

inline std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, p);
}

inline std::string metrics_csv_header() {
    return "step,stage,loss,lr_llm,lr_plora,lr_vision_top,grad_norm";
}

inline std::string metrics_csv_row(const StepMetrics& m) {
    return std::to_string(m.step) + "," + stage_name(m.stage) + "," + format_double(m.loss) +
           "," + format_double(m.lr_llm) + "," + format_double(m.lr_plora) + "," +
           format_double(m.lr_vision_top) + "," + format_double(m.grad_norm);
}

struct TrainOptions {
    int batch_size = 32;
    double weight_decay = 0.1;  // decoupled, matrices only
    double clip_norm = 1.0;     // global-norm gradient clip
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double llm_lr_scale = 0.2;
    double vision_lldr = 0.9;
    double vision_lr_scale = 0.05;
    bool vision_lldr_invert = false;  // decay toward the output instead of the input
    double text_only_fraction = 0.0;  // SFT mixes a fixed share of text-only data
    TaskSpec text_task;               // template used by the text-only share
    std::string metrics_path;         // append per-step CSV rows when set
    std::uint64_t seed = 0;
};

struct StageResult {
    std::vector<StepMetrics> log;
    bool aborted = false;
    std::string abort_reason;

    double initial_loss() const { return log.empty() ? 0.0 : log.front().loss; }
    double final_loss() const { return log.empty() ? 0.0 : log.back().loss; }
};

// Adam with decoupled weight decay; state is per run_stage call.
class AdamW {
  public:
    AdamW(const ParamStore& store, const TrainOptions& opt) : opt_(opt) {
        for (const auto& e : store.items) {
            m_.emplace_back(e.value.shape);
            v_.emplace_back(e.value.shape);
        }
    }

    void step_begin() { ++t_; }

    void update(ParamStore& store, std::size_t idx, const Tensor& grad, double lr) {
        Tensor& m = m_[idx];
        Tensor& v = v_[idx];
        Tensor& p = store.items[idx].value;
        const double b1 = opt_.beta1, b2 = opt_.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        const bool decay = p.rank() >= 2 && opt_.weight_decay > 0.0;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double g = grad.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * g;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * g * g;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (std::sqrt(vhat) + opt_.adam_eps);
            if (decay) p.data[i] -= lr * opt_.weight_decay * p.data[i];
        }
    }

  private:
    TrainOptions opt_;
    std::vector<Tensor> m_, v_;
    std::int64_t t_ = 0;
};

namespace detail {

inline double grad_norm_sq(const Tape& t, const BoundParams& b, const ParamStore& store,
                           const StagePolicies& pol) {
    double s = 0.0;
    for (std::size_t i = 0; i < store.items.size(); ++i) {
        if (!pol.for_group(store.items[i].group).trainable) continue;
        const Tensor& g = t.grad(b.vars[i]);
        for (double v : g.data) s += v * v;
    }
    return s;
}

inline void apply_updates(Tape& t, const BoundParams& b, ParamStore& store,
                          const StagePolicies& pol, AdamW& opt, double base_lr,
                          double clip_factor, bool lldr_invert) {
    for (std::size_t i = 0; i < store.items.size(); ++i) {
        const auto& e = store.items[i];
        const ParamGroupPolicy& gp = pol.for_group(e.group);
        if (!gp.trainable) continue;
        const int level = (lldr_invert && e.lldr_level >= 0) ? e.lldr_depth - 1 - e.lldr_level
                                                             : e.lldr_level;
        const double lr = effective_lr(base_lr, gp, level, e.lldr_depth);
        Tensor g = t.grad(b.vars[i]);
        if (clip_factor != 1.0) {
            for (double& v : g.data) v *= clip_factor;
        }
        opt.update(store, i, g, lr);
    }
}

}  // namespace detail

// One optimization stage: per-step weighted source draw, fresh tape, batch
// mean loss, backward, clipped AdamW updates under the stage's group
// policies. Deterministic given (options.seed, sources, schedule).
// A NaN/Inf anywhere aborts the step; parameters roll back to the last good
// step and the result is flagged.
inline StageResult run_stage(Model& model, VisionEncoder& encoder, StageKind stage,
                             const ScheduleSpec& sched, const std::vector<DataSource>& sources,
                             const TrainOptions& opt) {
    if (sources.empty() && opt.text_only_fraction <= 0.0) {
        throw ContractError("run_stage needs at least one data source");
    }
    const StagePolicies pol =
        stage_policies(stage, opt.llm_lr_scale, opt.vision_lldr, opt.vision_lr_scale);
    StageResult result;
    AdamW opt_model(model.store, opt);
    AdamW opt_vision(encoder.store, opt);
    Rng sampler_rng(derive_seed(opt.seed, "sampler"));

    std::ofstream csv;
    if (!opt.metrics_path.empty()) {
        const bool fresh = [&] {
            std::ifstream probe(opt.metrics_path);
            return !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
        }();
        csv.open(opt.metrics_path, std::ios::app);
        if (fresh) csv << metrics_csv_header() << "\n";
    }

    std::vector<Tensor> snap_model, snap_vision;
    const auto d = static_cast<std::size_t>(model.cfg.d_model);
    const std::size_t np = static_cast<std::size_t>(encoder.cfg.n_patches());

    for (std::int64_t step = 0; step < sched.total_steps; ++step) {
        // snapshot for rollback on numeric failure
        snap_model.clear();
        snap_vision.clear();
        for (const auto& e : model.store.items) snap_model.push_back(e.value);
        for (const auto& e : encoder.store.items) snap_vision.push_back(e.value);

        const double base_lr = schedule_lr(step, sched);
        StepMetrics m;
        m.step = step;
        m.stage = stage;
        m.lr_llm = effective_lr(base_lr, pol.llm, -1, 0);
        m.lr_plora = effective_lr(base_lr, pol.plora, -1, 0);
        m.lr_vision_top = effective_lr(base_lr, pol.vision, encoder.lldr_depth() - 1,
                                       encoder.lldr_depth());

        try {
            Tape t;
            BoundParams bm = bind_params(t, model.store);
            BoundParams be = bind_params(t, encoder.store);
            std::vector<Var> losses;
            losses.reserve(static_cast<std::size_t>(opt.batch_size));

            for (int i = 0; i < opt.batch_size; ++i) {
                const bool text_branch =
                    opt.text_only_fraction > 0.0 &&
                    sampler_rng.next_uniform() < opt.text_only_fraction;
                const TaskSpec& spec = text_branch
                                           ? opt.text_task
                                           : sources[weighted_sample(sources, sampler_rng)].task;
                InterleavedSample s =
                    gen_sample(spec, derive_seed(opt.seed, "data",
                                                 static_cast<std::uint64_t>(step),
                                                 static_cast<std::uint64_t>(i)));
                Var vis = t.constant(Tensor({s.images.size() * np, d}));
                for (std::size_t bi = 0; bi < s.images.size(); ++bi) {
                    Var block = encode_image_on_tape(t, be, encoder, s.images[bi]);
                    std::vector<std::size_t> rows(np);
                    for (std::size_t r = 0; r < np; ++r) rows[r] = bi * np + r;
                    vis = add_rows_at(t, vis, block, rows);
                }
                Var logits = model_forward_on_tape(t, bm, model, s.token_ids, s.mask, vis);
                losses.push_back(cross_entropy(t, logits, s.targets, s.loss_mask));
            }

            Var total = mean_scalars(t, losses);
            m.loss = t.value(total).data[0];
            t.backward(total);

            const double gn = std::sqrt(detail::grad_norm_sq(t, bm, model.store, pol) +
                                        detail::grad_norm_sq(t, be, encoder.store, pol));
            m.grad_norm = gn;
            const double clip_factor =
                (opt.clip_norm > 0.0 && gn > opt.clip_norm) ? opt.clip_norm / gn : 1.0;

            opt_model.step_begin();
            opt_vision.step_begin();
            detail::apply_updates(t, bm, model.store, pol, opt_model, base_lr, clip_factor,
                                  opt.vision_lldr_invert);
            detail::apply_updates(t, be, encoder.store, pol, opt_vision, base_lr, clip_factor,
                                  opt.vision_lldr_invert);
            for (const auto& e : model.store.items) check_finite(e.value, "optimizer update");
            for (const auto& e : encoder.store.items) check_finite(e.value, "optimizer update");
        } catch (const NumericError& err) {
            for (std::size_t i = 0; i < snap_model.size(); ++i)
                model.store.items[i].value = snap_model[i];
            for (std::size_t i = 0; i < snap_vision.size(); ++i)
                encoder.store.items[i].value = snap_vision[i];
            result.aborted = true;
            result.abort_reason =
                "step " + std::to_string(step) + ": " + err.what() + "; rolled back to last good";
            log_info(std::string("run_stage aborted: ") + result.abort_reason);
            break;
        }

        result.log.push_back(m);
        if (csv.is_open()) csv << metrics_csv_row(m) << "\n";
        if (step % 200 == 0) {
            log_debug("step " + std::to_string(step) + " stage " + stage_name(stage) + " loss " +
                      std::to_string(m.loss));
        }
    }
    return result;
}

// Mean loss of the model on n freshly generated held-out samples.
inline double eval_task_loss(const Model& model, const VisionEncoder& encoder,
                             const TaskSpec& spec, int n, std::uint64_t seed) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        InterleavedSample s =
            gen_sample(spec, derive_seed(seed, "eval", static_cast<std::uint64_t>(i)));
        total += loss(model, to_batch(s, encoder)).value;
    }
    return total / static_cast<double>(n);
}

}  // namespace plora
