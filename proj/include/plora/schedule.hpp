#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "plora/errors.hpp"

namespace plora {

// Warmup-cosine schedule: linear ramp to peak over the first warmup_fraction
// of steps, then half-cosine to exactly zero at total_steps.
struct ScheduleSpec {
    double peak_lr = 2e-4;
    double warmup_fraction = 0.01;
    std::int64_t total_steps = 2000;

    std::int64_t warmup_steps() const {
        auto w = static_cast<std::int64_t>(std::llround(warmup_fraction *
                                                        static_cast<double>(total_steps)));
        return w < 1 ? 1 : w;
    }
};

inline double schedule_lr(std::int64_t step, const ScheduleSpec& spec) {
    if (step < 0 || step > spec.total_steps) {
        throw ContractError("schedule step " + std::to_string(step) + " outside [0," +
                            std::to_string(spec.total_steps) + "]");
    }
    const std::int64_t w = spec.warmup_steps();
    if (step < w) {
        return spec.peak_lr * static_cast<double>(step + 1) / static_cast<double>(w);
    }
    const double progress =
        static_cast<double>(step - w) / static_cast<double>(spec.total_steps - w);
    return spec.peak_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

// Per-group training policy for one stage.
struct ParamGroupPolicy {
    bool trainable = true;
    double lr_scale = 1.0;
    std::optional<double> lldr_decay;  // layer-wise LR decay factor, vision only
};

// Per-layer rates under layer-wise decay: layer 0 (closest to the input)
// gets base * decay^(depth-1); the topmost layer gets base.
inline std::vector<double> lldr_rates(int depth, double base_lr, double decay) {
    if (depth < 1) throw ContractError("lldr_rates: depth must be >= 1");
    if (decay <= 0.0 || decay > 1.0) throw ContractError("lldr_rates: decay must be in (0,1]");
    std::vector<double> rates(static_cast<std::size_t>(depth));
    for (int l = 0; l < depth; ++l) {
        rates[static_cast<std::size_t>(l)] = base_lr * std::pow(decay, depth - 1 - l);
    }
    return rates;
}

inline double effective_lr(double base, const ParamGroupPolicy& policy, int layer_index,
                           int depth) {
    if (!policy.trainable) return 0.0;
    double lr = base * policy.lr_scale;
    if (policy.lldr_decay && layer_index >= 0) {
        lr *= std::pow(*policy.lldr_decay, depth - 1 - layer_index);
    }
    return lr;
}

}  // namespace plora
