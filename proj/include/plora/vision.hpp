#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "plora/autodiff.hpp"
#include "plora/errors.hpp"
#include "plora/params.hpp"
#include "plora/rng.hpp"
#include "plora/tensor.hpp"

namespace plora {

// Square single-channel image whose pixel pattern encodes class_key.
struct SyntheticImage {
    int side = 0;
    std::vector<double> pixels;  // row-major, values in [0,1]
    int class_key = 0;
};

// Pattern dictionary entry for `key` plus small per-sample jitter. The base
// pattern lives in [0.1, 0.9] and jitter is ±0.05, so pixels stay in [0,1]
// and distinct keys stay far apart.
inline SyntheticImage generate_image(int side, int key, std::uint64_t pattern_seed,
                                     std::uint64_t sample_seed) {
    if (side < 1) throw ContractError("image side must be >= 1");
    SyntheticImage img;
    img.side = side;
    img.class_key = key;
    img.pixels.resize(static_cast<std::size_t>(side) * side);
    Rng pattern(derive_seed(pattern_seed, "pattern", static_cast<std::uint64_t>(key)));
    Rng jitter(derive_seed(sample_seed, "jitter"));
    for (double& p : img.pixels) {
        p = pattern.next_uniform(0.1, 0.9) + jitter.next_uniform(-0.05, 0.05);
    }
    return img;
}

struct VisionConfig {
    int depth = 2;      // encoder layers above the patch projection
    int image_side = 8;
    int patch = 2;
    double rms_eps = 1e-6;

    int n_patches() const {
        return (image_side / patch) * (image_side / patch);
    }
};

// Miniature encoder: patch flattening, a linear projection, then `depth`
// residual MLP layers. Emits d_model vectors directly; patch order is left
// to the LLM's positional table, so a constant image yields identical
// features on every patch. lldr levels: the patch projection sits at level 0
// (closest to the input); layer l sits at level l+1; lldr depth is depth+1.
struct VisionEncoder {
    VisionConfig cfg;
    int d_model = 0;
    ParamStore store;

    int patch_w = -1;
    int patch_b = -1;
    struct Layer {
        int gain, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::vector<Layer> layers;

    int lldr_depth() const { return cfg.depth + 1; }
};

inline VisionEncoder build_encoder(const VisionConfig& cfg, int d_model, std::uint64_t seed) {
    if (cfg.depth < 1) throw ConfigError("vision depth must be >= 1");
    if (cfg.patch < 1 || cfg.image_side % cfg.patch != 0) {
        throw ConfigError("image side " + std::to_string(cfg.image_side) +
                          " not divisible by patch " + std::to_string(cfg.patch));
    }
    VisionEncoder enc;
    enc.cfg = cfg;
    enc.d_model = d_model;
    const std::size_t pdim = static_cast<std::size_t>(cfg.patch) * cfg.patch;
    const std::size_t d = static_cast<std::size_t>(d_model);
    const int depth_total = enc.lldr_depth();

    auto normal_tensor = [&](std::vector<std::size_t> shape, double std_dev, const char* tag,
                             std::uint64_t idx) {
        Tensor t(std::move(shape));
        Rng rng(derive_seed(seed, tag, idx));
        for (double& v : t.data) v = std_dev * rng.next_normal();
        return t;
    };

    enc.patch_w = enc.store.add("vision.patch.W",
                                normal_tensor({d, pdim}, 1.0 / std::sqrt(double(pdim)),
                                              "vision.patch.W", 0),
                                ParamGroup::kVision, 0, depth_total);
    enc.patch_b = enc.store.add("vision.patch.b", Tensor({d}), ParamGroup::kVision, 0,
                                depth_total);

    for (int l = 0; l < cfg.depth; ++l) {
        const std::string base = "vision.layer." + std::to_string(l) + ".";
        const auto li = static_cast<std::uint64_t>(l);
        VisionEncoder::Layer layer;
        Tensor gain({d});
        for (double& v : gain.data) v = 1.0;
        layer.gain = enc.store.add(base + "norm.gain", gain, ParamGroup::kVision, l + 1,
                                   depth_total);
        layer.fc1_w = enc.store.add(base + "fc1.W",
                                    normal_tensor({d, d}, 1.0 / std::sqrt(double(d)), "vfc1", li),
                                    ParamGroup::kVision, l + 1, depth_total);
        layer.fc1_b = enc.store.add(base + "fc1.b", Tensor({d}), ParamGroup::kVision, l + 1,
                                    depth_total);
        layer.fc2_w = enc.store.add(base + "fc2.W",
                                    normal_tensor({d, d}, 1.0 / std::sqrt(double(d)), "vfc2", li),
                                    ParamGroup::kVision, l + 1, depth_total);
        layer.fc2_b = enc.store.add(base + "fc2.b", Tensor({d}), ParamGroup::kVision, l + 1,
                                    depth_total);
        enc.layers.push_back(layer);
    }
    return enc;
}

// Patch flattening (pure data movement, not differentiable).
inline Tensor flatten_patches(const SyntheticImage& img, int patch) {
    if (patch < 1 || img.side % patch != 0) {
        throw ContractError("image side " + std::to_string(img.side) +
                            " not divisible by patch size " + std::to_string(patch));
    }
    const int per_side = img.side / patch;
    const std::size_t pdim = static_cast<std::size_t>(patch) * patch;
    Tensor out({static_cast<std::size_t>(per_side) * per_side, pdim});
    for (int pr = 0; pr < per_side; ++pr) {
        for (int pc = 0; pc < per_side; ++pc) {
            const std::size_t prow = static_cast<std::size_t>(pr) * per_side + pc;
            for (int r = 0; r < patch; ++r) {
                for (int c = 0; c < patch; ++c) {
                    out.data[prow * pdim + static_cast<std::size_t>(r) * patch + c] =
                        img.pixels[static_cast<std::size_t>(pr * patch + r) * img.side +
                                   (pc * patch + c)];
                }
            }
        }
    }
    return out;
}

// Encoder forward on a tape: [n_patches, d_model]. The output passes a
// fixed (gain-free) RMS normalization, so feature tokens carry direction
// only; magnitude into the LLM is not a trainable degree of freedom.
inline Var encode_image_on_tape(Tape& t, const BoundParams& b, const VisionEncoder& enc,
                                const SyntheticImage& img) {
    Tensor patches = flatten_patches(img, enc.cfg.patch);
    Var x = t.constant(std::move(patches));
    x = add_bias_rows(t, matmul_nt(t, x, b[enc.patch_w]), b[enc.patch_b]);
    for (const auto& layer : enc.layers) {
        Var h = rms_norm_rows(t, x, b[layer.gain], enc.cfg.rms_eps);
        h = add_bias_rows(t, matmul_nt(t, h, b[layer.fc1_w]), b[layer.fc1_b]);
        h = gelu(t, h);
        h = add_bias_rows(t, matmul_nt(t, h, b[layer.fc2_w]), b[layer.fc2_b]);
        x = add(t, x, h);
    }
    Tensor unit_gain({static_cast<std::size_t>(enc.d_model)});
    for (double& v : unit_gain.data) v = 1.0;
    return rms_norm_rows(t, x, t.constant(std::move(unit_gain)), enc.cfg.rms_eps);
}

// Pure forward: deterministic feature sequence for (parameters, image).
inline Tensor encode_image(const SyntheticImage& img, const VisionEncoder& enc) {
    Tape t;
    BoundParams b = bind_params(t, enc.store);
    return t.value(encode_image_on_tape(t, b, enc, img));
}

}  // namespace plora
