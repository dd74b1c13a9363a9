#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "plora/errors.hpp"
#include "plora/model.hpp"
#include "plora/plora_layer.hpp"
#include "plora/rng.hpp"
#include "plora/vision.hpp"

namespace plora {

// Fixed token ids shared by every template.
namespace tok {
constexpr int kPad = 0;  // also fills VISUAL positions of token_ids
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kSep = 3;
constexpr int kInstrBase = 4;   // two instruction tokens per task kind
constexpr int kAnswerBase = 16;
constexpr int kFact1Base = 32;
constexpr int kFact2Base = 40;
}  // namespace tok

enum class TaskKind { kCaption, kKnowledge, kMultitask, kCompose };

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::kCaption: return "caption";
        case TaskKind::kKnowledge: return "knowledge";
        case TaskKind::kMultitask: return "multitask";
        case TaskKind::kCompose: return "compose";
    }
    return "?";
}

// Parameterized template. Targets are a deterministic function of
// (key, template, seed); the conditional entropy of targets given the key is
// enumerable, which is what makes training claims assertable.
struct TaskSpec {
    TaskKind kind = TaskKind::kCaption;
    int num_keys = 4;
    int image_side = 8;
    int patch = 2;
    int compose_slots = 2;        // COMPOSE only
    bool key_informative = true;  // false: answers drawn independently of the image key
    bool text_only = false;       // no visual block at all
    bool noise_images = false;    // unique random pattern per sample (decoy augmentation)
    std::uint64_t pattern_seed = 7;
    int vocab_size = 64;

    int n_visual_tokens() const {
        return text_only ? 0 : (image_side / patch) * (image_side / patch);
    }

    void validate() const {
        if (num_keys < 1) throw ConfigError("task num_keys must be >= 1");
        if (tok::kFact2Base + num_keys > vocab_size) {
            throw ConfigError("vocab_size too small for num_keys=" + std::to_string(num_keys));
        }
        if (!text_only && (patch < 1 || image_side % patch != 0)) {
            throw ConfigError("image_side must be divisible by patch");
        }
        if (kind == TaskKind::kCompose && compose_slots < 1) {
            throw ContractError("compose template must contain at least 1 image slot");
        }
    }

    int instr_tok(int i) const {
        return tok::kInstrBase + 2 * static_cast<int>(kind) + i;
    }
    int answer_tok(int key) const {
        return kind == TaskKind::kMultitask ? tok::kAnswerBase + (key + 1) % num_keys
                                            : tok::kAnswerBase + key;
    }
    int fact1_tok(int key) const { return tok::kFact1Base + (key + 1) % num_keys; }
    int fact2_tok(int key) const { return tok::kFact2Base + (key + 2) % num_keys; }
};

// Generator output before visual encoding: tokens plus the raw images.
struct InterleavedSample {
    std::vector<int> token_ids;
    ModalityMask mask;
    std::vector<int> targets;
    std::vector<std::uint8_t> loss_mask;
    std::vector<SyntheticImage> images;  // one per visual block, sequence order
    std::vector<int> keys;               // image key per block
    std::vector<int> answer_keys;        // key(s) the targets were built from
};

// Free-form composition sample: instruction, then body where each slot
// marker expands to one block of VISUAL positions.
struct ComposeSample {
    static constexpr int kSlotMarker = -1;
    std::vector<int> instruction;
    std::vector<int> body;  // token ids, kSlotMarker where an image goes
    std::vector<SyntheticImage> images;
    std::vector<int> keys;
    ModalityMask mask;
    std::vector<int> token_ids;  // materialized full sequence
    std::vector<int> targets;
    std::vector<std::uint8_t> loss_mask;
};

namespace detail {

// Assembles token/mask/target/loss rows from segments. Targets follow the
// next-token convention; positions whose successor is VISUAL (or absent) are
// masked out, as is everything not explicitly marked lossy.
struct SeqBuilder {
    std::vector<int> tokens;
    std::vector<Modality> mods;
    std::vector<std::uint8_t> lossy;  // set on positions whose *prediction* counts

    void text(int token, bool predict_next = false) {
        tokens.push_back(token);
        mods.push_back(Modality::kText);
        lossy.push_back(predict_next ? 1 : 0);
    }
    void visual_block(int n) {
        for (int i = 0; i < n; ++i) {
            tokens.push_back(tok::kPad);
            mods.push_back(Modality::kVisual);
            lossy.push_back(0);
        }
    }

    void finish(InterleavedSample& out) const {
        const std::size_t T = tokens.size();
        out.token_ids = tokens;
        out.mask = ModalityMask(mods);
        out.targets.assign(T, 0);
        out.loss_mask.assign(T, 0);
        for (std::size_t i = 0; i < T; ++i) {
            const bool next_is_text = i + 1 < T && mods[i + 1] == Modality::kText;
            if (next_is_text) out.targets[i] = tokens[i + 1];
            out.loss_mask[i] = (lossy[i] && next_is_text) ? 1 : 0;
        }
    }
};

// Token layout for given (image keys, answer keys); shared by the generator
// and the entropy-floor enumeration so they can never drift apart.
inline InterleavedSample materialize(const TaskSpec& spec, const std::vector<int>& img_keys,
                                     const std::vector<int>& ans_keys) {
    const int nv = spec.n_visual_tokens();
    SeqBuilder sb;
    InterleavedSample s;
    if (!spec.text_only) s.keys = img_keys;
    s.answer_keys = ans_keys;
    switch (spec.kind) {
        case TaskKind::kCaption:
        case TaskKind::kMultitask: {
            sb.text(tok::kBos);
            sb.text(spec.instr_tok(0));
            sb.text(spec.instr_tok(1));
            if (!spec.text_only) sb.visual_block(nv);
            sb.text(tok::kSep, /*predict_next=*/true);
            sb.text(spec.answer_tok(ans_keys[0]));
            break;
        }
        case TaskKind::kKnowledge: {
            sb.text(tok::kBos);
            sb.text(spec.instr_tok(0));
            sb.text(spec.instr_tok(1));
            if (!spec.text_only) sb.visual_block(nv);
            sb.text(tok::kSep, true);
            sb.text(spec.fact1_tok(ans_keys[0]), true);
            sb.text(spec.fact2_tok(ans_keys[0]));
            break;
        }
        case TaskKind::kCompose: {
            sb.text(tok::kBos);
            sb.text(spec.instr_tok(0));
            sb.text(spec.instr_tok(1));
            for (int slot = 0; slot < spec.compose_slots; ++slot) {
                sb.visual_block(nv);
                sb.text(tok::kSep, true);
                sb.text(spec.answer_tok(ans_keys[static_cast<std::size_t>(slot)]),
                        /*predict_next=*/slot + 1 == spec.compose_slots);
            }
            sb.text(tok::kEos);
            break;
        }
    }
    sb.finish(s);
    return s;
}

}  // namespace detail

// One sequence. Image keys are uniform; answer keys equal the image keys
// unless the spec decouples them (key_informative = false).
inline InterleavedSample gen_sample(const TaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (spec.kind == TaskKind::kCompose && spec.text_only) {
        throw ContractError("compose template cannot be text-only");
    }
    Rng rng(derive_seed(seed, "sample"));
    const int n_blocks = spec.kind == TaskKind::kCompose ? spec.compose_slots
                         : spec.text_only               ? 0
                                                        : 1;
    const int n_key_draws = spec.kind == TaskKind::kCompose ? spec.compose_slots : 1;
    std::vector<int> img_keys, ans_keys;
    for (int i = 0; i < n_key_draws; ++i) {
        img_keys.push_back(static_cast<int>(rng.next_below(
            static_cast<std::uint64_t>(spec.num_keys))));
    }
    const bool informative = spec.key_informative && !spec.text_only && !spec.noise_images;
    for (int i = 0; i < n_key_draws; ++i) {
        ans_keys.push_back(informative ? img_keys[static_cast<std::size_t>(i)]
                                       : static_cast<int>(rng.next_below(
                                             static_cast<std::uint64_t>(spec.num_keys))));
    }
    InterleavedSample s = detail::materialize(spec, img_keys, ans_keys);
    for (int i = 0; i < n_blocks; ++i) {
        const std::uint64_t img_seed = derive_seed(seed, "img", static_cast<std::uint64_t>(i));
        // noise mode draws a fresh pattern per sample instead of a dictionary entry
        const std::uint64_t pat = spec.noise_images ? derive_seed(img_seed, "noise-pattern")
                                                    : spec.pattern_seed;
        s.images.push_back(generate_image(spec.image_side, img_keys[static_cast<std::size_t>(i)],
                                          pat, img_seed));
    }
    return s;
}

// Encode the sample's images and assemble the model-facing batch.
inline InterleavedBatch to_batch(const InterleavedSample& s, const VisionEncoder& enc) {
    InterleavedBatch b;
    b.token_ids = s.token_ids;
    b.mask = s.mask;
    b.targets = s.targets;
    b.loss_mask = s.loss_mask;
    const auto d = static_cast<std::size_t>(enc.d_model);
    const std::size_t np = static_cast<std::size_t>(enc.cfg.n_patches());
    b.visual_embeds = Tensor({s.images.size() * np, d});
    for (std::size_t i = 0; i < s.images.size(); ++i) {
        Tensor e = encode_image(s.images[i], enc);
        std::copy(e.data.begin(), e.data.end(), b.visual_embeds.data.begin() +
                                                    static_cast<std::ptrdiff_t>(i * np * d));
    }
    return b;
}

inline std::vector<InterleavedBatch> gen_batch(const TaskSpec& spec, const VisionEncoder& enc,
                                               int batch_size, std::uint64_t seed) {
    std::vector<InterleavedBatch> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        out.push_back(to_batch(gen_sample(spec, derive_seed(seed, "batch",
                                                            static_cast<std::uint64_t>(i))),
                               enc));
    }
    return out;
}

inline ComposeSample gen_compose(const TaskSpec& spec, std::uint64_t seed) {
    if (spec.kind != TaskKind::kCompose) {
        throw ContractError("gen_compose requires a COMPOSE task spec");
    }
    spec.validate();
    InterleavedSample s = gen_sample(spec, seed);
    ComposeSample c;
    c.instruction = {tok::kBos, spec.instr_tok(0), spec.instr_tok(1)};
    for (int slot = 0; slot < spec.compose_slots; ++slot) {
        c.body.push_back(ComposeSample::kSlotMarker);
        c.body.push_back(tok::kSep);
        c.body.push_back(spec.answer_tok(s.answer_keys[static_cast<std::size_t>(slot)]));
    }
    c.body.push_back(tok::kEos);
    c.images = s.images;
    c.keys = s.keys;
    c.mask = s.mask;
    c.token_ids = s.token_ids;
    c.targets = s.targets;
    c.loss_mask = s.loss_mask;
    return c;
}

// Rebuild the modality mask from instruction + slot markers; must equal the
// stored mask (self-consistency).
inline ModalityMask compose_mask_from_markers(const ComposeSample& c, int n_visual_per_slot) {
    std::vector<Modality> mods(c.instruction.size(), Modality::kText);
    for (int t : c.body) {
        if (t == ComposeSample::kSlotMarker) {
            for (int i = 0; i < n_visual_per_slot; ++i) mods.push_back(Modality::kVisual);
        } else {
            mods.push_back(Modality::kText);
        }
    }
    return ModalityMask(std::move(mods));
}

// ---------------------------------------------------------------------------
// Entropy floor: exact minimum cross-entropy of a template, by enumeration
// over (image keys, answer draws). With visual access the conditioning
// includes the image keys; without it only the visible token prefix.
// ---------------------------------------------------------------------------

inline double entropy_floor(const TaskSpec& spec, bool visual_access) {
    spec.validate();
    const int K = spec.num_keys;
    const int n_draws = spec.kind == TaskKind::kCompose ? spec.compose_slots : 1;
    const bool independent = !spec.key_informative || spec.text_only || spec.noise_images;
    // outcome space: K^n_draws image-key combos, times K^n_draws answer combos
    // when answers are decoupled
    const double combos = std::pow(static_cast<double>(K), independent ? 2 * n_draws : n_draws);
    if (combos > 1048576.0) {
        throw ContractError("entropy_floor: template not enumerable (too many outcomes)");
    }

    struct Outcome {
        InterleavedSample s;
        double prob;
    };
    std::vector<Outcome> outcomes;
    std::vector<int> img_keys(static_cast<std::size_t>(n_draws)),
        ans_keys(static_cast<std::size_t>(n_draws));
    const double p_each = 1.0 / combos;

    // odometer over key combos
    std::function<void(int)> rec_ans = [&](int pos) {
        if (pos == n_draws) {
            outcomes.push_back({detail::materialize(spec, img_keys, ans_keys), p_each});
            return;
        }
        if (!independent) {
            ans_keys[static_cast<std::size_t>(pos)] = img_keys[static_cast<std::size_t>(pos)];
            rec_ans(pos + 1);
        } else {
            for (int a = 0; a < K; ++a) {
                ans_keys[static_cast<std::size_t>(pos)] = a;
                rec_ans(pos + 1);
            }
        }
    };
    std::function<void(int)> rec_img = [&](int pos) {
        if (pos == n_draws) {
            rec_ans(0);
            return;
        }
        for (int k = 0; k < K; ++k) {
            img_keys[static_cast<std::size_t>(pos)] = k;
            rec_img(pos + 1);
        }
    };
    rec_img(0);

    const std::size_t T = outcomes[0].s.token_ids.size();
    std::size_t m_count = 0;
    for (std::uint8_t f : outcomes[0].s.loss_mask) m_count += f;
    if (m_count == 0) return 0.0;

    double total = 0.0;
    for (std::size_t i = 0; i < T; ++i) {
        if (!outcomes[0].s.loss_mask[i]) continue;
        // group outcomes by conditioning context
        std::map<std::vector<int>, std::map<int, double>> groups;
        for (const Outcome& o : outcomes) {
            std::vector<int> cond(o.s.token_ids.begin(),
                                  o.s.token_ids.begin() + static_cast<std::ptrdiff_t>(i) + 1);
            if (visual_access) {
                for (int k : o.s.keys) cond.push_back(1000 + k);
            }
            groups[cond][o.s.targets[i]] += o.prob;
        }
        for (const auto& [cond, dist] : groups) {
            double pg = 0.0;
            for (const auto& [t, p] : dist) pg += p;
            double h = 0.0;
            for (const auto& [t, p] : dist) {
                const double q = p / pg;
                h -= q * std::log(q);
            }
            total += pg * h;
        }
    }
    return total / static_cast<double>(m_count);
}

// Line-delimited sample dump. Field order: seed, kind, key, token ids, mask.
inline void dump_samples(std::ostream& os, const TaskSpec& spec, int n, std::uint64_t seed) {
    for (int i = 0; i < n; ++i) {
        const std::uint64_t s = derive_seed(seed, "batch", static_cast<std::uint64_t>(i));
        InterleavedSample smp = gen_sample(spec, s);
        os << "seed=" << s << " kind=" << task_kind_name(spec.kind) << " key=";
        if (smp.keys.empty()) os << "-";
        for (std::size_t k = 0; k < smp.keys.size(); ++k)
            os << (k ? ";" : "") << smp.keys[k];
        os << " tokens=";
        for (std::size_t t = 0; t < smp.token_ids.size(); ++t)
            os << (t ? "," : "") << smp.token_ids[t];
        os << " mask=" << smp.mask.to_string() << "\n";
    }
}

}  // namespace plora
