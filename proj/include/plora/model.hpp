#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "plora/autodiff.hpp"
#include "plora/errors.hpp"
#include "plora/params.hpp"
#include "plora/plora_layer.hpp"
#include "plora/rng.hpp"
#include "plora/tensor.hpp"

namespace plora {

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 32;
    int n_heads = 2;
    int n_layers = 2;
    int d_mlp = 64;
    int max_seq_len = 64;
    int plora_rank = 8;       // paper full-scale value is 256; desk default 8
    double plora_scale = 1.0;
    double rms_eps = 1e-6;

    void validate() const {
        if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
        if (d_model < 1) throw ConfigError("d_model must be >= 1");
        if (n_heads < 1 || d_model % n_heads != 0) {
            throw ConfigError("d_model must be divisible by n_heads");
        }
        if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
        if (d_mlp < 1) throw ConfigError("d_mlp must be >= 1");
        if (max_seq_len < 1) throw ConfigError("max_seq_len must be >= 1");
        if (plora_rank < 0) throw ConfigError("plora_rank must be >= 0");
        if (plora_rank > d_model || plora_rank > d_mlp) {
            throw ConfigError("plora_rank must be <= min(d_model, d_mlp)");
        }
    }

    int d_head() const { return d_model / n_heads; }
};

// One interleaved sequence: the unit the model consumes. token_ids are read
// at TEXT positions; visual_embeds rows are injected at VISUAL positions in
// order. loss_mask must be false at every VISUAL position.
struct InterleavedBatch {
    std::vector<int> token_ids;
    Tensor visual_embeds;  // [T_v, d_model]
    ModalityMask mask;
    std::vector<int> targets;
    std::vector<std::uint8_t> loss_mask;

    std::size_t seq_len() const { return token_ids.size(); }

    void validate(int d_model) const {
        const std::size_t T = token_ids.size();
        if (mask.size() != T || targets.size() != T || loss_mask.size() != T) {
            throw ContractError("batch field lengths disagree with sequence length " +
                                std::to_string(T));
        }
        const std::size_t tv = mask.visual_count();
        const std::size_t er = tv == 0 ? 0 : visual_embeds.shape.empty() ? 0 : visual_embeds.shape[0];
        if (tv > 0 &&
            (visual_embeds.rank() != 2 || er != tv ||
             visual_embeds.shape[1] != static_cast<std::size_t>(d_model))) {
            throw ContractError("visual_embeds must be [" + std::to_string(tv) + "," +
                                std::to_string(d_model) + "] for this mask");
        }
        for (std::size_t i = 0; i < T; ++i) {
            if (mask.is_visual(i) && loss_mask[i]) {
                throw ContractError("loss_mask must be false at VISUAL position " +
                                    std::to_string(i));
            }
        }
    }
};

// Decoder-only transformer; every block linear (attn q/k/v/o, mlp up/down)
// is a P-LoRA layer. Pre-norm residual blocks, causal attention, learned
// positions, no-bias LM head.
struct Model {
    struct PLoRAIds {
        int W0 = -1, B0 = -1, W_A = -1, W_B = -1;
    };
    struct Block {
        int norm1_gain;
        PLoRAIds q, k, v, o;
        int norm2_gain;
        PLoRAIds up, down;
    };

    ModelConfig cfg;
    ParamStore store;
    int tok_emb = -1;
    int pos_emb = -1;
    std::vector<Block> blocks;
    int final_gain = -1;
    int head_w = -1;

    PLoRAVars bind_layer(const BoundParams& b, const PLoRAIds& ids) const {
        PLoRAVars v;
        v.W0 = b[ids.W0];
        v.B0 = b[ids.B0];
        if (cfg.plora_rank > 0) {
            v.W_A = b[ids.W_A];
            v.W_B = b[ids.W_B];
        }
        v.rank = static_cast<std::size_t>(cfg.plora_rank);
        v.scale = cfg.plora_scale;
        return v;
    }

    PLoRAParams layer_params(const PLoRAIds& ids) const {
        PLoRAParams p;
        p.W0 = store.value(ids.W0);
        p.B0 = store.value(ids.B0);
        p.rank = static_cast<std::size_t>(cfg.plora_rank);
        p.scale = cfg.plora_scale;
        if (cfg.plora_rank > 0) {
            p.W_A = store.value(ids.W_A);
            p.W_B = store.value(ids.W_B);
        }
        return p;
    }

    // All P-LoRA layer ids with their dotted name prefixes, block order.
    std::vector<std::pair<std::string, const PLoRAIds*>> plora_layers() const {
        std::vector<std::pair<std::string, const PLoRAIds*>> out;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "block." + std::to_string(i) + ".";
            out.push_back({p + "attn.q", &blocks[i].q});
            out.push_back({p + "attn.k", &blocks[i].k});
            out.push_back({p + "attn.v", &blocks[i].v});
            out.push_back({p + "attn.o", &blocks[i].o});
            out.push_back({p + "mlp.up", &blocks[i].up});
            out.push_back({p + "mlp.down", &blocks[i].down});
        }
        return out;
    }
};

namespace detail {

inline Tensor normal_init(std::vector<std::size_t> shape, double std_dev, std::uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (double& v : t.data) v = std_dev * rng.next_normal();
    return t;
}

inline Model::PLoRAIds add_plora_layer(Model& m, const std::string& name, std::size_t c_out,
                                       std::size_t c_in, std::uint64_t seed) {
    Model::PLoRAIds ids;
    const double w_std = 1.0 / std::sqrt(static_cast<double>(c_in));
    ids.W0 = m.store.add(name + ".W0", normal_init({c_out, c_in}, w_std, derive_seed(seed, "W0")),
                         ParamGroup::kLlmBase);
    ids.B0 = m.store.add(name + ".B0", Tensor({c_out}), ParamGroup::kLlmBase);
    if (m.cfg.plora_rank > 0) {
        PLoRAParams adapter = plora_init(c_in, c_out, static_cast<std::size_t>(m.cfg.plora_rank),
                                         derive_seed(seed, "adapter"));
        ids.W_A = m.store.add(name + ".W_A", adapter.W_A, ParamGroup::kPlora);
        ids.W_B = m.store.add(name + ".W_B", adapter.W_B, ParamGroup::kPlora);
    }
    return ids;
}

}  // namespace detail

inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const auto V = static_cast<std::size_t>(cfg.vocab_size);
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto dm = static_cast<std::size_t>(cfg.d_mlp);

    m.tok_emb = m.store.add("embed.tok", detail::normal_init({V, d}, 0.1, derive_seed(seed, "tok")),
                            ParamGroup::kLlmBase);
    m.pos_emb = m.store.add("embed.pos",
                            detail::normal_init({static_cast<std::size_t>(cfg.max_seq_len), d},
                                                0.1, derive_seed(seed, "pos")),
                            ParamGroup::kLlmBase);

    Tensor ones({d});
    for (double& v : ones.data) v = 1.0;

    for (int i = 0; i < cfg.n_layers; ++i) {
        const std::string p = "block." + std::to_string(i) + ".";
        const std::uint64_t ls = derive_seed(seed, "block", static_cast<std::uint64_t>(i));
        Model::Block blk;
        blk.norm1_gain = m.store.add(p + "norm1.gain", ones, ParamGroup::kLlmBase);
        blk.q = detail::add_plora_layer(m, p + "attn.q", d, d, derive_seed(ls, "q"));
        blk.k = detail::add_plora_layer(m, p + "attn.k", d, d, derive_seed(ls, "k"));
        blk.v = detail::add_plora_layer(m, p + "attn.v", d, d, derive_seed(ls, "v"));
        blk.o = detail::add_plora_layer(m, p + "attn.o", d, d, derive_seed(ls, "o"));
        blk.norm2_gain = m.store.add(p + "norm2.gain", ones, ParamGroup::kLlmBase);
        blk.up = detail::add_plora_layer(m, p + "mlp.up", dm, d, derive_seed(ls, "up"));
        blk.down = detail::add_plora_layer(m, p + "mlp.down", d, dm, derive_seed(ls, "down"));
        m.blocks.push_back(blk);
    }

    m.final_gain = m.store.add("final_norm.gain", ones, ParamGroup::kLlmBase);
    m.head_w = m.store.add("head.W",
                           detail::normal_init({V, d}, 1.0 / std::sqrt(static_cast<double>(d)),
                                               derive_seed(seed, "head")),
                           ParamGroup::kLlmBase);
    return m;
}

// Causal multi-head self-attention over the unified sequence.
inline Var attention_on_tape(Tape& t, const BoundParams& b, const Model& m,
                             const Model::Block& blk, Var x_normed, const ModalityMask& mask) {
    const int n_heads = m.cfg.n_heads;
    const auto dh = static_cast<std::size_t>(m.cfg.d_head());
    Var q = plora_linear(t, x_normed, mask, m.bind_layer(b, blk.q));
    Var k = plora_linear(t, x_normed, mask, m.bind_layer(b, blk.k));
    Var v = plora_linear(t, x_normed, mask, m.bind_layer(b, blk.v));
    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<std::size_t>(n_heads));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < n_heads; ++h) {
        const std::size_t c0 = static_cast<std::size_t>(h) * dh;
        Var qh = slice_cols(t, q, c0, dh);
        Var kh = slice_cols(t, k, c0, dh);
        Var vh = slice_cols(t, v, c0, dh);
        Var scores = scale(t, matmul_nt(t, qh, kh), inv_sqrt);
        Var probs = causal_softmax_rows(t, scores);
        head_outs.push_back(matmul(t, probs, vh));
    }
    Var merged = n_heads == 1 ? head_outs[0] : concat_cols(t, head_outs);
    return plora_linear(t, merged, mask, m.bind_layer(b, blk.o));
}

// Full forward on a tape; visual_embeds may be an empty [0,d] constant when
// the mask has no VISUAL positions.
inline Var model_forward_on_tape(Tape& t, const BoundParams& b, const Model& m,
                                 const std::vector<int>& token_ids, const ModalityMask& mask,
                                 Var visual_embeds) {
    const std::size_t T = token_ids.size();
    if (T == 0) throw ContractError("empty sequence");
    if (T > static_cast<std::size_t>(m.cfg.max_seq_len)) {
        throw ContractError("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                            std::to_string(m.cfg.max_seq_len));
    }
    if (mask.size() != T) {
        throw ContractError("modality mask length " + std::to_string(mask.size()) +
                            " != sequence length " + std::to_string(T));
    }
    const auto d = static_cast<std::size_t>(m.cfg.d_model);
    const std::vector<std::size_t> vis_idx = mask.visual_indices();
    const std::vector<std::size_t> text_idx = mask.text_indices();
    if (t.value(visual_embeds).numel() !=
        vis_idx.size() * d) {
        throw ContractError("visual embeds shape does not match VISUAL positions");
    }

    Var x = t.constant(Tensor({T, d}));
    if (!text_idx.empty()) {
        std::vector<int> text_ids;
        text_ids.reserve(text_idx.size());
        for (std::size_t i : text_idx) text_ids.push_back(token_ids[i]);
        x = add_rows_at(t, x, embed_rows(t, b[m.tok_emb], text_ids), text_idx);
    }
    if (!vis_idx.empty()) {
        x = add_rows_at(t, x, visual_embeds, vis_idx);
    }
    std::vector<std::size_t> pos_idx(T);
    for (std::size_t i = 0; i < T; ++i) pos_idx[i] = i;
    x = add(t, x, gather_rows(t, b[m.pos_emb], pos_idx));

    for (const auto& blk : m.blocks) {
        Var h = rms_norm_rows(t, x, b[blk.norm1_gain], m.cfg.rms_eps);
        x = add(t, x, attention_on_tape(t, b, m, blk, h, mask));
        Var h2 = rms_norm_rows(t, x, b[blk.norm2_gain], m.cfg.rms_eps);
        Var up = plora_linear(t, h2, mask, m.bind_layer(b, blk.up));
        Var down = plora_linear(t, gelu(t, up), mask, m.bind_layer(b, blk.down));
        x = add(t, x, down);
    }
    Var fin = rms_norm_rows(t, x, b[m.final_gain], m.cfg.rms_eps);
    return matmul_nt(t, fin, b[m.head_w]);
}

inline Tensor forward(const Model& m, const InterleavedBatch& batch) {
    batch.validate(m.cfg.d_model);
    Tape t;
    BoundParams b = bind_params(t, m.store);
    Var ve = t.constant(batch.mask.visual_count() > 0
                            ? batch.visual_embeds
                            : Tensor({0, static_cast<std::size_t>(m.cfg.d_model)}));
    return t.value(model_forward_on_tape(t, b, m, batch.token_ids, batch.mask, ve));
}

struct LossResult {
    double value = 0.0;
    bool empty_mask = false;
};

inline LossResult loss(const Model& m, const InterleavedBatch& batch) {
    batch.validate(m.cfg.d_model);
    Tape t;
    BoundParams b = bind_params(t, m.store);
    Var ve = t.constant(batch.mask.visual_count() > 0
                            ? batch.visual_embeds
                            : Tensor({0, static_cast<std::size_t>(m.cfg.d_model)}));
    Var logits = model_forward_on_tape(t, b, m, batch.token_ids, batch.mask, ve);
    LossResult r;
    Var l = cross_entropy(t, logits, batch.targets, batch.loss_mask, &r.empty_mask);
    r.value = t.value(l).data[0];
    return r;
}

}  // namespace plora
