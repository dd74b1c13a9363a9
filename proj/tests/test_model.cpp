#include <catch2/catch.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "plora/model.hpp"
#include "plora/rng.hpp"

using namespace plora;

namespace {

const Tensor& by_name(const ParamStore& store, const std::string& name) {
    for (const auto& e : store.items)
        if (e.name == name) return e.value;
    throw std::runtime_error("no param " + name);
}

ModelConfig small_cfg() {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.d_mlp = 16;
    cfg.max_seq_len = 16;
    cfg.plora_rank = 4;
    return cfg;
}

InterleavedBatch text_batch(const std::vector<int>& ids, int d_model) {
    InterleavedBatch b;
    b.token_ids = ids;
    b.mask = ModalityMask::all_text(ids.size());
    b.visual_embeds = Tensor({0, static_cast<std::size_t>(d_model)});
    b.targets.assign(ids.size(), 0);
    b.loss_mask.assign(ids.size(), 0);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        b.targets[i] = ids[i + 1];
        b.loss_mask[i] = 1;
    }
    return b;
}

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    for (double& v : t.data) v = rng.next_uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("build_model is seed deterministic") {
    Model a = build_model(small_cfg(), 11);
    Model b = build_model(small_cfg(), 11);
    Model c = build_model(small_cfg(), 12);
    REQUIRE(a.store.items.size() == b.store.items.size());
    bool all_equal = true, any_diff_c = false;
    for (std::size_t i = 0; i < a.store.items.size(); ++i) {
        all_equal &= bitwise_equal(a.store.items[i].value, b.store.items[i].value);
        any_diff_c |= !bitwise_equal(a.store.items[i].value, c.store.items[i].value);
    }
    REQUIRE(all_equal);
    REQUIRE(any_diff_c);
}

TEST_CASE("parameter count matches the closed form") {
    ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.d_mlp = 64;
    cfg.max_seq_len = 64;
    cfg.plora_rank = 4;
    Model m = build_model(cfg, 3);

    const std::size_t V = 64, d = 32, mlp = 64, L = 2, S = 64, r = 4;
    const std::size_t embed = V * d + S * d;
    const std::size_t attn_base = 4 * (d * d + d);
    const std::size_t attn_adapters = 4 * r * (d + d);
    const std::size_t mlp_base = (mlp * d + mlp) + (d * mlp + d);
    const std::size_t mlp_adapters = r * (d + mlp) + r * (mlp + d);
    const std::size_t norms = 2 * d;
    const std::size_t per_block = attn_base + attn_adapters + mlp_base + mlp_adapters + norms;
    const std::size_t head_and_final = d + V * d;
    REQUIRE(m.store.total_scalars() == embed + L * per_block + head_and_final);
}

TEST_CASE("config invariants are enforced") {
    ModelConfig cfg = small_cfg();
    cfg.n_heads = 3;  // 8 % 3 != 0
    REQUIRE_THROWS_AS(build_model(cfg, 1), ConfigError);
    cfg = small_cfg();
    cfg.plora_rank = 9;  // > d_model
    REQUIRE_THROWS_AS(build_model(cfg, 1), ConfigError);
    cfg = small_cfg();
    cfg.plora_rank = -1;
    REQUIRE_THROWS_AS(build_model(cfg, 1), ConfigError);
}

TEST_CASE("fresh adapters: true mask and all-text mask agree on identical inputs") {
    // visual rows are fed the exact embedding vectors the text path would use,
    // so with W_B = 0 the logits must match bitwise
    Model m = build_model(small_cfg(), 21);
    const std::vector<int> ids = {1, 4, 5, 3, 2};
    InterleavedBatch as_text = text_batch(ids, m.cfg.d_model);

    InterleavedBatch mixed = as_text;
    mixed.mask = ModalityMask::from_string("TVVTT");
    const Tensor& emb = by_name(m.store, "embed.tok");
    mixed.visual_embeds = Tensor({2, 8});
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t j = 0; j < 8; ++j)
            mixed.visual_embeds.at(r, j) = emb.at(static_cast<std::size_t>(ids[r + 1]), j);
    mixed.loss_mask[1] = mixed.loss_mask[2] = 0;

    REQUIRE(bitwise_equal(forward(m, as_text), forward(m, mixed)));
}

TEST_CASE("rank-0 model ignores modality routing entirely") {
    ModelConfig cfg = small_cfg();
    cfg.plora_rank = 0;
    Model m = build_model(cfg, 22);
    const std::vector<int> ids = {1, 4, 5, 3};
    InterleavedBatch as_text = text_batch(ids, cfg.d_model);
    InterleavedBatch mixed = as_text;
    mixed.mask = ModalityMask::from_string("TVTT");
    const Tensor& emb = by_name(m.store, "embed.tok");
    mixed.visual_embeds = Tensor({1, 8});
    for (std::size_t j = 0; j < 8; ++j)
        mixed.visual_embeds.at(0, j) = emb.at(static_cast<std::size_t>(ids[1]), j);
    mixed.loss_mask[1] = 0;
    REQUIRE(bitwise_equal(forward(m, as_text), forward(m, mixed)));
}

TEST_CASE("all-text logits are invariant to adapter values") {
    Model m = build_model(small_cfg(), 23);
    InterleavedBatch b = text_batch({1, 7, 2, 9, 3}, m.cfg.d_model);
    Tensor before = forward(m, b);
    Rng rng(99);
    for (auto& e : m.store.items) {
        if (e.group == ParamGroup::kPlora) {
            for (double& v : e.value.data) v = rng.next_uniform(-2.0, 2.0);
        }
    }
    Tensor after = forward(m, b);
    REQUIRE(bitwise_equal(before, after));
}

TEST_CASE("single-token forward matches a step-by-step recomputation") {
    ModelConfig cfg;
    cfg.vocab_size = 2;
    cfg.d_model = 2;
    cfg.n_heads = 1;
    cfg.n_layers = 1;
    cfg.d_mlp = 2;
    cfg.max_seq_len = 4;
    cfg.plora_rank = 0;
    Model m = build_model(cfg, 31);
    InterleavedBatch b = text_batch({1}, 2);
    Tensor got = forward(m, b);

    // independent recomputation with bare loops
    auto rms = [&](const std::vector<double>& x, const Tensor& gain) {
        double ms = 0.0;
        for (double v : x) ms += v * v;
        const double r = std::sqrt(ms / static_cast<double>(x.size()) + cfg.rms_eps);
        std::vector<double> y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain.data[i] * x[i] / r;
        return y;
    };
    auto linear = [&](const std::vector<double>& x, const Tensor& w, const Tensor& bias) {
        std::vector<double> y(w.shape[0], 0.0);
        for (std::size_t o = 0; o < w.shape[0]; ++o) {
            double s = bias.numel() ? bias.data[o] : 0.0;
            for (std::size_t i = 0; i < w.shape[1]; ++i) s += w.at(o, i) * x[i];
            y[o] = s;
        }
        return y;
    };
    auto gelu_ref = [](std::vector<double> x) {
        for (double& v : x) {
            const double u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
            v = 0.5 * v * (1.0 + std::tanh(u));
        }
        return x;
    };

    const Tensor& tok = by_name(m.store, "embed.tok");
    const Tensor& pos = by_name(m.store, "embed.pos");
    std::vector<double> x = {tok.at(1, 0) + pos.at(0, 0), tok.at(1, 1) + pos.at(0, 1)};

    std::vector<double> n1 = rms(x, by_name(m.store, "block.0.norm1.gain"));
    // T = 1: causal attention collapses to the value projection
    std::vector<double> v = linear(n1, by_name(m.store, "block.0.attn.v.W0"),
                                   by_name(m.store, "block.0.attn.v.B0"));
    std::vector<double> o = linear(v, by_name(m.store, "block.0.attn.o.W0"),
                                   by_name(m.store, "block.0.attn.o.B0"));
    for (std::size_t i = 0; i < 2; ++i) x[i] += o[i];
    std::vector<double> n2 = rms(x, by_name(m.store, "block.0.norm2.gain"));
    std::vector<double> up = linear(n2, by_name(m.store, "block.0.mlp.up.W0"),
                                    by_name(m.store, "block.0.mlp.up.B0"));
    std::vector<double> down = gelu_ref(up);
    down = linear(down, by_name(m.store, "block.0.mlp.down.W0"),
                  by_name(m.store, "block.0.mlp.down.B0"));
    for (std::size_t i = 0; i < 2; ++i) x[i] += down[i];
    std::vector<double> fin = rms(x, by_name(m.store, "final_norm.gain"));
    std::vector<double> logits = linear(fin, by_name(m.store, "head.W"), Tensor{});

    REQUIRE(got.shape == std::vector<std::size_t>{1, 2});
    REQUIRE(got.at(0, 0) == Approx(logits[0]).epsilon(1e-12));
    REQUIRE(got.at(0, 1) == Approx(logits[1]).epsilon(1e-12));
}

TEST_CASE("uniform-logit model loses ln V") {
    ModelConfig cfg = small_cfg();
    cfg.vocab_size = 4;
    Model m = build_model(cfg, 41);
    for (auto& e : m.store.items) {
        if (e.name == "head.W") {
            for (double& v : e.value.data) v = 0.0;
        }
    }
    InterleavedBatch b = text_batch({1, 2, 3, 1}, cfg.d_model);
    LossResult r = loss(m, b);
    REQUIRE_FALSE(r.empty_mask);
    REQUIRE(r.value == Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("empty loss mask reports the degenerate flag") {
    Model m = build_model(small_cfg(), 42);
    InterleavedBatch b = text_batch({1, 2, 3}, m.cfg.d_model);
    b.loss_mask.assign(3, 0);
    LossResult r = loss(m, b);
    REQUIRE(r.empty_mask);
    REQUIRE(r.value == 0.0);
}

TEST_CASE("causality: perturbing token t changes logits only at positions >= t") {
    Model m = build_model(small_cfg(), 43);
    InterleavedBatch b = text_batch({1, 4, 5, 6, 7}, m.cfg.d_model);
    Tensor base = forward(m, b);
    InterleavedBatch b2 = b;
    b2.token_ids[2] = 9;
    b2.targets[1] = 9;
    Tensor perturbed = forward(m, b2);
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t j = 0; j < base.shape[1]; ++j)
            REQUIRE(base.at(t, j) == perturbed.at(t, j));
    double diff = 0.0;
    for (std::size_t t = 2; t < 5; ++t)
        for (std::size_t j = 0; j < base.shape[1]; ++j)
            diff = std::max(diff, std::abs(base.at(t, j) - perturbed.at(t, j)));
    REQUIRE(diff > 0.0);
}

TEST_CASE("model loss gradient matches finite differences with visual tokens") {
    Model m = build_model(small_cfg(), 44);
    InterleavedBatch b;
    b.token_ids = {1, 4, 0, 0, 3, 8, 2};
    b.mask = ModalityMask::from_string("TTVVTTT");
    b.visual_embeds = random_tensor({2, 8}, 45);
    b.targets = {4, 0, 0, 0, 8, 2, 0};
    b.loss_mask = {0, 0, 0, 0, 1, 1, 0};
    b.validate(m.cfg.d_model);

    Tape t;
    BoundParams bp = bind_params(t, m.store);
    Var ve = t.constant(b.visual_embeds);
    Var logits = model_forward_on_tape(t, bp, m, b.token_ids, b.mask, ve);
    t.backward(cross_entropy(t, logits, b.targets, b.loss_mask));

    std::vector<double> theta;
    for (const auto& e : m.store.items)
        theta.insert(theta.end(), e.value.data.begin(), e.value.data.end());
    Model probe = m;  // reuses structure; store values overwritten per call
    auto f = [&](const std::vector<double>& flat) {
        std::size_t off = 0;
        for (auto& e : probe.store.items)
            for (double& v : e.value.data) v = flat[off++];
        return loss(probe, b).value;
    };
    std::vector<double> fd = finite_diff_grad(f, theta, 1e-5);

    double max_err = 0.0;
    std::size_t off = 0;
    for (std::size_t i = 0; i < m.store.items.size(); ++i) {
        for (double g : t.grad(bp.vars[i]).data)
            max_err = std::max(max_err, rel_err(g, fd[off++]));
    }
    REQUIRE(max_err < 1e-4);
}

TEST_CASE("adapter gradients vanish on all-text batches at the model level") {
    Model m = build_model(small_cfg(), 46);
    InterleavedBatch b = text_batch({1, 5, 6, 2}, m.cfg.d_model);
    Tape t;
    BoundParams bp = bind_params(t, m.store);
    Var ve = t.constant(Tensor({0, 8}));
    Var logits = model_forward_on_tape(t, bp, m, b.token_ids, b.mask, ve);
    t.backward(cross_entropy(t, logits, b.targets, b.loss_mask));
    for (std::size_t i = 0; i < m.store.items.size(); ++i) {
        if (m.store.items[i].group != ParamGroup::kPlora) continue;
        for (double g : t.grad(bp.vars[i]).data) REQUIRE(g == 0.0);
    }
}

TEST_CASE("sequence and mask contract errors") {
    Model m = build_model(small_cfg(), 47);
    std::vector<int> long_ids(m.cfg.max_seq_len + 1, 1);
    InterleavedBatch b = text_batch(long_ids, m.cfg.d_model);
    REQUIRE_THROWS_AS(forward(m, b), ContractError);

    InterleavedBatch bad = text_batch({1, 2, 3}, m.cfg.d_model);
    bad.mask = ModalityMask::from_string("TVT");
    REQUIRE_THROWS_AS(forward(m, bad), ContractError);  // missing visual embeds

    InterleavedBatch bad2 = text_batch({1, 2, 3}, m.cfg.d_model);
    bad2.mask = ModalityMask::from_string("TVT");
    bad2.visual_embeds = random_tensor({1, 8}, 48);
    bad2.loss_mask[1] = 1;
    REQUIRE_THROWS_AS(forward(m, bad2), ContractError);  // loss on a visual position
}
