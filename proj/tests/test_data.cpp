#include <catch2/catch.hpp>

#include <cmath>
#include <sstream>
#include <vector>

#include "plora/data.hpp"

using namespace plora;

namespace {

TaskSpec spec_of(TaskKind kind, int keys = 4, bool informative = true, bool text_only = false) {
    TaskSpec s;
    s.kind = kind;
    s.num_keys = keys;
    s.key_informative = informative;
    s.text_only = text_only;
    return s;
}

VisionEncoder tiny_encoder() {
    VisionConfig vc;
    vc.depth = 1;
    return build_encoder(vc, 8, 77);
}

}  // namespace

TEST_CASE("generator is bit-identical given (spec, seed)") {
    TaskSpec s = spec_of(TaskKind::kKnowledge);
    InterleavedSample a = gen_sample(s, 31);
    InterleavedSample b = gen_sample(s, 31);
    InterleavedSample c = gen_sample(s, 32);
    REQUIRE(a.token_ids == b.token_ids);
    REQUIRE(a.targets == b.targets);
    REQUIRE(a.mask.to_string() == b.mask.to_string());
    REQUIRE(a.keys == b.keys);
    REQUIRE(a.images.size() == b.images.size());
    for (std::size_t i = 0; i < a.images.size(); ++i)
        REQUIRE(a.images[i].pixels == b.images[i].pixels);
    bool differs = c.keys != a.keys || c.images[0].pixels != a.images[0].pixels;
    REQUIRE(differs);
}

TEST_CASE("generated batches satisfy the interleaved invariants") {
    for (TaskKind kind : {TaskKind::kCaption, TaskKind::kKnowledge, TaskKind::kMultitask,
                          TaskKind::kCompose}) {
        TaskSpec s = spec_of(kind);
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            InterleavedSample smp = gen_sample(s, seed);
            const std::size_t T = smp.token_ids.size();
            REQUIRE(smp.mask.size() == T);
            REQUIRE(smp.targets.size() == T);
            REQUIRE(smp.loss_mask.size() == T);
            const std::size_t per_img = static_cast<std::size_t>(s.n_visual_tokens());
            REQUIRE(smp.mask.visual_count() == per_img * smp.images.size());
            std::size_t lossy = 0;
            for (std::size_t i = 0; i < T; ++i) {
                if (smp.mask.is_visual(i)) REQUIRE(smp.loss_mask[i] == 0);
                if (smp.loss_mask[i]) {
                    ++lossy;
                    REQUIRE(smp.targets[i] >= 0);
                    REQUIRE(smp.targets[i] < s.vocab_size);
                }
            }
            REQUIRE(lossy >= 1);
            // instruction prefix carries no loss
            REQUIRE(smp.loss_mask[0] == 0);
            REQUIRE(smp.loss_mask[1] == 0);
            REQUIRE(smp.loss_mask[2] == 0);
            for (const SyntheticImage& img : smp.images) {
                REQUIRE(img.side == s.image_side);
            }
        }
    }
}

TEST_CASE("entropy floors: caption closed forms") {
    REQUIRE(entropy_floor(spec_of(TaskKind::kCaption, 1), false) == Approx(0.0).margin(1e-12));
    REQUIRE(entropy_floor(spec_of(TaskKind::kCaption, 4), false) ==
            Approx(std::log(4.0)).epsilon(1e-12));
    REQUIRE(entropy_floor(spec_of(TaskKind::kCaption, 4), true) == Approx(0.0).margin(1e-12));
}

TEST_CASE("entropy floors: key-independent answers give ln K regardless of access") {
    TaskSpec decoy = spec_of(TaskKind::kCaption, 2, /*informative=*/false);
    REQUIRE(entropy_floor(decoy, false) == Approx(std::log(2.0)).epsilon(1e-12));
    REQUIRE(entropy_floor(decoy, true) == Approx(std::log(2.0)).epsilon(1e-12));

    TaskSpec text = spec_of(TaskKind::kCaption, 4, true, /*text_only=*/true);
    REQUIRE(entropy_floor(text, false) == Approx(std::log(4.0)).epsilon(1e-12));
    REQUIRE(entropy_floor(text, true) == Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("entropy floors: knowledge facts split between key-bound and determined") {
    // first fact is injective in the key, so the second is free given the first
    TaskSpec s = spec_of(TaskKind::kKnowledge, 4);
    REQUIRE(entropy_floor(s, false) == Approx(std::log(4.0) / 2.0).epsilon(1e-12));
    REQUIRE(entropy_floor(s, true) == Approx(0.0).margin(1e-12));
}

TEST_CASE("entropy floors: compose averages over its lossy positions") {
    TaskSpec s = spec_of(TaskKind::kCompose, 4);
    s.compose_slots = 2;
    // two key-bound positions plus the deterministic EOS prediction
    REQUIRE(entropy_floor(s, false) == Approx(2.0 * std::log(4.0) / 3.0).epsilon(1e-12));
    REQUIRE(entropy_floor(s, true) == Approx(0.0).margin(1e-12));
}

TEST_CASE("no-visual floor dominates the visual floor") {
    for (TaskKind kind : {TaskKind::kCaption, TaskKind::kKnowledge, TaskKind::kCompose}) {
        for (bool informative : {true, false}) {
            TaskSpec s = spec_of(kind, 3, informative);
            const double no_vis = entropy_floor(s, false);
            const double vis = entropy_floor(s, true);
            REQUIRE(no_vis >= vis - 1e-12);
            if (informative) {
                REQUIRE(no_vis > vis);
            } else {
                REQUIRE(no_vis == Approx(vis).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("compose requires at least one slot and round-trips its mask") {
    TaskSpec bad = spec_of(TaskKind::kCompose);
    bad.compose_slots = 0;
    REQUIRE_THROWS_AS(gen_compose(bad, 1), ContractError);

    TaskSpec s = spec_of(TaskKind::kCompose);
    s.compose_slots = 2;
    ComposeSample c = gen_compose(s, 5);
    REQUIRE(c.images.size() == 2);
    REQUIRE(c.mask.size() == c.token_ids.size());
    // exactly two contiguous visual blocks
    int blocks = 0;
    bool in_block = false;
    for (std::size_t i = 0; i < c.mask.size(); ++i) {
        const bool v = c.mask.is_visual(i);
        if (v && !in_block) ++blocks;
        in_block = v;
    }
    REQUIRE(blocks == 2);
    ModalityMask rebuilt = compose_mask_from_markers(c, s.n_visual_tokens());
    REQUIRE(rebuilt.to_string() == c.mask.to_string());
}

TEST_CASE("gen_compose rejects non-compose specs") {
    REQUIRE_THROWS_AS(gen_compose(spec_of(TaskKind::kCaption), 1), ContractError);
}

TEST_CASE("to_batch stitches encoder features for every image block") {
    VisionEncoder enc = tiny_encoder();
    TaskSpec s = spec_of(TaskKind::kCompose);
    s.compose_slots = 2;
    InterleavedSample smp = gen_sample(s, 9);
    InterleavedBatch b = to_batch(smp, enc);
    b.validate(enc.d_model);
    REQUIRE(b.visual_embeds.shape[0] == smp.mask.visual_count());
    // block 0 rows equal a direct encode of image 0
    Tensor direct = encode_image(smp.images[0], enc);
    for (std::size_t i = 0; i < direct.shape[0]; ++i)
        for (std::size_t j = 0; j < direct.shape[1]; ++j)
            REQUIRE(b.visual_embeds.at(i, j) == direct.at(i, j));
}

TEST_CASE("gen_batch is deterministic and sized") {
    VisionEncoder enc = tiny_encoder();
    TaskSpec s = spec_of(TaskKind::kCaption);
    std::vector<InterleavedBatch> a = gen_batch(s, enc, 3, 123);
    std::vector<InterleavedBatch> b = gen_batch(s, enc, 3, 123);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        REQUIRE(a[i].token_ids == b[i].token_ids);
        REQUIRE(bitwise_equal(a[i].visual_embeds, b[i].visual_embeds));
    }
}

TEST_CASE("sample dump uses the documented field order") {
    TaskSpec s = spec_of(TaskKind::kCaption);
    std::ostringstream os;
    dump_samples(os, s, 2, 7);
    std::istringstream in(os.str());
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) {
        ++lines;
        REQUIRE(line.rfind("seed=", 0) == 0);
        const auto kind_at = line.find(" kind=caption ");
        const auto key_at = line.find(" key=");
        const auto tokens_at = line.find(" tokens=");
        const auto mask_at = line.find(" mask=");
        REQUIRE(kind_at != std::string::npos);
        REQUIRE(key_at != std::string::npos);
        REQUIRE(tokens_at != std::string::npos);
        REQUIRE(mask_at != std::string::npos);
        REQUIRE(kind_at < key_at);
        REQUIRE(key_at < tokens_at);
        REQUIRE(tokens_at < mask_at);
        // mask string covers the whole sequence in V/T characters
        const std::string mask_s = line.substr(mask_at + 6);
        for (char ch : mask_s) REQUIRE((ch == 'V' || ch == 'T'));
    }
    REQUIRE(lines == 2);
}

TEST_CASE("oversized key spaces are rejected") {
    TaskSpec s = spec_of(TaskKind::kCaption, 40);
    REQUIRE_THROWS_AS(s.validate(), ConfigError);
}
