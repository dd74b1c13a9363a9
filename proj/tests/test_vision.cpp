#include <catch2/catch.hpp>

#include <cmath>
#include <vector>

#include "plora/autodiff.hpp"
#include "plora/schedule.hpp"
#include "plora/vision.hpp"

using namespace plora;

namespace {

VisionEncoder small_encoder(int depth = 2, std::uint64_t seed = 5) {
    VisionConfig vc;
    vc.depth = depth;
    vc.image_side = 8;
    vc.patch = 4;
    return build_encoder(vc, 16, seed);
}

}  // namespace

TEST_CASE("zero image maps to identical features on every patch") {
    VisionEncoder enc = small_encoder();
    SyntheticImage img;
    img.side = 8;
    img.pixels.assign(64, 0.0);
    Tensor f = encode_image(img, enc);
    REQUIRE(f.shape == std::vector<std::size_t>{4, 16});
    for (std::size_t p = 1; p < 4; ++p)
        for (std::size_t j = 0; j < 16; ++j)
            REQUIRE(f.at(p, j) == f.at(0, j));
}

TEST_CASE("images with different keys separate in feature space") {
    VisionEncoder enc = small_encoder();
    SyntheticImage a = generate_image(8, 0, /*pattern_seed=*/7, /*sample_seed=*/100);
    SyntheticImage b = generate_image(8, 1, 7, 100);
    Tensor fa = encode_image(a, enc);
    Tensor fb = encode_image(b, enc);
    REQUIRE(max_abs_diff(fa, fb) > 1e-6);
}

TEST_CASE("pixel range and key recoverability of generated images") {
    for (int key = 0; key < 4; ++key) {
        SyntheticImage img = generate_image(8, key, 7, derive_seed(3, "s", key));
        REQUIRE(img.class_key == key);
        for (double p : img.pixels) {
            REQUIRE(p >= 0.0);
            REQUIRE(p <= 1.0);
        }
        // same key, different sample jitter: still close to the key pattern
        SyntheticImage img2 = generate_image(8, key, 7, derive_seed(4, "s", key));
        double d = 0.0;
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
            d = std::max(d, std::abs(img.pixels[i] - img2.pixels[i]));
        REQUIRE(d <= 0.1);  // jitter band is +/-0.05 per sample
    }
}

TEST_CASE("patch arithmetic: 8x8 with patch 4 gives 4 visual tokens") {
    VisionEncoder enc = small_encoder();
    REQUIRE(enc.cfg.n_patches() == 4);
    SyntheticImage img = generate_image(8, 0, 7, 9);
    REQUIRE(encode_image(img, enc).shape[0] == 4);
}

TEST_CASE("indivisible patch size is a contract error") {
    SyntheticImage img = generate_image(9, 0, 7, 9);
    REQUIRE_THROWS_AS(flatten_patches(img, 4), ContractError);
    VisionConfig vc;
    vc.image_side = 9;
    vc.patch = 4;
    REQUIRE_THROWS_AS(build_encoder(vc, 16, 1), ConfigError);
}

TEST_CASE("encode_image is deterministic") {
    VisionEncoder enc = small_encoder();
    SyntheticImage img = generate_image(8, 2, 7, 11);
    REQUIRE(bitwise_equal(encode_image(img, enc), encode_image(img, enc)));
}

TEST_CASE("lldr_rates golden values") {
    std::vector<double> flat = lldr_rates(4, 1e-3, 1.0);
    for (double r : flat) REQUIRE(r == 1e-3);

    std::vector<double> rates = lldr_rates(3, 1e-3, 0.9);
    REQUIRE(rates[0] == 0.81 * 1e-3);
    REQUIRE(rates[1] == 0.9 * 1e-3);
    REQUIRE(rates[2] == 1e-3);

    REQUIRE_THROWS_AS(lldr_rates(0, 1.0, 0.9), ContractError);
    REQUIRE_THROWS_AS(lldr_rates(3, 1.0, 0.0), ContractError);
    REQUIRE_THROWS_AS(lldr_rates(3, 1.0, 1.5), ContractError);
}

TEST_CASE("lldr_rates is monotonically non-decreasing toward the top") {
    for (double decay : {0.5, 0.9, 1.0}) {
        std::vector<double> rates = lldr_rates(6, 2e-4, decay);
        for (std::size_t i = 1; i < rates.size(); ++i) REQUIRE(rates[i] >= rates[i - 1]);
        REQUIRE(rates.back() == 2e-4);
    }
}

TEST_CASE("encoder gradients match finite differences on a depth-2 stub") {
    VisionEncoder enc = small_encoder(2, 21);
    SyntheticImage img = generate_image(8, 1, 7, 22);
    Tensor w({4, 16});
    Rng rng(23);
    for (double& v : w.data) v = rng.next_uniform(-1.0, 1.0);

    // tape route
    Tape t;
    BoundParams b = bind_params(t, enc.store);
    Var out = encode_image_on_tape(t, b, enc, img);
    t.backward(weighted_sum(t, out, w));

    // finite-difference route over the full flattened parameter vector
    std::vector<double> theta;
    for (const auto& e : enc.store.items)
        theta.insert(theta.end(), e.value.data.begin(), e.value.data.end());
    VisionEncoder probe = enc;
    auto f = [&](const std::vector<double>& flat) {
        std::size_t off = 0;
        for (auto& e : probe.store.items)
            for (double& v : e.value.data) v = flat[off++];
        Tensor y = encode_image(img, probe);
        double s = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * w.data[i];
        return s;
    };
    std::vector<double> fd = finite_diff_grad(f, theta, 1e-5);

    double max_err = 0.0;
    std::size_t off = 0;
    for (std::size_t i = 0; i < enc.store.items.size(); ++i) {
        for (double g : t.grad(b.vars[i]).data)
            max_err = std::max(max_err, rel_err(g, fd[off++]));
    }
    REQUIRE(max_err < 1e-4);
}
