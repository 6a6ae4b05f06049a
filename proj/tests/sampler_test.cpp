// reverse-process sampling: determinism, batch independence, error paths
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

#include "tryoff/sampler.hpp"

using namespace tryoff;

namespace {

Codec<float> small_codec() {
    CodecConfig cc;
    cc.downsample_factor = 2;
    cc.latent_channels = 12;
    cc.mode = CodecMode::orthonormal;
    cc.seed = 9;
    return Codec<float>(cc);
}

UNetConfig tiny_cfg() {
    UNetConfig c;
    c.in_channels = 25;
    c.out_channels = 12;
    c.base_channels = 8;
    c.channel_mult = {1, 2};
    c.attention_levels = {1};
    c.num_heads = 2;
    c.norm_groups = 4;
    return c;
}

TryOffPair<float> one_pair(const std::string& id, uint64_t seed) {
    Rng rng(seed);
    TryOffPair<float> p;
    p.id = id;
    p.person = Tensor<float>({3, 8, 4});
    p.garment = Tensor<float>({3, 8, 4});
    p.mask = Tensor<float>({1, 8, 4});
    for (auto& v : p.person.data) v = static_cast<float>(rng.uniform());
    for (auto& v : p.garment.data) v = static_cast<float>(rng.uniform());
    for (auto& v : p.mask.data) v = rng.uniform() < 0.4f ? 1.0f : 0.0f;
    return p;
}

}  // namespace

TEST_CASE("sample_latent walks the full step list and stays deterministic") {
    const auto codec = small_codec();
    const auto sched = make_linear_schedule(40, 1e-4, 0.02);
    const auto pair = one_pair("a", 1);
    const auto cond = build_conditioning(codec, pair, {});

    int calls = 0;
    std::vector<int> seen_t;
    Denoiser<float> dn = [&](const Tensor<float>& canvas, int t) {
        ++calls;
        seen_t.push_back(t);
        REQUIRE(canvas.dim(0) == 25);
        Tensor<float> eps({12, 8, 2});
        for (size_t i = 0; i < eps.data.size(); ++i)
            eps.data[i] = 0.1f * static_cast<float>(std::sin(double(i) + t));
        return eps;
    };

    Rng r1(7);
    const auto z1 = sample_latent(dn, cond, sched, {12, 8, 2}, 10, 0.0, r1);
    REQUIRE(calls == 10);
    REQUIRE(std::is_sorted(seen_t.rbegin(), seen_t.rend()));
    REQUIRE(seen_t.front() == 39);  // starts at T-1
    REQUIRE(seen_t.back() == 0);    // ends at 0
    REQUIRE(z1.all_finite());

    Rng r2(7);
    const auto z2 = sample_latent(dn, cond, sched, {12, 8, 2}, 10, 0.0, r2);
    REQUIRE(max_abs_diff(z1, z2) == 0.0);

    Rng r3(8);
    const auto z3 = sample_latent(dn, cond, sched, {12, 8, 2}, 10, 0.0, r3);
    REQUIRE(max_abs_diff(z1, z3) > 0.0);
}

TEST_CASE("steps=1 jumps straight from noise to the denoised estimate") {
    const auto codec = small_codec();
    const auto sched = make_linear_schedule(40, 1e-4, 0.02);
    const auto pair = one_pair("b", 2);
    const auto cond = build_conditioning(codec, pair, {});

    Denoiser<float> zero = [](const Tensor<float>& canvas, int) {
        (void)canvas;
        return Tensor<float>({12, 8, 2});
    };
    Rng rng(3);
    Rng probe(3);
    const auto z_init = Tensor<float>::randn({12, 8, 2}, probe);
    const auto z = sample_latent(zero, cond, sched, {12, 8, 2}, 1, 0.0, rng);
    // eps == 0 means x0_hat = z_T / sqrt(alpha_bar(T-1)) and t_prev = -1 lands on x0_hat
    const double scale = 1.0 / std::sqrt(sched.alpha_bar_at(39));
    for (size_t i = 0; i < z.data.size(); ++i)
        REQUIRE(z.data[i] == Catch::Approx(z_init.data[i] * scale).margin(1e-5));

    REQUIRE_THROWS_AS(sample_latent(zero, cond, sched, {12, 8, 2}, 0, 0.0, rng), ConfigError);
}

TEST_CASE("eta>0 draws extra noise and changes the trajectory") {
    const auto codec = small_codec();
    const auto sched = make_linear_schedule(40, 1e-4, 0.02);
    const auto pair = one_pair("c", 3);
    const auto cond = build_conditioning(codec, pair, {});

    Denoiser<float> dn = [](const Tensor<float>& canvas, int t) {
        Tensor<float> eps({12, 8, 2});
        for (size_t i = 0; i < eps.data.size(); ++i)
            eps.data[i] = 0.05f * static_cast<float>(std::cos(double(i) * 0.3 + t));
        (void)canvas;
        return eps;
    };
    Rng ra(5), rb(5);
    const auto z_det = sample_latent(dn, cond, sched, {12, 8, 2}, 8, 0.0, ra);
    const auto z_sto = sample_latent(dn, cond, sched, {12, 8, 2}, 8, 0.5, rb);
    REQUIRE(z_sto.all_finite());
    REQUIRE(max_abs_diff(z_det, z_sto) > 0.0);

    // still deterministic given the same rng seed
    Rng rc(5);
    const auto z_sto2 = sample_latent(dn, cond, sched, {12, 8, 2}, 8, 0.5, rc);
    REQUIRE(max_abs_diff(z_sto, z_sto2) == 0.0);
}

TEST_CASE("non-finite denoiser output is reported, not propagated") {
    const auto codec = small_codec();
    const auto sched = make_linear_schedule(40, 1e-4, 0.02);
    const auto pair = one_pair("d", 4);
    const auto cond = build_conditioning(codec, pair, {});

    Denoiser<float> nan_dn = [](const Tensor<float>&, int) {
        Tensor<float> eps({12, 8, 2});
        eps.data[0] = std::numeric_limits<float>::quiet_NaN();
        return eps;
    };
    Rng rng(6);
    REQUIRE_THROWS_AS(sample_latent(nan_dn, cond, sched, {12, 8, 2}, 4, 0.0, rng), NumericError);
}

TEST_CASE("generated image is independent of batch composition and order") {
    const auto codec = small_codec();
    const auto sched = make_linear_schedule(30, 1e-4, 0.02);
    UNet<float> net(tiny_cfg());
    net.init_params(17);

    std::vector<TryOffPair<float>> trio = {one_pair("x", 10), one_pair("y", 11),
                                           one_pair("z", 12)};
    const auto batch = batch_generate(net, codec, sched, trio, {}, 5, 0.0, 99);
    REQUIRE(batch.size() == 3);

    // alone
    const auto solo = generate_garment(net, codec, sched, trio[1], {}, 5, 0.0, 99);
    REQUIRE(max_abs_diff(solo, batch[1]) == 0.0);

    // reordered
    std::vector<TryOffPair<float>> rev = {trio[2], trio[0], trio[1]};
    const auto batch_rev = batch_generate(net, codec, sched, rev, {}, 5, 0.0, 99);
    REQUIRE(max_abs_diff(batch_rev[2], batch[1]) == 0.0);
    REQUIRE(max_abs_diff(batch_rev[0], batch[2]) == 0.0);

    // output contract: decoded image, clamped to [0,1]
    REQUIRE(batch[0].shape == std::vector<int>{3, 8, 4});
    for (float v : batch[0].data) {
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
    }

    // a different master seed gives a different image
    const auto other = generate_garment(net, codec, sched, trio[1], {}, 5, 0.0, 100);
    REQUIRE(max_abs_diff(other, batch[1]) > 0.0);
}
