// training loop: splits, region loss, determinism, overfit, resume
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "tryoff/checkpoint.hpp"
#include "tryoff/trainer.hpp"

using namespace tryoff;
namespace fs = std::filesystem;

namespace {

UNetConfig tiny_cfg(int in_ch, int out_ch) {
    UNetConfig c;
    c.in_channels = in_ch;
    c.out_channels = out_ch;
    c.base_channels = 8;
    c.channel_mult = {1, 2};
    c.attention_levels = {1};
    c.num_heads = 2;
    c.norm_groups = 4;
    return c;
}

Codec<float> small_codec() {
    CodecConfig cc;
    cc.downsample_factor = 2;
    cc.latent_channels = 12;
    cc.mode = CodecMode::orthonormal;
    cc.seed = 9;
    return Codec<float>(cc);
}

std::vector<TryOffPair<float>> toy_pairs(int n, int h, int w, uint64_t seed) {
    std::vector<TryOffPair<float>> out;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        TryOffPair<float> p;
        p.id = "p" + std::to_string(i);
        p.person = Tensor<float>({3, h, w});
        p.garment = Tensor<float>({3, h, w});
        p.mask = Tensor<float>({1, h, w});
        for (auto& v : p.person.data) v = static_cast<float>(rng.uniform());
        for (auto& v : p.garment.data) v = static_cast<float>(rng.uniform());
        for (auto& v : p.mask.data) v = rng.uniform() < 0.4f ? 1.0f : 0.0f;
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace

TEST_CASE("validation split is deterministic, disjoint, and sorted") {
    auto [tr1, va1] = split_indices(100, 0.1, 7);
    auto [tr2, va2] = split_indices(100, 0.1, 7);
    REQUIRE(tr1 == tr2);
    REQUIRE(va1 == va2);
    REQUIRE(va1.size() == 10);
    REQUIRE(tr1.size() == 90);
    REQUIRE(std::is_sorted(tr1.begin(), tr1.end()));
    REQUIRE(std::is_sorted(va1.begin(), va1.end()));

    std::set<int> all(tr1.begin(), tr1.end());
    all.insert(va1.begin(), va1.end());
    REQUIRE(all.size() == 100);
    REQUIRE(*all.begin() == 0);
    REQUIRE(*all.rbegin() == 99);

    // different seed, different split
    auto [tr3, va3] = split_indices(100, 0.1, 8);
    REQUIRE(va3 != va1);

    // at least one training sample even at extreme fractions
    auto [tr4, va4] = split_indices(3, 0.9, 1);
    REQUIRE(tr4.size() >= 1);

    auto [tr5, va5] = split_indices(5, 0.0, 1);
    REQUIRE(va5.empty());
    REQUIRE(tr5.size() == 5);
}

TEST_CASE("region loss equals plain MSE on the selected rows") {
    Rng rng(1);
    const auto pred = Tensor<double>::randn({3, 4, 5}, rng);
    const auto eps = Tensor<double>::randn({3, 4, 5}, rng);

    // full canvas: MSE over everything
    double want = 0.0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const double d = pred.data[i] - eps.data[i];
        want += d * d;
    }
    want /= static_cast<double>(pred.data.size());
    REQUIRE(region_loss(pred, eps, LossRegion::FullCanvas, true) ==
            Catch::Approx(want).margin(1e-12));

    // garment slot on top: rows [0,2)
    double top = 0.0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 5; ++x) {
                const double d = pred.at(c, y, x) - eps.at(c, y, x);
                top += d * d;
            }
    top /= 3 * 2 * 5;
    REQUIRE(region_loss(pred, eps, LossRegion::GarmentSlot, true) ==
            Catch::Approx(top).margin(1e-12));

    // garment on bottom: rows [2,4)
    double bot = 0.0;
    for (int c = 0; c < 3; ++c)
        for (int y = 2; y < 4; ++y)
            for (int x = 0; x < 5; ++x) {
                const double d = pred.at(c, y, x) - eps.at(c, y, x);
                bot += d * d;
            }
    bot /= 3 * 2 * 5;
    REQUIRE(region_loss(pred, eps, LossRegion::GarmentSlot, false) ==
            Catch::Approx(bot).margin(1e-12));
}

TEST_CASE("region loss gradient is the analytic MSE derivative, zero off-slot") {
    Rng rng(2);
    auto pred = Tensor<double>::randn({3, 4, 5}, rng);
    const auto eps = Tensor<double>::randn({3, 4, 5}, rng);

    Tensor<double> dpred;
    region_loss(pred, eps, LossRegion::GarmentSlot, true, &dpred, 2.0);
    const double n = 3 * 2 * 5;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 5; ++x) {
                const double want =
                    y < 2 ? 2.0 * (pred.at(c, y, x) - eps.at(c, y, x)) / (n * 2.0) : 0.0;
                REQUIRE(dpred.at(c, y, x) == Catch::Approx(want).margin(1e-12));
            }

    // numeric check against the scalar loss for a couple of entries
    const double h = 1e-6;
    Tensor<double> d2;
    region_loss(pred, eps, LossRegion::GarmentSlot, true, &d2);
    for (const auto& [c, y, x] : std::vector<std::tuple<int, int, int>>{{0, 0, 0}, {2, 1, 4}}) {
        const double orig = pred.at(c, y, x);
        pred.at(c, y, x) = orig + h;
        const double lp = region_loss(pred, eps, LossRegion::GarmentSlot, true);
        pred.at(c, y, x) = orig - h;
        const double lm = region_loss(pred, eps, LossRegion::GarmentSlot, true);
        pred.at(c, y, x) = orig;
        REQUIRE(d2.at(c, y, x) == Catch::Approx((lp - lm) / (2 * h)).margin(1e-6));
    }
}

TEST_CASE("eval loss is stable across calls and keyed by pair id") {
    const auto codec = small_codec();
    UNet<float> net(tiny_cfg(2 * 12 + 1, 12));
    net.init_params(3);
    auto sched = make_linear_schedule(50, 1e-4, 0.02);

    TrainConfig tc;
    tc.epochs = 1;
    tc.seed = 5;
    Trainer<float> trainer(net, codec, sched, {}, tc);

    auto pairs = toy_pairs(2, 8, 4, 11);
    const double a1 = trainer.eval_loss(pairs[0]);
    const double a2 = trainer.eval_loss(pairs[0]);
    REQUIRE(a1 == a2);  // fixed noise per id
    REQUIRE(trainer.eval_loss(pairs[1]) != a1);
}

TEST_CASE("identical seeds give identical training, different seeds diverge") {
    const auto codec = small_codec();
    auto sched = make_linear_schedule(50, 1e-4, 0.02);
    auto pairs = toy_pairs(6, 8, 4, 21);

    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 2;
    tc.adamw.lr = 1e-3;
    tc.val_fraction = 0.34;
    tc.seed = 9;

    auto run = [&](uint64_t seed) {
        UNet<float> net(tiny_cfg(2 * 12 + 1, 12));
        net.init_params(1);
        TrainConfig c = tc;
        c.seed = seed;
        Trainer<float> tr(net, codec, sched, {}, c);
        auto logs = tr.fit(pairs);
        std::vector<float> flat;
        for (const auto& e : net.params().entries())
            flat.insert(flat.end(), e.value.data.begin(), e.value.data.end());
        return std::make_pair(logs, flat);
    };

    const auto [l1, w1] = run(9);
    const auto [l2, w2] = run(9);
    const auto [l3, w3] = run(10);
    REQUIRE(w1 == w2);
    REQUIRE(l1.size() == l2.size());
    for (size_t i = 0; i < l1.size(); ++i) {
        REQUIRE(l1[i].train_loss == l2[i].train_loss);
        REQUIRE(l1[i].val_loss == l2[i].val_loss);
        REQUIRE(l1[i].has_val);
    }
    REQUIRE(w1 != w3);
}

TEST_CASE("a tiny model overfits two pairs") {
    const auto codec = small_codec();
    // wide beta range so the 20-step schedule actually spans noisy regimes
    auto sched = make_linear_schedule(20, 1e-4, 0.2);
    auto pairs = toy_pairs(2, 8, 4, 31);

    UNet<float> net(tiny_cfg(2 * 12 + 1, 12));
    net.init_params(2);

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    tc.adamw.lr = 5e-3;
    tc.adamw.weight_decay = 0.0;
    tc.val_fraction = 0.0;
    tc.seed = 4;
    Trainer<float> trainer(net, codec, sched, {}, tc);

    std::vector<const TryOffPair<float>*> batch = {&pairs[0], &pairs[1]};
    std::vector<double> losses;
    for (int i = 0; i < 2000; ++i) losses.push_back(trainer.train_batch(batch));
    REQUIRE(trainer.step() == 2000);

    // average windows, since each step draws a fresh timestep
    const double head = std::accumulate(losses.begin(), losses.begin() + 20, 0.0) / 20;
    const double tail = std::accumulate(losses.end() - 20, losses.end(), 0.0) / 20;
    REQUIRE(tail < 0.5 * head);
}

TEST_CASE("warmup scales the first step exactly like a reduced rate") {
    const auto codec = small_codec();
    auto sched = make_linear_schedule(20, 1e-4, 0.02);
    auto pairs = toy_pairs(2, 8, 4, 61);
    std::vector<const TryOffPair<float>*> batch = {&pairs[0], &pairs[1]};

    const int k = 10;
    TrainConfig warm;
    warm.epochs = 1;
    warm.batch_size = 2;
    warm.adamw.lr = 2e-3;
    warm.warmup_steps = k;
    warm.val_fraction = 0.0;
    warm.seed = 5;

    TrainConfig plain = warm;
    plain.warmup_steps = 0;
    plain.adamw.lr = warm.adamw.lr * 1.0 / k;  // same expression the ramp evaluates

    UNet<float> net_w(tiny_cfg(2 * 12 + 1, 12)), net_p(tiny_cfg(2 * 12 + 1, 12));
    net_w.init_params(3);
    net_p.init_params(3);
    Trainer<float> tr_w(net_w, codec, sched, {}, warm);
    Trainer<float> tr_p(net_p, codec, sched, {}, plain);
    tr_w.train_batch(batch);
    tr_p.train_batch(batch);

    for (size_t i = 0; i < net_w.params().size(); ++i) {
        const auto& a = net_w.params().entry(static_cast<int>(i)).value;
        const auto& b = net_p.params().entry(static_cast<int>(i)).value;
        REQUIRE(a.data == b.data);
    }

    TrainConfig tcv;
    tcv.warmup_steps = -1;
    REQUIRE_THROWS_AS(tcv.validate(), ConfigError);
}

TEST_CASE("frozen subset stays frozen through real training steps") {
    const auto codec = small_codec();
    auto sched = make_linear_schedule(20, 1e-4, 0.02);
    auto pairs = toy_pairs(2, 8, 4, 41);

    UNet<float> net(tiny_cfg(2 * 12 + 1, 12));
    net.init_params(5);

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    tc.adamw.lr = 1e-3;
    tc.selector = ParamSelector::AttentionLayers;
    tc.val_fraction = 0.0;
    tc.seed = 6;
    Trainer<float> trainer(net, codec, sched, {}, tc);

    std::vector<std::vector<float>> before;
    for (const auto& e : net.params().entries()) before.push_back(e.value.data);

    std::vector<const TryOffPair<float>*> batch = {&pairs[0], &pairs[1]};
    for (int i = 0; i < 5; ++i) trainer.train_batch(batch);

    bool attn_moved = false;
    for (size_t i = 0; i < net.params().size(); ++i) {
        const auto& e = net.params().entry(static_cast<int>(i));
        const bool sel = selector_matches(ParamSelector::AttentionLayers, e.name);
        if (sel)
            attn_moved = attn_moved || e.value.data != before[i];
        else
            REQUIRE(e.value.data == before[i]);
    }
    REQUIRE(attn_moved);
}

TEST_CASE("save and resume reproduce uninterrupted training exactly") {
    const auto codec = small_codec();
    auto sched = make_linear_schedule(20, 1e-4, 0.02);
    auto pairs = toy_pairs(4, 8, 4, 51);

    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 2;
    tc.adamw.lr = 1e-3;
    tc.warmup_steps = 6;  // ramp crosses the resume point below
    tc.val_fraction = 0.0;
    tc.seed = 12;

    // one uninterrupted run
    UNet<float> net_a(tiny_cfg(2 * 12 + 1, 12));
    net_a.init_params(8);
    Trainer<float> tr_a(net_a, codec, sched, {}, tc);
    tr_a.fit(pairs);

    // same run but checkpointed after epoch 2 and resumed in a fresh process state
    const auto ckpt = (fs::temp_directory_path() / "trainer_resume_test.ckpt").string();
    {
        UNet<float> net_b(tiny_cfg(2 * 12 + 1, 12));
        net_b.init_params(8);
        TrainConfig half = tc;
        half.epochs = 2;
        Trainer<float> tr_b(net_b, codec, sched, {}, half);
        tr_b.fit(pairs);
        tr_b.save(ckpt);
    }
    auto loaded = load_checkpoint<float>(ckpt);
    REQUIRE(loaded.meta.epoch == 2);
    REQUIRE(loaded.has_moments);
    Trainer<float> tr_c(*loaded.net, codec,
                        make_linear_schedule(loaded.meta.timesteps, loaded.meta.beta_start,
                                             loaded.meta.beta_end),
                        loaded.meta.canvas, tc);
    tr_c.optimizer().moments_m() = loaded.m;
    tr_c.optimizer().moments_v() = loaded.v;
    tr_c.optimizer().restore_step(loaded.opt_step);
    tr_c.restore_progress(loaded.meta.step, loaded.meta.epoch, loaded.meta.rng);
    tr_c.fit(pairs);

    for (size_t i = 0; i < net_a.params().size(); ++i) {
        const auto& a = net_a.params().entry(static_cast<int>(i)).value;
        const auto& b = loaded.net->params().entry(static_cast<int>(i)).value;
        REQUIRE(a.data == b.data);
    }
    fs::remove(ckpt);
}

TEST_CASE("trainer config validation") {
    TrainConfig tc;
    tc.epochs = 0;
    REQUIRE_THROWS_AS(tc.validate(), ConfigError);
    tc = {};
    tc.val_fraction = 1.0;
    REQUIRE_THROWS_AS(tc.validate(), ConfigError);
    tc = {};
    tc.batch_size = 0;
    REQUIRE_THROWS_AS(tc.validate(), ConfigError);
}
