// AdamW step arithmetic, decoupled decay, freezing, gradient clipping
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tryoff/optimizer.hpp"
#include "tryoff/unet.hpp"

using namespace tryoff;

namespace {

// two tiny tensors, handy to flag independently
struct Store2 {
    ParamStore<double> ps;
    int a, b;
    Store2() {
        a = ps.add("a.weight", {2});
        b = ps.add("b.tblock.x.weight", {3});
        for (auto& e : ps.entries()) e.trainable = true;
    }
};

}  // namespace

TEST_CASE("single step matches the closed-form update") {
    Store2 s;
    auto& ea = s.ps.entry(s.a);
    ea.value.data = {1.0, -2.0};
    ea.grad.data = {0.3, -0.1};
    auto& eb = s.ps.entry(s.b);
    eb.value.data = {0.5, 0.0, -1.5};
    eb.grad.data = {0.0, 1.0, 2.0};

    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    cfg.eps = 1e-8;
    cfg.weight_decay = 0.1;
    AdamW<double> opt(s.ps, cfg);
    opt.step();
    REQUIRE(opt.step_count() == 1);

    // after one step: mhat = g, vhat = g^2, so the Adam term is g/(|g|+eps)
    auto want = [&](double p, double g) {
        const double mhat = (1 - cfg.beta1) * g / (1 - cfg.beta1);
        const double vhat = (1 - cfg.beta2) * g * g / (1 - cfg.beta2);
        return p - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p);
    };
    REQUIRE(ea.value.data[0] == Catch::Approx(want(1.0, 0.3)).margin(1e-15));
    REQUIRE(ea.value.data[1] == Catch::Approx(want(-2.0, -0.1)).margin(1e-15));
    REQUIRE(eb.value.data[1] == Catch::Approx(want(0.0, 1.0)).margin(1e-15));
    REQUIRE(eb.value.data[2] == Catch::Approx(want(-1.5, 2.0)).margin(1e-15));

    // zero grad, nonzero weight: only the decoupled decay moves it
    REQUIRE(eb.value.data[0] == Catch::Approx(0.5 - cfg.lr * cfg.weight_decay * 0.5).margin(1e-15));
}

TEST_CASE("two steps apply bias correction") {
    ParamStore<double> ps;
    const int i = ps.add("w", {1});
    ps.entry(i).trainable = true;
    ps.entry(i).value.data = {0.0};

    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    AdamW<double> opt(ps, cfg);

    // constant gradient 1.0; track the reference recurrence by hand
    double m = 0, v = 0, p = 0;
    for (int t = 1; t <= 2; ++t) {
        ps.entry(i).grad.data = {1.0};
        opt.step();
        m = cfg.beta1 * m + (1 - cfg.beta1) * 1.0;
        v = cfg.beta2 * v + (1 - cfg.beta2) * 1.0;
        const double mhat = m / (1 - std::pow(cfg.beta1, t));
        const double vhat = v / (1 - std::pow(cfg.beta2, t));
        p -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        REQUIRE(ps.entry(i).value.data[0] == Catch::Approx(p).margin(1e-15));
    }
}

TEST_CASE("frozen parameters and their moments never move") {
    Store2 s;
    s.ps.set_trainable(ParamSelector::TransformerBlocks);  // only b.tblock.x.weight
    auto& ea = s.ps.entry(s.a);
    auto& eb = s.ps.entry(s.b);
    ea.value.data = {1.0, 2.0};
    ea.grad.data = {5.0, 5.0};
    eb.value.data = {1.0, 1.0, 1.0};
    eb.grad.data = {1.0, 1.0, 1.0};

    AdamWConfig cfg;
    AdamW<double> opt(s.ps, cfg);
    opt.step();

    REQUIRE(ea.value.data[0] == 1.0);
    REQUIRE(ea.value.data[1] == 2.0);
    REQUIRE(eb.value.data[0] != 1.0);
    for (double v : opt.moments_m()[static_cast<size_t>(s.a)].data) REQUIRE(v == 0.0);
    for (double v : opt.moments_v()[static_cast<size_t>(s.a)].data) REQUIRE(v == 0.0);
    for (double v : opt.moments_m()[static_cast<size_t>(s.b)].data) REQUIRE(v != 0.0);
}

TEST_CASE("moment buffers exist for every parameter regardless of selector") {
    Store2 s;
    s.ps.set_trainable(ParamSelector::TransformerBlocks);
    AdamW<double> opt(s.ps, {});
    REQUIRE(opt.moments_m().size() == 2);
    REQUIRE(opt.moments_v().size() == 2);
    REQUIRE(opt.moments_m()[0].shape == std::vector<int>{2});
    REQUIRE(opt.moments_m()[1].shape == std::vector<int>{3});
}

TEST_CASE("gradient clipping rescales to the target norm and skips frozen grads") {
    Store2 s;
    auto& ea = s.ps.entry(s.a);
    auto& eb = s.ps.entry(s.b);
    ea.grad.data = {3.0, 0.0};
    eb.grad.data = {0.0, 4.0, 0.0};  // global norm 5

    REQUIRE(grad_global_norm(s.ps) == Catch::Approx(5.0).margin(1e-12));
    const double pre = clip_grad_norm(s.ps, 1.0);
    REQUIRE(pre == Catch::Approx(5.0).margin(1e-12));
    REQUIRE(grad_global_norm(s.ps) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(ea.grad.data[0] == Catch::Approx(0.6).margin(1e-12));
    REQUIRE(eb.grad.data[1] == Catch::Approx(0.8).margin(1e-12));

    // already below the cap: untouched
    const double pre2 = clip_grad_norm(s.ps, 10.0);
    REQUIRE(pre2 == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(ea.grad.data[0] == Catch::Approx(0.6).margin(1e-12));

    // frozen grads neither count toward the norm nor get scaled
    s.ps.set_trainable(ParamSelector::TransformerBlocks);
    ea.grad.data = {100.0, 100.0};
    eb.grad.data = {0.0, 2.0, 0.0};
    REQUIRE(grad_global_norm(s.ps) == Catch::Approx(2.0).margin(1e-12));
    clip_grad_norm(s.ps, 1.0);
    REQUIRE(ea.grad.data[0] == 100.0);
    REQUIRE(eb.grad.data[1] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("set_lr swaps the rate without touching other settings") {
    Store2 s1, s2;
    for (auto* s : {&s1, &s2}) {
        s->ps.entry(s->a).value.data = {1.0, -2.0};
        s->ps.entry(s->a).grad.data = {0.3, -0.1};
        s->ps.entry(s->b).value.data = {0.5, 0.0, -1.5};
        s->ps.entry(s->b).grad.data = {0.0, 1.0, 2.0};
    }
    AdamWConfig base;
    base.lr = 0.01;
    AdamWConfig halved = base;
    halved.lr = 0.005;

    AdamW<double> o1(s1.ps, base);
    o1.set_lr(0.005);
    AdamW<double> o2(s2.ps, halved);
    o1.step();
    o2.step();
    REQUIRE(o1.config().lr == 0.005);
    for (int idx : {s1.a, s1.b})
        REQUIRE(s1.ps.entry(idx).value.data == s2.ps.entry(idx).value.data);

    REQUIRE_THROWS_AS(o1.set_lr(0.0), ConfigError);
    REQUIRE_THROWS_AS(o1.set_lr(-1e-3), ConfigError);
}

TEST_CASE("restore_step resumes the bias-correction clock") {
    ParamStore<double> ps;
    const int i = ps.add("w", {1});
    ps.entry(i).trainable = true;

    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW<double> fresh(ps, cfg);
    fresh.restore_step(100);
    REQUIRE(fresh.step_count() == 100);
    ps.entry(i).grad.data = {1.0};
    fresh.step();
    REQUIRE(fresh.step_count() == 101);
}

TEST_CASE("config validation") {
    AdamWConfig c;
    c.lr = 0.0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.beta1 = 1.0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.weight_decay = -0.1;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = {};
    REQUIRE_NOTHROW(c.validate());
}
