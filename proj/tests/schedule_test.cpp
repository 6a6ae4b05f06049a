#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tryoff/rng.hpp"
#include "tryoff/schedule.hpp"

using namespace tryoff;

TEST_CASE("linear schedule matches a log-space cumulative product oracle") {
    const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
    REQUIRE(s.beta.front() == Catch::Approx(1e-4));
    REQUIRE(s.beta.back() == Catch::Approx(0.02));

    double log_acc = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const double b = 1e-4 + (0.02 - 1e-4) * t / 999.0;
        REQUIRE(s.beta[static_cast<size_t>(t)] == Catch::Approx(b).margin(1e-15));
        log_acc += std::log1p(-b);
        REQUIRE(s.alpha_bar[static_cast<size_t>(t)] ==
                Catch::Approx(std::exp(log_acc)).epsilon(1e-10));
    }

    // strictly decreasing, endpoints sane
    for (int t = 1; t < 1000; ++t)
        REQUIRE(s.alpha_bar[static_cast<size_t>(t)] < s.alpha_bar[static_cast<size_t>(t - 1)]);
    REQUIRE(s.alpha_bar_at(-1) == 1.0);
    REQUIRE(s.alpha_bar.back() > 0.0);
    REQUIRE(s.alpha_bar.back() < 0.01);
}

TEST_CASE("schedule rejects bad endpoints and out-of-range timesteps") {
    REQUIRE_THROWS_AS(make_linear_schedule(0, 1e-4, 0.02), ConfigError);
    REQUIRE_THROWS_AS(make_linear_schedule(10, 0.0, 0.02), ConfigError);
    REQUIRE_THROWS_AS(make_linear_schedule(10, 0.03, 0.02), ConfigError);
    REQUIRE_THROWS_AS(make_linear_schedule(10, 1e-4, 1.0), ConfigError);
    const NoiseSchedule s = make_linear_schedule(10, 1e-4, 0.02);
    REQUIRE_THROWS_AS(s.alpha_bar_at(10), ConfigError);
    REQUIRE_THROWS_AS(s.alpha_bar_at(-2), ConfigError);
}

TEST_CASE("add_noise follows the scalar closed form") {
    const NoiseSchedule s = make_linear_schedule(100, 1e-3, 0.05);
    Rng rng(4);
    const auto z0 = Tensor<double>::randn({2, 3, 3}, rng);
    const auto eps = Tensor<double>::randn({2, 3, 3}, rng);
    const int t = 57;
    const auto zt = add_noise(z0, eps, t, s);
    const double ab = s.alpha_bar_at(t);
    for (size_t i = 0; i < z0.data.size(); ++i)
        REQUIRE(zt.data[i] ==
                Catch::Approx(std::sqrt(ab) * z0.data[i] + std::sqrt(1 - ab) * eps.data[i]));

    Tensor<double> small({2, 2});
    REQUIRE_THROWS_AS(add_noise(z0, small, t, s), ShapeError);
}

TEST_CASE("deterministic ddim step matches its algebra") {
    const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
    Rng rng(9);
    const auto z0 = Tensor<double>::randn({4, 2, 2}, rng);
    const auto eps = Tensor<double>::randn({4, 2, 2}, rng);

    const int t = 600, tp = 480;
    const auto zt = add_noise(z0, eps, t, s);
    const auto zp = ddim_step(zt, eps, t, tp, s);

    // with the exact noise, a step lands on add_noise(z0, eps, t_prev)
    const auto want = add_noise(z0, eps, tp, s);
    REQUIRE(max_abs_diff(zp, want) < 1e-12);

    // final step to the clean endpoint recovers z0
    const auto zc = ddim_step(zt, eps, t, -1, s);
    REQUIRE(max_abs_diff(zc, z0) < 1e-12);
}

TEST_CASE("stochastic ddim step adds sigma-scaled noise") {
    const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
    Rng rng(2);
    const auto zt = Tensor<double>::randn({3, 2, 2}, rng);
    const auto eps = Tensor<double>::randn({3, 2, 2}, rng);
    const auto xi = Tensor<double>::randn({3, 2, 2}, rng);
    const int t = 500, tp = 400;

    const auto det = ddim_step(zt, eps, t, tp, s);
    const auto sto = ddim_step(zt, eps, t, tp, s, 1.0, &xi);

    const double ab_t = s.alpha_bar_at(t), ab_p = s.alpha_bar_at(tp);
    const double sigma = std::sqrt((1 - ab_p) / (1 - ab_t)) * std::sqrt(1 - ab_t / ab_p);
    const double dir_det = std::sqrt(1 - ab_p);
    const double dir_sto = std::sqrt(1 - ab_p - sigma * sigma);
    for (size_t i = 0; i < zt.data.size(); ++i) {
        const double want = det.data[i] + (dir_sto - dir_det) * eps.data[i] + sigma * xi.data[i];
        REQUIRE(sto.data[i] == Catch::Approx(want).margin(1e-12));
    }

    REQUIRE_THROWS_AS(ddim_step(zt, eps, t, tp, s, 1.0, static_cast<const Tensor<double>*>(nullptr)),
                      ConfigError);
    REQUIRE_THROWS_AS(ddim_step(zt, eps, t, t, s), ConfigError);
    REQUIRE_THROWS_AS(ddim_step(zt, eps, t, -2, s), ConfigError);
}

TEST_CASE("ddim timestep ladder is descending, unique, and spans the range") {
    const NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
    for (int steps : {1, 2, 7, 50, 1000}) {
        const auto ts = ddim_timesteps(s, steps);
        REQUIRE(!ts.empty());
        REQUIRE(ts.size() <= static_cast<size_t>(steps));
        REQUIRE(ts.front() == 999);
        if (steps > 1) REQUIRE(ts.back() == 0);
        for (size_t i = 1; i < ts.size(); ++i) REQUIRE(ts[i] < ts[i - 1]);
    }
    // more requested steps than timesteps still yields unique entries
    const NoiseSchedule tiny = make_linear_schedule(10, 1e-4, 0.02);
    const auto ts = ddim_timesteps(tiny, 50);
    REQUIRE(ts.size() == 10);
}

TEST_CASE("ldm_loss is the elementwise mse") {
    Tensor<double> a({2, 2}), b({2, 2});
    a.data = {1, 2, 3, 4};
    b.data = {1, 1, 1, 1};
    REQUIRE(ldm_loss(a, b) == Catch::Approx((0.0 + 1 + 4 + 9) / 4.0));
}
