// end-to-end smoke: synthetic pairs -> a few training steps -> sampling ->
// metrics, all at miniature scale; exercises every stage together
#include <catch2/catch_amalgamated.hpp>

#include "tryoff/config.hpp"
#include "tryoff/metrics.hpp"
#include "tryoff/sampler.hpp"
#include "tryoff/synth.hpp"
#include "tryoff/trainer.hpp"

using namespace tryoff;

TEST_CASE("miniature pipeline runs end to end") {
    RunConfig cfg;
    cfg.unet.base_channels = 8;
    cfg.unet.channel_mult = {1, 2};
    cfg.unet.attention_levels = {1};
    cfg.unet.num_heads = 2;
    cfg.unet.norm_groups = 4;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 2;
    cfg.train.val_fraction = 0.25;
    cfg.sample.steps = 5;
    cfg.validate();

    const auto data = generate_pairs<float>(8, 11, 32, 32);
    REQUIRE(data.size() == 8);

    UNet<float> net(cfg.unet);
    net.init_params(cfg.train.seed);
    Codec<float> codec(cfg.codec);
    const NoiseSchedule sched = cfg.make_schedule();

    Trainer<float> trainer(net, codec, sched, cfg.canvas, cfg.train);
    const auto logs = trainer.fit(data);
    REQUIRE(logs.size() == 2);
    for (const auto& log : logs) {
        REQUIRE(std::isfinite(log.train_loss));
        REQUIRE(log.has_val);
        REQUIRE(std::isfinite(log.val_loss));
    }

    std::vector<Tensor<float>> gen, truth;
    for (size_t i = 0; i < 3; ++i) {
        gen.push_back(generate_garment(net, codec, sched, data[i], cfg.canvas, cfg.sample.steps,
                                       cfg.sample.eta, 1));
        truth.push_back(data[i].garment);
    }
    for (const auto& g : gen) {
        REQUIRE(g.shape == truth[0].shape);
        for (float v : g.data) {
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
    }

    FeatureExtractor fx;
    fx.dim = 8;
    const MetricReport rep = compute_report(gen, truth, {}, fx, 1);
    REQUIRE(rep.n_images == 3);
    REQUIRE(std::isfinite(rep.ssim));
    REQUIRE(std::isfinite(rep.fid));
    REQUIRE(std::isfinite(rep.kid));
    REQUIRE(rep.fid >= 0.0);
}
