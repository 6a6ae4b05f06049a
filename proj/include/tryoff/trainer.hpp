#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "tryoff/checkpoint.hpp"
#include "tryoff/codec.hpp"
#include "tryoff/common.hpp"
#include "tryoff/conditioning.hpp"
#include "tryoff/optimizer.hpp"
#include "tryoff/rng.hpp"
#include "tryoff/schedule.hpp"
#include "tryoff/unet.hpp"

namespace tryoff {

enum class LossRegion { FullCanvas, GarmentSlot };

inline std::string to_string(LossRegion r) {
    return r == LossRegion::FullCanvas ? "full_canvas" : "garment_slot";
}

inline LossRegion loss_region_from_string(const std::string& s) {
    if (s == "full_canvas") return LossRegion::FullCanvas;
    if (s == "garment_slot") return LossRegion::GarmentSlot;
    throw ConfigError("unknown loss_region '" + s + "' (expected full_canvas|garment_slot)");
}

struct TrainConfig {
    int epochs = 20;
    int batch_size = 4;
    AdamWConfig adamw{};  // lr 1e-5 default
    int warmup_steps = 0;    // linear lr ramp from 0 over this many steps
    double clip_norm = 1.0;  // <= 0 disables clipping
    ParamSelector selector = ParamSelector::Full;
    LossRegion loss_region = LossRegion::FullCanvas;
    double val_fraction = 0.1;
    uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be >= 0");
        if (!(val_fraction >= 0.0 && val_fraction < 1.0))
            throw ConfigError("train.val_fraction must be in [0,1)");
        adamw.validate();
    }
};

// noise-prediction MSE restricted to a slot region; writes dL/dpred (already
// including the 1/grad_scale batch factor) when dpred is given
template <typename T>
double region_loss(const Tensor<T>& pred, const Tensor<T>& eps, LossRegion region,
                   bool garment_on_top, Tensor<T>* dpred = nullptr, double grad_scale = 1.0) {
    require_shape(pred, eps.shape, "region_loss");
    const int c = pred.dim(0), h2 = pred.dim(1), w = pred.dim(2);
    const int h = h2 / 2;
    int y0 = 0, y1 = h2;
    if (region == LossRegion::GarmentSlot) {
        y0 = garment_on_top ? 0 : h;
        y1 = garment_on_top ? h : h2;
    }
    const int64_t n = static_cast<int64_t>(c) * (y1 - y0) * w;
    if (dpred) *dpred = Tensor<T>(pred.shape);
    double acc = 0.0;
    for (int ci = 0; ci < c; ++ci)
        for (int y = y0; y < y1; ++y)
            for (int x = 0; x < w; ++x) {
                const double d = static_cast<double>(pred.at(ci, y, x)) - eps.at(ci, y, x);
                acc += d * d;
                if (dpred)
                    dpred->at(ci, y, x) =
                        static_cast<T>(2.0 * d / (static_cast<double>(n) * grad_scale));
            }
    return acc / static_cast<double>(n);
}

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;  // NaN when there is no validation split
    bool has_val = false;
};

// deterministic validation split: shuffle of [0,n) keyed by (seed, "split"),
// first n_val indices go to validation
inline std::pair<std::vector<int>, std::vector<int>> split_indices(int n, double val_fraction,
                                                                   uint64_t seed) {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    Rng rng(derive_seed(seed, "split"));
    for (int i = n - 1; i > 0; --i)
        std::swap(idx[static_cast<size_t>(i)], idx[rng.uniform_int(i + 1)]);
    int n_val = static_cast<int>(std::llround(val_fraction * n));
    n_val = std::min(n_val, n - 1);  // keep at least one training sample
    n_val = std::max(n_val, 0);
    std::vector<int> val(idx.begin(), idx.begin() + n_val);
    std::vector<int> train(idx.begin() + n_val, idx.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    return {train, val};
}

template <typename T>
class Trainer {
  public:
    Trainer(UNet<T>& net, const Codec<T>& codec, NoiseSchedule sched, CanvasOptions copts,
            TrainConfig cfg)
        : net_(net),
          codec_(codec),
          sched_(std::move(sched)),
          copts_(copts),
          cfg_(cfg),
          opt_(net.params(), cfg.adamw),
          rng_(derive_seed(cfg.seed, "train")) {
        cfg_.validate();
        net_.params().set_trainable(cfg_.selector);
    }

    const TrainConfig& config() const { return cfg_; }
    AdamW<T>& optimizer() { return opt_; }
    Rng& rng() { return rng_; }
    int64_t step() const { return step_; }
    int epoch() const { return epoch_; }
    void restore_progress(int64_t step, int epoch, const Rng::State& rs) {
        step_ = step;
        epoch_ = epoch;
        rng_.restore(rs);
    }

    // single optimization step; returns mean per-sample loss over the batch
    double train_batch(const std::vector<const TryOffPair<T>*>& batch) {
        if (batch.empty()) throw ConfigError("empty batch");
        net_.params().zero_grads();
        double loss_sum = 0.0;
        for (const auto* pair : batch) {
            const int t = rng_.uniform_int(sched_.timesteps);
            Tensor<T> z0 = build_latent_target(codec_, *pair, copts_);
            Tensor<T> eps = Tensor<T>::randn(z0.shape, rng_);
            Tensor<T> zt = add_noise(z0, eps, t, sched_);
            Conditioning<T> cond = build_conditioning(codec_, *pair, copts_);
            Tensor<T> canvas = assemble_canvas(zt, cond);
            UNetCaches<T> caches;
            Tensor<T> pred = net_.forward(canvas, t, &caches);
            Tensor<T> dpred;
            loss_sum += region_loss(pred, eps, cfg_.loss_region, copts_.garment_on_top, &dpred,
                                    static_cast<double>(batch.size()));
            net_.backward(dpred, caches);
        }
        if (cfg_.clip_norm > 0) clip_grad_norm(net_.params(), cfg_.clip_norm);
        if (cfg_.warmup_steps > 0 && step_ < cfg_.warmup_steps)
            opt_.set_lr(cfg_.adamw.lr * static_cast<double>(step_ + 1) / cfg_.warmup_steps);
        else
            opt_.set_lr(cfg_.adamw.lr);
        opt_.step();
        ++step_;
        return loss_sum / static_cast<double>(batch.size());
    }

    // loss on one sample with fixed per-id noise, so epochs are comparable
    double eval_loss(const TryOffPair<T>& pair) const {
        Rng r(derive_seed(cfg_.seed, "val:" + pair.id));
        const int t = r.uniform_int(sched_.timesteps);
        Tensor<T> z0 = build_latent_target(codec_, pair, copts_);
        Tensor<T> eps = Tensor<T>::randn(z0.shape, r);
        Tensor<T> zt = add_noise(z0, eps, t, sched_);
        Conditioning<T> cond = build_conditioning(codec_, pair, copts_);
        Tensor<T> canvas = assemble_canvas(zt, cond);
        Tensor<T> pred = net_.forward(canvas, t);
        return region_loss<T>(pred, eps, cfg_.loss_region, copts_.garment_on_top);
    }

    // epoch loop from the trainer's current epoch up to cfg.epochs
    std::vector<EpochLog> fit(const std::vector<TryOffPair<T>>& data,
                                 const std::function<void(const EpochLog&)>& on_epoch = {}) {
        if (data.empty()) throw ConfigError("training dataset is empty");
        auto [train_idx, val_idx] =
            split_indices(static_cast<int>(data.size()), cfg_.val_fraction, cfg_.seed);
        std::vector<EpochLog> logs;
        for (; epoch_ < cfg_.epochs; ++epoch_) {
            // in-place shuffle of the training order
            std::vector<int> order = train_idx;
            for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
                std::swap(order[static_cast<size_t>(i)], order[rng_.uniform_int(i + 1)]);

            double loss_sum = 0.0;
            for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg_.batch_size)) {
                std::vector<const TryOffPair<T>*> batch;
                for (size_t k = off; k < std::min(order.size(), off + cfg_.batch_size); ++k)
                    batch.push_back(&data[static_cast<size_t>(order[k])]);
                loss_sum += train_batch(batch) * static_cast<double>(batch.size());
            }

            EpochLog log;
            log.epoch = epoch_;
            log.train_loss = loss_sum / static_cast<double>(order.size());
            log.has_val = !val_idx.empty();
            if (log.has_val) {
                double v = 0.0;
                for (int i : val_idx) v += eval_loss(data[static_cast<size_t>(i)]);
                log.val_loss = v / static_cast<double>(val_idx.size());
            } else {
                log.val_loss = std::numeric_limits<double>::quiet_NaN();
            }
            logs.push_back(log);
            if (on_epoch) on_epoch(log);
        }
        return logs;
    }

    CheckpointMeta make_meta() const {
        CheckpointMeta meta;
        meta.unet = net_.config();
        meta.codec = codec_.config();
        meta.timesteps = sched_.timesteps;
        meta.beta_start = sched_.beta_start;
        meta.beta_end = sched_.beta_end;
        meta.canvas = copts_;
        meta.selector = cfg_.selector;
        meta.step = step_;
        meta.epoch = epoch_;
        meta.rng = rng_.save();
        return meta;
    }

    void save(const std::string& path) const {
        save_checkpoint(path, make_meta(), net_.params(), &opt_);
    }

  private:
    UNet<T>& net_;
    const Codec<T>& codec_;
    NoiseSchedule sched_;
    CanvasOptions copts_;
    TrainConfig cfg_;
    AdamW<T> opt_;
    Rng rng_;
    int64_t step_ = 0;
    int epoch_ = 0;
};

// ---- finite-difference gradient check ----------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    int probes = 0;
};

// central differences against the analytic backward, probing n_probes scalars
// sampled uniformly across ALL parameters; loss is noise-prediction MSE on a
// fixed input
template <typename T>
GradCheckResult grad_check(UNet<T>& net, const Tensor<T>& x, int t, const Tensor<T>& target,
                           int n_probes = 100, uint64_t seed = 0, double fd_step = 1e-4) {
    auto& store = net.params();
    store.set_trainable(ParamSelector::Full);
    store.zero_grads();
    UNetCaches<T> caches;
    Tensor<T> pred = net.forward(x, t, &caches);
    Tensor<T> dpred;
    region_loss(pred, target, LossRegion::FullCanvas, true, &dpred);
    net.backward(dpred, caches);

    auto loss_at = [&]() {
        Tensor<T> p = net.forward(x, t);
        return region_loss<T>(p, target, LossRegion::FullCanvas, true);
    };

    // tensor offsets into the flat scalar index space
    std::vector<int64_t> offset(store.size() + 1, 0);
    for (size_t pi = 0; pi < store.size(); ++pi)
        offset[pi + 1] = offset[pi] + store.entry(static_cast<int>(pi)).value.numel();
    const int64_t total = offset[store.size()];

    GradCheckResult res;
    Rng rng(derive_seed(seed, "gradcheck"));
    for (int k = 0; k < n_probes; ++k) {
        const int64_t flat = static_cast<int64_t>(rng.uniform() * static_cast<double>(total));
        const size_t pi = static_cast<size_t>(
            std::upper_bound(offset.begin(), offset.end(), std::min(flat, total - 1)) -
            offset.begin() - 1);
        auto& e = store.entry(static_cast<int>(pi));
        const size_t j = static_cast<size_t>(std::min(flat, total - 1) - offset[pi]);

        const T orig = e.value.data[j];
        e.value.data[j] = orig + static_cast<T>(fd_step);
        const double lp = loss_at();
        e.value.data[j] = orig - static_cast<T>(fd_step);
        const double lm = loss_at();
        e.value.data[j] = orig;
        const double fd = (lp - lm) / (2.0 * fd_step);
        const double an = e.grad.data[j];
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
        ++res.probes;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_param = e.name;
        }
    }
    return res;
}

}  // namespace tryoff
