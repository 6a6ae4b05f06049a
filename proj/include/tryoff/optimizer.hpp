#pragma once

#include <cmath>
#include <vector>

#include "tryoff/common.hpp"
#include "tryoff/tensor.hpp"
#include "tryoff/unet.hpp"

namespace tryoff {

struct AdamWConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("adamw.lr must be > 0");
        if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("adamw.beta1 must be in [0,1)");
        if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("adamw.beta2 must be in [0,1)");
        if (!(eps > 0)) throw ConfigError("adamw.eps must be > 0");
        if (weight_decay < 0) throw ConfigError("adamw.weight_decay must be >= 0");
    }
};

// global L2 norm of the gradients of trainable parameters
template <typename T>
double grad_global_norm(const ParamStore<T>& store) {
    double sq = 0.0;
    for (const auto& e : store.entries()) {
        if (!e.trainable) continue;
        for (T g : e.grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(sq);
}

// scales trainable grads so their global norm is at most max_norm; returns the
// pre-clip norm
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
    const double norm = grad_global_norm(store);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (auto& e : store.entries()) {
            if (!e.trainable) continue;
            for (auto& g : e.grad.data) g = static_cast<T>(g * scale);
        }
    }
    return norm;
}

// AdamW with decoupled weight decay. Moment buffers are kept in double for
// every parameter (frozen ones stay zero) so the checkpoint layout does not
// depend on the selector.
template <typename T>
class AdamW {
  public:
    AdamW(ParamStore<T>& store, AdamWConfig cfg) : store_(store), cfg_(cfg) {
        cfg_.validate();
        m_.reserve(store.size());
        v_.reserve(store.size());
        for (const auto& e : store.entries()) {
            m_.push_back(Tensor<double>(e.value.shape));
            v_.push_back(Tensor<double>(e.value.shape));
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    int64_t step_count() const { return t_; }

    // schedulers adjust the rate between steps; other settings stay fixed
    void set_lr(double lr) {
        if (!(lr > 0.0)) throw ConfigError("adamw.lr must be > 0");
        cfg_.lr = lr;
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < store_.size(); ++i) {
            auto& e = store_.entry(static_cast<int>(i));
            if (!e.trainable) continue;
            auto& m = m_[i].data;
            auto& v = v_[i].data;
            for (size_t j = 0; j < e.value.data.size(); ++j) {
                const double g = e.grad.data[j];
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                const double p = e.value.data[j];
                e.value.data[j] = static_cast<T>(
                    p - cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p));
            }
        }
    }

    // checkpoint access
    std::vector<Tensor<double>>& moments_m() { return m_; }
    std::vector<Tensor<double>>& moments_v() { return v_; }
    const std::vector<Tensor<double>>& moments_m() const { return m_; }
    const std::vector<Tensor<double>>& moments_v() const { return v_; }
    void restore_step(int64_t t) { t_ = t; }

  private:
    ParamStore<T>& store_;
    AdamWConfig cfg_;
    std::vector<Tensor<double>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace tryoff
