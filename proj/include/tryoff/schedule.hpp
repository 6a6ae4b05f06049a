#pragma once

#include <cmath>
#include <vector>

#include "tryoff/common.hpp"
#include "tryoff/tensor.hpp"

namespace tryoff {

// Per-timestep beta / alpha / alpha_bar arrays for the forward and reverse
// diffusion processes. alpha_bar is strictly decreasing in t.
struct NoiseSchedule {
    int timesteps = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    // alpha_bar extended with the convention alpha_bar(-1) = 1 (the clean
    // endpoint used by the final reverse step)
    double alpha_bar_at(int t) const {
        if (t == -1) return 1.0;
        if (t < 0 || t >= timesteps) throw ConfigError("timestep " + std::to_string(t) + " out of range [0," + std::to_string(timesteps) + ")");
        return alpha_bar[static_cast<size_t>(t)];
    }
};

inline NoiseSchedule make_linear_schedule(int timesteps, double beta_start, double beta_end) {
    if (timesteps < 1) throw ConfigError("schedule.timesteps: must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("schedule: require 0 < beta_start <= beta_end < 1, got [" +
                          std::to_string(beta_start) + ", " + std::to_string(beta_end) + "]");
    NoiseSchedule s;
    s.timesteps = timesteps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.resize(static_cast<size_t>(timesteps));
    s.alpha.resize(static_cast<size_t>(timesteps));
    s.alpha_bar.resize(static_cast<size_t>(timesteps));
    double prod = 1.0;
    for (int t = 0; t < timesteps; ++t) {
        double frac = timesteps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(timesteps - 1);
        double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[t] = b;
        s.alpha[t] = 1.0 - b;
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
    }
    return s;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> add_noise(const Tensor<T>& z0, const Tensor<T>& eps, int t, const NoiseSchedule& sched) {
    if (!z0.same_shape(eps))
        throw ShapeError("add_noise: z0 " + z0.shape_str() + " vs eps " + eps.shape_str());
    const double ab = sched.alpha_bar_at(t);
    const T a = static_cast<T>(std::sqrt(ab));
    const T b = static_cast<T>(std::sqrt(1.0 - ab));
    Tensor<T> out;
    out.shape = z0.shape;
    out.data.resize(z0.data.size());
    for (size_t i = 0; i < z0.data.size(); ++i) out.data[i] = a * z0.data[i] + b * eps.data[i];
    return out;
}

// mean squared error over all elements
template <typename T>
double ldm_loss(const Tensor<T>& eps_true, const Tensor<T>& eps_pred) {
    if (!eps_true.same_shape(eps_pred))
        throw ShapeError("ldm_loss: shape mismatch " + eps_true.shape_str() + " vs " + eps_pred.shape_str());
    double acc = 0.0;
    for (int64_t i = 0; i < eps_true.numel(); ++i) {
        double d = static_cast<double>(eps_true.data[i]) - static_cast<double>(eps_pred.data[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(eps_true.numel());
}

// One deterministic (eta = 0) reverse step t -> t_prev:
//   x0_hat  = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t)
//   z_prev  = sqrt(abar_prev) x0_hat + sqrt(1-abar_prev - sigma^2) eps + sigma xi
// t_prev = -1 denotes the clean endpoint (abar = 1), which returns x0_hat.
// For eta > 0 the caller supplies the Gaussian draw xi.
//
// x0_clip > 0 clamps x0_hat to [-x0_clip, x0_clip] before the update (static
// thresholding). Near t = T-1 the 1/sqrt(abar_t) factor amplifies the
// denoiser's irreducible eps error by two orders of magnitude; without a
// bound the trajectory leaves the data manifold and never returns. Callers
// that know the latent range (see Codec::latent_bound) should pass it.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev,
                    const NoiseSchedule& sched, double eta = 0.0, const Tensor<T>* xi = nullptr,
                    double x0_clip = 0.0) {
    if (!z_t.same_shape(eps_pred))
        throw ShapeError("ddim_step: z_t " + z_t.shape_str() + " vs eps_pred " + eps_pred.shape_str());
    if (t_prev >= t) throw ConfigError("ddim_step: t_prev (" + std::to_string(t_prev) + ") must be < t (" + std::to_string(t) + ")");
    if (t_prev < -1) throw ConfigError("ddim_step: t_prev must be >= -1");
    if (eta < 0.0) throw ConfigError("ddim_step: eta must be >= 0");

    const double ab_t = sched.alpha_bar_at(t);
    const double ab_p = sched.alpha_bar_at(t_prev);
    const double sa_t = std::sqrt(ab_t);
    const double sb_t = std::sqrt(1.0 - ab_t);
    const double sa_p = std::sqrt(ab_p);

    double sigma = 0.0;
    if (eta > 0.0) {
        if (xi == nullptr) throw ConfigError("ddim_step: eta > 0 requires a noise tensor");
        if (!xi->same_shape(z_t)) throw ShapeError("ddim_step: noise shape mismatch");
        sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
    }
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));

    Tensor<T> out;
    out.shape = z_t.shape;
    out.data.resize(z_t.data.size());
    for (size_t i = 0; i < z_t.data.size(); ++i) {
        const double e = static_cast<double>(eps_pred.data[i]);
        double x0 = (static_cast<double>(z_t.data[i]) - sb_t * e) / sa_t;
        if (x0_clip > 0.0) x0 = std::clamp(x0, -x0_clip, x0_clip);
        double v = sa_p * x0 + dir * e;
        if (sigma > 0.0) v += sigma * static_cast<double>(xi->data[i]);
        out.data[i] = static_cast<T>(v);
    }
    return out;
}

// Uniformly spaced descending timestep list for a DDIM trajectory: `steps`
// model evaluations from T-1 down to 0. The reverse loop pairs consecutive
// entries and finishes with t_prev = -1.
inline std::vector<int> ddim_timesteps(const NoiseSchedule& sched, int steps) {
    if (steps < 1) throw ConfigError("sample.steps: must be >= 1");
    const int tmax = sched.timesteps - 1;
    std::vector<int> ts;
    ts.reserve(static_cast<size_t>(steps));
    if (steps == 1) {
        ts.push_back(tmax);
        return ts;
    }
    int prev = -2;
    for (int i = 0; i < steps; ++i) {
        double frac = static_cast<double>(steps - 1 - i) / static_cast<double>(steps - 1);
        int t = static_cast<int>(std::lround(frac * tmax));
        if (t != prev) ts.push_back(t);
        prev = t;
    }
    return ts;
}

}  // namespace tryoff
