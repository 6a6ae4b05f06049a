#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tryoff/codec.hpp"
#include "tryoff/common.hpp"
#include "tryoff/conditioning.hpp"
#include "tryoff/rng.hpp"
#include "tryoff/schedule.hpp"
#include "tryoff/unet.hpp"

// Deterministic DDIM sampling over the two-slot latent canvas. The noised
// variable evolves; the mask channel and conditioning latents are re-attached
// at every step.

namespace tryoff {

template <typename T>
using Denoiser = std::function<Tensor<T>(const Tensor<T>& canvas, int t)>;

// runs the reverse process from pure noise; returns the denoised latent.
// x0_clip > 0 bounds the per-step clean-latent estimate (see ddim_step);
// pass the codec's latent_bound() when the latent range is known.
template <typename T>
Tensor<T> sample_latent(const Denoiser<T>& denoiser, const Conditioning<T>& cond,
                        const NoiseSchedule& sched, const std::vector<int>& latent_shape,
                        int steps, double eta, Rng& rng, double x0_clip = 0.0) {
    if (steps < 1) throw ConfigError("sampler steps must be >= 1");
    Tensor<T> z = Tensor<T>::randn(latent_shape, rng);
    const std::vector<int> ts = ddim_timesteps(sched, steps);
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = (i + 1 < ts.size()) ? ts[i + 1] : -1;
        Tensor<T> canvas = assemble_canvas(z, cond);
        Tensor<T> eps = denoiser(canvas, t);
        require_shape(eps, z.shape, "denoiser output");
        if (eta > 0.0) {
            Tensor<T> xi = Tensor<T>::randn(latent_shape, rng);
            z = ddim_step(z, eps, t, t_prev, sched, eta, &xi, x0_clip);
        } else {
            z = ddim_step(z, eps, t, t_prev, sched, 0.0, nullptr, x0_clip);
        }
        if (!z.all_finite()) throw NumericError("non-finite latent at timestep " + std::to_string(t));
    }
    return z;
}

inline constexpr const char* kSampleStream = "sample";

// generates the flat garment image for one pair; the noise stream is keyed by
// (seed, pair id) so results do not depend on batch composition or order
template <typename T>
Tensor<T> generate_garment(const UNet<T>& net, const Codec<T>& codec, const NoiseSchedule& sched,
                           const TryOffPair<T>& pair, const CanvasOptions& copts, int steps,
                           double eta, uint64_t seed) {
    Conditioning<T> cond = build_conditioning(codec, pair, copts);
    const int f = codec.config().downsample_factor;
    const int c = codec.config().latent_channels;
    const std::vector<int> latent_shape = {c, 2 * (pair.person.dim(1) / f), pair.person.dim(2) / f};

    Rng rng(derive_seed(derive_seed(seed, kSampleStream), pair.id));
    Denoiser<T> denoiser = [&net](const Tensor<T>& canvas, int t) { return net.forward(canvas, t); };
    Tensor<T> z0 = sample_latent(denoiser, cond, sched, latent_shape, steps, eta, rng);

    Tensor<T> garment_latent = extract_garment_slot(z0, copts);
    Tensor<T> img = codec.decode(garment_latent);
    for (auto& v : img.data) v = std::clamp(v, T(0), T(1));
    return img;
}

template <typename T>
std::vector<Tensor<T>> batch_generate(const UNet<T>& net, const Codec<T>& codec,
                                      const NoiseSchedule& sched,
                                      const std::vector<TryOffPair<T>>& pairs,
                                      const CanvasOptions& copts, int steps, double eta,
                                      uint64_t seed) {
    std::vector<Tensor<T>> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs)
        out.push_back(generate_garment(net, codec, sched, p, copts, steps, eta, seed));
    return out;
}

}  // namespace tryoff
