#pragma once

#include <string>
#include <utility>

#include "tryoff/codec.hpp"
#include "tryoff/common.hpp"
#include "tryoff/tensor.hpp"

// Conditioning canvas for garment extraction. The latent state is a two-slot
// canvas (garment slot stacked on person slot along height); the model input
// adds one mask channel and the encoded conditioning images:
//
//   canvas = [ z_t | mask | cond ]            [2c+1, 2h, w]
//   z_0    = [ enc(garment) ; enc(person) ]   the denoised variable
//   mask   = [ zeros        ; mask_lowres ]   marks garment pixels on person
//   cond   = [ enc(person)  ; enc(masked) ]   fixed guidance channels
//
// where masked = person with non-garment pixels painted white.

namespace tryoff {

template <typename T>
struct TryOffPair {
    std::string id;
    Tensor<T> person;   // [3,H,W] in [0,1]
    Tensor<T> garment;  // [3,H,W] flat-lay ground truth
    Tensor<T> mask;     // [1,H,W] garment coverage on person
};

struct CanvasOptions {
    bool use_mask_channel = true;  // false zeroes the mask channel (shape kept)
    bool garment_on_top = true;    // which spatial half holds the garment slot
};

inline int canvas_channels(int latent_channels) { return 2 * latent_channels + 1; }

// garment is optional: inference-only pairs carry person and mask alone
template <typename T>
void check_pair(const TryOffPair<T>& p) {
    if (p.person.ndim() != 3 || p.person.dim(0) != 3)
        throw ShapeError("pair.person must be [3,H,W], got " + p.person.shape_str());
    if (p.garment.numel() > 0) require_shape(p.garment, p.person.shape, "pair.garment");
    if (p.mask.ndim() != 3 || p.mask.dim(0) != 1 || p.mask.dim(1) != p.person.dim(1) ||
        p.mask.dim(2) != p.person.dim(2))
        throw ShapeError("pair.mask must be [1,H,W] matching person, got " + p.mask.shape_str());
    for (T v : p.mask.data)
        if (!(v >= T(0) && v <= T(1))) throw ConfigError("mask values must lie in [0,1]");
}

// person with everything outside the garment painted white
template <typename T>
Tensor<T> make_masked_person(const Tensor<T>& person, const Tensor<T>& mask) {
    const int h = person.dim(1), w = person.dim(2);
    Tensor<T> out({3, h, w});
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h * w; ++i) {
            const T m = mask.data[static_cast<size_t>(i)];
            out.data[static_cast<size_t>(c) * h * w + i] =
                m * person.data[static_cast<size_t>(c) * h * w + i] + (T(1) - m) * T(1);
        }
    return out;
}

// average-pool the mask by the codec factor: [1,H,W] -> [1,H/f,W/f]
template <typename T>
Tensor<T> downsample_mask(const Tensor<T>& mask, int factor) {
    if (mask.ndim() != 3 || mask.dim(0) != 1)
        throw ShapeError("mask must be [1,H,W], got " + mask.shape_str());
    const int h = mask.dim(1), w = mask.dim(2);
    if (factor < 1 || h % factor != 0 || w % factor != 0)
        throw ShapeError("mask " + mask.shape_str() + " not divisible by factor " +
                         std::to_string(factor));
    const int oh = h / factor, ow = w / factor;
    Tensor<T> out({1, oh, ow});
    const double inv = 1.0 / (static_cast<double>(factor) * factor);
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            double acc = 0.0;
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx)
                    acc += mask.at(0, oy * factor + dy, ox * factor + dx);
            out.at(0, oy, ox) = static_cast<T>(acc * inv);
        }
    return out;
}

// stack two [c,h,w] maps along height, garment-slot content first when
// garment_on_top, person-slot content first otherwise
template <typename T>
Tensor<T> stack_slots(const Tensor<T>& garment_slot, const Tensor<T>& person_slot,
                      bool garment_on_top) {
    require_shape(person_slot, garment_slot.shape, "stack_slots");
    const int c = garment_slot.dim(0), h = garment_slot.dim(1), w = garment_slot.dim(2);
    Tensor<T> out({c, 2 * h, w});
    const Tensor<T>& top = garment_on_top ? garment_slot : person_slot;
    const Tensor<T>& bot = garment_on_top ? person_slot : garment_slot;
    for (int ci = 0; ci < c; ++ci) {
        std::copy(top.data.begin() + static_cast<size_t>(ci) * h * w,
                  top.data.begin() + static_cast<size_t>(ci + 1) * h * w,
                  out.data.begin() + static_cast<size_t>(ci) * 2 * h * w);
        std::copy(bot.data.begin() + static_cast<size_t>(ci) * h * w,
                  bot.data.begin() + static_cast<size_t>(ci + 1) * h * w,
                  out.data.begin() + static_cast<size_t>(ci) * 2 * h * w + static_cast<size_t>(h) * w);
    }
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_slots(const Tensor<T>& z) {
    const int c = z.dim(0), h2 = z.dim(1), w = z.dim(2);
    if (h2 % 2 != 0) throw ShapeError("two-slot canvas height must be even, got " + z.shape_str());
    const int h = h2 / 2;
    Tensor<T> top({c, h, w}), bot({c, h, w});
    for (int ci = 0; ci < c; ++ci) {
        std::copy(z.data.begin() + static_cast<size_t>(ci) * h2 * w,
                  z.data.begin() + static_cast<size_t>(ci) * h2 * w + static_cast<size_t>(h) * w,
                  top.data.begin() + static_cast<size_t>(ci) * h * w);
        std::copy(z.data.begin() + static_cast<size_t>(ci) * h2 * w + static_cast<size_t>(h) * w,
                  z.data.begin() + static_cast<size_t>(ci + 1) * h2 * w,
                  bot.data.begin() + static_cast<size_t>(ci) * h * w);
    }
    return {std::move(top), std::move(bot)};
}

// the fixed (non-noised) part of the model input for one pair
template <typename T>
struct Conditioning {
    Tensor<T> mask_channel;  // [1, 2h, w]
    Tensor<T> cond_latent;   // [c, 2h, w]
};

template <typename T>
Conditioning<T> build_conditioning(const Codec<T>& codec, const TryOffPair<T>& pair,
                                   const CanvasOptions& opts) {
    check_pair(pair);
    const int f = codec.config().downsample_factor;
    Tensor<T> masked = make_masked_person(pair.person, pair.mask);
    Tensor<T> enc_person = codec.encode(pair.person);
    Tensor<T> enc_masked = codec.encode(masked);

    Conditioning<T> cond;
    cond.cond_latent = stack_slots(enc_person, enc_masked, opts.garment_on_top);

    Tensor<T> m_low = downsample_mask(pair.mask, f);
    Tensor<T> zeros({1, m_low.dim(1), m_low.dim(2)});
    if (!opts.use_mask_channel) m_low = zeros;
    cond.mask_channel = stack_slots(zeros, m_low, opts.garment_on_top);
    return cond;
}

// the clean latent the diffusion model learns to denoise toward
template <typename T>
Tensor<T> build_latent_target(const Codec<T>& codec, const TryOffPair<T>& pair,
                              const CanvasOptions& opts) {
    check_pair(pair);
    if (pair.garment.numel() == 0)
        throw ConfigError("pair '" + pair.id + "' has no garment image");
    Tensor<T> enc_garment = codec.encode(pair.garment);
    Tensor<T> enc_person = codec.encode(pair.person);
    return stack_slots(enc_garment, enc_person, opts.garment_on_top);
}

// [z | mask | cond] -> [2c+1, 2h, w]
template <typename T>
Tensor<T> assemble_canvas(const Tensor<T>& z, const Conditioning<T>& cond) {
    const int c = z.dim(0), h2 = z.dim(1), w = z.dim(2);
    if (cond.mask_channel.ndim() != 3 || cond.mask_channel.dim(0) != 1 ||
        cond.mask_channel.dim(1) != h2 || cond.mask_channel.dim(2) != w)
        throw ShapeError("mask channel " + cond.mask_channel.shape_str() +
                         " does not match latent " + z.shape_str());
    require_shape(cond.cond_latent, z.shape, "cond_latent");
    Tensor<T> canvas({2 * c + 1, h2, w});
    std::copy(z.data.begin(), z.data.end(), canvas.data.begin());
    std::copy(cond.mask_channel.data.begin(), cond.mask_channel.data.end(),
              canvas.data.begin() + z.data.size());
    std::copy(cond.cond_latent.data.begin(), cond.cond_latent.data.end(),
              canvas.data.begin() + z.data.size() + cond.mask_channel.data.size());
    return canvas;
}

// pull the garment half out of a two-slot latent
template <typename T>
Tensor<T> extract_garment_slot(const Tensor<T>& z, const CanvasOptions& opts) {
    auto [top, bot] = split_slots(z);
    return opts.garment_on_top ? std::move(top) : std::move(bot);
}

}  // namespace tryoff
