#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <string>

#include "tryoff/common.hpp"
#include "tryoff/rng.hpp"
#include "tryoff/tensor.hpp"

namespace tryoff {

enum class CodecMode { orthonormal, random_projection };

inline std::string to_string(CodecMode m) {
    return m == CodecMode::orthonormal ? "orthonormal" : "random_projection";
}

inline CodecMode codec_mode_from_string(const std::string& s) {
    if (s == "orthonormal") return CodecMode::orthonormal;
    if (s == "random_projection") return CodecMode::random_projection;
    throw ConfigError("codec.mode: unknown mode '" + s + "'");
}

struct CodecConfig {
    int downsample_factor = 8;
    int latent_channels = 4;
    static constexpr int image_channels = 3;
    CodecMode mode = CodecMode::random_projection;
    uint64_t seed = 0;

    int patch_dim() const { return image_channels * downsample_factor * downsample_factor; }

    void validate() const {
        if (downsample_factor < 1) throw ConfigError("codec.downsample_factor: must be positive");
        if (latent_channels < 1) throw ConfigError("codec.latent_channels: must be positive");
        if (mode == CodecMode::orthonormal && latent_channels != patch_dim())
            throw ConfigError("codec.latent_channels: orthonormal mode requires latent_channels = 3*f^2 = " +
                              std::to_string(patch_dim()) + ", got " + std::to_string(latent_channels));
    }
};

// Fixed linear per-patch encoder/decoder standing in for a learned image
// autoencoder. Non-overlapping f x f patches are flattened channel-major
// (index = ch*f*f + dy*f + dx) and mapped by a constant matrix:
//   orthonormal       - square orthonormal map, decode is the exact inverse
//   random_projection - c x 3f^2 Gaussian projection, decode is the
//                       Moore-Penrose least-squares reconstruction
// Immutable after construction; encode/decode are pure.
template <typename T>
class Codec {
public:
    explicit Codec(const CodecConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        const int d = cfg_.patch_dim();
        const int c = cfg_.latent_channels;
        Rng rng(derive_seed(cfg_.seed, "codec"));
        if (cfg_.mode == CodecMode::orthonormal) {
            Eigen::MatrixXd g(d, d);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
            Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
            Eigen::MatrixXd q = qr.householderQ();
            Eigen::MatrixXd r = qr.matrixQR().template triangularView<Eigen::Upper>();
            // fix the sign ambiguity so the transform is a pure function of the seed
            for (int j = 0; j < d; ++j)
                if (r(j, j) < 0) q.col(j) *= -1.0;
            forward_ = q.transpose();
            inverse_ = q;
        } else {
            Eigen::MatrixXd p(c, d);
            const double scale = 1.0 / std::sqrt(static_cast<double>(d));
            for (int i = 0; i < c; ++i)
                for (int j = 0; j < d; ++j) p(i, j) = rng.normal() * scale;
            forward_ = p;
            // Moore-Penrose pseudo-inverse; rows of p are independent with
            // probability 1, so P^T (P P^T)^{-1} applies
            inverse_ = p.transpose() * (p * p.transpose()).inverse();
        }
        // largest |coefficient| any [0,1]-valued image can produce: per row,
        // the maximizing patch puts 1 under positive entries and 0 under
        // negative ones (or the reverse)
        latent_bound_ = 0.0;
        for (Eigen::Index i = 0; i < forward_.rows(); ++i) {
            double pos = 0.0, neg = 0.0;
            for (Eigen::Index j = 0; j < forward_.cols(); ++j) {
                const double v = forward_(i, j);
                if (v > 0.0) pos += v;
                else neg -= v;
            }
            latent_bound_ = std::max({latent_bound_, pos, neg});
        }
    }

    const CodecConfig& config() const { return cfg_; }
    int latent_channels() const { return cfg_.latent_channels; }
    int factor() const { return cfg_.downsample_factor; }

    // box bound on reachable latents; samplers clamp x0 estimates to it
    double latent_bound() const { return latent_bound_; }

    // [3,H,W] -> [c,H/f,W/f]
    Tensor<T> encode(const Tensor<T>& image) const {
        check_image(image);
        const int f = cfg_.downsample_factor;
        const int h = image.dim(1) / f, w = image.dim(2) / f;
        const int c = cfg_.latent_channels;
        Tensor<T> latent({c, h, w});
        Eigen::VectorXd patch(cfg_.patch_dim());
        for (int by = 0; by < h; ++by)
            for (int bx = 0; bx < w; ++bx) {
                gather_patch(image, by, bx, patch);
                Eigen::VectorXd z = forward_ * patch;
                for (int k = 0; k < c; ++k) latent.at(k, by, bx) = static_cast<T>(z(k));
            }
        return latent;
    }

    // [c,h,w] -> [3,f*h,f*w]
    Tensor<T> decode(const Tensor<T>& latent) const {
        if (latent.ndim() != 3 || latent.dim(0) != cfg_.latent_channels)
            throw ShapeError("decode: latent shape " + latent.shape_str() + " does not match codec (c=" +
                             std::to_string(cfg_.latent_channels) + ")");
        const int f = cfg_.downsample_factor;
        const int h = latent.dim(1), w = latent.dim(2);
        Tensor<T> image({CodecConfig::image_channels, h * f, w * f});
        Eigen::VectorXd z(cfg_.latent_channels);
        for (int by = 0; by < h; ++by)
            for (int bx = 0; bx < w; ++bx) {
                for (int k = 0; k < cfg_.latent_channels; ++k) z(k) = latent.at(k, by, bx);
                Eigen::VectorXd patch = inverse_ * z;
                scatter_patch(image, by, bx, patch);
            }
        return image;
    }

    // exposed for oracle tests
    const Eigen::MatrixXd& forward_matrix() const { return forward_; }
    const Eigen::MatrixXd& inverse_matrix() const { return inverse_; }

private:
    void check_image(const Tensor<T>& image) const {
        if (image.ndim() != 3 || image.dim(0) != CodecConfig::image_channels)
            throw ShapeError("encode: expected [3,H,W] image, got " + image.shape_str());
        const int f = cfg_.downsample_factor;
        if (image.dim(1) % f != 0 || image.dim(2) % f != 0)
            throw ShapeError("encode: image dims " + image.shape_str() + " not divisible by f=" + std::to_string(f));
    }

    void gather_patch(const Tensor<T>& image, int by, int bx, Eigen::VectorXd& out) const {
        const int f = cfg_.downsample_factor;
        int i = 0;
        for (int ch = 0; ch < 3; ++ch)
            for (int dy = 0; dy < f; ++dy)
                for (int dx = 0; dx < f; ++dx)
                    out(i++) = static_cast<double>(image.at(ch, by * f + dy, bx * f + dx));
    }

    void scatter_patch(Tensor<T>& image, int by, int bx, const Eigen::VectorXd& patch) const {
        const int f = cfg_.downsample_factor;
        int i = 0;
        for (int ch = 0; ch < 3; ++ch)
            for (int dy = 0; dy < f; ++dy)
                for (int dx = 0; dx < f; ++dx)
                    image.at(ch, by * f + dy, bx * f + dx) = static_cast<T>(patch(i++));
    }

    CodecConfig cfg_;
    Eigen::MatrixXd forward_;   // c x 3f^2
    Eigen::MatrixXd inverse_;   // 3f^2 x c
    double latent_bound_ = 0.0;
};

template <typename T>
Codec<T> build_codec(const CodecConfig& cfg) {
    return Codec<T>(cfg);
}

}  // namespace tryoff
