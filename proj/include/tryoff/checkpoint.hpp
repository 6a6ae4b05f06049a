#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "tryoff/codec.hpp"
#include "tryoff/common.hpp"
#include "tryoff/conditioning.hpp"
#include "tryoff/optimizer.hpp"
#include "tryoff/rng.hpp"
#include "tryoff/schedule.hpp"
#include "tryoff/unet.hpp"

// Self-describing checkpoint container:
//   magic(8) | version(u32) | header_len(u64) | header JSON | payload
// The header records every config needed to rebuild the pipeline plus the
// parameter index; the payload is float32 parameters followed (optionally) by
// float64 Adam moments, all little-endian, in parameter-store order. Writing
// the same state twice produces identical bytes.

namespace tryoff {

inline constexpr char kCheckpointMagic[8] = {'T', 'O', 'F', 'F', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kCheckpointVersion = 1;

// ---- JSON adapters ----------------------------------------------------

inline void to_json(nlohmann::json& j, const CodecConfig& c) {
    j = {{"downsample_factor", c.downsample_factor},
         {"latent_channels", c.latent_channels},
         {"mode", to_string(c.mode)},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, CodecConfig& c) {
    c.downsample_factor = j.at("downsample_factor").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.mode = codec_mode_from_string(j.at("mode").get<std::string>());
    c.seed = j.at("seed").get<uint64_t>();
}

inline void to_json(nlohmann::json& j, const UNetConfig& c) {
    j = {{"in_channels", c.in_channels},
         {"out_channels", c.out_channels},
         {"base_channels", c.base_channels},
         {"channel_mult", c.channel_mult},
         {"res_blocks_per_level", c.res_blocks_per_level},
         {"attention_levels", c.attention_levels},
         {"transformer_depth", c.transformer_depth},
         {"num_heads", c.num_heads},
         {"norm_groups", c.norm_groups},
         {"context_dim", c.context_dim}};
}

inline void from_json(const nlohmann::json& j, UNetConfig& c) {
    c.in_channels = j.at("in_channels").get<int>();
    c.out_channels = j.at("out_channels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
    c.res_blocks_per_level = j.at("res_blocks_per_level").get<int>();
    c.attention_levels = j.at("attention_levels").get<std::vector<int>>();
    c.transformer_depth = j.at("transformer_depth").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.norm_groups = j.at("norm_groups").get<int>();
    c.context_dim = j.at("context_dim").get<int>();
}

inline void to_json(nlohmann::json& j, const CanvasOptions& c) {
    j = {{"use_mask_channel", c.use_mask_channel}, {"garment_on_top", c.garment_on_top}};
}

inline void from_json(const nlohmann::json& j, CanvasOptions& c) {
    c.use_mask_channel = j.at("use_mask_channel").get<bool>();
    c.garment_on_top = j.at("garment_on_top").get<bool>();
}

inline void to_json(nlohmann::json& j, const Rng::State& s) {
    j = {{"state", s.state}, {"has_spare", s.has_spare != 0}, {"spare", s.spare}};
}

inline void from_json(const nlohmann::json& j, Rng::State& s) {
    s.state = j.at("state").get<uint64_t>();
    s.has_spare = j.at("has_spare").get<bool>() ? 1 : 0;
    s.spare = j.at("spare").get<double>();
}

// ---- checkpoint -------------------------------------------------------

struct CheckpointMeta {
    UNetConfig unet;
    CodecConfig codec;
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    CanvasOptions canvas;
    ParamSelector selector = ParamSelector::Full;
    int64_t step = 0;
    int epoch = 0;
    Rng::State rng{};
};

namespace detail {

inline void put_raw(std::string& out, const void* p, size_t n) {
    out.append(static_cast<const char*>(p), n);
}

template <typename From>
void put_blob(std::string& out, const std::vector<From>& v) {
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(From));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    explicit Reader(const std::string& b) : buf(b) {}
    void read(void* dst, size_t n) {
        if (pos + n > buf.size()) throw IoError("truncated checkpoint");
        std::memcpy(dst, buf.data() + pos, n);
        pos += n;
    }
    template <typename U>
    U scalar() {
        U u;
        read(&u, sizeof(U));
        return u;
    }
};

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStore<T>& store, const AdamW<T>* opt = nullptr) {
    nlohmann::json params = nlohmann::json::array();
    for (const auto& e : store.entries())
        params.push_back({{"name", e.name}, {"shape", e.value.shape}});

    nlohmann::json header = {
        {"unet", meta.unet},
        {"codec", meta.codec},
        {"schedule",
         {{"timesteps", meta.timesteps},
          {"beta_start", meta.beta_start},
          {"beta_end", meta.beta_end}}},
        {"canvas", meta.canvas},
        {"selector", to_string(meta.selector)},
        {"step", meta.step},
        {"epoch", meta.epoch},
        {"rng", meta.rng},
        {"params", params},
        {"has_moments", opt != nullptr},
        {"opt_step", opt ? opt->step_count() : 0},
    };
    const std::string hs = header.dump();

    std::string out;
    detail::put_raw(out, kCheckpointMagic, 8);
    const uint32_t ver = kCheckpointVersion;
    detail::put_raw(out, &ver, 4);
    const uint64_t hlen = hs.size();
    detail::put_raw(out, &hlen, 8);
    out += hs;

    std::vector<float> fbuf;
    for (const auto& e : store.entries()) {
        fbuf.resize(e.value.data.size());
        for (size_t i = 0; i < fbuf.size(); ++i) fbuf[i] = static_cast<float>(e.value.data[i]);
        detail::put_blob(out, fbuf);
    }
    if (opt) {
        for (const auto& m : opt->moments_m()) detail::put_blob(out, m.data);
        for (const auto& v : opt->moments_v()) detail::put_blob(out, v.data);
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing checkpoint '" + path + "'");
}

template <typename T>
struct LoadedCheckpoint {
    CheckpointMeta meta;
    std::unique_ptr<UNet<T>> net;
    bool has_moments = false;
    std::vector<Tensor<double>> m, v;
    int64_t opt_step = 0;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::Reader r(buf);

    char magic[8];
    r.read(magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError("'" + path + "' is not a checkpoint file");
    const auto ver = r.scalar<uint32_t>();
    if (ver != kCheckpointVersion)
        throw ConfigError("unsupported checkpoint version " + std::to_string(ver));
    const auto hlen = r.scalar<uint64_t>();
    if (r.pos + hlen > buf.size()) throw IoError("truncated checkpoint");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(buf.substr(r.pos, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad checkpoint header: " + std::string(e.what()));
    }
    r.pos += hlen;

    LoadedCheckpoint<T> out;
    try {
        out.meta.unet = header.at("unet").get<UNetConfig>();
        out.meta.codec = header.at("codec").get<CodecConfig>();
        out.meta.timesteps = header.at("schedule").at("timesteps").get<int>();
        out.meta.beta_start = header.at("schedule").at("beta_start").get<double>();
        out.meta.beta_end = header.at("schedule").at("beta_end").get<double>();
        out.meta.canvas = header.at("canvas").get<CanvasOptions>();
        out.meta.selector = selector_from_string(header.at("selector").get<std::string>());
        out.meta.step = header.at("step").get<int64_t>();
        out.meta.epoch = header.at("epoch").get<int>();
        out.meta.rng = header.at("rng").get<Rng::State>();
        out.has_moments = header.at("has_moments").get<bool>();
        out.opt_step = header.at("opt_step").get<int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad checkpoint header: " + std::string(e.what()));
    }

    out.net = std::make_unique<UNet<T>>(out.meta.unet);
    auto& store = out.net->params();

    const auto& params = header.at("params");
    if (params.size() != store.size())
        throw ShapeError("checkpoint has " + std::to_string(params.size()) +
                         " parameters, model expects " + std::to_string(store.size()));
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& pj = params[i];
        auto& e = store.entry(static_cast<int>(i));
        if (pj.at("name").get<std::string>() != e.name)
            throw ShapeError("checkpoint parameter '" + pj.at("name").get<std::string>() +
                             "' does not match model parameter '" + e.name + "'");
        if (pj.at("shape").get<std::vector<int>>() != e.value.shape)
            throw ShapeError("checkpoint shape mismatch for '" + e.name + "'");
    }

    std::vector<float> fbuf;
    for (size_t i = 0; i < store.size(); ++i) {
        auto& e = store.entry(static_cast<int>(i));
        fbuf.resize(e.value.data.size());
        r.read(fbuf.data(), fbuf.size() * sizeof(float));
        for (size_t j = 0; j < fbuf.size(); ++j) e.value.data[j] = static_cast<T>(fbuf[j]);
    }
    if (out.has_moments) {
        out.m.reserve(store.size());
        out.v.reserve(store.size());
        for (size_t i = 0; i < store.size(); ++i) {
            Tensor<double> t(store.entry(static_cast<int>(i)).value.shape);
            r.read(t.data.data(), t.data.size() * sizeof(double));
            out.m.push_back(std::move(t));
        }
        for (size_t i = 0; i < store.size(); ++i) {
            Tensor<double> t(store.entry(static_cast<int>(i)).value.shape);
            r.read(t.data.data(), t.data.size() * sizeof(double));
            out.v.push_back(std::move(t));
        }
    }
    if (r.pos != buf.size()) throw IoError("trailing bytes in checkpoint '" + path + "'");
    return out;
}

}  // namespace tryoff
