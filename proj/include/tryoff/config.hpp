#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tryoff/checkpoint.hpp"
#include "tryoff/common.hpp"
#include "tryoff/trainer.hpp"

// Single structured run configuration covering every stage of the pipeline.
// Files may be partial: values merge over the built-in desk defaults, then
// --key.path=value overrides apply on top.

namespace tryoff {

struct ScheduleConfig {
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

struct SampleConfig {
    int steps = 50;
    double eta = 0.0;
};

struct PathsConfig {
    std::string dataset_dir = "data";
    std::string checkpoint = "out/model.ckpt";
    std::string report_dir = "out";
};

inline void to_json(nlohmann::json& j, const ScheduleConfig& c) {
    j = {{"timesteps", c.timesteps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
}

inline void from_json(const nlohmann::json& j, ScheduleConfig& c) {
    c.timesteps = j.at("timesteps").get<int>();
    c.beta_start = j.at("beta_start").get<double>();
    c.beta_end = j.at("beta_end").get<double>();
}

inline void to_json(nlohmann::json& j, const SampleConfig& c) {
    j = {{"steps", c.steps}, {"eta", c.eta}};
}

inline void from_json(const nlohmann::json& j, SampleConfig& c) {
    c.steps = j.at("steps").get<int>();
    c.eta = j.at("eta").get<double>();
}

inline void to_json(nlohmann::json& j, const PathsConfig& c) {
    j = {{"dataset_dir", c.dataset_dir}, {"checkpoint", c.checkpoint}, {"report_dir", c.report_dir}};
}

inline void from_json(const nlohmann::json& j, PathsConfig& c) {
    c.dataset_dir = j.at("dataset_dir").get<std::string>();
    c.checkpoint = j.at("checkpoint").get<std::string>();
    c.report_dir = j.at("report_dir").get<std::string>();
}

inline void to_json(nlohmann::json& j, const AdamWConfig& c) {
    j = {{"lr", c.lr},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"eps", c.eps},
         {"weight_decay", c.weight_decay}};
}

inline void from_json(const nlohmann::json& j, AdamWConfig& c) {
    c.lr = j.at("lr").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.eps = j.at("eps").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"adamw", c.adamw},
         {"warmup_steps", c.warmup_steps},
         {"clip_norm", c.clip_norm},
         {"selector", to_string(c.selector)},
         {"loss_region", to_string(c.loss_region)},
         {"val_fraction", c.val_fraction},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.adamw = j.at("adamw").get<AdamWConfig>();
    c.warmup_steps = j.at("warmup_steps").get<int>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.selector = selector_from_string(j.at("selector").get<std::string>());
    c.loss_region = loss_region_from_string(j.at("loss_region").get<std::string>());
    c.val_fraction = j.at("val_fraction").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
}

struct RunConfig {
    CodecConfig codec;
    UNetConfig unet;
    ScheduleConfig schedule;
    CanvasOptions canvas;
    TrainConfig train;
    SampleConfig sample;
    PathsConfig paths;

    // desk-scale defaults: exact 2x patch codec with 12 latent channels, so a
    // 64x48 image becomes a 25x64x24 canvas the three-level net can halve
    // twice. The latent channel count stays below the U-Net's base width; a
    // wider latent than the first feature map cannot be carried through to
    // the output and the denoiser never beats copying noise.
    RunConfig() {
        codec.downsample_factor = 2;
        codec.latent_channels = 12;
        codec.mode = CodecMode::orthonormal;
        unet.in_channels = 2 * codec.latent_channels + 1;
        unet.out_channels = codec.latent_channels;
    }

    void validate() const {
        codec.validate();
        unet.validate();
        train.validate();
        if (schedule.timesteps < 1) throw ConfigError("schedule.timesteps must be >= 1");
        if (!(schedule.beta_start > 0.0) || !(schedule.beta_end > schedule.beta_start) ||
            schedule.beta_end >= 1.0)
            throw ConfigError("schedule.beta_start/beta_end must satisfy 0 < start < end < 1");
        if (sample.steps < 1 || sample.steps > schedule.timesteps)
            throw ConfigError("sample.steps must be in [1, schedule.timesteps]");
        if (sample.eta < 0.0) throw ConfigError("sample.eta must be >= 0");
        const int want_in = 2 * codec.latent_channels + 1;
        if (unet.in_channels != want_in)
            throw ConfigError("unet.in_channels: expected 2*codec.latent_channels+1 = " +
                              std::to_string(want_in) + ", got " +
                              std::to_string(unet.in_channels));
        if (unet.out_channels != codec.latent_channels)
            throw ConfigError("unet.out_channels: expected codec.latent_channels = " +
                              std::to_string(codec.latent_channels) + ", got " +
                              std::to_string(unet.out_channels));
    }

    NoiseSchedule make_schedule() const {
        return make_linear_schedule(schedule.timesteps, schedule.beta_start, schedule.beta_end);
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"codec", c.codec},   {"unet", c.unet},     {"schedule", c.schedule},
         {"canvas", c.canvas}, {"train", c.train},   {"sample", c.sample},
         {"paths", c.paths}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    c.codec = j.at("codec").get<CodecConfig>();
    c.unet = j.at("unet").get<UNetConfig>();
    c.schedule = j.at("schedule").get<ScheduleConfig>();
    c.canvas = j.at("canvas").get<CanvasOptions>();
    c.train = j.at("train").get<TrainConfig>();
    c.sample = j.at("sample").get<SampleConfig>();
    c.paths = j.at("paths").get<PathsConfig>();
}

// one "key.path=value" assignment applied onto the merged config json; the
// value is parsed as json when possible, otherwise taken as a string
inline void apply_config_override(nlohmann::json& j, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like key.path=value, got '" + kv + "'");
    std::string path = kv.substr(0, eq);
    const std::string value = kv.substr(eq + 1);
    if (path.rfind("--", 0) == 0) path = path.substr(2);

    std::vector<std::string> parts;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) {
        if (part.empty()) throw ConfigError("override key '" + path + "' has an empty segment");
        parts.push_back(part);
    }
    if (parts.empty()) throw ConfigError("override key missing in '" + kv + "'");

    nlohmann::json* node = &j;
    for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
    (*node)[parts.back()] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
}

// empty path loads pure defaults (plus overrides); partial files are fine
inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides = {}) {
    nlohmann::json j = RunConfig{};
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot open config file '" + path + "'");
        nlohmann::json file_json = nlohmann::json::parse(f, nullptr, false);
        if (file_json.is_discarded())
            throw ConfigError("config file '" + path + "' is not valid JSON");
        j.merge_patch(file_json);
    }
    for (const auto& kv : overrides) apply_config_override(j, kv);
    RunConfig rc;
    try {
        rc = j.get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse: ") + e.what());
    }
    rc.validate();
    return rc;
}

}  // namespace tryoff
