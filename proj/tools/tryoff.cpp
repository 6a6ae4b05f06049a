// command-line surface for the garment flat-lay pipeline: dataset synthesis,
// training, sampling, evaluation, seed sweeps, and parameter accounting
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>
#include <string>
#include <vector>

#include "tryoff/checkpoint.hpp"
#include "tryoff/config.hpp"
#include "tryoff/image_io.hpp"
#include "tryoff/metrics.hpp"
#include "tryoff/sampler.hpp"
#include "tryoff/synth.hpp"
#include "tryoff/trainer.hpp"

namespace fs = std::filesystem;
using namespace tryoff;

using Scalar = float;

namespace {

std::vector<std::string> png_ids(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: '" + dir + "'");
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    return ids;
}

// "1,2,3" and "a..b" (inclusive), mixed freely
std::vector<uint64_t> parse_seeds(const std::string& spec) {
    std::vector<uint64_t> seeds;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        const auto dots = tok.find("..");
        try {
            if (dots == std::string::npos) {
                seeds.push_back(std::stoull(tok));
            } else {
                const uint64_t a = std::stoull(tok.substr(0, dots));
                const uint64_t b = std::stoull(tok.substr(dots + 2));
                if (b < a) throw ConfigError("--seeds range '" + tok + "' is descending");
                for (uint64_t s = a; s <= b; ++s) seeds.push_back(s);
            }
        } catch (const std::invalid_argument&) {
            throw ConfigError("--seeds: cannot parse '" + tok + "'");
        } catch (const std::out_of_range&) {
            throw ConfigError("--seeds: value out of range in '" + tok + "'");
        }
    }
    if (seeds.empty()) throw ConfigError("--seeds: no seeds given");
    return seeds;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir + "'");
}

void ensure_parent_dir(const std::string& file) {
    const fs::path parent = fs::path(file).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
}

void write_text(const std::string& path, const std::string& body) {
    ensure_parent_dir(path);
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << body;
}

std::map<std::string, std::string> category_by_id(const std::string& manifest_dir) {
    std::map<std::string, std::string> out;
    for (const auto& row : load_manifest(manifest_dir)) out[row.id] = to_string(row.category);
    return out;
}

void print_param_counts(const UNet<Scalar>& net) {
    const auto& store = net.params();
    const int64_t full = store.numel_matching(ParamSelector::Full);
    const int64_t tb = store.numel_matching(ParamSelector::TransformerBlocks);
    const int64_t attn = store.numel_matching(ParamSelector::AttentionLayers);
    std::printf("parameters: full=%lld  transformer_blocks=%lld (%.1f%%)  attention_layers=%lld (%.1f%%)\n",
                static_cast<long long>(full), static_cast<long long>(tb),
                100.0 * static_cast<double>(tb) / static_cast<double>(full),
                static_cast<long long>(attn),
                100.0 * static_cast<double>(attn) / static_cast<double>(full));
}

int cmd_synth(int n, uint64_t seed, const std::string& out_dir, int height, int width) {
    const auto rows = generate_dataset<Scalar>(n, seed, out_dir, height, width);
    int per_cat[3] = {0, 0, 0};
    for (const auto& r : rows) ++per_cat[static_cast<int>(r.category)];
    std::printf("wrote %zu triplets to %s (top %d, bottom %d, dress %d)\n", rows.size(),
                out_dir.c_str(), per_cat[0], per_cat[1], per_cat[2]);
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    const auto data = load_dataset<Scalar>(cfg.paths.dataset_dir);
    std::printf("loaded %zu pairs from %s\n", data.size(), cfg.paths.dataset_dir.c_str());

    UNet<Scalar> net(cfg.unet);
    net.init_params(cfg.train.seed);
    print_param_counts(net);

    Codec<Scalar> codec(cfg.codec);
    Trainer<Scalar> trainer(net, codec, cfg.make_schedule(), cfg.canvas, cfg.train);
    std::printf("training selector=%s -> %lld trainable parameters\n",
                to_string(cfg.train.selector).c_str(),
                static_cast<long long>(net.params().numel_trainable()));

    ensure_dir(cfg.paths.report_dir);
    ensure_parent_dir(cfg.paths.checkpoint);
    const std::string loss_path = cfg.paths.report_dir + "/losses.csv";
    std::ofstream losses(loss_path, std::ios::trunc);
    if (!losses) throw IoError("cannot write '" + loss_path + "'");
    losses << "epoch,split,loss\n";
    losses.precision(12);

    trainer.fit(data, [&](const EpochLog& log) {
        losses << log.epoch + 1 << ",train," << log.train_loss << "\n";
        if (log.has_val) losses << log.epoch + 1 << ",val," << log.val_loss << "\n";
        losses.flush();
        std::printf("epoch %d/%d  train %.6f  val %.6f\n", log.epoch + 1, cfg.train.epochs,
                    log.train_loss, log.val_loss);
        std::fflush(stdout);
    });

    trainer.save(cfg.paths.checkpoint);
    std::printf("saved checkpoint %s and %s\n", cfg.paths.checkpoint.c_str(), loss_path.c_str());
    return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& dataset_dir,
              const std::string& out_dir, uint64_t seed, int steps, double eta, int limit) {
    if (!fs::exists(ckpt_path)) throw ConfigError("checkpoint '" + ckpt_path + "' does not exist");
    auto ck = load_checkpoint<Scalar>(ckpt_path);
    const Codec<Scalar> codec(ck.meta.codec);
    const NoiseSchedule sched =
        make_linear_schedule(ck.meta.timesteps, ck.meta.beta_start, ck.meta.beta_end);

    auto data = load_dataset<Scalar>(dataset_dir, /*require_cloth=*/false);
    if (limit > 0 && static_cast<size_t>(limit) < data.size())
        data.resize(static_cast<size_t>(limit));
    ensure_dir(out_dir);
    for (const auto& pair : data) {
        const Tensor<Scalar> img =
            generate_garment(*ck.net, codec, sched, pair, ck.meta.canvas, steps, eta, seed);
        write_png(out_dir + "/" + pair.id + ".png", img);
    }
    std::printf("wrote %zu images to %s (seed %llu, %d steps)\n", data.size(), out_dir.c_str(),
                static_cast<unsigned long long>(seed), steps);
    return 0;
}

int cmd_eval(const std::string& gen_dir, const std::string& truth_dir, const std::string& out_dir,
             const std::string& manifest_dir, uint64_t feature_seed, int feature_dim) {
    const auto gen_files = png_ids(gen_dir);
    const auto truth_files = png_ids(truth_dir);

    // generated files may carry a _seed<N> suffix; match on the stripped id
    const std::regex seed_suffix("_seed[0-9]+$");
    std::map<std::string, std::string> gen_by_id;
    for (const auto& f : gen_files) gen_by_id[std::regex_replace(f, seed_suffix, "")] = f;

    std::string missing;
    for (const auto& id : truth_files)
        if (!gen_by_id.count(id)) missing += (missing.empty() ? "" : ", ") + id;
    if (!missing.empty()) throw ConfigError("ids missing from generated set: " + missing);
    for (const auto& [id, f] : gen_by_id)
        if (!std::binary_search(truth_files.begin(), truth_files.end(), id))
            missing += (missing.empty() ? "" : ", ") + id;
    if (!missing.empty()) throw ConfigError("ids missing from truth set: " + missing);

    std::map<std::string, std::string> cats;
    std::string mdir = manifest_dir;
    if (mdir.empty()) mdir = fs::path(truth_dir).parent_path().string();
    if (!mdir.empty() && fs::exists(fs::path(mdir) / "manifest.csv")) cats = category_by_id(mdir);

    std::vector<Tensor<Scalar>> gen, truth;
    std::vector<std::string> categories;
    for (const auto& id : truth_files) {
        gen.push_back(read_png<Scalar>(gen_dir + "/" + gen_by_id[id] + ".png", 3));
        truth.push_back(read_png<Scalar>(truth_dir + "/" + id + ".png", 3));
        if (!cats.empty()) categories.push_back(cats.count(id) ? cats[id] : "unknown");
    }

    FeatureExtractor fx;
    fx.seed = feature_seed;
    fx.dim = feature_dim;
    const MetricReport rep = compute_report(gen, truth, categories, fx);

    const std::string dest = out_dir.empty() ? gen_dir : out_dir;
    write_text(dest + "/report.csv", sweep_to_csv({rep}));
    write_text(dest + "/report.json", report_to_json(rep).dump(2) + "\n");
    std::printf("ssim %.4f  fid %.4f  kid %.6f  over %d images\n", rep.ssim, rep.fid, rep.kid,
                rep.n_images);
    for (const auto& [cat, cm] : rep.per_category)
        std::printf("  %-8s ssim %.4f  fid %s  n=%d\n", cat.c_str(), cm.ssim,
                    std::isnan(cm.fid) ? "n/a" : std::to_string(cm.fid).c_str(), cm.n);
    return 0;
}

int cmd_seed_sweep(const std::string& ckpt_path, const std::string& dataset_dir,
                   const std::string& seeds_spec, const std::string& out_dir, int steps,
                   double eta, int limit, uint64_t feature_seed, int feature_dim) {
    if (!fs::exists(ckpt_path)) throw ConfigError("checkpoint '" + ckpt_path + "' does not exist");
    const std::vector<uint64_t> seeds = parse_seeds(seeds_spec);
    auto ck = load_checkpoint<Scalar>(ckpt_path);
    const Codec<Scalar> codec(ck.meta.codec);
    const NoiseSchedule sched =
        make_linear_schedule(ck.meta.timesteps, ck.meta.beta_start, ck.meta.beta_end);

    auto data = load_dataset<Scalar>(dataset_dir);
    if (limit > 0 && static_cast<size_t>(limit) < data.size())
        data.resize(static_cast<size_t>(limit));

    std::vector<std::string> categories;
    const auto cats = category_by_id(dataset_dir);
    if (!cats.empty())
        for (const auto& p : data)
            categories.push_back(cats.count(p.id) ? cats.at(p.id) : "unknown");

    FeatureExtractor fx;
    fx.seed = feature_seed;
    fx.dim = feature_dim;
    const auto reports = seed_sweep(*ck.net, codec, sched, data, ck.meta.canvas, steps, eta,
                                    seeds, fx, categories);

    ensure_dir(out_dir);
    write_text(out_dir + "/sweep.csv", sweep_to_csv(reports));
    write_text(out_dir + "/sweep.json", sweep_to_json(reports).dump(2) + "\n");

    std::printf("%-4s %-8s %-9s %-10s %-10s\n", "rank", "seed", "ssim", "fid", "kid");
    for (size_t i = 0; i < reports.size(); ++i)
        std::printf("%-4zu %-8llu %-9.4f %-10.4f %-10.6f\n", i + 1,
                    static_cast<unsigned long long>(reports[i].seed), reports[i].ssim,
                    reports[i].fid, reports[i].kid);
    return 0;
}

int cmd_params(const RunConfig& cfg) {
    UNet<Scalar> net(cfg.unet);
    print_param_counts(net);
    net.params().set_trainable(cfg.train.selector);
    std::printf("selector=%s -> %lld trainable\n", to_string(cfg.train.selector).c_str(),
                static_cast<long long>(net.params().numel_trainable()));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    tryoff::tune_allocator();
    CLI::App app{"mask-conditioned latent-diffusion pipeline for garment flat-lay generation"};
    app.require_subcommand(1);

    // synth
    int synth_n = 64, synth_h = 64, synth_w = 48;
    uint64_t synth_seed = 0;
    std::string synth_out = "data";
    auto* synth = app.add_subcommand("synth", "generate a paired dataset");
    synth->add_option("n", synth_n, "number of triplets")->required();
    synth->add_option("--seed", synth_seed, "master seed");
    synth->add_option("--out", synth_out, "output directory");
    synth->add_option("--height", synth_h, "image height (multiple of 16)");
    synth->add_option("--width", synth_w, "image width (multiple of 16)");

    // shared config flags
    std::string config_path;
    std::vector<std::string> overrides;
    std::string dataset_dir, checkpoint_path, report_dir;

    auto add_config_flags = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run configuration JSON");
        cmd->add_option("--set", overrides, "override as key.path=value (repeatable)");
    };

    auto* train = app.add_subcommand("train", "train on a dataset directory");
    add_config_flags(train);
    train->add_option("--dataset", dataset_dir, "dataset directory (overrides paths.dataset_dir)");
    train->add_option("--checkpoint", checkpoint_path, "checkpoint path (overrides paths.checkpoint)");
    train->add_option("--report-dir", report_dir, "report directory (overrides paths.report_dir)");

    auto* params = app.add_subcommand("params", "print parameter counts per selector");
    add_config_flags(params);

    // infer
    std::string infer_ckpt, infer_dataset, infer_out = "out/generated";
    uint64_t infer_seed = 0;
    int infer_steps = 50, infer_limit = 0;
    double infer_eta = 0.0;
    auto* infer = app.add_subcommand("infer", "sample flat-lays for a dataset");
    infer->add_option("--checkpoint", infer_ckpt, "trained checkpoint")->required();
    infer->add_option("--dataset", infer_dataset, "dataset directory")->required();
    infer->add_option("--out", infer_out, "output image directory");
    infer->add_option("--seed", infer_seed, "sampling seed");
    infer->add_option("--steps", infer_steps, "denoising steps");
    infer->add_option("--eta", infer_eta, "stochasticity (0 = deterministic)");
    infer->add_option("--limit", infer_limit, "use only the first N pairs");

    // eval
    std::string eval_gen, eval_truth, eval_out, eval_manifest;
    uint64_t eval_fseed = 0;
    int eval_fdim = 64;
    auto* eval = app.add_subcommand("eval", "score generated images against ground truth");
    eval->add_option("--generated", eval_gen, "directory of generated images")->required();
    eval->add_option("--truth", eval_truth, "directory of ground-truth images")->required();
    eval->add_option("--out", eval_out, "report directory (default: generated dir)");
    eval->add_option("--manifest", eval_manifest, "directory holding manifest.csv for categories");
    eval->add_option("--feature-seed", eval_fseed, "feature extractor seed");
    eval->add_option("--feature-dim", eval_fdim, "feature dimension");

    // seed-sweep
    std::string sweep_ckpt, sweep_dataset, sweep_seeds = "1..10", sweep_out = "out/sweep";
    int sweep_steps = 50, sweep_limit = 0, sweep_fdim = 64;
    double sweep_eta = 0.0;
    uint64_t sweep_fseed = 0;
    auto* sweep = app.add_subcommand("seed-sweep", "rank sampling seeds by FID");
    sweep->add_option("--checkpoint", sweep_ckpt, "trained checkpoint")->required();
    sweep->add_option("--dataset", sweep_dataset, "dataset directory with ground truth")->required();
    sweep->add_option("--seeds", sweep_seeds, "seed list: 1,2,3 or 1..10");
    sweep->add_option("--out", sweep_out, "report directory");
    sweep->add_option("--steps", sweep_steps, "denoising steps");
    sweep->add_option("--eta", sweep_eta, "stochasticity (0 = deterministic)");
    sweep->add_option("--limit", sweep_limit, "use only the first N pairs");
    sweep->add_option("--feature-seed", sweep_fseed, "feature extractor seed");
    sweep->add_option("--feature-dim", sweep_fdim, "feature dimension");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*synth) return cmd_synth(synth_n, synth_seed, synth_out, synth_h, synth_w);
        if (*train || *params) {
            RunConfig cfg = load_run_config(config_path, overrides);
            if (!dataset_dir.empty()) cfg.paths.dataset_dir = dataset_dir;
            if (!checkpoint_path.empty()) cfg.paths.checkpoint = checkpoint_path;
            if (!report_dir.empty()) cfg.paths.report_dir = report_dir;
            return *train ? cmd_train(cfg) : cmd_params(cfg);
        }
        if (*infer)
            return cmd_infer(infer_ckpt, infer_dataset, infer_out, infer_seed, infer_steps,
                             infer_eta, infer_limit);
        if (*eval)
            return cmd_eval(eval_gen, eval_truth, eval_out, eval_manifest, eval_fseed, eval_fdim);
        if (*sweep)
            return cmd_seed_sweep(sweep_ckpt, sweep_dataset, sweep_seeds, sweep_out, sweep_steps,
                                  sweep_eta, sweep_limit, sweep_fseed, sweep_fdim);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "shape error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
