#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "tryoff/common.hpp"
#include "tryoff/nn.hpp"
#include "tryoff/rng.hpp"
#include "tryoff/tensor.hpp"

// Miniature diffusion U-Net over latent canvases, with hand-written backward.
// Every parameter lives in a flat store under a stable dotted path; training
// subsets are chosen by substring rules on those paths, so the selectors are
// nested by construction: full > transformer blocks > self-attention layers.

namespace tryoff {

// ---------------------------------------------------------------- selectors

enum class ParamSelector { Full, TransformerBlocks, AttentionLayers };

inline std::string to_string(ParamSelector s) {
    switch (s) {
        case ParamSelector::Full: return "full";
        case ParamSelector::TransformerBlocks: return "transformer_blocks";
        case ParamSelector::AttentionLayers: return "attention_layers";
    }
    throw ConfigError("bad selector enum");
}

inline ParamSelector selector_from_string(const std::string& s) {
    if (s == "full") return ParamSelector::Full;
    if (s == "transformer_blocks") return ParamSelector::TransformerBlocks;
    if (s == "attention_layers") return ParamSelector::AttentionLayers;
    throw ConfigError("unknown selector '" + s +
                      "' (expected full|transformer_blocks|attention_layers)");
}

inline bool selector_matches(ParamSelector s, const std::string& name) {
    using std::string;
    const bool in_tblock = name.find(".tblock.") != string::npos;
    switch (s) {
        case ParamSelector::Full:
            return true;
        case ParamSelector::TransformerBlocks:
            return in_tblock;
        case ParamSelector::AttentionLayers:
            // self-attention projections only; ".attn." does not match ".xattn."
            return in_tblock && (name.find(".attn.to_q.") != string::npos ||
                                 name.find(".attn.to_k.") != string::npos ||
                                 name.find(".attn.to_v.") != string::npos ||
                                 name.find(".attn.to_out.") != string::npos);
    }
    return false;
}

// ---------------------------------------------------------------- param store

template <typename T>
class ParamStore {
  public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;
        bool trainable = true;
    };

    int add(const std::string& name, const std::vector<int>& shape) {
        if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
        Entry e;
        e.name = name;
        e.value = Tensor<T>(shape);
        e.grad = Tensor<T>(shape);
        entries_.push_back(std::move(e));
        const int id = static_cast<int>(entries_.size()) - 1;
        index_[name] = id;
        return id;
    }

    int find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    size_t size() const { return entries_.size(); }
    Entry& entry(int i) { return entries_[static_cast<size_t>(i)]; }
    const Entry& entry(int i) const { return entries_[static_cast<size_t>(i)]; }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    Tensor<T>& val(int i) { return entries_[static_cast<size_t>(i)].value; }
    const Tensor<T>& val(int i) const { return entries_[static_cast<size_t>(i)].value; }
    Tensor<T>& grad(int i) { return entries_[static_cast<size_t>(i)].grad; }

    void zero_grads() {
        for (auto& e : entries_) std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
    }

    void set_trainable(ParamSelector s) {
        for (auto& e : entries_) e.trainable = selector_matches(s, e.name);
    }

    int64_t numel_total() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

    int64_t numel_matching(ParamSelector s) const {
        int64_t n = 0;
        for (const auto& e : entries_)
            if (selector_matches(s, e.name)) n += e.value.numel();
        return n;
    }

    int64_t numel_trainable() const {
        int64_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.value.numel();
        return n;
    }

  private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------- config

struct UNetConfig {
    int in_channels = 9;
    int out_channels = 4;
    int base_channels = 32;
    std::vector<int> channel_mult = {1, 2, 4};
    int res_blocks_per_level = 1;
    std::vector<int> attention_levels = {1, 2};
    int transformer_depth = 1;
    int num_heads = 4;
    int norm_groups = 8;
    int context_dim = 0;  // 0 = no cross-attention sublayer

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int channels_at(int level) const { return base_channels * channel_mult[static_cast<size_t>(level)]; }
    int temb_dim() const { return 4 * base_channels; }
    bool has_attention(int level) const {
        for (int a : attention_levels)
            if (a == level) return true;
        return false;
    }

    void validate() const {
        if (in_channels < 1) throw ConfigError("unet.in_channels must be >= 1");
        if (out_channels < 1) throw ConfigError("unet.out_channels must be >= 1");
        if (base_channels < 1) throw ConfigError("unet.base_channels must be >= 1");
        if (channel_mult.empty()) throw ConfigError("unet.channel_mult must be non-empty");
        if (res_blocks_per_level < 1) throw ConfigError("unet.res_blocks_per_level must be >= 1");
        if (transformer_depth < 1) throw ConfigError("unet.transformer_depth must be >= 1");
        if (num_heads < 1) throw ConfigError("unet.num_heads must be >= 1");
        if (norm_groups < 1) throw ConfigError("unet.norm_groups must be >= 1");
        if (context_dim < 0) throw ConfigError("unet.context_dim must be >= 0");
        for (size_t i = 0; i < channel_mult.size(); ++i) {
            if (channel_mult[i] < 1) throw ConfigError("unet.channel_mult entries must be >= 1");
            const int ch = base_channels * channel_mult[i];
            if (ch % norm_groups != 0)
                throw ConfigError("unet channels " + std::to_string(ch) +
                                  " at level " + std::to_string(i) +
                                  " not divisible by norm_groups " + std::to_string(norm_groups));
            if (ch % num_heads != 0)
                throw ConfigError("unet channels " + std::to_string(ch) +
                                  " at level " + std::to_string(i) +
                                  " not divisible by num_heads " + std::to_string(num_heads));
        }
        for (int a : attention_levels)
            if (a < 0 || a >= levels())
                throw ConfigError("unet.attention_levels entry " + std::to_string(a) +
                                  " out of range [0," + std::to_string(levels()) + ")");
    }
};

// ---------------------------------------------------------------- caches

template <typename T>
struct ResBlockCache {
    nn::GroupNormCache<T> gn1c, gn2c;
    Tensor<T> pre1, pre2;  // silu inputs
    nn::Conv2dCache<T> c1c, c2c, skc;
    nn::LinearCache<T> tec;
};

template <typename T>
struct AttnCache {
    nn::LinearCache<T> qc, kc, vc, oc;
    nn::AttentionCoreCache<T> core;
};

template <typename T>
struct TLayerCache {
    nn::LayerNormCache<T> n1c, nxc, n2c;
    AttnCache<T> attnc, xattnc;
    nn::LinearCache<T> ff1c, ff2c;
    Tensor<T> ff_pre;  // gelu input
};

template <typename T>
struct TBlockCache {
    nn::GroupNormCache<T> ninc;
    nn::Conv2dCache<T> pinc, poutc;
    std::vector<TLayerCache<T>> layers;
    int h = 0, w = 0;
};

template <typename T>
struct UNetCaches {
    nn::LinearCache<T> te1c, te2c;
    Tensor<T> temb_pre1, temb_pre2;
    nn::Conv2dCache<T> cin_c;
    struct DownLevel {
        std::vector<ResBlockCache<T>> res;
        std::vector<TBlockCache<T>> tb;
        nn::Conv2dCache<T> down;
    };
    struct UpLevel {
        std::vector<ResBlockCache<T>> res;
        std::vector<TBlockCache<T>> tb;
        nn::Conv2dCache<T> up;
    };
    std::vector<DownLevel> down;
    ResBlockCache<T> mres1, mres2;
    TBlockCache<T> mtb;
    std::vector<UpLevel> up;
    nn::GroupNormCache<T> ognc;
    Tensor<T> out_pre;
    nn::Conv2dCache<T> oconvc;
};

// ---------------------------------------------------------------- unet

template <typename T>
class UNet {
  public:
    explicit UNet(UNetConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build();
    }

    const UNetConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

    // deterministic per-parameter init: each tensor gets its own stream keyed
    // by (seed, path), so values do not depend on construction order
    void init_params(uint64_t seed) {
        for (auto& e : store_.entries()) {
            Rng rng(derive_seed(seed, e.name));
            if (e.value.ndim() >= 2) {
                const double fan_in =
                    static_cast<double>(e.value.numel()) / static_cast<double>(e.value.dim(0));
                const double std = 1.0 / std::sqrt(fan_in);
                for (auto& v : e.value.data) v = static_cast<T>(rng.normal() * std);
            } else if (e.name.ends_with(".weight")) {
                std::fill(e.value.data.begin(), e.value.data.end(), T(1));  // norm gains
            } else {
                std::fill(e.value.data.begin(), e.value.data.end(), T(0));  // biases
            }
        }
    }

    Tensor<T> forward(const Tensor<T>& x, int t, UNetCaches<T>* cc = nullptr) const {
        check_input(x, t);
        const int L = cfg_.levels();
        if (cc) {
            cc->down.assign(static_cast<size_t>(L), {});
            cc->up.assign(static_cast<size_t>(L), {});
            const size_t r = static_cast<size_t>(cfg_.res_blocks_per_level);
            for (int i = 0; i < L; ++i) {
                cc->down[static_cast<size_t>(i)].res.resize(r);
                cc->up[static_cast<size_t>(i)].res.resize(r);
                if (cfg_.has_attention(i)) {
                    cc->down[static_cast<size_t>(i)].tb.resize(r);
                    cc->up[static_cast<size_t>(i)].tb.resize(r);
                }
            }
        }

        // timestep embedding MLP
        Tensor<T> emb = nn::sinusoidal_embedding<T>(t, cfg_.base_channels);
        Tensor<T> t1 = nn::linear_forward(emb, store_.val(te1_w_), store_.val(te1_b_),
                                          cc ? &cc->te1c : nullptr);
        if (cc) cc->temb_pre1 = t1;
        Tensor<T> t1a = nn::silu_forward(t1);
        Tensor<T> t2 = nn::linear_forward(t1a, store_.val(te2_w_), store_.val(te2_b_),
                                          cc ? &cc->te2c : nullptr);
        if (cc) cc->temb_pre2 = t2;
        Tensor<T> act_temb = nn::silu_forward(t2);

        Tensor<T> h = nn::conv2d_forward(x, store_.val(cin_w_), store_.val(cin_b_), 1, 1,
                                         cc ? &cc->cin_c : nullptr);
        guard(h, "conv_in");

        std::vector<Tensor<T>> skips;
        for (int i = 0; i < L; ++i) {
            auto& lvl = down_[static_cast<size_t>(i)];
            for (int b = 0; b < cfg_.res_blocks_per_level; ++b) {
                h = res_fwd(lvl.res[static_cast<size_t>(b)], h, act_temb,
                            cc ? &cc->down[static_cast<size_t>(i)].res[static_cast<size_t>(b)] : nullptr);
                if (cfg_.has_attention(i))
                    h = tblock_fwd(lvl.tb[static_cast<size_t>(b)], h,
                                   cc ? &cc->down[static_cast<size_t>(i)].tb[static_cast<size_t>(b)] : nullptr);
            }
            skips.push_back(h);
            if (i < L - 1) {
                h = nn::conv2d_forward(h, store_.val(lvl.down_w), store_.val(lvl.down_b), 2, 1,
                                       cc ? &cc->down[static_cast<size_t>(i)].down : nullptr);
            }
            guard(h, "down." + std::to_string(i));
        }

        h = res_fwd(mid_res1_, h, act_temb, cc ? &cc->mres1 : nullptr);
        h = tblock_fwd(mid_tb_, h, cc ? &cc->mtb : nullptr);
        h = res_fwd(mid_res2_, h, act_temb, cc ? &cc->mres2 : nullptr);
        guard(h, "mid");

        for (int i = L - 1; i >= 0; --i) {
            auto& lvl = up_[static_cast<size_t>(i)];
            h = concat_channels(h, skips[static_cast<size_t>(i)]);
            for (int b = 0; b < cfg_.res_blocks_per_level; ++b) {
                h = res_fwd(lvl.res[static_cast<size_t>(b)], h, act_temb,
                            cc ? &cc->up[static_cast<size_t>(i)].res[static_cast<size_t>(b)] : nullptr);
                if (cfg_.has_attention(i))
                    h = tblock_fwd(lvl.tb[static_cast<size_t>(b)], h,
                                   cc ? &cc->up[static_cast<size_t>(i)].tb[static_cast<size_t>(b)] : nullptr);
            }
            if (i > 0) {
                h = nn::upsample_nearest2x_forward(h);
                h = nn::conv2d_forward(h, store_.val(lvl.up_w), store_.val(lvl.up_b), 1, 1,
                                       cc ? &cc->up[static_cast<size_t>(i)].up : nullptr);
            }
            guard(h, "up." + std::to_string(i));
        }

        Tensor<T> on = nn::group_norm_forward(h, store_.val(ogn_w_), store_.val(ogn_b_),
                                              cfg_.norm_groups, cc ? &cc->ognc : nullptr);
        if (cc) cc->out_pre = on;
        Tensor<T> oa = nn::silu_forward(on);
        Tensor<T> y = nn::conv2d_forward(oa, store_.val(oconv_w_), store_.val(oconv_b_), 1, 1,
                                         cc ? &cc->oconvc : nullptr);
        guard(y, "out");
        return y;
    }

    // accumulates parameter gradients into the store; returns d(input)
    Tensor<T> backward(const Tensor<T>& dout, const UNetCaches<T>& cc) {
        const int L = cfg_.levels();
        Tensor<T> d_act_temb({1, cfg_.temb_dim()});

        Tensor<T> doa = nn::conv2d_backward(dout, store_.val(oconv_w_), 1, 1, cc.oconvc,
                                            store_.grad(oconv_w_), &store_.grad(oconv_b_));
        Tensor<T> don = nn::silu_backward(doa, cc.out_pre);
        Tensor<T> d = nn::group_norm_backward(don, store_.val(ogn_w_), cfg_.norm_groups, cc.ognc,
                                              store_.grad(ogn_w_), store_.grad(ogn_b_));

        std::vector<Tensor<T>> dskips(static_cast<size_t>(L));
        for (int i = 0; i < L; ++i) {
            auto& lvl = up_[static_cast<size_t>(i)];
            auto& lc = cc.up[static_cast<size_t>(i)];
            if (i > 0) {
                Tensor<T> dup = nn::conv2d_backward(d, store_.val(lvl.up_w), 1, 1, lc.up,
                                                    store_.grad(lvl.up_w), &store_.grad(lvl.up_b));
                d = nn::upsample_nearest2x_backward(dup);
            }
            for (int b = cfg_.res_blocks_per_level - 1; b >= 0; --b) {
                if (cfg_.has_attention(i))
                    d = tblock_bwd(lvl.tb[static_cast<size_t>(b)], d, lc.tb[static_cast<size_t>(b)]);
                d = res_bwd(lvl.res[static_cast<size_t>(b)], d, lc.res[static_cast<size_t>(b)], d_act_temb);
            }
            auto [dh, dskip] = split_channels(d, d.dim(0) - skip_ch_[static_cast<size_t>(i)]);
            d = std::move(dh);
            dskips[static_cast<size_t>(i)] = std::move(dskip);
        }

        d = res_bwd(mid_res2_, d, cc.mres2, d_act_temb);
        d = tblock_bwd(mid_tb_, d, cc.mtb);
        d = res_bwd(mid_res1_, d, cc.mres1, d_act_temb);

        for (int i = L - 1; i >= 0; --i) {
            auto& lvl = down_[static_cast<size_t>(i)];
            auto& lc = cc.down[static_cast<size_t>(i)];
            if (i < L - 1) {
                d = nn::conv2d_backward(d, store_.val(lvl.down_w), 2, 1, lc.down,
                                        store_.grad(lvl.down_w), &store_.grad(lvl.down_b));
            }
            iadd(d, dskips[static_cast<size_t>(i)]);
            for (int b = cfg_.res_blocks_per_level - 1; b >= 0; --b) {
                if (cfg_.has_attention(i))
                    d = tblock_bwd(lvl.tb[static_cast<size_t>(b)], d, lc.tb[static_cast<size_t>(b)]);
                d = res_bwd(lvl.res[static_cast<size_t>(b)], d, lc.res[static_cast<size_t>(b)], d_act_temb);
            }
        }

        Tensor<T> dx = nn::conv2d_backward(d, store_.val(cin_w_), 1, 1, cc.cin_c,
                                           store_.grad(cin_w_), &store_.grad(cin_b_));

        // timestep embedding MLP (shared by every res block)
        Tensor<T> dt2 = nn::silu_backward(d_act_temb, cc.temb_pre2);
        Tensor<T> dt1a = nn::linear_backward(dt2, store_.val(te2_w_), cc.te2c,
                                             store_.grad(te2_w_), &store_.grad(te2_b_));
        Tensor<T> dt1 = nn::silu_backward(dt1a, cc.temb_pre1);
        nn::linear_backward(dt1, store_.val(te1_w_), cc.te1c, store_.grad(te1_w_),
                            &store_.grad(te1_b_));
        return dx;
    }

  private:
    struct ResP {
        int gn1_w, gn1_b, c1_w, c1_b, te_w, te_b, gn2_w, gn2_b, c2_w, c2_b;
        int sk_w = -1, sk_b = -1;
        int cin = 0, cout = 0;
    };
    struct AttnP {
        int q_w, k_w, v_w, o_w, o_b;
    };
    struct TLayerP {
        int n1_w, n1_b;
        AttnP attn;
        bool has_x = false;
        int nx_w = -1, nx_b = -1;
        AttnP xattn{};
        int n2_w, n2_b, ff1_w, ff1_b, ff2_w, ff2_b;
    };
    struct TBlockP {
        int nin_w, nin_b, pin_w, pin_b, pout_w, pout_b;
        std::vector<TLayerP> layers;
        int ch = 0;
    };
    struct Level {
        std::vector<ResP> res;
        std::vector<TBlockP> tb;
        int down_w = -1, down_b = -1;  // down path
        int up_w = -1, up_b = -1;      // up path
    };

    UNetConfig cfg_;
    ParamStore<T> store_;
    int te1_w_, te1_b_, te2_w_, te2_b_;
    int cin_w_, cin_b_;
    std::vector<Level> down_, up_;
    ResP mid_res1_, mid_res2_;
    TBlockP mid_tb_;
    int ogn_w_, ogn_b_, oconv_w_, oconv_b_;
    std::vector<int> skip_ch_;

    void build() {
        const int L = cfg_.levels();
        const int td = cfg_.temb_dim();
        te1_w_ = store_.add("time_embed.lin1.weight", {td, cfg_.base_channels});
        te1_b_ = store_.add("time_embed.lin1.bias", {td});
        te2_w_ = store_.add("time_embed.lin2.weight", {td, td});
        te2_b_ = store_.add("time_embed.lin2.bias", {td});
        cin_w_ = store_.add("conv_in.weight", {cfg_.channels_at(0), cfg_.in_channels, 3, 3});
        cin_b_ = store_.add("conv_in.bias", {cfg_.channels_at(0)});

        int prev = cfg_.channels_at(0);
        down_.resize(static_cast<size_t>(L));
        for (int i = 0; i < L; ++i) {
            const int ch = cfg_.channels_at(i);
            auto& lvl = down_[static_cast<size_t>(i)];
            const std::string base = "down." + std::to_string(i);
            for (int b = 0; b < cfg_.res_blocks_per_level; ++b) {
                lvl.res.push_back(build_res(base + ".res." + std::to_string(b),
                                            b == 0 ? prev : ch, ch));
                if (cfg_.has_attention(i))
                    lvl.tb.push_back(build_tblock(base + ".tblock." + std::to_string(b), ch));
            }
            skip_ch_.push_back(ch);
            if (i < L - 1) {
                lvl.down_w = store_.add(base + ".downsample.conv.weight", {ch, ch, 3, 3});
                lvl.down_b = store_.add(base + ".downsample.conv.bias", {ch});
            }
            prev = ch;
        }

        const int mch = cfg_.channels_at(L - 1);
        mid_res1_ = build_res("mid.res1", mch, mch);
        mid_tb_ = build_tblock("mid.tblock", mch);
        mid_res2_ = build_res("mid.res2", mch, mch);

        up_.resize(static_cast<size_t>(L));
        for (int i = L - 1; i >= 0; --i) {
            const int ch = cfg_.channels_at(i);
            auto& lvl = up_[static_cast<size_t>(i)];
            const std::string base = "up." + std::to_string(i);
            for (int b = 0; b < cfg_.res_blocks_per_level; ++b) {
                lvl.res.push_back(build_res(base + ".res." + std::to_string(b),
                                            b == 0 ? 2 * ch : ch, ch));
                if (cfg_.has_attention(i))
                    lvl.tb.push_back(build_tblock(base + ".tblock." + std::to_string(b), ch));
            }
            if (i > 0) {
                lvl.up_w = store_.add(base + ".upsample.conv.weight",
                                      {cfg_.channels_at(i - 1), ch, 3, 3});
                lvl.up_b = store_.add(base + ".upsample.conv.bias", {cfg_.channels_at(i - 1)});
            }
        }

        ogn_w_ = store_.add("out.norm.weight", {cfg_.channels_at(0)});
        ogn_b_ = store_.add("out.norm.bias", {cfg_.channels_at(0)});
        oconv_w_ = store_.add("out.conv.weight", {cfg_.out_channels, cfg_.channels_at(0), 3, 3});
        oconv_b_ = store_.add("out.conv.bias", {cfg_.out_channels});
    }

    ResP build_res(const std::string& p, int cin, int cout) {
        ResP r;
        r.cin = cin;
        r.cout = cout;
        r.gn1_w = store_.add(p + ".gn1.weight", {cin});
        r.gn1_b = store_.add(p + ".gn1.bias", {cin});
        r.c1_w = store_.add(p + ".conv1.weight", {cout, cin, 3, 3});
        r.c1_b = store_.add(p + ".conv1.bias", {cout});
        r.te_w = store_.add(p + ".temb.weight", {cout, cfg_.temb_dim()});
        r.te_b = store_.add(p + ".temb.bias", {cout});
        r.gn2_w = store_.add(p + ".gn2.weight", {cout});
        r.gn2_b = store_.add(p + ".gn2.bias", {cout});
        r.c2_w = store_.add(p + ".conv2.weight", {cout, cout, 3, 3});
        r.c2_b = store_.add(p + ".conv2.bias", {cout});
        if (cin != cout) {
            r.sk_w = store_.add(p + ".skip.weight", {cout, cin, 1, 1});
            r.sk_b = store_.add(p + ".skip.bias", {cout});
        }
        return r;
    }

    AttnP build_attn(const std::string& p, int ch, int kv_dim) {
        AttnP a;
        a.q_w = store_.add(p + ".to_q.weight", {ch, ch});
        a.k_w = store_.add(p + ".to_k.weight", {ch, kv_dim});
        a.v_w = store_.add(p + ".to_v.weight", {ch, kv_dim});
        a.o_w = store_.add(p + ".to_out.weight", {ch, ch});
        a.o_b = store_.add(p + ".to_out.bias", {ch});
        return a;
    }

    TBlockP build_tblock(const std::string& p, int ch) {
        TBlockP tb;
        tb.ch = ch;
        tb.nin_w = store_.add(p + ".norm_in.weight", {ch});
        tb.nin_b = store_.add(p + ".norm_in.bias", {ch});
        tb.pin_w = store_.add(p + ".proj_in.weight", {ch, ch, 1, 1});
        tb.pin_b = store_.add(p + ".proj_in.bias", {ch});
        for (int d = 0; d < cfg_.transformer_depth; ++d) {
            const std::string lp = p + ".layers." + std::to_string(d);
            TLayerP tl;
            tl.n1_w = store_.add(lp + ".norm1.weight", {ch});
            tl.n1_b = store_.add(lp + ".norm1.bias", {ch});
            tl.attn = build_attn(lp + ".attn", ch, ch);
            if (cfg_.context_dim > 0) {
                tl.has_x = true;
                tl.nx_w = store_.add(lp + ".norm_ctx.weight", {ch});
                tl.nx_b = store_.add(lp + ".norm_ctx.bias", {ch});
                tl.xattn = build_attn(lp + ".xattn", ch, cfg_.context_dim);
            }
            tl.n2_w = store_.add(lp + ".norm2.weight", {ch});
            tl.n2_b = store_.add(lp + ".norm2.bias", {ch});
            tl.ff1_w = store_.add(lp + ".ff.lin1.weight", {4 * ch, ch});
            tl.ff1_b = store_.add(lp + ".ff.lin1.bias", {4 * ch});
            tl.ff2_w = store_.add(lp + ".ff.lin2.weight", {ch, 4 * ch});
            tl.ff2_b = store_.add(lp + ".ff.lin2.bias", {ch});
            tb.layers.push_back(tl);
        }
        tb.pout_w = store_.add(p + ".proj_out.weight", {ch, ch, 1, 1});
        tb.pout_b = store_.add(p + ".proj_out.bias", {ch});
        return tb;
    }

    void check_input(const Tensor<T>& x, int t) const {
        if (x.ndim() != 3 || x.dim(0) != cfg_.in_channels)
            throw ShapeError("unet input must be [" + std::to_string(cfg_.in_channels) +
                             ",H,W], got " + x.shape_str());
        const int div = 1 << (cfg_.levels() - 1);
        if (x.dim(1) % div != 0 || x.dim(2) % div != 0)
            throw ShapeError("unet input " + x.shape_str() + " not divisible by " +
                             std::to_string(div));
        if (t < 0) throw ConfigError("unet timestep must be >= 0");
    }

    void guard(const Tensor<T>& h, const std::string& stage) const {
        if (!h.all_finite()) throw NumericError("non-finite activations after " + stage);
    }

    static void iadd(Tensor<T>& a, const Tensor<T>& b) {
        require_shape(a, b.shape, "iadd");
        for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
    }

    static Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
        if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
            throw ShapeError("concat: spatial mismatch " + a.shape_str() + " vs " + b.shape_str());
        Tensor<T> y({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
        std::copy(a.data.begin(), a.data.end(), y.data.begin());
        std::copy(b.data.begin(), b.data.end(), y.data.begin() + a.data.size());
        return y;
    }

    static std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, int c0) {
        Tensor<T> a({c0, x.dim(1), x.dim(2)});
        Tensor<T> b({x.dim(0) - c0, x.dim(1), x.dim(2)});
        std::copy(x.data.begin(), x.data.begin() + a.data.size(), a.data.begin());
        std::copy(x.data.begin() + a.data.size(), x.data.end(), b.data.begin());
        return {std::move(a), std::move(b)};
    }

    Tensor<T> res_fwd(const ResP& r, const Tensor<T>& x, const Tensor<T>& act_temb,
                      ResBlockCache<T>* c) const {
        Tensor<T> pre1 = nn::group_norm_forward(x, store_.val(r.gn1_w), store_.val(r.gn1_b),
                                                cfg_.norm_groups, c ? &c->gn1c : nullptr);
        if (c) c->pre1 = pre1;
        Tensor<T> a1 = nn::silu_forward(pre1);
        Tensor<T> h = nn::conv2d_forward(a1, store_.val(r.c1_w), store_.val(r.c1_b), 1, 1,
                                         c ? &c->c1c : nullptr);
        Tensor<T> tp = nn::linear_forward(act_temb, store_.val(r.te_w), store_.val(r.te_b),
                                          c ? &c->tec : nullptr);
        const int hw = h.dim(1) * h.dim(2);
        for (int ch = 0; ch < r.cout; ++ch) {
            T* hp = h.ptr() + static_cast<size_t>(ch) * hw;
            const T add = tp.data[static_cast<size_t>(ch)];
            for (int i = 0; i < hw; ++i) hp[i] += add;
        }
        Tensor<T> pre2 = nn::group_norm_forward(h, store_.val(r.gn2_w), store_.val(r.gn2_b),
                                                cfg_.norm_groups, c ? &c->gn2c : nullptr);
        if (c) c->pre2 = pre2;
        Tensor<T> a2 = nn::silu_forward(pre2);
        Tensor<T> y = nn::conv2d_forward(a2, store_.val(r.c2_w), store_.val(r.c2_b), 1, 1,
                                         c ? &c->c2c : nullptr);
        if (r.sk_w >= 0) {
            Tensor<T> sk = nn::conv2d_forward(x, store_.val(r.sk_w), store_.val(r.sk_b), 1, 0,
                                              c ? &c->skc : nullptr);
            iadd(y, sk);
        } else {
            iadd(y, x);
        }
        return y;
    }

    Tensor<T> res_bwd(const ResP& r, const Tensor<T>& dy, const ResBlockCache<T>& c,
                      Tensor<T>& d_act_temb) {
        Tensor<T> da2 = nn::conv2d_backward(dy, store_.val(r.c2_w), 1, 1, c.c2c,
                                            store_.grad(r.c2_w), &store_.grad(r.c2_b));
        Tensor<T> dpre2 = nn::silu_backward(da2, c.pre2);
        Tensor<T> dh = nn::group_norm_backward(dpre2, store_.val(r.gn2_w), cfg_.norm_groups,
                                               c.gn2c, store_.grad(r.gn2_w), store_.grad(r.gn2_b));
        // temb was broadcast over space, so its grad is the spatial sum
        Tensor<T> dtp({1, r.cout});
        const int hw = dh.dim(1) * dh.dim(2);
        for (int ch = 0; ch < r.cout; ++ch) {
            const T* p = dh.ptr() + static_cast<size_t>(ch) * hw;
            double acc = 0.0;
            for (int i = 0; i < hw; ++i) acc += p[i];
            dtp.data[static_cast<size_t>(ch)] = static_cast<T>(acc);
        }
        Tensor<T> dte = nn::linear_backward(dtp, store_.val(r.te_w), c.tec, store_.grad(r.te_w),
                                            &store_.grad(r.te_b));
        iadd(d_act_temb, dte);

        Tensor<T> da1 = nn::conv2d_backward(dh, store_.val(r.c1_w), 1, 1, c.c1c,
                                            store_.grad(r.c1_w), &store_.grad(r.c1_b));
        Tensor<T> dpre1 = nn::silu_backward(da1, c.pre1);
        Tensor<T> dx = nn::group_norm_backward(dpre1, store_.val(r.gn1_w), cfg_.norm_groups,
                                               c.gn1c, store_.grad(r.gn1_w), store_.grad(r.gn1_b));
        if (r.sk_w >= 0) {
            Tensor<T> dsk = nn::conv2d_backward(dy, store_.val(r.sk_w), 1, 0, c.skc,
                                                store_.grad(r.sk_w), &store_.grad(r.sk_b));
            iadd(dx, dsk);
        } else {
            iadd(dx, dy);
        }
        return dx;
    }

    static const Tensor<T>& no_bias() {
        static const Tensor<T> none;
        return none;
    }

    Tensor<T> attn_fwd(const AttnP& a, const Tensor<T>& xq, const Tensor<T>& xkv,
                       AttnCache<T>* c) const {
        Tensor<T> q = nn::linear_forward(xq, store_.val(a.q_w), no_bias(), c ? &c->qc : nullptr);
        Tensor<T> k = nn::linear_forward(xkv, store_.val(a.k_w), no_bias(), c ? &c->kc : nullptr);
        Tensor<T> v = nn::linear_forward(xkv, store_.val(a.v_w), no_bias(), c ? &c->vc : nullptr);
        Tensor<T> o = nn::attention_core_forward(q, k, v, cfg_.num_heads, c ? &c->core : nullptr);
        return nn::linear_forward(o, store_.val(a.o_w), store_.val(a.o_b), c ? &c->oc : nullptr);
    }

    // returns d(xq); adds d(xkv) into *dxkv when given
    Tensor<T> attn_bwd(const AttnP& a, const Tensor<T>& dout, const AttnCache<T>& c,
                       Tensor<T>* dxkv) {
        Tensor<T> dcore = nn::linear_backward(dout, store_.val(a.o_w), c.oc, store_.grad(a.o_w),
                                              &store_.grad(a.o_b));
        Tensor<T> dq, dk, dv;
        nn::attention_core_backward(dcore, cfg_.num_heads, c.core, dq, dk, dv);
        Tensor<T> dxq = nn::linear_backward(dq, store_.val(a.q_w), c.qc, store_.grad(a.q_w), nullptr);
        Tensor<T> dk_in = nn::linear_backward(dk, store_.val(a.k_w), c.kc, store_.grad(a.k_w), nullptr);
        Tensor<T> dv_in = nn::linear_backward(dv, store_.val(a.v_w), c.vc, store_.grad(a.v_w), nullptr);
        if (dxkv) {
            iadd(*dxkv, dk_in);
            iadd(*dxkv, dv_in);
        }
        return dxq;
    }

    Tensor<T> tblock_fwd(const TBlockP& p, const Tensor<T>& x, TBlockCache<T>* c) const {
        const int h = x.dim(1), w = x.dim(2);
        if (c) {
            c->h = h;
            c->w = w;
            c->layers.assign(p.layers.size(), {});
        }
        Tensor<T> hn = nn::group_norm_forward(x, store_.val(p.nin_w), store_.val(p.nin_b),
                                              cfg_.norm_groups, c ? &c->ninc : nullptr);
        Tensor<T> hp = nn::conv2d_forward(hn, store_.val(p.pin_w), store_.val(p.pin_b), 1, 0,
                                          c ? &c->pinc : nullptr);
        Tensor<T> tk = nn::to_tokens(hp);
        for (size_t d = 0; d < p.layers.size(); ++d) {
            const auto& tl = p.layers[d];
            TLayerCache<T>* lc = c ? &c->layers[d] : nullptr;
            Tensor<T> a_in = nn::layer_norm_forward(tk, store_.val(tl.n1_w), store_.val(tl.n1_b),
                                                    lc ? &lc->n1c : nullptr);
            Tensor<T> a_out = attn_fwd(tl.attn, a_in, a_in, lc ? &lc->attnc : nullptr);
            iadd(tk, a_out);
            if (tl.has_x) {
                Tensor<T> x_in = nn::layer_norm_forward(tk, store_.val(tl.nx_w),
                                                        store_.val(tl.nx_b), lc ? &lc->nxc : nullptr);
                Tensor<T> ctx({1, cfg_.context_dim});  // single neutral context token
                Tensor<T> x_out = attn_fwd(tl.xattn, x_in, ctx, lc ? &lc->xattnc : nullptr);
                iadd(tk, x_out);
            }
            Tensor<T> f_in = nn::layer_norm_forward(tk, store_.val(tl.n2_w), store_.val(tl.n2_b),
                                                    lc ? &lc->n2c : nullptr);
            Tensor<T> f1 = nn::linear_forward(f_in, store_.val(tl.ff1_w), store_.val(tl.ff1_b),
                                              lc ? &lc->ff1c : nullptr);
            if (lc) lc->ff_pre = f1;
            Tensor<T> f2 = nn::gelu_forward(f1);
            Tensor<T> f3 = nn::linear_forward(f2, store_.val(tl.ff2_w), store_.val(tl.ff2_b),
                                              lc ? &lc->ff2c : nullptr);
            iadd(tk, f3);
        }
        Tensor<T> hq = nn::from_tokens(tk, h, w);
        Tensor<T> po = nn::conv2d_forward(hq, store_.val(p.pout_w), store_.val(p.pout_b), 1, 0,
                                          c ? &c->poutc : nullptr);
        iadd(po, x);
        return po;
    }

    Tensor<T> tblock_bwd(const TBlockP& p, const Tensor<T>& dy, const TBlockCache<T>& c) {
        Tensor<T> dhq = nn::conv2d_backward(dy, store_.val(p.pout_w), 1, 0, c.poutc,
                                            store_.grad(p.pout_w), &store_.grad(p.pout_b));
        Tensor<T> dt = nn::to_tokens(dhq);
        for (size_t di = p.layers.size(); di-- > 0;) {
            const auto& tl = p.layers[di];
            const TLayerCache<T>& lc = c.layers[di];
            // ff residual
            Tensor<T> df2 = nn::linear_backward(dt, store_.val(tl.ff2_w), lc.ff2c,
                                                store_.grad(tl.ff2_w), &store_.grad(tl.ff2_b));
            Tensor<T> df1 = nn::gelu_backward(df2, lc.ff_pre);
            Tensor<T> df_in = nn::linear_backward(df1, store_.val(tl.ff1_w), lc.ff1c,
                                                  store_.grad(tl.ff1_w), &store_.grad(tl.ff1_b));
            Tensor<T> dn2 = nn::layer_norm_backward(df_in, store_.val(tl.n2_w), lc.n2c,
                                                    store_.grad(tl.n2_w), store_.grad(tl.n2_b));
            iadd(dt, dn2);
            // cross-attention residual (context is constant, its grad is dropped)
            if (tl.has_x) {
                Tensor<T> dx_in = attn_bwd(tl.xattn, dt, lc.xattnc, nullptr);
                Tensor<T> dnx = nn::layer_norm_backward(dx_in, store_.val(tl.nx_w), lc.nxc,
                                                        store_.grad(tl.nx_w), store_.grad(tl.nx_b));
                iadd(dt, dnx);
            }
            // self-attention residual
            Tensor<T> da_in({dt.dim(0), dt.dim(1)});
            Tensor<T> dxq = attn_bwd(tl.attn, dt, lc.attnc, &da_in);
            iadd(da_in, dxq);
            Tensor<T> dn1 = nn::layer_norm_backward(da_in, store_.val(tl.n1_w), lc.n1c,
                                                    store_.grad(tl.n1_w), store_.grad(tl.n1_b));
            iadd(dt, dn1);
        }
        Tensor<T> dhp = nn::from_tokens(dt, c.h, c.w);
        Tensor<T> dhn = nn::conv2d_backward(dhp, store_.val(p.pin_w), 1, 0, c.pinc,
                                            store_.grad(p.pin_w), &store_.grad(p.pin_b));
        Tensor<T> dx = nn::group_norm_backward(dhn, store_.val(p.nin_w), cfg_.norm_groups, c.ninc,
                                               store_.grad(p.nin_w), store_.grad(p.nin_b));
        iadd(dx, dy);
        return dx;
    }
};

}  // namespace tryoff
