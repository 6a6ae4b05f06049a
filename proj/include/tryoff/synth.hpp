#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tryoff/common.hpp"
#include "tryoff/conditioning.hpp"
#include "tryoff/image_io.hpp"
#include "tryoff/rng.hpp"
#include "tryoff/tensor.hpp"

// Procedural paired data: a stylized figure wearing a garment, the exact
// garment mask, and the same garment rendered as a canonical flat-lay on
// white. Rendering is a painter's pass that records which layer owns each
// pixel, so the mask is the garment-owned pixel set by construction.

namespace tryoff {

enum class Category { Top, Bottom, Dress };
enum class Sleeve { Short, Long, None };
enum class BodyView { Half, Full };
enum class PatternKind { Solid, Stripes, Checks, Logo };

inline std::string to_string(Category c) {
    switch (c) {
        case Category::Top: return "top";
        case Category::Bottom: return "bottom";
        case Category::Dress: return "dress";
    }
    throw ConfigError("bad category enum");
}

inline Category category_from_string(const std::string& s) {
    if (s == "top") return Category::Top;
    if (s == "bottom") return Category::Bottom;
    if (s == "dress") return Category::Dress;
    throw ConfigError("unknown category '" + s + "'");
}

inline std::string to_string(BodyView v) { return v == BodyView::Half ? "half" : "full"; }

inline BodyView body_view_from_string(const std::string& s) {
    if (s == "half") return BodyView::Half;
    if (s == "full") return BodyView::Full;
    throw ConfigError("unknown body_view '" + s + "'");
}

using Color = std::array<double, 3>;

struct PatternSpec {
    PatternKind kind = PatternKind::Solid;
    double param = 0.2;            // stripe width / check size (garment-local units)
    double pos_u = 0.5, pos_v = 0.35;  // logo position
    Color color2 = {0.1, 0.1, 0.1};
};

struct GarmentSpec {
    Category category = Category::Top;
    Color base_color = {0.5, 0.2, 0.2};
    PatternSpec pattern{};
    Sleeve sleeve = Sleeve::Short;
    uint64_t seed = 0;

    void validate() const {
        for (double v : base_color)
            if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("garment base_color out of [0,1]");
        for (double v : pattern.color2)
            if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("garment pattern color out of [0,1]");
        if (!(pattern.param > 0.0)) throw ConfigError("pattern parameter must be positive");
    }
};

struct SceneSpec {
    BodyView body_view = BodyView::Full;
    double pose_angle = 20.0;  // arm spread, degrees from straight down
    double figure_tone = 0.45;
    double background = 0.8;
    int height = 64, width = 48;
    uint64_t seed = 0;

    void validate() const {
        if (height % 16 != 0 || width % 16 != 0)
            throw ConfigError("scene resolution must be divisible by 16, got " +
                              std::to_string(height) + "x" + std::to_string(width));
        if (!(pose_angle >= 0.0 && pose_angle <= 60.0))
            throw ConfigError("pose_angle must lie in [0,60] degrees");
        if (!(figure_tone >= 0.0 && figure_tone <= 1.0) ||
            !(background >= 0.0 && background <= 1.0))
            throw ConfigError("figure_tone/background must lie in [0,1]");
    }
};

namespace synth_detail {

struct Vec2 {
    double x = 0, y = 0;
};

inline double capsule_dist(double px, double py, Vec2 a, Vec2 b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double cx = a.x + t * dx, cy = a.y + t * dy;
    return std::hypot(px - cx, py - cy);
}

// position along the segment, unclamped (for sleeve coverage tests)
inline double capsule_param(double px, double py, Vec2 a, Vec2 b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    return len2 > 0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
}

inline Color pattern_color(const GarmentSpec& g, double gu, double gv) {
    const auto& p = g.pattern;
    switch (p.kind) {
        case PatternKind::Solid:
            return g.base_color;
        case PatternKind::Stripes: {
            const auto band = static_cast<long long>(std::floor(gv / p.param));
            return (band % 2 == 0) ? g.base_color : p.color2;
        }
        case PatternKind::Checks: {
            const auto cu = static_cast<long long>(std::floor(gu / p.param));
            const auto cv = static_cast<long long>(std::floor(gv / p.param));
            return ((cu + cv) % 2 == 0) ? g.base_color : p.color2;
        }
        case PatternKind::Logo: {
            const double d = std::hypot(gu - p.pos_u, gv - p.pos_v);
            return d < 0.15 ? p.color2 : g.base_color;
        }
    }
    return g.base_color;
}

struct Rect {
    double u0, u1, v0, v1;
    bool contains(double u, double v) const { return u >= u0 && u <= u1 && v >= v0 && v <= v1; }
};

// worn-garment geometry in body space [0,1]^2
constexpr Rect kTorsoGarment{0.31, 0.69, 0.26, 0.54};
constexpr Rect kBottomGarment{0.32, 0.68, 0.54, 0.78};
constexpr Rect kBodyTorso{0.34, 0.66, 0.24, 0.56};
constexpr Rect kLegL{0.36, 0.47, 0.54, 0.93};
constexpr Rect kLegR{0.53, 0.64, 0.54, 0.93};
constexpr double kHeadCx = 0.5, kHeadCy = 0.16, kHeadR = 0.085;
constexpr double kDressHemV = 0.80;
constexpr double kArmRadius = 0.035;
constexpr double kArmLen = 0.30;

inline bool in_dress_skirt(double u, double v) {
    if (v < kTorsoGarment.v1 || v > kDressHemV) return false;
    const double t = (v - kTorsoGarment.v1) / (kDressHemV - kTorsoGarment.v1);
    const double half = 0.19 + t * 0.06;  // flares from torso width outward
    return std::abs(u - 0.5) <= half;
}

inline double sleeve_coverage(Sleeve s) {
    switch (s) {
        case Sleeve::Short: return 0.45;
        case Sleeve::Long: return 1.0;
        case Sleeve::None: return 0.0;
    }
    return 0.0;
}

}  // namespace synth_detail

// renders the dressed figure and the exact garment mask
template <typename T>
void render_person(const GarmentSpec& g, const SceneSpec& s, Tensor<T>& person, Tensor<T>& mask) {
    using namespace synth_detail;
    g.validate();
    s.validate();
    const int H = s.height, W = s.width;
    person = Tensor<T>({3, H, W});
    mask = Tensor<T>({1, H, W});

    const double rad = s.pose_angle * 3.14159265358979323846 / 180.0;
    const double dirx = std::sin(rad), diry = std::cos(rad);
    const Vec2 shoulderL{0.30, 0.285}, shoulderR{0.70, 0.285};
    const Vec2 wristL{shoulderL.x - dirx * kArmLen, shoulderL.y + diry * kArmLen};
    const Vec2 wristR{shoulderR.x + dirx * kArmLen, shoulderR.y + diry * kArmLen};

    const bool garment_has_torso = g.category != Category::Bottom;
    const double cov = garment_has_torso ? sleeve_coverage(g.sleeve) : 0.0;

    // garment-local pattern frame
    Rect gframe = kTorsoGarment;
    if (g.category == Category::Dress) gframe = {0.24, 0.76, 0.26, kDressHemV};
    if (g.category == Category::Bottom) gframe = kBottomGarment;

    const double zoom = s.body_view == BodyView::Half ? 0.70 : 1.0;

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            // pixel -> body coordinates (half view zooms into the upper body)
            const double iu = (x + 0.5) / W, iv = (y + 0.5) / H;
            const double u = (iu - 0.5) * zoom + 0.5;
            const double v = iv * zoom;

            int owner = 0;  // 0 background, 1 body, 2 garment
            if (std::hypot(u - kHeadCx, v - kHeadCy) <= kHeadR) {
                owner = 1;
            } else {
                const double dl = capsule_dist(u, v, shoulderL, wristL);
                const double dr = capsule_dist(u, v, shoulderR, wristR);
                if (dl <= kArmRadius || dr <= kArmRadius) {
                    const double t = dl <= kArmRadius ? capsule_param(u, v, shoulderL, wristL)
                                                      : capsule_param(u, v, shoulderR, wristR);
                    owner = (t <= cov) ? 2 : 1;  // sleeve vs bare arm; arms occlude the torso
                } else if (garment_has_torso && kTorsoGarment.contains(u, v)) {
                    owner = 2;
                } else if (g.category == Category::Dress && in_dress_skirt(u, v)) {
                    owner = 2;
                } else if (g.category == Category::Bottom && kBottomGarment.contains(u, v)) {
                    owner = 2;
                } else if (kBodyTorso.contains(u, v) || kLegL.contains(u, v) ||
                           kLegR.contains(u, v)) {
                    owner = 1;
                }
            }

            Color col{s.background, s.background, s.background};
            if (owner == 1) col = {s.figure_tone, s.figure_tone, s.figure_tone};
            if (owner == 2) {
                const double gu = (u - gframe.u0) / (gframe.u1 - gframe.u0);
                const double gv = (v - gframe.v0) / (gframe.v1 - gframe.v0);
                col = pattern_color(g, gu, gv);
            }
            for (int c = 0; c < 3; ++c) person.at(c, y, x) = static_cast<T>(col[static_cast<size_t>(c)]);
            mask.at(0, y, x) = owner == 2 ? T(1) : T(0);
        }
    }
}

// renders the canonical flat-lay on white
template <typename T>
Tensor<T> render_flat_lay(const GarmentSpec& g, int H, int W) {
    using namespace synth_detail;
    g.validate();
    Tensor<T> img({3, H, W});

    const Rect top_rect{0.28, 0.72, 0.22, 0.62};
    const Rect bottom_rect{0.30, 0.70, 0.25, 0.75};
    const Rect dress_rect{0.30, 0.70, 0.12, 0.45};
    const double dress_hem = 0.85;

    Rect gframe = top_rect;
    if (g.category == Category::Bottom) gframe = bottom_rect;
    if (g.category == Category::Dress) gframe = {0.20, 0.80, 0.12, dress_hem};

    const bool sleeves = g.category != Category::Bottom && g.sleeve != Sleeve::None;
    const double slen = g.sleeve == Sleeve::Long ? 0.30 : 0.14;
    const double sy = g.category == Category::Dress ? dress_rect.v0 + 0.04 : top_rect.v0 + 0.04;
    const double sx0 = g.category == Category::Dress ? dress_rect.u0 : top_rect.u0;
    const double sx1 = g.category == Category::Dress ? dress_rect.u1 : top_rect.u1;
    const Vec2 shL{sx0 + 0.01, sy}, shR{sx1 - 0.01, sy};
    const Vec2 cuffL{shL.x - slen * 0.707, shL.y + slen * 0.707};
    const Vec2 cuffR{shR.x + slen * 0.707, shR.y + slen * 0.707};

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double u = (x + 0.5) / W, v = (y + 0.5) / H;
            bool inside = false;
            switch (g.category) {
                case Category::Top:
                    inside = top_rect.contains(u, v);
                    break;
                case Category::Bottom:
                    inside = bottom_rect.contains(u, v);
                    break;
                case Category::Dress: {
                    inside = dress_rect.contains(u, v);
                    if (!inside && v >= dress_rect.v1 && v <= dress_hem) {
                        const double t = (v - dress_rect.v1) / (dress_hem - dress_rect.v1);
                        inside = std::abs(u - 0.5) <= 0.20 + t * 0.10;
                    }
                    break;
                }
            }
            if (!inside && sleeves &&
                (capsule_dist(u, v, shL, cuffL) <= 0.05 || capsule_dist(u, v, shR, cuffR) <= 0.05))
                inside = true;

            Color col{1.0, 1.0, 1.0};
            if (inside) {
                const double gu = (u - gframe.u0) / (gframe.u1 - gframe.u0);
                const double gv = (v - gframe.v0) / (gframe.v1 - gframe.v0);
                col = pattern_color(g, gu, gv);
            }
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<T>(col[static_cast<size_t>(c)]);
        }
    }
    return img;
}

template <typename T>
TryOffPair<T> generate_pair(const GarmentSpec& g, const SceneSpec& s) {
    TryOffPair<T> pair;
    render_person(g, s, pair.person, pair.mask);
    pair.garment = render_flat_lay<T>(g, s.height, s.width);
    return pair;
}

// ---- random specs -------------------------------------------------------

inline Color hsv_to_rgb(double h, double sat, double val) {
    h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0) / 60.0;
    const int i = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    const double p = val * (1 - sat), q = val * (1 - sat * f), t = val * (1 - sat * (1 - f));
    switch (i) {
        case 0: return {val, t, p};
        case 1: return {q, val, p};
        case 2: return {p, val, t};
        case 3: return {p, q, val};
        case 4: return {t, p, val};
        default: return {val, p, q};
    }
}

inline GarmentSpec random_garment(Category cat, uint64_t seed) {
    Rng rng(seed);
    GarmentSpec g;
    g.category = cat;
    g.seed = seed;
    const double hue = rng.uniform() * 360.0;
    if (rng.uniform() < 0.25) {
        // near-white garment: barely distinguishable without the mask
        const double v = 0.93 + rng.uniform() * 0.06;
        g.base_color = hsv_to_rgb(hue, 0.04 * rng.uniform(), v);
    } else {
        g.base_color = hsv_to_rgb(hue, 0.45 + 0.5 * rng.uniform(), 0.35 + 0.55 * rng.uniform());
    }
    const int pk = rng.uniform_int(4);
    g.pattern.kind = static_cast<PatternKind>(pk);
    g.pattern.param = g.pattern.kind == PatternKind::Stripes ? 0.10 + 0.15 * rng.uniform()
                                                             : 0.12 + 0.12 * rng.uniform();
    g.pattern.pos_u = 0.30 + 0.40 * rng.uniform();
    g.pattern.pos_v = 0.25 + 0.30 * rng.uniform();
    g.pattern.color2 = hsv_to_rgb(hue + 120.0 + 120.0 * rng.uniform(), 0.5 + 0.4 * rng.uniform(),
                                  0.30 + 0.60 * rng.uniform());
    if (cat == Category::Bottom) {
        g.sleeve = Sleeve::None;
    } else {
        const Sleeve opts[3] = {Sleeve::Short, Sleeve::Long, Sleeve::None};
        g.sleeve = opts[rng.uniform_int(3)];
    }
    return g;
}

inline SceneSpec random_scene(BodyView view, int h, int w, uint64_t seed) {
    Rng rng(seed);
    SceneSpec s;
    s.body_view = view;
    s.height = h;
    s.width = w;
    s.seed = seed;
    s.pose_angle = 60.0 * rng.uniform();
    s.figure_tone = 0.35 + 0.20 * rng.uniform();
    s.background = 0.72 + 0.18 * rng.uniform();
    return s;
}

// ---- dataset ------------------------------------------------------------

struct ManifestRow {
    std::string id;
    Category category = Category::Top;
    BodyView body_view = BodyView::Full;
    uint64_t seed = 0;
};

inline std::string pair_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", index);
    return buf;
}

// categories and body views round-robin, so class counts stay within +-1
inline ManifestRow manifest_row(int index, uint64_t master_seed) {
    ManifestRow row;
    row.id = pair_id(index);
    const Category cats[3] = {Category::Top, Category::Bottom, Category::Dress};
    row.category = cats[index % 3];
    row.body_view = index % 2 == 0 ? BodyView::Full : BodyView::Half;
    row.seed = derive_seed(master_seed, row.id);
    return row;
}

template <typename T>
TryOffPair<T> generate_indexed_pair(uint64_t master_seed, int index, int h, int w,
                                    ManifestRow* row_out = nullptr) {
    const ManifestRow row = manifest_row(index, master_seed);
    const GarmentSpec g = random_garment(row.category, derive_seed(row.seed, "garment"));
    const SceneSpec s = random_scene(row.body_view, h, w, derive_seed(row.seed, "scene"));
    TryOffPair<T> pair = generate_pair<T>(g, s);
    pair.id = row.id;
    if (row_out) *row_out = row;
    return pair;
}

template <typename T>
std::vector<TryOffPair<T>> generate_pairs(int n, uint64_t master_seed, int h, int w) {
    std::vector<TryOffPair<T>> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(generate_indexed_pair<T>(master_seed, i, h, w));
    return out;
}

template <typename T>
std::vector<ManifestRow> generate_dataset(int n, uint64_t master_seed, const std::string& out_dir,
                                          int h, int w) {
    if (n < 1) throw ConfigError("dataset size must be >= 1");
    namespace fs = std::filesystem;
    std::error_code ec;
    for (const char* sub : {"image", "cloth", "cloth-mask"}) {
        fs::create_directories(fs::path(out_dir) / sub, ec);
        if (ec) throw IoError("cannot create directory '" + out_dir + "/" + sub + "'");
    }
    std::vector<ManifestRow> rows;
    rows.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        ManifestRow row;
        TryOffPair<T> pair = generate_indexed_pair<T>(master_seed, i, h, w, &row);
        write_png(out_dir + "/image/" + row.id + ".png", pair.person);
        write_png(out_dir + "/cloth/" + row.id + ".png", pair.garment);
        write_png(out_dir + "/cloth-mask/" + row.id + ".png", pair.mask);
        rows.push_back(row);
    }
    std::ofstream mf(out_dir + "/manifest.csv", std::ios::trunc);
    if (!mf) throw IoError("cannot write '" + out_dir + "/manifest.csv'");
    mf << "id,category,body_view,seed\n";
    for (const auto& r : rows)
        mf << r.id << "," << to_string(r.category) << "," << to_string(r.body_view) << ","
           << r.seed << "\n";
    return rows;
}

inline std::vector<ManifestRow> load_manifest(const std::string& dir) {
    std::ifstream f(dir + "/manifest.csv");
    std::vector<ManifestRow> rows;
    if (!f) return rows;  // manifest is optional metadata
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        size_t start = 0;
        while (true) {
            const size_t comma = line.find(',', start);
            cols.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (cols.size() != 4) throw IoError("malformed manifest row: " + line);
        ManifestRow r;
        r.id = cols[0];
        r.category = category_from_string(cols[1]);
        r.body_view = body_view_from_string(cols[2]);
        r.seed = std::stoull(cols[3]);
        rows.push_back(std::move(r));
    }
    return rows;
}

// loads image/, cloth/, cloth-mask/ triplets; ids come from image/ sorted
// lexicographically; masks binarize at 0.5
template <typename T>
std::vector<TryOffPair<T>> load_dataset(const std::string& dir, bool require_cloth = true) {
    namespace fs = std::filesystem;
    const fs::path image_dir = fs::path(dir) / "image";
    if (!fs::is_directory(image_dir))
        throw IoError("dataset directory '" + dir + "' has no image/ subdirectory");

    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(image_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            ids.push_back(entry.path().stem().string());
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw IoError("dataset directory '" + dir + "' holds no images");

    std::string missing;
    for (const auto& id : ids) {
        if (require_cloth && !fs::exists(fs::path(dir) / "cloth" / (id + ".png")))
            missing += " " + id + " (cloth)";
        if (!fs::exists(fs::path(dir) / "cloth-mask" / (id + ".png")))
            missing += " " + id + " (cloth-mask)";
    }
    if (!missing.empty()) throw IoError("missing counterpart files:" + missing);

    std::vector<TryOffPair<T>> pairs;
    pairs.reserve(ids.size());
    for (const auto& id : ids) {
        TryOffPair<T> p;
        p.id = id;
        p.person = read_png<T>(dir + "/image/" + id + ".png", 3);
        if (require_cloth || fs::exists(fs::path(dir) / "cloth" / (id + ".png")))
            p.garment = read_png<T>(dir + "/cloth/" + id + ".png", 3);
        p.mask = read_png<T>(dir + "/cloth-mask/" + id + ".png", 1);
        for (auto& v : p.mask.data) v = v >= T(0.5) ? T(1) : T(0);
        if (p.mask.dim(1) != p.person.dim(1) || p.mask.dim(2) != p.person.dim(2) ||
            (p.garment.numel() > 0 && !p.garment.same_shape(p.person)))
            throw ShapeError("dimension mismatch across files for id '" + id + "'");
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace tryoff
