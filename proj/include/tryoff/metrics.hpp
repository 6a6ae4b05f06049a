#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tryoff/common.hpp"
#include "tryoff/image_io.hpp"
#include "tryoff/nn.hpp"
#include "tryoff/rng.hpp"
#include "tryoff/sampler.hpp"
#include "tryoff/tensor.hpp"

namespace tryoff {

// ---------------------------------------------------------------- ssim

inline std::vector<double> gaussian_window(int n, double sigma) {
    std::vector<double> w(static_cast<size_t>(n));
    const double c = (n - 1) / 2.0;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        w[static_cast<size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
        sum += w[static_cast<size_t>(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// windowed structural similarity, dynamic range 1, averaged over channels and
// all fully-interior window positions
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, int window = 11, double k1 = 0.01,
            double k2 = 0.03, double sigma = 1.5) {
    if (!a.same_shape(b))
        throw ShapeError("ssim: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    if (a.ndim() != 3) throw ShapeError("ssim expects [C,H,W], got " + a.shape_str());
    if (window < 1 || window % 2 == 0) throw ConfigError("ssim window must be odd and >= 1");
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    if (h < window || w < window)
        throw ShapeError("ssim: image " + a.shape_str() + " smaller than window " +
                         std::to_string(window));
    const std::vector<double> g = gaussian_window(window, sigma);
    const double c1 = k1 * k1, c2 = k2 * k2;

    double total = 0.0;
    int64_t count = 0;
    for (int ci = 0; ci < c; ++ci)
        for (int oy = 0; oy + window <= h; ++oy)
            for (int ox = 0; ox + window <= w; ++ox) {
                double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
                for (int wy = 0; wy < window; ++wy)
                    for (int wx = 0; wx < window; ++wx) {
                        const double wt = g[static_cast<size_t>(wy)] * g[static_cast<size_t>(wx)];
                        const double va = a.at(ci, oy + wy, ox + wx);
                        const double vb = b.at(ci, oy + wy, ox + wx);
                        mu_a += wt * va;
                        mu_b += wt * vb;
                        aa += wt * va * va;
                        bb += wt * vb * vb;
                        ab += wt * va * vb;
                    }
                const double var_a = aa - mu_a * mu_a;
                const double var_b = bb - mu_b * mu_b;
                const double cov = ab - mu_a * mu_b;
                total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                         ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                ++count;
            }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------- features

struct FeatureExtractor {
    enum class Kind { RandomConv, External };
    Kind kind = Kind::RandomConv;
    uint64_t seed = 0;
    int dim = 64;
    std::string file;  // External: CSV matrix, one feature row per image
};

namespace detail {

inline std::vector<Tensor<double>> random_conv_weights(uint64_t seed, int dim) {
    const int chans[4] = {3, 16, 32, dim};
    std::vector<Tensor<double>> ws;
    for (int l = 0; l < 3; ++l) {
        Rng rng(derive_seed(seed, "features:l" + std::to_string(l)));
        Tensor<double> w({chans[l + 1], chans[l], 3, 3});
        const double std = 1.0 / std::sqrt(static_cast<double>(chans[l]) * 9.0);
        for (auto& v : w.data) v = rng.normal() * std;
        ws.push_back(std::move(w));
    }
    return ws;
}

}  // namespace detail

// deterministic stand-in for a pretrained feature network: three fixed-seed
// stride-2 convolutions with ReLU, then global average pooling
template <typename T>
Eigen::MatrixXd extract_features(const std::vector<Tensor<T>>& images,
                                 const FeatureExtractor& fx) {
    if (images.empty()) throw ConfigError("extract_features: empty image set");
    if (fx.kind == FeatureExtractor::Kind::External) {
        std::ifstream f(fx.file);
        if (!f) throw IoError("cannot open feature file '" + fx.file + "'");
        std::vector<std::vector<double>> rows;
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            std::vector<double> row;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
            rows.push_back(std::move(row));
        }
        if (rows.size() != images.size())
            throw ShapeError("feature file has " + std::to_string(rows.size()) + " rows for " +
                             std::to_string(images.size()) + " images");
        Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                          static_cast<Eigen::Index>(rows[0].size()));
        for (size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != rows[0].size()) throw ShapeError("ragged feature file");
            for (size_t j = 0; j < rows[i].size(); ++j)
                m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
        }
        return m;
    }

    const auto ws = detail::random_conv_weights(fx.seed, fx.dim);
    const Tensor<double> no_bias;
    Eigen::MatrixXd feats(static_cast<Eigen::Index>(images.size()), fx.dim);
    for (size_t i = 0; i < images.size(); ++i) {
        if (images[i].ndim() != 3 || images[i].dim(0) != 3)
            throw ShapeError("extract_features expects [3,H,W] images");
        Tensor<double> h = images[i].template cast<double>();
        for (const auto& w : ws) {
            h = nn::conv2d_forward(h, w, no_bias, 2, 1);
            for (auto& v : h.data) v = std::max(v, 0.0);
        }
        const int hw = h.dim(1) * h.dim(2);
        for (int d = 0; d < fx.dim; ++d) {
            double acc = 0.0;
            const double* p = h.ptr() + static_cast<size_t>(d) * hw;
            for (int j = 0; j < hw; ++j) acc += p[j];
            feats(static_cast<Eigen::Index>(i), d) = acc / hw;
        }
    }
    return feats;
}

// ---------------------------------------------------------------- fid / kid

namespace detail {

// PSD square root by eigendecomposition with negative eigenvalues clamped
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd lam = es.eigenvalues();
    for (Eigen::Index i = 0; i < lam.size(); ++i) lam(i) = std::sqrt(std::max(lam(i), 0.0));
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

inline void sample_moments(const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const auto n = x.rows();
    mu = x.colwise().mean();
    Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / static_cast<double>(n - 1);
}

}  // namespace detail

inline double fid_from_moments(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                               const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b) {
    const Eigen::MatrixXd sqrt_a = detail::psd_sqrt(cov_a);
    const Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()));
    double tr_sqrt = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
        tr_sqrt += std::sqrt(std::max(es.eigenvalues()(i), 0.0));
    const double d2 = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    return std::max(d2, 0.0);
}

inline double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() < 2 || b.rows() < 2) throw ConfigError("fid needs at least 2 samples per side");
    if (a.cols() != b.cols()) throw ShapeError("fid: feature dims differ");
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    detail::sample_moments(a, mu_a, cov_a);
    detail::sample_moments(b, mu_b, cov_b);
    return fid_from_moments(mu_a, cov_a, mu_b, cov_b);
}

// unbiased squared MMD with polynomial kernel (x.y/d + 1)^3; within-set sums
// exclude the diagonal
inline double kid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const auto n = a.rows(), m = b.rows();
    if (n < 2 || m < 2) throw ConfigError("kid needs at least 2 samples per side");
    if (a.cols() != b.cols()) throw ShapeError("kid: feature dims differ");
    const double d = static_cast<double>(a.cols());
    auto kernel = [d](double dot) {
        const double u = dot / d + 1.0;
        return u * u * u;
    };
    const Eigen::MatrixXd kaa = a * a.transpose();
    const Eigen::MatrixXd kbb = b * b.transpose();
    const Eigen::MatrixXd kab = a * b.transpose();
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            if (i != j) saa += kernel(kaa(i, j));
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            if (i != j) sbb += kernel(kbb(i, j));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < m; ++j) sab += kernel(kab(i, j));
    return saa / (static_cast<double>(n) * (n - 1)) + sbb / (static_cast<double>(m) * (m - 1)) -
           2.0 * sab / (static_cast<double>(n) * m);
}

// ---------------------------------------------------------------- reports

struct CategoryMetrics {
    double ssim = 0.0;
    double fid = std::numeric_limits<double>::quiet_NaN();  // NaN when n < 2
    int n = 0;
};

struct MetricReport {
    uint64_t seed = 0;
    double ssim = 0.0;
    double fid = 0.0;
    double kid = 0.0;
    int n_images = 0;
    std::map<std::string, CategoryMetrics> per_category;
};

// categories may be empty (no breakdown) or one label per image
template <typename T>
MetricReport compute_report(const std::vector<Tensor<T>>& generated,
                            const std::vector<Tensor<T>>& truth,
                            const std::vector<std::string>& categories,
                            const FeatureExtractor& fx, uint64_t seed = 0) {
    if (generated.size() != truth.size() || generated.empty())
        throw ConfigError("compute_report: need equal nonempty image sets");
    if (!categories.empty() && categories.size() != generated.size())
        throw ConfigError("compute_report: categories must match image count");
    if (generated.size() < 2) throw ConfigError("fid/kid need at least 2 images");

    // common resolution: generated images are resized onto the ground truth
    std::vector<Tensor<T>> gen;
    gen.reserve(generated.size());
    for (size_t i = 0; i < generated.size(); ++i)
        gen.push_back(generated[i].same_shape(truth[i])
                          ? generated[i]
                          : bilinear_resize(generated[i], truth[i].dim(1), truth[i].dim(2)));

    MetricReport rep;
    rep.seed = seed;
    rep.n_images = static_cast<int>(gen.size());
    double s = 0.0;
    for (size_t i = 0; i < gen.size(); ++i) s += ssim(gen[i], truth[i]);
    rep.ssim = s / static_cast<double>(gen.size());

    const Eigen::MatrixXd fg = extract_features(gen, fx);
    const Eigen::MatrixXd ft = extract_features(truth, fx);
    rep.fid = fid(fg, ft);
    rep.kid = kid(fg, ft);

    if (!categories.empty()) {
        std::map<std::string, std::vector<size_t>> by_cat;
        for (size_t i = 0; i < categories.size(); ++i) by_cat[categories[i]].push_back(i);
        for (const auto& [cat, idx] : by_cat) {
            CategoryMetrics cm;
            cm.n = static_cast<int>(idx.size());
            double cs = 0.0;
            for (size_t i : idx) cs += ssim(gen[i], truth[i]);
            cm.ssim = cs / static_cast<double>(idx.size());
            if (idx.size() >= 2) {
                Eigen::MatrixXd cg(static_cast<Eigen::Index>(idx.size()), fg.cols());
                Eigen::MatrixXd ct(static_cast<Eigen::Index>(idx.size()), ft.cols());
                for (size_t r = 0; r < idx.size(); ++r) {
                    cg.row(static_cast<Eigen::Index>(r)) = fg.row(static_cast<Eigen::Index>(idx[r]));
                    ct.row(static_cast<Eigen::Index>(r)) = ft.row(static_cast<Eigen::Index>(idx[r]));
                }
                cm.fid = fid(cg, ct);
            }
            rep.per_category[cat] = cm;
        }
    }
    return rep;
}

// ---------------------------------------------------------------- seed sweep

// evaluates the trained model under each sampling seed and ranks the reports
// by FID ascending (best first)
template <typename T>
std::vector<MetricReport> seed_sweep(const UNet<T>& net, const Codec<T>& codec,
                                     const NoiseSchedule& sched,
                                     const std::vector<TryOffPair<T>>& pairs,
                                     const CanvasOptions& copts, int steps, double eta,
                                     const std::vector<uint64_t>& seeds,
                                     const FeatureExtractor& fx,
                                     const std::vector<std::string>& categories = {}) {
    if (pairs.size() < 2) throw ConfigError("seed sweep needs at least 2 eval pairs");
    if (seeds.empty()) throw ConfigError("seed sweep needs at least one seed");
    std::vector<Tensor<T>> truth;
    truth.reserve(pairs.size());
    for (const auto& p : pairs) {
        if (p.garment.numel() == 0)
            throw ConfigError("seed sweep pair '" + p.id + "' has no ground-truth garment");
        truth.push_back(p.garment);
    }
    std::vector<MetricReport> reports;
    reports.reserve(seeds.size());
    for (uint64_t seed : seeds) {
        std::vector<Tensor<T>> gen = batch_generate(net, codec, sched, pairs, copts, steps, eta, seed);
        reports.push_back(compute_report(gen, truth, categories, fx, seed));
    }
    std::stable_sort(reports.begin(), reports.end(),
                     [](const MetricReport& a, const MetricReport& b) { return a.fid < b.fid; });
    return reports;
}

inline std::string sweep_to_csv(const std::vector<MetricReport>& reports) {
    std::ostringstream os;
    os << "seed,ssim,fid,kid,n_images\n";
    os.precision(12);
    for (const auto& r : reports)
        os << r.seed << "," << r.ssim << "," << r.fid << "," << r.kid << "," << r.n_images << "\n";
    return os.str();
}

inline nlohmann::json report_to_json(const MetricReport& r) {
    nlohmann::json j = {{"seed", r.seed}, {"ssim", r.ssim}, {"fid", r.fid},
                        {"kid", r.kid},   {"n_images", r.n_images}};
    if (!r.per_category.empty()) {
        nlohmann::json pc;
        for (const auto& [cat, cm] : r.per_category) {
            nlohmann::json e = {{"ssim", cm.ssim}, {"n", cm.n}};
            if (!std::isnan(cm.fid)) e["fid"] = cm.fid;
            pc[cat] = e;
        }
        j["per_category"] = pc;
    }
    return j;
}

// best-3 / worst-3 summary around the full ranking
inline nlohmann::json sweep_to_json(const std::vector<MetricReport>& reports) {
    nlohmann::json ranking = nlohmann::json::array();
    for (const auto& r : reports) ranking.push_back(report_to_json(r));
    nlohmann::json best = nlohmann::json::array(), worst = nlohmann::json::array();
    const size_t k = std::min<size_t>(3, reports.size());
    for (size_t i = 0; i < k; ++i) best.push_back(report_to_json(reports[i]));
    for (size_t i = reports.size() - k; i < reports.size(); ++i)
        worst.push_back(report_to_json(reports[i]));
    return {{"ranking", ranking}, {"best_seeds", best}, {"worst_seeds", worst}};
}

}  // namespace tryoff
