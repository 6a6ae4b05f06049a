#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <type_traits>
#include <vector>

#include "tryoff/common.hpp"
#include "tryoff/tensor.hpp"

// Layer primitives with hand-written backward passes. Every forward takes an
// optional cache that saves exactly what its backward needs; gradients for
// parameters accumulate (+=) into caller-provided tensors so a batch can sum
// over samples.

namespace tryoff::nn {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// ---------------------------------------------------------------- linear

template <typename T>
struct LinearCache {
    Tensor<T> x;  // [N, in]
};

// x [N,in], w [out,in], b [out] (optional, empty tensor = no bias) -> [N,out]
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         LinearCache<T>* cache = nullptr) {
    const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (w.dim(1) != in) throw ShapeError("linear: weight/in mismatch");
    Tensor<T> y({n, out});
    CMapRM<T> xm(x.ptr(), n, in);
    CMapRM<T> wm(w.ptr(), out, in);
    MapRM<T> ym(y.ptr(), n, out);
    ym.noalias() = xm * wm.transpose();
    if (b.numel() > 0)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out; ++j) y.data[static_cast<size_t>(i) * out + j] += b.data[j];
    if (cache) cache->x = x;
    return y;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& dy, const Tensor<T>& w, const LinearCache<T>& cache,
                          Tensor<T>& dw, std::type_identity_t<Tensor<T>>* db) {
    const int n = dy.dim(0), out = dy.dim(1), in = w.dim(1);
    CMapRM<T> dym(dy.ptr(), n, out);
    CMapRM<T> xm(cache.x.ptr(), n, in);
    CMapRM<T> wm(w.ptr(), out, in);
    MapRM<T> dwm(dw.ptr(), out, in);
    dwm.noalias() += dym.transpose() * xm;
    if (db)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < out; ++j) db->data[j] += dy.data[static_cast<size_t>(i) * out + j];
    Tensor<T> dx({n, in});
    MapRM<T> dxm(dx.ptr(), n, in);
    dxm.noalias() = dym * wm;
    return dx;
}

// ---------------------------------------------------------------- conv2d

template <typename T>
struct Conv2dCache {
    Tensor<T> col;  // [Cin*k*k, Hout*Wout]
    int cin = 0, h = 0, w = 0, hout = 0, wout = 0;
};

template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, int pad, Tensor<T>& col, int hout, int wout) {
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    T* cp = col.ptr();
    const int npos = hout * wout;
    for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                T* row = cp + (static_cast<size_t>(ci) * k * k + ky * k + kx) * npos;
                const T* xc = x.ptr() + static_cast<size_t>(ci) * h * w;
                if (stride == 1) {
                    // unit stride keeps each output row contiguous in the source,
                    // so the in-bounds span is one straight copy
                    const int lo = std::max(0, pad - kx);
                    const int hi = std::min(wout, w + pad - kx);
                    for (int oy = 0; oy < hout; ++oy) {
                        T* rp = row + static_cast<size_t>(oy) * wout;
                        const int iy = oy + ky - pad;
                        if (iy < 0 || iy >= h || lo >= hi) {
                            std::fill(rp, rp + wout, T(0));
                            continue;
                        }
                        std::fill(rp, rp + lo, T(0));
                        std::copy(xc + iy * w + lo + kx - pad, xc + iy * w + hi + kx - pad, rp + lo);
                        std::fill(rp + hi, rp + wout, T(0));
                    }
                    continue;
                }
                int p = 0;
                for (int oy = 0; oy < hout; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < wout; ++ox, ++p) {
                        const int ix = ox * stride + kx - pad;
                        row[p] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? xc[iy * w + ix] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_add(const Tensor<T>& col, int cin, int h, int w, int k, int stride, int pad,
                int hout, int wout, Tensor<T>& dx) {
    const T* cp = col.ptr();
    const int npos = hout * wout;
    for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const T* row = cp + (static_cast<size_t>(ci) * k * k + ky * k + kx) * npos;
                T* xc = dx.ptr() + static_cast<size_t>(ci) * h * w;
                if (stride == 1) {
                    // mirror of the unit-stride im2col copy: accumulate the
                    // in-bounds span without per-element bounds checks
                    const int lo = std::max(0, pad - kx);
                    const int hi = std::min(wout, w + pad - kx);
                    if (lo >= hi) continue;
                    for (int oy = 0; oy < hout; ++oy) {
                        const int iy = oy + ky - pad;
                        if (iy < 0 || iy >= h) continue;
                        const T* rp = row + static_cast<size_t>(oy) * wout;
                        T* xp = xc + iy * w + kx - pad;
                        for (int ox = lo; ox < hi; ++ox) xp[ox] += rp[ox];
                    }
                    continue;
                }
                int p = 0;
                for (int oy = 0; oy < hout; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < wout; ++ox, ++p) {
                        const int ix = ox * stride + kx - pad;
                        if (iy >= 0 && iy < h && ix >= 0 && ix < w) xc[iy * w + ix] += row[p];
                    }
                }
            }
}

// x [Cin,H,W], w [Cout,Cin,k,k], b [Cout] -> [Cout,Hout,Wout]
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         int stride, int pad, Conv2dCache<T>* cache = nullptr) {
    const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin) throw ShapeError("conv2d: input channels " + std::to_string(cin) +
                                          " do not match weight " + w.shape_str());
    const int hout = (h + 2 * pad - k) / stride + 1;
    const int wout = (wd + 2 * pad - k) / stride + 1;
    const int ckk = cin * k * k, npos = hout * wout;

    Tensor<T> col({ckk, npos});
    im2col(x, k, stride, pad, col, hout, wout);

    Tensor<T> y({cout, hout, wout});
    CMapRM<T> wm(w.ptr(), cout, ckk);
    CMapRM<T> cm(col.ptr(), ckk, npos);
    MapRM<T> ym(y.ptr(), cout, npos);
    ym.noalias() = wm * cm;
    if (b.numel() > 0)
        for (int co = 0; co < cout; ++co) {
            T* yc = y.ptr() + static_cast<size_t>(co) * npos;
            for (int p = 0; p < npos; ++p) yc[p] += b.data[co];
        }
    if (cache) {
        cache->col = std::move(col);
        cache->cin = cin;
        cache->h = h;
        cache->w = wd;
        cache->hout = hout;
        cache->wout = wout;
    }
    return y;
}

template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& dy, const Tensor<T>& w, int stride, int pad,
                          const Conv2dCache<T>& cache, Tensor<T>& dw, std::type_identity_t<Tensor<T>>* db) {
    const int cout = w.dim(0), k = w.dim(2);
    const int ckk = cache.cin * k * k;
    const int npos = cache.hout * cache.wout;
    CMapRM<T> dym(dy.ptr(), cout, npos);
    CMapRM<T> cm(cache.col.ptr(), ckk, npos);
    MapRM<T> dwm(dw.ptr(), cout, ckk);
    dwm.noalias() += dym * cm.transpose();
    if (db)
        for (int co = 0; co < cout; ++co) {
            const T* dyc = dy.ptr() + static_cast<size_t>(co) * npos;
            T acc = T(0);
            for (int p = 0; p < npos; ++p) acc += dyc[p];
            db->data[co] += acc;
        }
    Tensor<T> dcol({ckk, npos});
    CMapRM<T> wm(w.ptr(), cout, ckk);
    MapRM<T> dcm(dcol.ptr(), ckk, npos);
    dcm.noalias() = wm.transpose() * dym;
    Tensor<T> dx({cache.cin, cache.h, cache.w});
    col2im_add(dcol, cache.cin, cache.h, cache.w, k, stride, pad, cache.hout, cache.wout, dx);
    return dx;
}

// ---------------------------------------------------------------- group norm

template <typename T>
struct GroupNormCache {
    Tensor<T> xhat;            // normalized input [C,H,W]
    std::vector<double> rstd;  // per group
};

inline constexpr double kNormEps = 1e-5;

// x [C,H,W], gamma/beta [C]
template <typename T>
Tensor<T> group_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             int groups, GroupNormCache<T>* cache = nullptr) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (c % groups != 0) throw ShapeError("group_norm: channels " + std::to_string(c) +
                                          " not divisible by groups " + std::to_string(groups));
    const int cpg = c / groups;
    const int64_t gsize = static_cast<int64_t>(cpg) * h * w;
    Tensor<T> y({c, h, w});
    Tensor<T> xhat({c, h, w});
    std::vector<double> rstds(static_cast<size_t>(groups));
    for (int g = 0; g < groups; ++g) {
        const T* xg = x.ptr() + static_cast<size_t>(g) * gsize;
        double mean = 0.0;
        for (int64_t i = 0; i < gsize; ++i) mean += xg[i];
        mean /= static_cast<double>(gsize);
        double var = 0.0;
        for (int64_t i = 0; i < gsize; ++i) {
            double d = xg[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(gsize);
        const double rstd = 1.0 / std::sqrt(var + kNormEps);
        rstds[g] = rstd;
        T* xh = xhat.ptr() + static_cast<size_t>(g) * gsize;
        T* yg = y.ptr() + static_cast<size_t>(g) * gsize;
        for (int ci = 0; ci < cpg; ++ci) {
            const T gm = gamma.data[g * cpg + ci];
            const T bt = beta.data[g * cpg + ci];
            for (int64_t i = static_cast<int64_t>(ci) * h * w; i < static_cast<int64_t>(ci + 1) * h * w; ++i) {
                const T xn = static_cast<T>((xg[i] - mean) * rstd);
                xh[i] = xn;
                yg[i] = gm * xn + bt;
            }
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstds);
    }
    return y;
}

template <typename T>
Tensor<T> group_norm_backward(const Tensor<T>& dy, const Tensor<T>& gamma, int groups,
                              const GroupNormCache<T>& cache, Tensor<T>& dgamma, Tensor<T>& dbeta) {
    const int c = dy.dim(0), h = dy.dim(1), w = dy.dim(2);
    const int cpg = c / groups;
    const int64_t gsize = static_cast<int64_t>(cpg) * h * w;
    Tensor<T> dx({c, h, w});
    for (int g = 0; g < groups; ++g) {
        const T* dyg = dy.ptr() + static_cast<size_t>(g) * gsize;
        const T* xh = cache.xhat.ptr() + static_cast<size_t>(g) * gsize;
        T* dxg = dx.ptr() + static_cast<size_t>(g) * gsize;
        const double rstd = cache.rstd[g];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int ci = 0; ci < cpg; ++ci) {
            const double gm = gamma.data[g * cpg + ci];
            double dgm = 0.0, dbt = 0.0;
            for (int64_t i = static_cast<int64_t>(ci) * h * w; i < static_cast<int64_t>(ci + 1) * h * w; ++i) {
                const double dxh = gm * dyg[i];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * xh[i];
                dgm += static_cast<double>(dyg[i]) * xh[i];
                dbt += dyg[i];
            }
            dgamma.data[g * cpg + ci] += static_cast<T>(dgm);
            dbeta.data[g * cpg + ci] += static_cast<T>(dbt);
        }
        const double mean_dxhat = sum_dxhat / static_cast<double>(gsize);
        const double mean_dxhat_xhat = sum_dxhat_xhat / static_cast<double>(gsize);
        for (int ci = 0; ci < cpg; ++ci) {
            const double gm = gamma.data[g * cpg + ci];
            for (int64_t i = static_cast<int64_t>(ci) * h * w; i < static_cast<int64_t>(ci + 1) * h * w; ++i) {
                const double dxh = gm * dyg[i];
                dxg[i] = static_cast<T>(rstd * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat));
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------- layer norm

template <typename T>
struct LayerNormCache {
    Tensor<T> xhat;            // [N,C]
    std::vector<double> rstd;  // per row
};

// x [N,C], gamma/beta [C]
template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             LayerNormCache<T>* cache = nullptr) {
    const int n = x.dim(0), c = x.dim(1);
    Tensor<T> y({n, c});
    Tensor<T> xhat({n, c});
    std::vector<double> rstds(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const T* xi = x.ptr() + static_cast<size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += xi[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            double d = xi[j] - mean;
            var += d * d;
        }
        var /= c;
        const double rstd = 1.0 / std::sqrt(var + kNormEps);
        rstds[i] = rstd;
        T* xh = xhat.ptr() + static_cast<size_t>(i) * c;
        T* yi = y.ptr() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
            const T xn = static_cast<T>((xi[j] - mean) * rstd);
            xh[j] = xn;
            yi[j] = gamma.data[j] * xn + beta.data[j];
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstds);
    }
    return y;
}

template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& gamma,
                              const LayerNormCache<T>& cache, Tensor<T>& dgamma, Tensor<T>& dbeta) {
    const int n = dy.dim(0), c = dy.dim(1);
    Tensor<T> dx({n, c});
    for (int i = 0; i < n; ++i) {
        const T* dyi = dy.ptr() + static_cast<size_t>(i) * c;
        const T* xh = cache.xhat.ptr() + static_cast<size_t>(i) * c;
        T* dxi = dx.ptr() + static_cast<size_t>(i) * c;
        const double rstd = cache.rstd[i];
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < c; ++j) {
            const double dxh = static_cast<double>(gamma.data[j]) * dyi[j];
            m1 += dxh;
            m2 += dxh * xh[j];
            dgamma.data[j] += static_cast<T>(static_cast<double>(dyi[j]) * xh[j]);
            dbeta.data[j] += dyi[j];
        }
        m1 /= c;
        m2 /= c;
        for (int j = 0; j < c; ++j) {
            const double dxh = static_cast<double>(gamma.data[j]) * dyi[j];
            dxi[j] = static_cast<T>(rstd * (dxh - m1 - xh[j] * m2));
        }
    }
    return dx;
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> silu_forward(const Tensor<T>& x, Tensor<T>* saved_x = nullptr) {
    Tensor<T> y;
    y.shape = x.shape;
    y.data.resize(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i) {
        const double v = x.data[i];
        y.data[i] = static_cast<T>(v / (1.0 + std::exp(-v)));
    }
    if (saved_x) *saved_x = x;
    return y;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& dy, const Tensor<T>& x) {
    Tensor<T> dx;
    dx.shape = dy.shape;
    dx.data.resize(dy.data.size());
    for (size_t i = 0; i < dy.data.size(); ++i) {
        const double v = x.data[i];
        const double s = 1.0 / (1.0 + std::exp(-v));
        dx.data[i] = static_cast<T>(static_cast<double>(dy.data[i]) * (s * (1.0 + v * (1.0 - s))));
    }
    return dx;
}

template <typename T>
Tensor<T> gelu_forward(const Tensor<T>& x, Tensor<T>* saved_x = nullptr) {
    Tensor<T> y;
    y.shape = x.shape;
    y.data.resize(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i) {
        const double v = x.data[i];
        y.data[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244)));
    }
    if (saved_x) *saved_x = x;
    return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& dy, const Tensor<T>& x) {
    Tensor<T> dx;
    dx.shape = dy.shape;
    dx.data.resize(dy.data.size());
    for (size_t i = 0; i < dy.data.size(); ++i) {
        const double v = x.data[i];
        const double phi = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
        const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014326779;
        dx.data[i] = static_cast<T>(static_cast<double>(dy.data[i]) * (phi + v * pdf));
    }
    return dx;
}

// ---------------------------------------------------------------- attention

template <typename T>
struct AttentionCoreCache {
    Tensor<T> q, k, v;     // [N, C]
    Tensor<T> probs;       // [heads, Nq, Nk]
};

// scaled dot-product attention over already-projected q,k,v [N,C] split into
// heads along the channel axis; returns [Nq, C]
template <typename T>
Tensor<T> attention_core_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                 int heads, AttentionCoreCache<T>* cache = nullptr) {
    const int nq = q.dim(0), c = q.dim(1), nk = k.dim(0);
    if (c % heads != 0) throw ShapeError("attention: channels not divisible by heads");
    const int dh = c / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor<T> out({nq, c});
    Tensor<T> probs({heads, nq, nk});
    MatRM<T> s(nq, nk);
    for (int hd = 0; hd < heads; ++hd) {
        CMapRM<T> qh(q.ptr(), nq, c);
        CMapRM<T> kh(k.ptr(), nk, c);
        CMapRM<T> vh(v.ptr(), nk, c);
        auto qb = qh.block(0, hd * dh, nq, dh);
        auto kb = kh.block(0, hd * dh, nk, dh);
        auto vb = vh.block(0, hd * dh, nk, dh);
        s.noalias() = qb * kb.transpose() * static_cast<T>(scale);
        // softmax rows with max subtraction
        for (int i = 0; i < nq; ++i) {
            T mx = s(i, 0);
            for (int j = 1; j < nk; ++j) mx = std::max(mx, s(i, j));
            double denom = 0.0;
            for (int j = 0; j < nk; ++j) {
                const double e = std::exp(static_cast<double>(s(i, j) - mx));
                probs.data[(static_cast<size_t>(hd) * nq + i) * nk + j] = static_cast<T>(e);
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (int j = 0; j < nk; ++j)
                probs.data[(static_cast<size_t>(hd) * nq + i) * nk + j] =
                    static_cast<T>(probs.data[(static_cast<size_t>(hd) * nq + i) * nk + j] * inv);
        }
        CMapRM<T> pm(probs.ptr() + static_cast<size_t>(hd) * nq * nk, nq, nk);
        MapRM<T> om(out.ptr(), nq, c);
        om.block(0, hd * dh, nq, dh).noalias() = pm * vb;
    }
    if (cache) {
        cache->q = q;
        cache->k = k;
        cache->v = v;
        cache->probs = std::move(probs);
    }
    return out;
}

template <typename T>
void attention_core_backward(const Tensor<T>& dout, int heads, const AttentionCoreCache<T>& cache,
                             Tensor<T>& dq, Tensor<T>& dk, Tensor<T>& dv) {
    const int nq = cache.q.dim(0), c = cache.q.dim(1), nk = cache.k.dim(0);
    const int dh = c / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    dq = Tensor<T>({nq, c});
    dk = Tensor<T>({nk, c});
    dv = Tensor<T>({nk, c});
    MatRM<T> dp(nq, nk), ds(nq, nk);
    for (int hd = 0; hd < heads; ++hd) {
        CMapRM<T> pm(cache.probs.ptr() + static_cast<size_t>(hd) * nq * nk, nq, nk);
        CMapRM<T> dom(dout.ptr(), nq, c);
        CMapRM<T> qm(cache.q.ptr(), nq, c);
        CMapRM<T> km(cache.k.ptr(), nk, c);
        CMapRM<T> vm(cache.v.ptr(), nk, c);
        auto dob = dom.block(0, hd * dh, nq, dh);
        auto qb = qm.block(0, hd * dh, nq, dh);
        auto kb = km.block(0, hd * dh, nk, dh);
        auto vb = vm.block(0, hd * dh, nk, dh);

        MapRM<T> dvm(dv.ptr(), nk, c);
        dvm.block(0, hd * dh, nk, dh).noalias() = pm.transpose() * dob;

        dp.noalias() = dob * vb.transpose();
        // softmax jacobian: ds = p .* (dp - rowsum(dp .* p))
        for (int i = 0; i < nq; ++i) {
            double dot = 0.0;
            for (int j = 0; j < nk; ++j) dot += static_cast<double>(dp(i, j)) * pm(i, j);
            for (int j = 0; j < nk; ++j)
                ds(i, j) = static_cast<T>(pm(i, j) * (static_cast<double>(dp(i, j)) - dot));
        }
        MapRM<T> dqm(dq.ptr(), nq, c);
        MapRM<T> dkm(dk.ptr(), nk, c);
        dqm.block(0, hd * dh, nq, dh).noalias() = ds * kb * static_cast<T>(scale);
        dkm.block(0, hd * dh, nk, dh).noalias() = ds.transpose() * qb * static_cast<T>(scale);
    }
}

// ---------------------------------------------------------------- resampling

// [C,H,W] -> [C,2H,2W]
template <typename T>
Tensor<T> upsample_nearest2x_forward(const Tensor<T>& x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<T> y({c, 2 * h, 2 * w});
    for (int ci = 0; ci < c; ++ci)
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix) {
                const T v = x.at(ci, iy, ix);
                y.at(ci, 2 * iy, 2 * ix) = v;
                y.at(ci, 2 * iy, 2 * ix + 1) = v;
                y.at(ci, 2 * iy + 1, 2 * ix) = v;
                y.at(ci, 2 * iy + 1, 2 * ix + 1) = v;
            }
    return y;
}

template <typename T>
Tensor<T> upsample_nearest2x_backward(const Tensor<T>& dy) {
    const int c = dy.dim(0), h = dy.dim(1) / 2, w = dy.dim(2) / 2;
    Tensor<T> dx({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < w; ++ix)
                dx.at(ci, iy, ix) = dy.at(ci, 2 * iy, 2 * ix) + dy.at(ci, 2 * iy, 2 * ix + 1) +
                                    dy.at(ci, 2 * iy + 1, 2 * ix) + dy.at(ci, 2 * iy + 1, 2 * ix + 1);
    return dx;
}

// ---------------------------------------------------------------- embeddings

// Sinusoidal timestep embedding: first half sine, second half cosine, with
// geometrically spaced frequencies from 1 down to 1/10000.
template <typename T>
Tensor<T> sinusoidal_embedding(int t, int dim) {
    const int half = dim / 2;
    Tensor<T> e({1, dim});
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e.data[i] = static_cast<T>(std::sin(t * freq));
        e.data[half + i] = static_cast<T>(std::cos(t * freq));
    }
    return e;
}

// ---------------------------------------------------------------- spatial <-> tokens

// [C,H,W] -> [H*W, C]
template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<T> t({h * w, c});
    for (int ci = 0; ci < c; ++ci) {
        const T* xc = x.ptr() + static_cast<size_t>(ci) * h * w;
        for (int p = 0; p < h * w; ++p) t.data[static_cast<size_t>(p) * c + ci] = xc[p];
    }
    return t;
}

// [H*W, C] -> [C,H,W]
template <typename T>
Tensor<T> from_tokens(const Tensor<T>& t, int h, int w) {
    const int c = t.dim(1);
    Tensor<T> x({c, h, w});
    for (int ci = 0; ci < c; ++ci) {
        T* xc = x.ptr() + static_cast<size_t>(ci) * h * w;
        for (int p = 0; p < h * w; ++p) xc[p] = t.data[static_cast<size_t>(p) * c + ci];
    }
    return x;
}

}  // namespace tryoff::nn
