#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tryoff/common.hpp"
#include "tryoff/rng.hpp"

namespace tryoff {

// Dense row-major tensor. Shapes are small (<= 4 dims in practice), data is
// contiguous; all layer code indexes it directly.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, T value) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), value);
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = static_cast<T>(rng.normal());
        return t;
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    // [C,H,W] accessors
    T& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    T at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    // [H,W] accessors
    T& at(int y, int x) { return data[static_cast<size_t>(y) * shape[1] + x]; }
    T at(int y, int x) const { return data[static_cast<size_t>(y) * shape[1] + x]; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        T s = T(0);
        for (const T& v : data) s += v;
        return std::isfinite(static_cast<double>(s));
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }
};

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<int>& s, const std::string& what) {
    if (t.shape != s) {
        Tensor<T> want;
        want.shape = s;
        throw ShapeError(what + ": expected shape " + want.shape_str() + ", got " + t.shape_str());
    }
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

template <typename T>
double mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("mean_abs_diff: shape mismatch");
    if (a.numel() == 0) return 0.0;
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        s += std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
    return s / static_cast<double>(a.numel());
}

}  // namespace tryoff
