#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "fwa/error.hpp"

namespace fwa {

// Row-major dense matrix. float in the production path, double in oracle mode.
template <typename T>
struct Dense2 {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Dense2() = default;
    Dense2(std::size_t r, std::size_t c, T fill = T(0))
        : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    const T& operator()(std::size_t i, std::size_t j) const {
        return data[i * cols + j];
    }

    T* row(std::size_t i) { return data.data() + i * cols; }
    const T* row(std::size_t i) const { return data.data() + i * cols; }

    bool empty() const { return data.empty(); }

    template <typename U>
    Dense2<U> cast() const {
        Dense2<U> out(rows, cols);
        for (std::size_t i = 0; i < data.size(); ++i)
            out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (const T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

// C = A * B^T with A: m x k, B: n x k (weight rows are output channels).
// The k loop is innermost and contiguous on both operands.
template <typename T>
void matmul_nt(const Dense2<T>& a, const Dense2<T>& b, Dense2<T>& c) {
    if (a.cols != b.cols) throw shape_error("matmul_nt: inner dims differ");
    c = Dense2<T>(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const T* ai = a.row(i);
        T* ci = c.row(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            const T* bj = b.row(j);
            T acc = T(0);
            for (std::size_t k = 0; k < a.cols; ++k) acc += ai[k] * bj[k];
            ci[j] = acc;
        }
    }
}

// Exact GELU (erf form, not the tanh approximation).
template <typename T>
T gelu(T x) {
    return T(0.5) * x *
           (T(1) + static_cast<T>(std::erf(static_cast<double>(x) /
                                           1.4142135623730951)));
}

template <typename T>
T gelu_grad(T x) {
    const double xd = static_cast<double>(x);
    const double cdf = 0.5 * (1.0 + std::erf(xd / 1.4142135623730951));
    const double pdf = std::exp(-0.5 * xd * xd) / 2.5066282746310002; // sqrt(2*pi)
    return static_cast<T>(cdf + xd * pdf);
}

// Pairwise (cascade) summation over a span; fixed association order so results
// are reproducible and accumulation error stays O(log n).
template <typename T>
T pairwise_sum(std::span<const T> v) {
    if (v.empty()) return T(0);
    if (v.size() <= 8) {
        T s = T(0);
        for (const T x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.subspan(0, half)) + pairwise_sum(v.subspan(half));
}

} // namespace fwa
