#pragma once

// Brute-force reference implementations used by the test suites. These stay
// deliberately naive and share no computation code with the primary modules
// they check; only type definitions cross the boundary.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <tuple>
#include <vector>

#include "fwa/dense.hpp"
#include "fwa/flatten.hpp"
#include "fwa/kernels.hpp"

namespace fwa::oracle {

struct OracleConfig {
    double fd_step = 1e-3;
    double grad_rel_tol = 1e-4;
    double attn_rel_tol = 1e-5;
};

// ---------------------------------------------------------------------------
// Sorting
// ---------------------------------------------------------------------------

// Comparison sort over explicit 5-tuples. Stability of std::stable_sort
// supplies the original-index tie-break.
inline std::vector<int> oracle_sort(std::span<const std::array<double, 2>> coords,
                                    const flatten::WindowSpec& spec) {
    using Key = std::tuple<std::int64_t, std::int64_t, double, double>;
    std::vector<Key> keys(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) {
        double cx = coords[i][0];
        double cy = coords[i][1];
        if (spec.shift) {
            cx += spec.w_x / 2.0;
            cy += spec.w_y / 2.0;
        }
        double cm = cx, cn = cy, wm = spec.w_x, wn = spec.w_y;
        if (spec.major_axis == flatten::Axis::Y) {
            std::swap(cm, cn);
            std::swap(wm, wn);
        }
        const double fm = std::floor(cm / wm);
        const double fn = std::floor(cn / wn);
        keys[i] = {static_cast<std::int64_t>(fm), static_cast<std::int64_t>(fn),
                   cm - fm * wm, cn - fn * wn};
    }
    std::vector<int> perm(coords.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::stable_sort(perm.begin(), perm.end(),
                     [&keys](int a, int b) { return keys[a] < keys[b]; });
    return perm;
}

// ---------------------------------------------------------------------------
// Window counting
// ---------------------------------------------------------------------------

inline std::map<std::pair<std::int64_t, std::int64_t>, int> count_windows(
    std::span<const std::array<double, 2>> coords,
    const flatten::WindowSpec& spec) {
    std::map<std::pair<std::int64_t, std::int64_t>, int> counts;
    for (const auto& c : coords) {
        double x = c[0], y = c[1];
        if (spec.shift) {
            x += spec.w_x / 2.0;
            y += spec.w_y / 2.0;
        }
        const auto wx = static_cast<std::int64_t>(std::floor(x / spec.w_x));
        const auto wy = static_cast<std::int64_t>(std::floor(y / spec.w_y));
        ++counts[{wx, wy}];
    }
    return counts;
}

// ---------------------------------------------------------------------------
// Dense attention (materialized scores)
// ---------------------------------------------------------------------------

// Reference block attention: explicit G x G score matrix per head, explicit
// softmax, all in 64-bit.
inline Dense2<double> oracle_attention(const Dense2<double>& f,
                                       const Dense2<double>& pe,
                                       const kernels::AttnParams<double>& p,
                                       int n_groups) {
    const std::size_t d = static_cast<std::size_t>(p.d_model);
    const std::size_t rows = f.rows;
    const std::size_t gs = n_groups > 0 ? rows / static_cast<std::size_t>(n_groups) : 0;
    const std::size_t heads = static_cast<std::size_t>(p.n_heads);
    const std::size_t hd = d / heads;

    // LN (two-pass) + pe
    Dense2<double> h(rows, d);
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += f(r, i);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            var += (f(r, i) - mean) * (f(r, i) - mean);
        var /= static_cast<double>(d);
        const double denom = std::sqrt(var + 1e-5);
        for (std::size_t i = 0; i < d; ++i)
            h(r, i) = p.ln1_gamma[i] * ((f(r, i) - mean) / denom) +
                      p.ln1_beta[i] + pe(r, i);
    }

    // Three independent projections (the unpacked route).
    Dense2<double> q(rows, d), k(rows, d), v(rows, d);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) {
            double aq = p.b_qkv[j], ak = p.b_qkv[d + j], av = p.b_qkv[2 * d + j];
            for (std::size_t c = 0; c < d; ++c) {
                aq += h(r, c) * p.w_qkv(j, c);
                ak += h(r, c) * p.w_qkv(d + j, c);
                av += h(r, c) * p.w_qkv(2 * d + j, c);
            }
            q(r, j) = aq;
            k(r, j) = ak;
            v(r, j) = av;
        }

    Dense2<double> cat(rows, d);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int g = 0; g < n_groups; ++g) {
        const std::size_t base = static_cast<std::size_t>(g) * gs;
        for (std::size_t head = 0; head < heads; ++head) {
            const std::size_t off = head * hd;
            Dense2<double> scores(gs, gs);
            for (std::size_t i = 0; i < gs; ++i)
                for (std::size_t j = 0; j < gs; ++j) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < hd; ++c)
                        acc += q(base + i, off + c) * k(base + j, off + c);
                    scores(i, j) = acc * scale;
                }
            for (std::size_t i = 0; i < gs; ++i) {
                double mx = scores(i, 0);
                for (std::size_t j = 1; j < gs; ++j) mx = std::max(mx, scores(i, j));
                double sum = 0.0;
                for (std::size_t j = 0; j < gs; ++j) {
                    scores(i, j) = std::exp(scores(i, j) - mx);
                    sum += scores(i, j);
                }
                for (std::size_t j = 0; j < gs; ++j) scores(i, j) /= sum;
            }
            for (std::size_t i = 0; i < gs; ++i)
                for (std::size_t c = 0; c < hd; ++c) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < gs; ++j)
                        acc += scores(i, j) * v(base + j, off + c);
                    cat(base + i, off + c) = acc;
                }
        }
    }

    Dense2<double> out(rows, d);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) {
            double acc = p.b_out[j];
            for (std::size_t c = 0; c < d; ++c) acc += cat(r, c) * p.w_out(j, c);
            out(r, j) = f(r, j) + acc;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Scalar references
// ---------------------------------------------------------------------------

// GELU via the complementary error function (erfc(-z) = 1 + erf(z)).
inline double oracle_gelu(double x) {
    return 0.5 * x * std::erfc(-x / std::sqrt(2.0));
}

// Two-pass layer norm reference.
inline Dense2<double> oracle_layer_norm(const Dense2<double>& x,
                                        std::span<const double> gamma,
                                        std::span<const double> beta) {
    Dense2<double> out(x.rows, x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
        double mean = 0.0;
        for (std::size_t i = 0; i < x.cols; ++i) mean += x(r, i);
        mean /= static_cast<double>(x.cols);
        double var = 0.0;
        for (std::size_t i = 0; i < x.cols; ++i)
            var += (x(r, i) - mean) * (x(r, i) - mean);
        var /= static_cast<double>(x.cols);
        const double denom = std::sqrt(var + 1e-5);
        for (std::size_t i = 0; i < x.cols; ++i)
            out(r, i) = gamma[i] * ((x(r, i) - mean) / denom) + beta[i];
    }
    return out;
}

// FFN reference with fully materialized intermediates (the unfused route).
inline Dense2<double> oracle_unfused_ffn(const Dense2<double>& x,
                                         const kernels::AttnParams<double>& p) {
    const std::size_t d = static_cast<std::size_t>(p.d_model);
    const std::size_t dff = static_cast<std::size_t>(p.d_ff);
    Dense2<double> ln = oracle_layer_norm(x, p.ln2_gamma, p.ln2_beta);
    Dense2<double> u(x.rows, dff);
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t j = 0; j < dff; ++j) {
            double acc = p.ffn_b1[j];
            for (std::size_t i = 0; i < d; ++i) acc += p.ffn_w1(j, i) * ln(r, i);
            u(r, j) = acc;
        }
    Dense2<double> a(x.rows, dff);
    for (std::size_t i = 0; i < u.data.size(); ++i)
        a.data[i] = oracle_gelu(u.data[i]);
    Dense2<double> out(x.rows, d);
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t i = 0; i < d; ++i) {
            double acc = p.ffn_b2[i];
            for (std::size_t j = 0; j < dff; ++j) acc += p.ffn_w2(i, j) * a(r, j);
            out(r, i) = x(r, i) + acc;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradients
// ---------------------------------------------------------------------------

// Central differences of L = sum(out^2)/2 for every parameter scalar of one
// block, against the forward pass under test. Returns tensors in param_views
// order.
inline std::vector<std::vector<double>> oracle_grad(
    const Dense2<double>& f, const Dense2<double>& pe,
    kernels::AttnParams<double> params, int n_groups, double fd_step = 1e-3) {
    const auto loss = [&](const kernels::AttnParams<double>& p) {
        const Dense2<double> out =
            kernels::fwa_block_forward(f, pe, p, n_groups);
        double acc = 0.0;
        for (const double v : out.data) acc += v * v;
        return 0.5 * acc;
    };

    std::vector<std::vector<double>> grads;
    auto views = kernels::param_views(params);
    for (auto& [name, view] : views) {
        std::vector<double> g(view.size());
        for (std::size_t i = 0; i < view.size(); ++i) {
            const double orig = view[i];
            view[i] = orig + fd_step;
            const double up = loss(params);
            view[i] = orig - fd_step;
            const double down = loss(params);
            view[i] = orig;
            g[i] = (up - down) / (2.0 * fd_step);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

// ---------------------------------------------------------------------------
// All-pairs distances
// ---------------------------------------------------------------------------

struct GroupDistances {
    std::vector<double> max_pairwise;
    std::vector<double> mean_to_centroid;
};

inline GroupDistances all_pairs_distances(
    const flatten::Grouping& grouping,
    std::span<const std::array<double, 2>> coords) {
    GroupDistances out;
    for (int g = 0; g < grouping.n_groups; ++g) {
        double max_d = 0.0;
        double cx = 0.0, cy = 0.0;
        for (int a = 0; a < grouping.group_size; ++a) {
            const auto& pa = coords[static_cast<std::size_t>(grouping.member(g, a))];
            cx += pa[0];
            cy += pa[1];
            for (int b = 0; b < grouping.group_size; ++b) {
                const auto& pb =
                    coords[static_cast<std::size_t>(grouping.member(g, b))];
                max_d = std::max(max_d, std::hypot(pa[0] - pb[0], pa[1] - pb[1]));
            }
        }
        cx /= grouping.group_size;
        cy /= grouping.group_size;
        double mean_c = 0.0;
        for (int a = 0; a < grouping.group_size; ++a) {
            const auto& pa = coords[static_cast<std::size_t>(grouping.member(g, a))];
            mean_c += std::hypot(pa[0] - cx, pa[1] - cy);
        }
        out.max_pairwise.push_back(max_d);
        out.mean_to_centroid.push_back(mean_c / grouping.group_size);
    }
    return out;
}

} // namespace fwa::oracle
