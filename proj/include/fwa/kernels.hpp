#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fwa/dense.hpp"
#include "fwa/error.hpp"
#include "fwa/rng.hpp"

namespace fwa::kernels {

inline constexpr double kLnEpsilon = 1e-5;
inline constexpr double kTwoPi = 6.283185307179586;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// One attention block's dense weights. Projection matrices are stored
// out_dim x in_dim, applied as y = x W^T + b. The QKV projection is packed:
// rows [0,D) produce q, [D,2D) produce k, [2D,3D) produce v.
template <typename T>
struct AttnParams {
    int d_model = 0;
    int n_heads = 0;
    int d_ff = 0;

    Dense2<T> w_qkv; // (3D) x D
    std::vector<T> b_qkv;
    Dense2<T> w_out; // D x D
    std::vector<T> b_out;
    std::vector<T> ln1_gamma, ln1_beta;
    std::vector<T> ln2_gamma, ln2_beta;
    Dense2<T> ffn_w1; // D_ff x D
    std::vector<T> ffn_b1;
    Dense2<T> ffn_w2; // D x D_ff
    std::vector<T> ffn_b2;

    template <typename U>
    AttnParams<U> cast() const {
        AttnParams<U> out;
        out.d_model = d_model;
        out.n_heads = n_heads;
        out.d_ff = d_ff;
        out.w_qkv = w_qkv.template cast<U>();
        out.w_out = w_out.template cast<U>();
        out.ffn_w1 = ffn_w1.template cast<U>();
        out.ffn_w2 = ffn_w2.template cast<U>();
        const auto cv = [](const std::vector<T>& v) {
            std::vector<U> o(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) o[i] = static_cast<U>(v[i]);
            return o;
        };
        out.b_qkv = cv(b_qkv);
        out.b_out = cv(b_out);
        out.ln1_gamma = cv(ln1_gamma);
        out.ln1_beta = cv(ln1_beta);
        out.ln2_gamma = cv(ln2_gamma);
        out.ln2_beta = cv(ln2_beta);
        out.ffn_b1 = cv(ffn_b1);
        out.ffn_b2 = cv(ffn_b2);
        return out;
    }
};

template <typename T>
void validate(const AttnParams<T>& p) {
    if (p.d_model < 1 || p.n_heads < 1 || p.d_ff < 1)
        throw config_error("attn params: dims must be >= 1");
    if (p.d_model % p.n_heads != 0)
        throw config_error("attn params: d_model must be divisible by n_heads");
    const auto d = static_cast<std::size_t>(p.d_model);
    const auto dff = static_cast<std::size_t>(p.d_ff);
    if (p.w_qkv.rows != 3 * d || p.w_qkv.cols != d || p.b_qkv.size() != 3 * d ||
        p.w_out.rows != d || p.w_out.cols != d || p.b_out.size() != d ||
        p.ln1_gamma.size() != d || p.ln1_beta.size() != d ||
        p.ln2_gamma.size() != d || p.ln2_beta.size() != d ||
        p.ffn_w1.rows != dff || p.ffn_w1.cols != d || p.ffn_b1.size() != dff ||
        p.ffn_w2.rows != d || p.ffn_w2.cols != dff || p.ffn_b2.size() != d)
        throw shape_error("attn params: tensor shape mismatch");
}

template <typename T>
AttnParams<T> zero_attn_params(int d_model, int n_heads, int d_ff) {
    AttnParams<T> p;
    p.d_model = d_model;
    p.n_heads = n_heads;
    p.d_ff = d_ff;
    const auto d = static_cast<std::size_t>(d_model);
    const auto dff = static_cast<std::size_t>(d_ff);
    p.w_qkv = Dense2<T>(3 * d, d);
    p.b_qkv.assign(3 * d, T(0));
    p.w_out = Dense2<T>(d, d);
    p.b_out.assign(d, T(0));
    p.ln1_gamma.assign(d, T(0));
    p.ln1_beta.assign(d, T(0));
    p.ln2_gamma.assign(d, T(0));
    p.ln2_beta.assign(d, T(0));
    p.ffn_w1 = Dense2<T>(dff, d);
    p.ffn_b1.assign(dff, T(0));
    p.ffn_w2 = Dense2<T>(d, dff);
    p.ffn_b2.assign(d, T(0));
    validate(p);
    return p;
}

template <typename T>
AttnParams<T> init_attn_params(int d_model, int n_heads, int d_ff, DetRng& rng,
                               double weight_scale = 0.02) {
    auto p = zero_attn_params<T>(d_model, n_heads, d_ff);
    const auto fill = [&](Dense2<T>& w) {
        for (auto& v : w.data) v = static_cast<T>(rng.normal(0.0, weight_scale));
    };
    fill(p.w_qkv);
    fill(p.w_out);
    fill(p.ffn_w1);
    fill(p.ffn_w2);
    std::fill(p.ln1_gamma.begin(), p.ln1_gamma.end(), T(1));
    std::fill(p.ln2_gamma.begin(), p.ln2_gamma.end(), T(1));
    return p;
}

// Named views over every parameter tensor, in serialization order.
template <typename T>
std::vector<std::pair<std::string, std::span<T>>> param_views(AttnParams<T>& p) {
    return {{"w_qkv", std::span<T>(p.w_qkv.data)},
            {"b_qkv", std::span<T>(p.b_qkv)},
            {"w_out", std::span<T>(p.w_out.data)},
            {"b_out", std::span<T>(p.b_out)},
            {"ln1_gamma", std::span<T>(p.ln1_gamma)},
            {"ln1_beta", std::span<T>(p.ln1_beta)},
            {"ln2_gamma", std::span<T>(p.ln2_gamma)},
            {"ln2_beta", std::span<T>(p.ln2_beta)},
            {"ffn_w1", std::span<T>(p.ffn_w1.data)},
            {"ffn_b1", std::span<T>(p.ffn_b1)},
            {"ffn_w2", std::span<T>(p.ffn_w2.data)},
            {"ffn_b2", std::span<T>(p.ffn_b2)}};
}

// Binary blob: magic `FWAP`, u32 D, u32 H, u32 D_ff, then tensors in field
// order, little-endian f32. Multi-block files are records back to back.
inline void save_params(std::ostream& out, const AttnParams<float>& p) {
    out.write("FWAP", 4);
    const auto u32 = [&](std::uint32_t v) {
        out.write(reinterpret_cast<const char*>(&v), 4);
    };
    u32(static_cast<std::uint32_t>(p.d_model));
    u32(static_cast<std::uint32_t>(p.n_heads));
    u32(static_cast<std::uint32_t>(p.d_ff));
    const auto tensor = [&](const float* data, std::size_t n) {
        out.write(reinterpret_cast<const char*>(data),
                  static_cast<std::streamsize>(n * sizeof(float)));
    };
    tensor(p.w_qkv.data.data(), p.w_qkv.data.size());
    tensor(p.b_qkv.data(), p.b_qkv.size());
    tensor(p.w_out.data.data(), p.w_out.data.size());
    tensor(p.b_out.data(), p.b_out.size());
    tensor(p.ln1_gamma.data(), p.ln1_gamma.size());
    tensor(p.ln1_beta.data(), p.ln1_beta.size());
    tensor(p.ln2_gamma.data(), p.ln2_gamma.size());
    tensor(p.ln2_beta.data(), p.ln2_beta.size());
    tensor(p.ffn_w1.data.data(), p.ffn_w1.data.size());
    tensor(p.ffn_b1.data(), p.ffn_b1.size());
    tensor(p.ffn_w2.data.data(), p.ffn_w2.data.size());
    tensor(p.ffn_b2.data(), p.ffn_b2.size());
}

inline AttnParams<float> load_params(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "FWAP", 4) != 0)
        throw parse_error("bad magic, expected FWAP");
    std::uint32_t d = 0, h = 0, dff = 0;
    in.read(reinterpret_cast<char*>(&d), 4);
    in.read(reinterpret_cast<char*>(&h), 4);
    in.read(reinterpret_cast<char*>(&dff), 4);
    if (!in) throw parse_error("truncated FWAP header");
    auto p = zero_attn_params<float>(static_cast<int>(d), static_cast<int>(h),
                                     static_cast<int>(dff));
    const auto tensor = [&](float* data, std::size_t n) {
        in.read(reinterpret_cast<char*>(data),
                static_cast<std::streamsize>(n * sizeof(float)));
        if (!in) throw parse_error("truncated FWAP tensor");
    };
    tensor(p.w_qkv.data.data(), p.w_qkv.data.size());
    tensor(p.b_qkv.data(), p.b_qkv.size());
    tensor(p.w_out.data.data(), p.w_out.data.size());
    tensor(p.b_out.data(), p.b_out.size());
    tensor(p.ln1_gamma.data(), p.ln1_gamma.size());
    tensor(p.ln1_beta.data(), p.ln1_beta.size());
    tensor(p.ln2_gamma.data(), p.ln2_gamma.size());
    tensor(p.ln2_beta.data(), p.ln2_beta.size());
    tensor(p.ffn_w1.data.data(), p.ffn_w1.data.size());
    tensor(p.ffn_b1.data(), p.ffn_b1.size());
    tensor(p.ffn_w2.data.data(), p.ffn_w2.data.size());
    tensor(p.ffn_b2.data(), p.ffn_b2.size());
    return p;
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fn>
void parallel_for(std::size_t n, int n_threads, Fn&& fn) {
    if (n_threads <= 1 || n <= 1) {
        fn(std::size_t(0), n);
        return;
    }
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(n_threads), n);
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

// Normalizes one row; writes xhat and returns inv_std.
template <typename T>
T normalize_row(const T* x, std::size_t n, T* xhat) {
    T mean = T(0);
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<T>(n);
    const T inv_std = T(1) / std::sqrt(var + static_cast<T>(kLnEpsilon));
    for (std::size_t i = 0; i < n; ++i) xhat[i] = (x[i] - mean) * inv_std;
    return inv_std;
}

template <typename T>
void softmax_row(T* logits, std::size_t n) {
    T mx = logits[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
    T sum = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        logits[i] = std::exp(logits[i] - mx);
        sum += logits[i];
    }
    const T inv = T(1) / sum;
    for (std::size_t i = 0; i < n; ++i) logits[i] *= inv;
}

// dW += dY^T X for Y = X W^T (dY: R x J, X: R x K, dW: J x K).
template <typename T>
void accumulate_weight_grad(const Dense2<T>& dy, const Dense2<T>& x,
                            Dense2<T>& dw) {
    for (std::size_t r = 0; r < dy.rows; ++r) {
        const T* dyr = dy.row(r);
        const T* xr = x.row(r);
        for (std::size_t j = 0; j < dy.cols; ++j) {
            const T g = dyr[j];
            if (g == T(0)) continue;
            T* dwj = dw.row(j);
            for (std::size_t k = 0; k < x.cols; ++k) dwj[k] += g * xr[k];
        }
    }
}

// dX = dY W for Y = X W^T (dY: R x J, W: J x K, dX: R x K).
template <typename T>
void input_grad(const Dense2<T>& dy, const Dense2<T>& w, Dense2<T>& dx) {
    dx = Dense2<T>(dy.rows, w.cols);
    for (std::size_t r = 0; r < dy.rows; ++r) {
        const T* dyr = dy.row(r);
        T* dxr = dx.row(r);
        for (std::size_t j = 0; j < dy.cols; ++j) {
            const T g = dyr[j];
            if (g == T(0)) continue;
            const T* wj = w.row(j);
            for (std::size_t k = 0; k < w.cols; ++k) dxr[k] += g * wj[k];
        }
    }
}

template <typename T>
void accumulate_bias_grad(const Dense2<T>& dy, std::vector<T>& db) {
    for (std::size_t r = 0; r < dy.rows; ++r) {
        const T* dyr = dy.row(r);
        for (std::size_t j = 0; j < dy.cols; ++j) db[j] += dyr[j];
    }
}

// Backward through xhat = (x - mean)/std given upstream grad on
// gamma*xhat + beta. Accumulates dgamma/dbeta, returns grad wrt x.
template <typename T>
Dense2<T> layer_norm_backward(const Dense2<T>& g_y, const Dense2<T>& xhat,
                              const std::vector<T>& inv_std,
                              const std::vector<T>& gamma,
                              std::vector<T>& dgamma, std::vector<T>& dbeta) {
    const std::size_t n = g_y.cols;
    Dense2<T> g_x(g_y.rows, n);
    std::vector<T> g_xh(n);
    for (std::size_t r = 0; r < g_y.rows; ++r) {
        const T* gy = g_y.row(r);
        const T* xh = xhat.row(r);
        T m1 = T(0), m2 = T(0);
        for (std::size_t i = 0; i < n; ++i) {
            dgamma[i] += gy[i] * xh[i];
            dbeta[i] += gy[i];
            g_xh[i] = gy[i] * gamma[i];
            m1 += g_xh[i];
            m2 += g_xh[i] * xh[i];
        }
        m1 /= static_cast<T>(n);
        m2 /= static_cast<T>(n);
        T* gx = g_x.row(r);
        for (std::size_t i = 0; i < n; ++i)
            gx[i] = inv_std[r] * (g_xh[i] - m1 - xh[i] * m2);
    }
    return g_x;
}

} // namespace detail

// Per-row normalization to zero mean / unit variance (epsilon inside the
// square root), then affine scale and shift.
template <typename T>
Dense2<T> layer_norm(const Dense2<T>& x, std::span<const T> gamma,
                     std::span<const T> beta) {
    if (gamma.size() != x.cols || beta.size() != x.cols)
        throw shape_error("layer_norm: gamma/beta length must equal cols");
    Dense2<T> out(x.rows, x.cols);
    std::vector<T> xhat(x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
        detail::normalize_row(x.row(r), x.cols, xhat.data());
        T* o = out.row(r);
        for (std::size_t i = 0; i < x.cols; ++i)
            o[i] = gamma[i] * xhat[i] + beta[i];
    }
    return out;
}

template <typename T>
Dense2<T> softmax_rows(Dense2<T> x) {
    for (std::size_t r = 0; r < x.rows; ++r)
        detail::softmax_row(x.row(r), x.cols);
    return x;
}

// Sinusoidal absolute positional embedding of (x, y). Each axis gets D/4
// (sin, cos) pairs with geometric frequency spacing from 1/10000 to 1 cycles
// per meter; the x block precedes the y block.
template <typename T>
Dense2<T> positional_embedding(std::span<const std::array<double, 2>> coords,
                               int d_model) {
    if (d_model < 4 || d_model % 4 != 0)
        throw config_error("positional_embedding: d_model must be divisible by 4");
    const int n_freq = d_model / 4;
    std::vector<double> freq(static_cast<std::size_t>(n_freq));
    constexpr double f_min = 1.0 / 10000.0;
    constexpr double f_max = 1.0;
    for (int k = 0; k < n_freq; ++k)
        freq[k] = n_freq == 1
                      ? f_min
                      : f_min * std::pow(f_max / f_min,
                                         static_cast<double>(k) / (n_freq - 1));

    Dense2<T> pe(coords.size(), static_cast<std::size_t>(d_model));
    for (std::size_t i = 0; i < coords.size(); ++i) {
        T* row = pe.row(i);
        for (int axis = 0; axis < 2; ++axis) {
            const double c = coords[i][static_cast<std::size_t>(axis)];
            T* block = row + axis * (d_model / 2);
            for (int k = 0; k < n_freq; ++k) {
                const double phase = kTwoPi * freq[k] * c;
                block[2 * k] = static_cast<T>(std::sin(phase));
                block[2 * k + 1] = static_cast<T>(std::cos(phase));
            }
        }
    }
    return pe;
}

// ---------------------------------------------------------------------------
// Group attention
// ---------------------------------------------------------------------------

template <typename T>
struct AttnCache {
    int n_groups = 0;
    int group_size = 0;
    int n_heads = 0;
    Dense2<T> xhat1;
    std::vector<T> inv_std1;
    Dense2<T> h; // LN output + positional embedding, input to QKV
    Dense2<T> q, k, v;
    std::vector<T> probs; // n_groups * n_heads * G * G softmax outputs
    Dense2<T> attn_cat;   // concatenated head outputs, input to w_out

    T* probs_at(int g, int head) {
        const std::size_t gs = static_cast<std::size_t>(group_size);
        return probs.data() +
               (static_cast<std::size_t>(g) * n_heads + head) * gs * gs;
    }
    const T* probs_at(int g, int head) const {
        const std::size_t gs = static_cast<std::size_t>(group_size);
        return probs.data() +
               (static_cast<std::size_t>(g) * n_heads + head) * gs * gs;
    }
};

template <typename T>
struct FfnCache {
    Dense2<T> xhat2;
    std::vector<T> inv_std2;
    Dense2<T> ln2_out;
    Dense2<T> u; // pre-GELU
    Dense2<T> a; // post-GELU
};

template <typename T>
struct FwaBlockCache {
    AttnCache<T> attn;
    FfnCache<T> ffn;
    std::size_t rows = 0;
    int d_model = 0;
};

// Pre-LN multi-head self-attention over fixed-size groups with a residual
// connection: out = f + W_out * MHSA(LN(f) + pe). The positional embedding
// enters after normalization, before the packed QKV projection.
//
// `f` holds n_groups blocks of G consecutive rows. With a cache the softmax
// matrices are materialized for the backward pass; without one each query row
// is processed in O(G) memory, so large single-group inputs stay cheap.
template <typename T>
Dense2<T> group_attention_forward(const Dense2<T>& f, const Dense2<T>& pe,
                                  const AttnParams<T>& params, int n_groups,
                                  AttnCache<T>* cache = nullptr,
                                  int n_threads = 1) {
    validate(params);
    const std::size_t d = static_cast<std::size_t>(params.d_model);
    if (n_groups == 0 && f.rows == 0) return Dense2<T>(0, d);
    if (n_groups < 1 || f.rows % static_cast<std::size_t>(n_groups) != 0)
        throw shape_error("group_attention: rows not divisible by n_groups");
    if (f.cols != d) throw shape_error("group_attention: f cols != d_model");
    if (pe.rows != f.rows || pe.cols != f.cols)
        throw shape_error("group_attention: pe shape mismatch");
    if (!f.all_finite() || !pe.all_finite())
        throw numeric_error("group_attention: non-finite input");

    const std::size_t rows = f.rows;
    const int group = static_cast<int>(rows / static_cast<std::size_t>(n_groups));
    const std::size_t gs = static_cast<std::size_t>(group);
    const int heads = params.n_heads;
    const std::size_t hd = d / static_cast<std::size_t>(heads);
    const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(hd)));

    // LN + positional embedding. h holds raw xhat first, then the affine
    // transform and pe are folded in.
    Dense2<T> h(rows, d);
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r)
        inv_std[r] = detail::normalize_row(f.row(r), d, h.row(r));
    Dense2<T> xhat1;
    if (cache) xhat1 = h;
    const T* gamma1 = params.ln1_gamma.data();
    const T* beta1 = params.ln1_beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T* hr = h.row(r);
        const T* per = pe.row(r);
        for (std::size_t i = 0; i < d; ++i)
            hr[i] = gamma1[i] * hr[i] + beta1[i] + per[i];
    }

    // Packed QKV projection, then split.
    Dense2<T> qkv;
    matmul_nt(h, params.w_qkv, qkv);
    Dense2<T> q(rows, d), k(rows, d), v(rows, d);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = qkv.row(r);
        const T* b = params.b_qkv.data();
        T* qr = q.row(r);
        T* kr = k.row(r);
        T* vr = v.row(r);
        for (std::size_t i = 0; i < d; ++i) qr[i] = src[i] + b[i];
        for (std::size_t i = 0; i < d; ++i) kr[i] = src[d + i] + b[d + i];
        for (std::size_t i = 0; i < d; ++i) vr[i] = src[2 * d + i] + b[2 * d + i];
    }

    if (cache) {
        cache->n_groups = n_groups;
        cache->group_size = group;
        cache->n_heads = heads;
        cache->xhat1 = std::move(xhat1);
        cache->inv_std1 = inv_std;
        cache->probs.assign(static_cast<std::size_t>(n_groups) * heads * gs * gs,
                            T(0));
    }

    Dense2<T> attn_cat(rows, d);
    detail::parallel_for(
        static_cast<std::size_t>(n_groups), n_threads,
        [&](std::size_t g_lo, std::size_t g_hi) {
            std::vector<T> logits(gs);
            for (std::size_t g = g_lo; g < g_hi; ++g) {
                const std::size_t base = g * gs;
                for (int head = 0; head < heads; ++head) {
                    const std::size_t off = static_cast<std::size_t>(head) * hd;
                    T* probs_out =
                        cache ? cache->probs_at(static_cast<int>(g), head)
                              : nullptr;
                    for (std::size_t i = 0; i < gs; ++i) {
                        const T* qi = q.row(base + i) + off;
                        for (std::size_t j = 0; j < gs; ++j) {
                            const T* kj = k.row(base + j) + off;
                            T acc = T(0);
                            for (std::size_t c = 0; c < hd; ++c)
                                acc += qi[c] * kj[c];
                            logits[j] = acc * scale;
                        }
                        detail::softmax_row(logits.data(), gs);
                        if (probs_out)
                            std::memcpy(probs_out + i * gs, logits.data(),
                                        gs * sizeof(T));
                        T* out_i = attn_cat.row(base + i) + off;
                        std::fill(out_i, out_i + hd, T(0));
                        for (std::size_t j = 0; j < gs; ++j) {
                            const T w = logits[j];
                            const T* vj = v.row(base + j) + off;
                            for (std::size_t c = 0; c < hd; ++c)
                                out_i[c] += w * vj[c];
                        }
                    }
                }
            }
        });

    // Output projection + residual.
    Dense2<T> proj;
    matmul_nt(attn_cat, params.w_out, proj);
    Dense2<T> out(rows, d);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* fr = f.row(r);
        const T* pr = proj.row(r);
        T* o = out.row(r);
        for (std::size_t i = 0; i < d; ++i)
            o[i] = fr[i] + pr[i] + params.b_out[i];
    }

    if (cache) {
        cache->h = std::move(h);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn_cat = std::move(attn_cat);
    }
    return out;
}

// Feed-forward with pre-LN and residual: x + W2 GELU(W1 LN(x) + b1) + b2.
// The activation is applied inside the first linear's output loop, so the
// pre-activation matrix is never traversed a second time.
template <typename T>
Dense2<T> ffn_forward(const Dense2<T>& x, const AttnParams<T>& params,
                      FfnCache<T>* cache = nullptr, int n_threads = 1) {
    validate(params);
    const std::size_t d = static_cast<std::size_t>(params.d_model);
    const std::size_t dff = static_cast<std::size_t>(params.d_ff);
    if (x.cols != d) throw shape_error("ffn: cols != d_model");

    const std::size_t rows = x.rows;
    Dense2<T> out(rows, d);
    Dense2<T> xhat2, ln2_out, u_mat, a_mat;
    std::vector<T> inv_std2;
    if (cache) {
        xhat2 = Dense2<T>(rows, d);
        ln2_out = Dense2<T>(rows, d);
        u_mat = Dense2<T>(rows, dff);
        a_mat = Dense2<T>(rows, dff);
        inv_std2.resize(rows);
    }

    detail::parallel_for(rows, n_threads, [&](std::size_t lo, std::size_t hi) {
        std::vector<T> xhat(d), ln(d), act(dff);
        for (std::size_t r = lo; r < hi; ++r) {
            const T istd = detail::normalize_row(x.row(r), d, xhat.data());
            for (std::size_t i = 0; i < d; ++i)
                ln[i] = params.ln2_gamma[i] * xhat[i] + params.ln2_beta[i];
            for (std::size_t j = 0; j < dff; ++j) {
                const T* w = params.ffn_w1.row(j);
                T acc = params.ffn_b1[j];
                for (std::size_t i = 0; i < d; ++i) acc += w[i] * ln[i];
                if (cache) u_mat(r, j) = acc;
                act[j] = gelu(acc);
            }
            const T* xr = x.row(r);
            T* o = out.row(r);
            for (std::size_t i = 0; i < d; ++i) {
                const T* w = params.ffn_w2.row(i);
                T acc = params.ffn_b2[i];
                for (std::size_t j = 0; j < dff; ++j) acc += w[j] * act[j];
                o[i] = xr[i] + acc;
            }
            if (cache) {
                inv_std2[r] = istd;
                std::memcpy(xhat2.row(r), xhat.data(), d * sizeof(T));
                std::memcpy(ln2_out.row(r), ln.data(), d * sizeof(T));
                std::memcpy(a_mat.row(r), act.data(), dff * sizeof(T));
            }
        }
    });

    if (cache) {
        cache->xhat2 = std::move(xhat2);
        cache->inv_std2 = std::move(inv_std2);
        cache->ln2_out = std::move(ln2_out);
        cache->u = std::move(u_mat);
        cache->a = std::move(a_mat);
    }
    return out;
}

// Full block: attention sublayer then FFN sublayer, both with residuals.
template <typename T>
Dense2<T> fwa_block_forward(const Dense2<T>& f, const Dense2<T>& pe,
                            const AttnParams<T>& params, int n_groups,
                            FwaBlockCache<T>* cache = nullptr,
                            int n_threads = 1) {
    Dense2<T> mid = group_attention_forward(
        f, pe, params, n_groups, cache ? &cache->attn : nullptr, n_threads);
    Dense2<T> out =
        ffn_forward(mid, params, cache ? &cache->ffn : nullptr, n_threads);
    if (cache) {
        cache->rows = f.rows;
        cache->d_model = params.d_model;
    }
    return out;
}

template <typename T>
struct FwaBlockGrads {
    Dense2<T> grad_f;
    AttnParams<T> params;
};

// Exact reverse-mode gradients of the full block with respect to the input
// features and every parameter tensor.
template <typename T>
FwaBlockGrads<T> fwa_block_backward(const Dense2<T>& grad_out,
                                    const FwaBlockCache<T>& cache,
                                    const AttnParams<T>& params) {
    validate(params);
    const std::size_t d = static_cast<std::size_t>(params.d_model);
    if (cache.rows != grad_out.rows || cache.d_model != params.d_model ||
        grad_out.cols != d)
        throw contract_error("fwa_block_backward: cache does not match grad_out");
    const std::size_t rows = grad_out.rows;
    const std::size_t dff = static_cast<std::size_t>(params.d_ff);
    const int heads = params.n_heads;
    const std::size_t hd = d / static_cast<std::size_t>(heads);
    const std::size_t gs = static_cast<std::size_t>(cache.attn.group_size);
    const int n_groups = cache.attn.n_groups;
    const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(hd)));

    FwaBlockGrads<T> out;
    out.params = zero_attn_params<T>(params.d_model, heads, params.d_ff);

    // ---- FFN sublayer ----
    detail::accumulate_bias_grad(grad_out, out.params.ffn_b2);
    detail::accumulate_weight_grad(grad_out, cache.ffn.a, out.params.ffn_w2);
    Dense2<T> g_a;
    detail::input_grad(grad_out, params.ffn_w2, g_a);
    Dense2<T> g_u(rows, dff);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < dff; ++j)
            g_u(r, j) = g_a(r, j) * gelu_grad(cache.ffn.u(r, j));
    detail::accumulate_bias_grad(g_u, out.params.ffn_b1);
    detail::accumulate_weight_grad(g_u, cache.ffn.ln2_out, out.params.ffn_w1);
    Dense2<T> g_ln2;
    detail::input_grad(g_u, params.ffn_w1, g_ln2);
    Dense2<T> g_fprime = detail::layer_norm_backward(
        g_ln2, cache.ffn.xhat2, cache.ffn.inv_std2, params.ln2_gamma,
        out.params.ln2_gamma, out.params.ln2_beta);
    for (std::size_t i = 0; i < g_fprime.data.size(); ++i)
        g_fprime.data[i] += grad_out.data[i]; // residual around the FFN

    // ---- attention sublayer ----
    detail::accumulate_bias_grad(g_fprime, out.params.b_out);
    detail::accumulate_weight_grad(g_fprime, cache.attn.attn_cat,
                                   out.params.w_out);
    Dense2<T> g_attn_cat;
    detail::input_grad(g_fprime, params.w_out, g_attn_cat);

    Dense2<T> g_q(rows, d), g_k(rows, d), g_v(rows, d);
    std::vector<T> g_p(gs), g_s(gs);
    for (int g = 0; g < n_groups; ++g) {
        const std::size_t base = static_cast<std::size_t>(g) * gs;
        for (int head = 0; head < heads; ++head) {
            const std::size_t off = static_cast<std::size_t>(head) * hd;
            const T* probs = cache.attn.probs_at(g, head);
            for (std::size_t i = 0; i < gs; ++i) {
                const T* go = g_attn_cat.row(base + i) + off;
                const T* pi = probs + i * gs;
                // grad wrt softmax probs and values
                T dot = T(0);
                for (std::size_t j = 0; j < gs; ++j) {
                    const T* vj = cache.attn.v.row(base + j) + off;
                    T acc = T(0);
                    for (std::size_t c = 0; c < hd; ++c) acc += go[c] * vj[c];
                    g_p[j] = acc;
                    dot += acc * pi[j];
                    T* gvj = g_v.row(base + j) + off;
                    for (std::size_t c = 0; c < hd; ++c)
                        gvj[c] += pi[j] * go[c];
                }
                // softmax jacobian, then scores -> q, k
                T* gqi = g_q.row(base + i) + off;
                for (std::size_t j = 0; j < gs; ++j) {
                    g_s[j] = pi[j] * (g_p[j] - dot) * scale;
                    const T* kj = cache.attn.k.row(base + j) + off;
                    T* gkj = g_k.row(base + j) + off;
                    const T* qi = cache.attn.q.row(base + i) + off;
                    for (std::size_t c = 0; c < hd; ++c) {
                        gqi[c] += g_s[j] * kj[c];
                        gkj[c] += g_s[j] * qi[c];
                    }
                }
            }
        }
    }

    // Pack (g_q | g_k | g_v) and push through the packed projection.
    Dense2<T> g_qkv(rows, 3 * d);
    for (std::size_t r = 0; r < rows; ++r) {
        T* dst = g_qkv.row(r);
        std::memcpy(dst, g_q.row(r), d * sizeof(T));
        std::memcpy(dst + d, g_k.row(r), d * sizeof(T));
        std::memcpy(dst + 2 * d, g_v.row(r), d * sizeof(T));
    }
    detail::accumulate_bias_grad(g_qkv, out.params.b_qkv);
    detail::accumulate_weight_grad(g_qkv, cache.attn.h, out.params.w_qkv);
    Dense2<T> g_h;
    detail::input_grad(g_qkv, params.w_qkv, g_h);

    Dense2<T> g_f_ln = detail::layer_norm_backward(
        g_h, cache.attn.xhat1, cache.attn.inv_std1, params.ln1_gamma,
        out.params.ln1_gamma, out.params.ln1_beta);

    out.grad_f = Dense2<T>(rows, d);
    for (std::size_t i = 0; i < out.grad_f.data.size(); ++i)
        out.grad_f.data[i] = g_fprime.data[i] + g_f_ln.data[i];
    return out;
}

} // namespace fwa::kernels
