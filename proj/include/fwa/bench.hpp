#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "fwa/backbone.hpp"
#include "fwa/error.hpp"
#include "fwa/kernels.hpp"
#include "fwa/workload.hpp"

namespace fwa::bench {

struct BenchResult {
    std::string name;
    std::uint64_t n_points = 0;
    std::string config_digest;
    double mean_ms = 0.0;
    double p50_ms = 0.0;
    double p95_ms = 0.0;
    int outliers_excluded = 0;
    int runs = 0;
    int warmup = 0;
    std::map<std::string, double> stage_ms; // mean per-stage time, group mode
};

inline void to_json(nlohmann::json& j, const BenchResult& r) {
    j = nlohmann::json{{"name", r.name},
                       {"n_points", r.n_points},
                       {"config_digest", r.config_digest},
                       {"wall_time_ms",
                        {{"mean", r.mean_ms}, {"p50", r.p50_ms}, {"p95", r.p95_ms}}},
                       {"outliers_excluded", r.outliers_excluded},
                       {"runs", r.runs},
                       {"warmup", r.warmup},
                       {"stage_ms", r.stage_ms}};
}

inline void from_json(const nlohmann::json& j, BenchResult& r) {
    j.at("name").get_to(r.name);
    j.at("n_points").get_to(r.n_points);
    j.at("config_digest").get_to(r.config_digest);
    r.mean_ms = j.at("wall_time_ms").at("mean").get<double>();
    r.p50_ms = j.at("wall_time_ms").at("p50").get<double>();
    r.p95_ms = j.at("wall_time_ms").at("p95").get<double>();
    j.at("outliers_excluded").get_to(r.outliers_excluded);
    j.at("runs").get_to(r.runs);
    j.at("warmup").get_to(r.warmup);
    r.stage_ms.clear();
    if (j.contains("stage_ms"))
        for (const auto& [k, v] : j.at("stage_ms").items())
            r.stage_ms[k] = v.get<double>();
}

inline std::string fnv1a64_hex(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[19];
    std::snprintf(buf, sizeof(buf), "0x%016llx",
                  static_cast<unsigned long long>(h));
    return buf;
}

// Linear interpolation percentile on a sorted sample.
inline double percentile(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    if (sorted.size() == 1) return sorted[0];
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// Excludes samples beyond 3x the interquartile range and reports how many.
inline std::vector<double> exclude_outliers(const std::vector<double>& samples,
                                            int& excluded) {
    excluded = 0;
    if (samples.size() < 4) return samples;
    std::vector<double> sorted = samples;
    std::sort(sorted.begin(), sorted.end());
    const double q1 = percentile(sorted, 0.25);
    const double q3 = percentile(sorted, 0.75);
    const double iqr = q3 - q1;
    const double lo = q1 - 3.0 * iqr;
    const double hi = q3 + 3.0 * iqr;
    std::vector<double> kept;
    kept.reserve(samples.size());
    for (const double s : samples) {
        if (s < lo || s > hi)
            ++excluded;
        else
            kept.push_back(s);
    }
    return kept;
}

template <typename Fn>
std::vector<double> measure(int runs, int warmup, Fn&& fn) {
    if (runs < 1) throw config_error("bench: runs must be >= 1");
    if (warmup < 0) throw config_error("bench: warmup must be >= 0");
    for (int i = 0; i < warmup; ++i) fn();
    std::vector<double> samples(static_cast<std::size_t>(runs));
    for (int i = 0; i < runs; ++i) {
        const auto start = std::chrono::steady_clock::now();
        fn();
        const auto end = std::chrono::steady_clock::now();
        samples[static_cast<std::size_t>(i)] =
            std::chrono::duration<double, std::milli>(end - start).count();
    }
    return samples;
}

inline BenchResult summarize(const std::string& name, std::uint64_t n_points,
                             const std::string& digest,
                             const std::vector<double>& samples, int runs,
                             int warmup) {
    BenchResult r;
    r.name = name;
    r.n_points = n_points;
    r.config_digest = digest;
    r.runs = runs;
    r.warmup = warmup;
    const auto kept = exclude_outliers(samples, r.outliers_excluded);
    std::vector<double> sorted = kept;
    std::sort(sorted.begin(), sorted.end());
    double sum = 0.0;
    for (const double s : kept) sum += s;
    r.mean_ms = kept.empty() ? 0.0 : sum / static_cast<double>(kept.size());
    r.p50_ms = percentile(sorted, 0.5);
    r.p95_ms = percentile(sorted, 0.95);
    return r;
}

// Least-squares slope of log(y) against log(x).
inline double fit_loglog_slope(const std::vector<std::pair<double, double>>& xy) {
    if (xy.size() < 2) throw config_error("slope fit needs >= 2 points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& [x, y] : xy) {
        const double lx = std::log(x);
        const double ly = std::log(y);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double n = static_cast<double>(xy.size());
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// ---------------------------------------------------------------------------
// Benchmark scenarios
// ---------------------------------------------------------------------------

enum class Mode { Group, Global, EqualWindow };

inline const char* mode_name(Mode m) {
    switch (m) {
        case Mode::Group: return "group";
        case Mode::Global: return "global";
        case Mode::EqualWindow: return "equal-window";
    }
    return "?";
}

namespace detail {

// Pillar features projected to d_model plus their embeddings, shared by the
// single-block scenarios.
struct PreparedInput {
    Dense2<float> feats;
    Dense2<float> pe;
    std::vector<std::array<double, 2>> coords;
};

inline PreparedInput prepare_input(const geometry::PillarSet& pillars,
                                   const backbone::FwaConfig& cfg,
                                   const backbone::BackboneParams& params) {
    PreparedInput in;
    const std::size_t n = pillars.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    in.feats = Dense2<float>(n, d);
    if (params.input_proj) {
        const auto& proj = *params.input_proj;
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) {
                float acc = proj.bias[j];
                for (std::size_t c = 0; c < proj.weight.cols; ++c)
                    acc += proj.weight(j, c) *
                           static_cast<float>(pillars.features(r, c));
                in.feats(r, j) = acc;
            }
    } else {
        for (std::size_t i = 0; i < in.feats.data.size(); ++i)
            in.feats.data[i] = static_cast<float>(pillars.features.data[i]);
    }
    in.pe = kernels::positional_embedding<float>(pillars.coords, cfg.d_model);
    in.coords.assign(pillars.coords.begin(), pillars.coords.end());
    return in;
}

} // namespace detail

// Times the full backbone (sort, group, gather, attention, FFN, scatter).
inline BenchResult bench_group(const geometry::PillarSet& pillars,
                               const backbone::FwaConfig& cfg,
                               const backbone::BackboneParams& params,
                               const std::string& digest, int runs, int warmup,
                               int n_threads) {
    backbone::StageTimes accum;
    int timed_runs = 0;
    const auto samples = measure(runs, warmup, [&] {
        const auto out = backbone::run_backbone(pillars, cfg, params, n_threads);
        accum.sort_ms += out.stats.stages.sort_ms;
        accum.group_ms += out.stats.stages.group_ms;
        accum.gather_ms += out.stats.stages.gather_ms;
        accum.attention_ms += out.stats.stages.attention_ms;
        accum.ffn_ms += out.stats.stages.ffn_ms;
        accum.scatter_ms += out.stats.stages.scatter_ms;
        ++timed_runs;
    });
    auto r = summarize(mode_name(Mode::Group), pillars.size(), digest, samples,
                       runs, warmup);
    const double k = 1.0 / std::max(1, timed_runs);
    r.stage_ms = {{"sort", accum.sort_ms * k},
                  {"group", accum.group_ms * k},
                  {"gather", accum.gather_ms * k},
                  {"attention", accum.attention_ms * k},
                  {"ffn", accum.ffn_ms * k},
                  {"scatter", accum.scatter_ms * k}};
    return r;
}

// Single group holding the entire point set, one block. Exists to expose the
// quadratic scaling of undivided attention at desk scale.
inline BenchResult bench_global(const geometry::PillarSet& pillars,
                                const backbone::FwaConfig& cfg,
                                const backbone::BackboneParams& params,
                                const std::string& digest, int runs, int warmup,
                                int n_threads) {
    if (pillars.size() == 0) throw config_error("bench: empty input");
    const auto in = detail::prepare_input(pillars, cfg, params);
    const auto& block = params.blocks.front();
    const auto samples = measure(runs, warmup, [&] {
        const auto mid = kernels::group_attention_forward(
            in.feats, in.pe, block, 1,
            static_cast<kernels::AttnCache<float>*>(nullptr), n_threads);
        kernels::ffn_forward(mid, block,
                             static_cast<kernels::FfnCache<float>*>(nullptr),
                             n_threads);
    });
    return summarize(mode_name(Mode::Global), pillars.size(), digest, samples,
                     runs, warmup);
}

// Simulated equal-window path in the same implementation: partition by window
// coordinates, bucket by occupancy, pad every window to its bucket's largest
// occupancy (zero rows), then run the identical attention + FFN kernels per
// bucket. Partitioning and padding are timed; that structuring cost is the
// point of the comparison.
inline BenchResult bench_equal_window(const geometry::PillarSet& pillars,
                                      const backbone::FwaConfig& cfg,
                                      const backbone::BackboneParams& params,
                                      std::span<const int> bucket_edges,
                                      const std::string& digest, int runs,
                                      int warmup, int n_threads) {
    if (pillars.size() == 0) throw config_error("bench: empty input");
    const auto in = detail::prepare_input(pillars, cfg, params);
    const auto& block = params.blocks.front();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const flatten::WindowSpec spec{.w_x = cfg.window_x_m(),
                                   .w_y = cfg.window_y_m()};

    const auto samples = measure(runs, warmup, [&] {
        const auto part = workload::partition_equal_window(in.coords, spec);
        const auto bucket_of = [&](int occ) {
            for (std::size_t b = 0; b < bucket_edges.size(); ++b)
                if (occ <= bucket_edges[b]) return b;
            throw config_error("bench: occupancy exceeds final bucket edge");
        };
        std::vector<int> bucket_max(bucket_edges.size(), 0);
        std::vector<std::vector<const workload::EqualWindowPartition::Window*>>
            buckets(bucket_edges.size());
        for (const auto& w : part.windows) {
            const auto b = bucket_of(static_cast<int>(w.members.size()));
            bucket_max[b] = std::max(bucket_max[b],
                                     static_cast<int>(w.members.size()));
            buckets[b].push_back(&w);
        }
        for (std::size_t b = 0; b < buckets.size(); ++b) {
            if (buckets[b].empty()) continue;
            const auto pad = static_cast<std::size_t>(bucket_max[b]);
            const std::size_t rows = buckets[b].size() * pad;
            Dense2<float> batch(rows, d), pe(rows, d);
            std::size_t base = 0;
            for (const auto* w : buckets[b]) {
                for (std::size_t t = 0; t < w->members.size(); ++t) {
                    const auto src = static_cast<std::size_t>(w->members[t]);
                    std::memcpy(batch.row(base + t), in.feats.row(src),
                                d * sizeof(float));
                    std::memcpy(pe.row(base + t), in.pe.row(src),
                                d * sizeof(float));
                }
                base += pad;
            }
            const auto mid = kernels::group_attention_forward(
                batch, pe, block, static_cast<int>(buckets[b].size()),
                static_cast<kernels::AttnCache<float>*>(nullptr), n_threads);
            kernels::ffn_forward(mid, block,
                                 static_cast<kernels::FfnCache<float>*>(nullptr),
                                 n_threads);
        }
    });
    return summarize(mode_name(Mode::EqualWindow), pillars.size(), digest,
                     samples, runs, warmup);
}

} // namespace fwa::bench
