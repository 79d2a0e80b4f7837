#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <vector>

#include "json.hpp"

#include "fwa/dense.hpp"
#include "fwa/error.hpp"
#include "fwa/flatten.hpp"
#include "fwa/geometry.hpp"
#include "fwa/kernels.hpp"

namespace fwa::backbone {

struct FwaConfig {
    double resolution = 0.32;
    int window_px = 9; // window shape in pillars
    int window_py = 9;
    int group_size = 69;
    int n_blocks = 8;
    int d_model = 128;
    int n_heads = 8;
    int d_ff = 256;

    double window_x_m() const { return window_px * resolution; }
    double window_y_m() const { return window_py * resolution; }
};

inline void validate(const FwaConfig& c) {
    if (c.resolution <= 0.0) throw config_error("config: resolution must be > 0");
    if (c.window_px < 1 || c.window_py < 1)
        throw config_error("config: window dims must be >= 1");
    if (c.group_size < 1) throw config_error("config: group_size must be >= 1");
    if (c.n_blocks < 1) throw config_error("config: n_blocks must be >= 1");
    if (c.d_model < 4 || c.d_model % 4 != 0)
        throw config_error("config: d_model must be divisible by 4");
    if (c.n_heads < 1 || c.d_model % c.n_heads != 0)
        throw config_error("config: d_model must be divisible by n_heads");
    if (c.d_ff < 1) throw config_error("config: d_ff must be >= 1");
}

inline void to_json(nlohmann::json& j, const FwaConfig& c) {
    j = nlohmann::json{{"resolution", c.resolution},
                       {"window", {c.window_px, c.window_py}},
                       {"group_size", c.group_size},
                       {"n_blocks", c.n_blocks},
                       {"d_model", c.d_model},
                       {"n_heads", c.n_heads},
                       {"d_ff", c.d_ff}};
}

inline void from_json(const nlohmann::json& j, FwaConfig& c) {
    c.resolution = j.value("resolution", 0.32);
    if (j.contains("window")) {
        c.window_px = j.at("window").at(0).get<int>();
        c.window_py = j.at("window").at(1).get<int>();
    }
    c.group_size = j.value("group_size", 69);
    c.n_blocks = j.value("n_blocks", 8);
    c.d_model = j.value("d_model", 128);
    c.n_heads = j.value("n_heads", 8);
    c.d_ff = j.value("d_ff", 256);
}

// Optional input projection (used when pillar feature width != d_model) plus
// one AttnParams per block.
struct BackboneParams {
    struct Projection {
        Dense2<float> weight; // d_model x d_in
        std::vector<float> bias;
    };
    std::optional<Projection> input_proj;
    std::vector<kernels::AttnParams<float>> blocks;
};

inline BackboneParams init_backbone_params(const FwaConfig& cfg,
                                           std::size_t f_in,
                                           std::uint64_t seed) {
    validate(cfg);
    DetRng rng(seed);
    BackboneParams p;
    if (f_in != static_cast<std::size_t>(cfg.d_model)) {
        BackboneParams::Projection proj;
        proj.weight = Dense2<float>(static_cast<std::size_t>(cfg.d_model), f_in);
        for (auto& w : proj.weight.data)
            w = static_cast<float>(rng.normal(0.0, 0.1));
        proj.bias.assign(static_cast<std::size_t>(cfg.d_model), 0.0f);
        p.input_proj = std::move(proj);
    }
    p.blocks.reserve(static_cast<std::size_t>(cfg.n_blocks));
    for (int b = 0; b < cfg.n_blocks; ++b)
        p.blocks.push_back(kernels::init_attn_params<float>(
            cfg.d_model, cfg.n_heads, cfg.d_ff, rng));
    return p;
}

struct CacheStats {
    int computed = 0;
    int hits = 0;
};

struct StageTimes {
    double sort_ms = 0.0;
    double group_ms = 0.0;
    double gather_ms = 0.0;
    double attention_ms = 0.0;
    double ffn_ms = 0.0;
    double scatter_ms = 0.0;

    double total() const {
        return sort_ms + group_ms + gather_ms + attention_ms + ffn_ms + scatter_ms;
    }
};

struct RunStats {
    CacheStats cache;
    StageTimes stages;
    std::vector<int> dropped_per_block;
};

struct BackboneOutput {
    Dense2<float> features;                    // n_kept x d_model
    std::vector<std::array<double, 2>> coords; // n_kept pillar centers
    std::vector<int> kept_indices;             // into the input PillarSet
    std::vector<std::vector<int>> dropped_indices; // per block, pillar ids
    RunStats stats;
    std::size_t n_input = 0;
};

namespace detail {

class StageTimer {
public:
    explicit StageTimer(double& slot)
        : slot_(slot), start_(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        const auto end = std::chrono::steady_clock::now();
        slot_ += std::chrono::duration<double, std::milli>(end - start_).count();
    }

private:
    double& slot_;
    std::chrono::steady_clock::time_point start_;
};

} // namespace detail

// Runs the full block stack. Sort plans are cached per (axis, shift) and the
// whole cache is invalidated whenever a drop changes the kept point set; a
// plan is never silently reused across different point sets. Pillars in a
// block's dropped residual are excluded from that block and all later ones.
inline BackboneOutput run_backbone(const geometry::PillarSet& pillars,
                                   const FwaConfig& cfg,
                                   const BackboneParams& params,
                                   int n_threads = 1) {
    validate(cfg);
    if (params.blocks.size() != static_cast<std::size_t>(cfg.n_blocks))
        throw config_error("backbone: params.blocks length must equal n_blocks");
    for (const auto& b : params.blocks)
        if (b.d_model != cfg.d_model || b.n_heads != cfg.n_heads ||
            b.d_ff != cfg.d_ff)
            throw config_error("backbone: block params disagree with config");

    const std::size_t n = pillars.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);

    BackboneOutput out;
    out.n_input = n;

    // Input features, projected to d_model if needed.
    Dense2<float> feats(n, d);
    if (params.input_proj) {
        const auto& proj = *params.input_proj;
        if (proj.weight.cols != pillars.features.cols)
            throw shape_error("backbone: input projection width mismatch");
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) {
                float acc = proj.bias[j];
                const float* w = proj.weight.row(j);
                for (std::size_t c = 0; c < proj.weight.cols; ++c)
                    acc += w[c] * static_cast<float>(pillars.features(r, c));
                feats(r, j) = acc;
            }
    } else {
        if (pillars.features.cols != d)
            throw shape_error(
                "backbone: pillar width != d_model and no input projection");
        for (std::size_t i = 0; i < feats.data.size(); ++i)
            feats.data[i] = static_cast<float>(pillars.features.data[i]);
    }

    // Positional embeddings depend only on absolute coordinates, so they are
    // computed once and gathered per block.
    Dense2<float> pe_all =
        kernels::positional_embedding<float>(pillars.coords, cfg.d_model);

    std::vector<int> active(n);
    for (std::size_t i = 0; i < n; ++i) active[i] = static_cast<int>(i);
    std::vector<std::array<double, 2>> coords(pillars.coords.begin(),
                                              pillars.coords.end());

    const auto schedule =
        flatten::block_schedule(cfg.n_blocks, cfg.window_x_m(), cfg.window_y_m());
    std::map<std::pair<bool, bool>, flatten::SortPlan> plan_cache;
    flatten::SortStats sort_stats;

    const int g = cfg.group_size;
    for (int block = 0; block < cfg.n_blocks; ++block) {
        const auto& spec = schedule[static_cast<std::size_t>(block)];
        const std::size_t n_active = active.size();
        if (n_active < static_cast<std::size_t>(g))
            throw numeric_error("backbone: block " + std::to_string(block) +
                                " has " + std::to_string(n_active) +
                                " pillars, fewer than group size " +
                                std::to_string(g) + "; refusing to emit empty output");

        const auto key = std::make_pair(spec.major_axis == flatten::Axis::X,
                                        spec.shift);
        flatten::SortPlan plan;
        {
            detail::StageTimer t(out.stats.stages.sort_ms);
            const auto it = plan_cache.find(key);
            const flatten::SortPlan* cached =
                it == plan_cache.end() ? nullptr : &it->second;
            plan = flatten::sort(coords, spec, cached, &sort_stats);
            if (!cached) plan_cache.emplace(key, plan);
        }

        flatten::Grouping grouping;
        {
            detail::StageTimer t(out.stats.stages.group_ms);
            grouping = flatten::group(plan, g);
        }
        const int n_groups = grouping.n_groups;
        const std::size_t rows = static_cast<std::size_t>(n_groups) *
                                 static_cast<std::size_t>(g);

        Dense2<float> gathered(rows, d), pe(rows, d);
        {
            detail::StageTimer t(out.stats.stages.gather_ms);
            for (std::size_t r = 0; r < rows; ++r) {
                const auto local = static_cast<std::size_t>(
                    grouping.member_indices[r]);
                std::memcpy(gathered.row(r), feats.row(local), d * sizeof(float));
                std::memcpy(pe.row(r),
                            pe_all.row(static_cast<std::size_t>(
                                active[local])),
                            d * sizeof(float));
            }
        }

        Dense2<float> attended;
        {
            detail::StageTimer t(out.stats.stages.attention_ms);
            attended = kernels::group_attention_forward(
                gathered, pe, params.blocks[static_cast<std::size_t>(block)],
                n_groups, static_cast<kernels::AttnCache<float>*>(nullptr),
                n_threads);
        }
        Dense2<float> transformed;
        {
            detail::StageTimer t(out.stats.stages.ffn_ms);
            transformed = kernels::ffn_forward(
                attended, params.blocks[static_cast<std::size_t>(block)],
                static_cast<kernels::FfnCache<float>*>(nullptr), n_threads);
        }

        // Scatter back by the inverse permutation, then compact away drops.
        {
            detail::StageTimer t(out.stats.stages.scatter_ms);
            for (std::size_t r = 0; r < rows; ++r) {
                const auto local =
                    static_cast<std::size_t>(grouping.member_indices[r]);
                std::memcpy(feats.row(local), transformed.row(r),
                            d * sizeof(float));
            }

            std::vector<int> dropped_pillars;
            dropped_pillars.reserve(grouping.dropped.size());
            for (const int local : grouping.dropped)
                dropped_pillars.push_back(active[static_cast<std::size_t>(local)]);
            out.stats.dropped_per_block.push_back(
                static_cast<int>(dropped_pillars.size()));
            out.dropped_indices.push_back(std::move(dropped_pillars));

            if (!grouping.dropped.empty()) {
                std::vector<bool> keep(n_active, true);
                for (const int local : grouping.dropped)
                    keep[static_cast<std::size_t>(local)] = false;
                std::vector<int> new_active;
                std::vector<std::array<double, 2>> new_coords;
                Dense2<float> new_feats(n_active - grouping.dropped.size(), d);
                new_active.reserve(new_feats.rows);
                new_coords.reserve(new_feats.rows);
                std::size_t w = 0;
                for (std::size_t i = 0; i < n_active; ++i) {
                    if (!keep[i]) continue;
                    new_active.push_back(active[i]);
                    new_coords.push_back(coords[i]);
                    std::memcpy(new_feats.row(w), feats.row(i), d * sizeof(float));
                    ++w;
                }
                active = std::move(new_active);
                coords = std::move(new_coords);
                feats = std::move(new_feats);
                // The kept set changed; previously computed plans no longer apply.
                plan_cache.clear();
            }
        }
    }

    out.stats.cache.computed = static_cast<int>(sort_stats.sorts_computed);
    out.stats.cache.hits = static_cast<int>(sort_stats.cache_hits);
    out.features = std::move(feats);
    out.coords = std::move(coords);
    out.kept_indices = std::move(active);
    return out;
}

// Convenience entry point: parameters derived deterministically from the seed.
inline BackboneOutput run_backbone(const geometry::PillarSet& pillars,
                                   const FwaConfig& cfg, std::uint64_t seed,
                                   int n_threads = 1) {
    return run_backbone(pillars, cfg,
                        init_backbone_params(cfg, pillars.features.cols, seed),
                        n_threads);
}

// Sorts computed vs. served from cache for a completed run.
inline CacheStats sort_cache_stats(const BackboneOutput& run) {
    return run.stats.cache;
}

} // namespace fwa::backbone
