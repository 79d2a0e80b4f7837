#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fwa/error.hpp"
#include "fwa/flatten.hpp"

namespace fwa::workload {

// MAC accounting counts the quadratic attention pieces (scores + weighted sum)
// and the linear projections (QKV + output); LN/softmax/GELU are O(L*D) and
// excluded. For a sequence of length L with D channels the closed form is
// 2*L^2*D + 4*L*D^2.
inline std::uint64_t attention_macs(std::uint64_t l, std::uint64_t d) {
    const std::uint64_t qkv = 3 * l * d * d;
    const std::uint64_t scores = l * l * d;
    const std::uint64_t weighted_sum = l * l * d;
    const std::uint64_t out_proj = l * d * d;
    return qkv + scores + weighted_sum + out_proj;
}

struct EqualWindowPartition {
    struct Window {
        std::int64_t wx = 0;
        std::int64_t wy = 0;
        std::vector<int> members; // original point indices
    };
    std::vector<Window> windows;         // ascending lexicographic (wx, wy)
    std::map<int, int> occupancy;        // member count -> number of windows
};

// Groups points by exact window coordinates (both axes), deterministic
// lexicographic window order.
inline EqualWindowPartition partition_equal_window(
    std::span<const std::array<double, 2>> coords,
    const flatten::WindowSpec& spec) {
    if (spec.w_x <= 0.0 || spec.w_y <= 0.0)
        throw config_error("window dims must be positive");
    std::map<std::pair<std::int64_t, std::int64_t>, std::vector<int>> cells;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        double x = coords[i][0];
        double y = coords[i][1];
        if (spec.shift) {
            x += spec.w_x / 2.0;
            y += spec.w_y / 2.0;
        }
        cells[{static_cast<std::int64_t>(std::floor(x / spec.w_x)),
               static_cast<std::int64_t>(std::floor(y / spec.w_y))}]
            .push_back(static_cast<int>(i));
    }
    EqualWindowPartition part;
    part.windows.reserve(cells.size());
    for (auto& [cell, members] : cells) {
        ++part.occupancy[static_cast<int>(members.size())];
        part.windows.push_back({cell.first, cell.second, std::move(members)});
    }
    return part;
}

struct WorkloadReport {
    std::string strategy;
    std::uint64_t n_points = 0;
    std::uint64_t n_windows = 0;
    int max_occ = 0;
    int min_nonzero_occ = 0;
    double imbalance_ratio = 1.0;
    double padding_factor = 1.0;
    std::uint64_t attention_macs_actual = 0;
    std::uint64_t attention_macs_padded = 0;
    std::uint64_t group_count = 0;
    int group_size = 0;
    std::uint64_t dropped = 0;
    int d_model = 0;
    std::vector<int> bucket_edges;
    std::map<int, int> occupancy; // occupancy -> count
};

inline std::vector<int> default_bucket_edges() { return {16, 32, 64, 128, 256}; }

// Batched-padding cost model: windows are bucketed by occupancy and every
// window in a bucket is padded to that bucket's largest actual occupancy.
inline WorkloadReport padding_cost(const EqualWindowPartition& part,
                                   std::span<const int> bucket_edges,
                                   int d_model) {
    if (bucket_edges.empty()) throw config_error("padding_cost: no bucket edges");
    for (std::size_t i = 1; i < bucket_edges.size(); ++i)
        if (bucket_edges[i] <= bucket_edges[i - 1])
            throw config_error("padding_cost: bucket edges must be strictly increasing");

    WorkloadReport rep;
    rep.strategy = "equal-window";
    rep.d_model = d_model;
    rep.bucket_edges.assign(bucket_edges.begin(), bucket_edges.end());
    rep.n_windows = part.windows.size();
    rep.occupancy = part.occupancy;

    if (part.windows.empty()) return rep;

    const auto bucket_of = [&](int occ) {
        for (std::size_t b = 0; b < bucket_edges.size(); ++b)
            if (occ <= bucket_edges[b]) return b;
        throw config_error("padding_cost: occupancy " + std::to_string(occ) +
                           " exceeds final bucket edge " +
                           std::to_string(bucket_edges.back()));
    };

    std::vector<int> bucket_max(bucket_edges.size(), 0);
    int max_occ = 0;
    int min_occ = std::numeric_limits<int>::max();
    for (const auto& w : part.windows) {
        const int occ = static_cast<int>(w.members.size());
        rep.n_points += w.members.size();
        max_occ = std::max(max_occ, occ);
        min_occ = std::min(min_occ, occ);
        bucket_max[bucket_of(occ)] = std::max(bucket_max[bucket_of(occ)], occ);
    }
    rep.max_occ = max_occ;
    rep.min_nonzero_occ = min_occ;
    rep.imbalance_ratio = static_cast<double>(max_occ) / min_occ;

    const auto d = static_cast<std::uint64_t>(d_model);
    for (const auto& w : part.windows) {
        const auto occ = static_cast<std::uint64_t>(w.members.size());
        const auto padded = static_cast<std::uint64_t>(
            bucket_max[bucket_of(static_cast<int>(occ))]);
        rep.attention_macs_actual += attention_macs(occ, d);
        rep.attention_macs_padded += attention_macs(padded, d);
    }
    rep.padding_factor = static_cast<double>(rep.attention_macs_padded) /
                         static_cast<double>(rep.attention_macs_actual);
    return rep;
}

// Equal-size strategy report for the same inputs. Padding factor is 1 by
// construction: padded and actual MACs are the same number.
inline WorkloadReport equal_size_report(
    std::span<const std::array<double, 2>> coords,
    const flatten::WindowSpec& spec, int group_size, int d_model) {
    const auto plan = flatten::sort(coords, spec);
    const auto grouping = flatten::group(plan, group_size);

    WorkloadReport rep;
    rep.strategy = "equal-size";
    rep.d_model = d_model;
    rep.n_points = coords.size();
    rep.group_count = static_cast<std::uint64_t>(grouping.n_groups);
    rep.group_size = group_size;
    rep.dropped = grouping.dropped.size();
    rep.n_windows = rep.group_count;
    if (grouping.n_groups > 0) {
        rep.max_occ = group_size;
        rep.min_nonzero_occ = group_size;
        rep.occupancy[group_size] = grouping.n_groups;
    }
    rep.imbalance_ratio = 1.0;
    rep.attention_macs_actual =
        rep.group_count *
        attention_macs(static_cast<std::uint64_t>(group_size),
                       static_cast<std::uint64_t>(d_model));
    rep.attention_macs_padded = rep.attention_macs_actual;
    rep.padding_factor = 1.0;
    return rep;
}

struct StrategyComparison {
    WorkloadReport equal_window;
    WorkloadReport equal_size;
};

inline StrategyComparison compare_strategies(
    std::span<const std::array<double, 2>> coords,
    const flatten::WindowSpec& spec, int group_size, int d_model,
    std::span<const int> bucket_edges) {
    StrategyComparison cmp;
    cmp.equal_window =
        padding_cost(partition_equal_window(coords, spec), bucket_edges, d_model);
    cmp.equal_window.group_size = group_size;
    cmp.equal_size = equal_size_report(coords, spec, group_size, d_model);
    return cmp;
}

// Locality cost of equal-size grouping: per-group max pairwise distance and
// mean distance to the group centroid.
struct ProximityStats {
    std::vector<double> max_pairwise;
    std::vector<double> mean_to_centroid;
};

inline ProximityStats spatial_proximity(
    const flatten::Grouping& grouping,
    std::span<const std::array<double, 2>> coords) {
    ProximityStats stats;
    stats.max_pairwise.reserve(static_cast<std::size_t>(grouping.n_groups));
    stats.mean_to_centroid.reserve(static_cast<std::size_t>(grouping.n_groups));
    for (int g = 0; g < grouping.n_groups; ++g) {
        double cx = 0.0, cy = 0.0;
        for (int t = 0; t < grouping.group_size; ++t) {
            const auto& p = coords[static_cast<std::size_t>(grouping.member(g, t))];
            cx += p[0];
            cy += p[1];
        }
        cx /= grouping.group_size;
        cy /= grouping.group_size;

        double max_d = 0.0, mean_c = 0.0;
        for (int a = 0; a < grouping.group_size; ++a) {
            const auto& pa = coords[static_cast<std::size_t>(grouping.member(g, a))];
            mean_c += std::hypot(pa[0] - cx, pa[1] - cy);
            for (int b = a + 1; b < grouping.group_size; ++b) {
                const auto& pb =
                    coords[static_cast<std::size_t>(grouping.member(g, b))];
                max_d = std::max(max_d, std::hypot(pa[0] - pb[0], pa[1] - pb[1]));
            }
        }
        stats.max_pairwise.push_back(max_d);
        stats.mean_to_centroid.push_back(mean_c / grouping.group_size);
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const WorkloadReport& r) {
    nlohmann::json occ = nlohmann::json::object();
    for (const auto& [k, v] : r.occupancy) occ[std::to_string(k)] = v;
    j = nlohmann::json{{"strategy", r.strategy},
                       {"n_points", r.n_points},
                       {"n_windows", r.n_windows},
                       {"max_occ", r.max_occ},
                       {"min_nonzero_occ", r.min_nonzero_occ},
                       {"imbalance_ratio", r.imbalance_ratio},
                       {"padding_factor", r.padding_factor},
                       {"attention_macs_actual", r.attention_macs_actual},
                       {"attention_macs_padded", r.attention_macs_padded},
                       {"group_count", r.group_count},
                       {"group_size", r.group_size},
                       {"dropped", r.dropped},
                       {"d_model", r.d_model},
                       {"bucket_edges", r.bucket_edges},
                       {"occupancy", std::move(occ)}};
}

inline void from_json(const nlohmann::json& j, WorkloadReport& r) {
    j.at("strategy").get_to(r.strategy);
    j.at("n_points").get_to(r.n_points);
    j.at("n_windows").get_to(r.n_windows);
    j.at("max_occ").get_to(r.max_occ);
    j.at("min_nonzero_occ").get_to(r.min_nonzero_occ);
    j.at("imbalance_ratio").get_to(r.imbalance_ratio);
    j.at("padding_factor").get_to(r.padding_factor);
    j.at("attention_macs_actual").get_to(r.attention_macs_actual);
    j.at("attention_macs_padded").get_to(r.attention_macs_padded);
    j.at("group_count").get_to(r.group_count);
    j.at("group_size").get_to(r.group_size);
    j.at("dropped").get_to(r.dropped);
    r.d_model = j.value("d_model", 0);
    if (j.contains("bucket_edges"))
        j.at("bucket_edges").get_to(r.bucket_edges);
    r.occupancy.clear();
    if (j.contains("occupancy"))
        for (const auto& [k, v] : j.at("occupancy").items())
            r.occupancy[std::stoi(k)] = v.get<int>();
}

inline std::string csv_header() {
    return "strategy,n_points,n_windows,max_occ,min_nonzero_occ,imbalance_ratio,"
           "padding_factor,attention_macs_actual,attention_macs_padded,"
           "group_count,group_size,dropped,d_model";
}

inline std::string to_csv_row(const WorkloadReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << r.strategy << ',' << r.n_points << ',' << r.n_windows << ','
       << r.max_occ << ',' << r.min_nonzero_occ << ',' << r.imbalance_ratio
       << ',' << r.padding_factor << ',' << r.attention_macs_actual << ','
       << r.attention_macs_padded << ',' << r.group_count << ',' << r.group_size
       << ',' << r.dropped << ',' << r.d_model;
    return os.str();
}

} // namespace fwa::workload
