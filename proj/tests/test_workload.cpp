#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <vector>

#include "fwa/geometry.hpp"
#include "fwa/oracle.hpp"
#include "fwa/rng.hpp"
#include "fwa/workload.hpp"

using namespace fwa;
using namespace fwa::workload;
using fwa::flatten::Axis;
using fwa::flatten::WindowSpec;

namespace {

std::vector<std::array<double, 2>> clustered_coords(std::uint64_t seed,
                                                    int n_clusters = 12,
                                                    int per_cluster = 80,
                                                    int background = 200) {
    const geometry::SceneSpec spec{.n_clusters = n_clusters,
                                   .points_per_cluster_min = per_cluster,
                                   .points_per_cluster_max = per_cluster,
                                   .cluster_sigma = 1.0,
                                   .extent_x = 100.0,
                                   .extent_y = 100.0,
                                   .n_background = background,
                                   .f_in = 1};
    return geometry::generate_synthetic(spec, seed).coords();
}

} // namespace

TEST_CASE("four points in one cell form one window of occupancy four") {
    const std::vector<std::array<double, 2>> coords = {
        {0.1, 0.1}, {0.3, 0.2}, {0.2, 0.4}, {0.45, 0.45}};
    const auto part = partition_equal_window(coords, WindowSpec{.w_x = 0.5, .w_y = 0.5});
    REQUIRE(part.windows.size() == 1);
    CHECK(part.windows[0].members.size() == 4);
    CHECK(part.occupancy.at(4) == 1);
}

TEST_CASE("one point per cell gives uniform occupancy and imbalance one") {
    std::vector<std::array<double, 2>> coords;
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) coords.push_back({i + 0.5, j + 0.5});
    const WindowSpec spec{.w_x = 1.0, .w_y = 1.0};
    const auto part = partition_equal_window(coords, spec);
    REQUIRE(part.windows.size() == 36);
    const auto rep = padding_cost(part, default_bucket_edges(), 32);
    CHECK(rep.max_occ == 1);
    CHECK(rep.min_nonzero_occ == 1);
    CHECK(rep.imbalance_ratio == 1.0);
    CHECK(rep.padding_factor == 1.0);
}

TEST_CASE("partition occupancies match the counting oracle") {
    const auto coords = clustered_coords(37);
    const WindowSpec spec{.w_x = 2.88, .w_y = 2.88};
    const auto part = partition_equal_window(coords, spec);
    const auto counted = oracle::count_windows(coords, spec);

    REQUIRE(part.windows.size() == counted.size());
    std::size_t total = 0;
    for (const auto& w : part.windows) {
        REQUIRE(counted.count({w.wx, w.wy}) == 1);
        CHECK(counted.at({w.wx, w.wy}) == static_cast<int>(w.members.size()));
        total += w.members.size();
    }
    CHECK(total == coords.size()); // conservation
}

TEST_CASE("window order is ascending lexicographic") {
    const auto coords = clustered_coords(41, 6, 40, 60);
    const auto part =
        partition_equal_window(coords, WindowSpec{.w_x = 2.0, .w_y = 2.0});
    for (std::size_t i = 1; i < part.windows.size(); ++i) {
        const auto& a = part.windows[i - 1];
        const auto& b = part.windows[i];
        CHECK((a.wx < b.wx || (a.wx == b.wx && a.wy < b.wy)));
    }
}

TEST_CASE("padding cost matches the closed-form two-window example") {
    // occupancies {1, 9}, one bucket, both padded to 9
    std::vector<std::array<double, 2>> coords;
    coords.push_back({0.1, 0.1});
    for (int i = 0; i < 9; ++i) coords.push_back({5.1 + 0.01 * i, 0.1});
    const auto part =
        partition_equal_window(coords, WindowSpec{.w_x = 2.0, .w_y = 2.0});
    REQUIRE(part.windows.size() == 2);

    const std::vector<int> edges = {16};
    const std::uint64_t d = 32;
    const auto rep = padding_cost(part, edges, static_cast<int>(d));
    const auto padded = 2 * (2 * 81 * d + 4 * 9 * d * d);
    const auto actual = (2 * 1 * d + 4 * 1 * d * d) + (2 * 81 * d + 4 * 9 * d * d);
    CHECK(rep.attention_macs_padded == padded);
    CHECK(rep.attention_macs_actual == actual);
    CHECK(rep.padding_factor ==
          static_cast<double>(padded) / static_cast<double>(actual));
}

TEST_CASE("equal occupancies need no padding") {
    std::vector<std::array<double, 2>> coords;
    for (int w = 0; w < 5; ++w)
        for (int i = 0; i < 7; ++i) coords.push_back({w * 3.0 + 0.2 + 0.01 * i, 0.5});
    const auto part =
        partition_equal_window(coords, WindowSpec{.w_x = 3.0, .w_y = 3.0});
    const auto rep = padding_cost(part, default_bucket_edges(), 16);
    CHECK(rep.padding_factor == 1.0);
}

TEST_CASE("occupancy beyond the final bucket edge is a config error") {
    std::vector<std::array<double, 2>> coords(20, {0.1, 0.1});
    const auto part =
        partition_equal_window(coords, WindowSpec{.w_x = 1.0, .w_y = 1.0});
    const std::vector<int> edges = {16};
    CHECK_THROWS_AS(padding_cost(part, edges, 32), config_error);
}

TEST_CASE("bucket edges must strictly increase") {
    std::vector<std::array<double, 2>> coords = {{0.1, 0.1}};
    const auto part =
        partition_equal_window(coords, WindowSpec{.w_x = 1.0, .w_y = 1.0});
    const std::vector<int> edges = {16, 16};
    CHECK_THROWS_AS(padding_cost(part, edges, 32), config_error);
}

TEST_CASE("equal-size strategy reports padding factor one exactly") {
    const auto coords = clustered_coords(43);
    for (const int g : {1, 7, 69}) {
        const auto rep = equal_size_report(
            coords, WindowSpec{.w_x = 2.88, .w_y = 2.88}, g, 64);
        CHECK(rep.padding_factor == 1.0);
        CHECK(rep.attention_macs_actual == rep.attention_macs_padded);
        CHECK(rep.dropped == coords.size() % static_cast<std::size_t>(g));
        CHECK(rep.group_count == coords.size() / static_cast<std::size_t>(g));
    }
}

TEST_CASE("both strategies are padding-free on a uniform grid with unit groups") {
    std::vector<std::array<double, 2>> coords;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) coords.push_back({i + 0.5, j + 0.5});
    const WindowSpec spec{.w_x = 1.0, .w_y = 1.0};
    const auto edges = default_bucket_edges();
    const auto cmp = compare_strategies(coords, spec, 1, 32, edges);
    CHECK(cmp.equal_window.padding_factor == 1.0);
    CHECK(cmp.equal_size.padding_factor == 1.0);
}

TEST_CASE("clustered scenes pad the equal-window strategy but not equal-size") {
    const auto coords = clustered_coords(47);
    const auto edges = default_bucket_edges();
    const auto cmp = compare_strategies(
        coords, WindowSpec{.w_x = 2.88, .w_y = 2.88}, 69, 64, edges);
    CHECK(cmp.equal_size.padding_factor == 1.0);
    CHECK(cmp.equal_window.padding_factor > 1.0);
    CHECK(cmp.equal_window.n_points == coords.size());
}

TEST_CASE("a heavy cluster against sparse singles exceeds 80x imbalance") {
    DetRng rng(53);
    std::vector<std::array<double, 2>> coords;
    for (int i = 0; i < 800; ++i)
        coords.push_back({rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)});
    for (int i = 0; i < 10; ++i)
        coords.push_back({20.0 + 3.0 * i + 0.5, 20.0});
    const auto part =
        partition_equal_window(coords, WindowSpec{.w_x = 2.88, .w_y = 2.88});
    const std::vector<int> edges = {16, 32, 64, 128, 256, 512, 1024};
    const auto rep = padding_cost(part, edges, 64);
    CHECK(rep.imbalance_ratio >= 80.0);
}

TEST_CASE("an empty scene yields an empty, padding-free report") {
    const std::vector<std::array<double, 2>> coords;
    const auto part =
        partition_equal_window(coords, WindowSpec{.w_x = 1.0, .w_y = 1.0});
    CHECK(part.windows.empty());
    const auto rep = padding_cost(part, default_bucket_edges(), 32);
    CHECK(rep.n_points == 0);
    CHECK(rep.padding_factor == 1.0);
    const auto es = equal_size_report(coords, WindowSpec{.w_x = 1.0, .w_y = 1.0}, 4, 32);
    CHECK(es.group_count == 0);
    CHECK(es.padding_factor == 1.0);
}

TEST_CASE("mac counting equals the closed form exactly") {
    for (const std::uint64_t l : {1ull, 9ull, 69ull, 400ull})
        for (const std::uint64_t d : {16ull, 64ull, 128ull})
            CHECK(attention_macs(l, d) == 2 * l * l * d + 4 * l * d * d);
}

TEST_CASE("coarsening buckets never decreases the padding factor") {
    DetRng rng(59);
    for (int trial = 0; trial < 20; ++trial) {
        const auto coords = clustered_coords(100 + trial, 8, 60, 100);
        const auto part =
            partition_equal_window(coords, WindowSpec{.w_x = 2.88, .w_y = 2.88});
        std::vector<int> edges = {4, 8, 16, 32, 64, 128, 256, 512};
        const auto fine = padding_cost(part, edges, 32);

        // merge a random adjacent pair (drop one interior edge)
        std::vector<int> merged = edges;
        merged.erase(merged.begin() +
                     static_cast<std::ptrdiff_t>(rng.uniform_int(merged.size() - 1)));
        const auto coarse = padding_cost(part, merged, 32);
        CHECK(coarse.padding_factor >= fine.padding_factor - 1e-15);
    }
}

TEST_CASE("coincident points have zero proximity stats") {
    std::vector<std::array<double, 2>> coords(12, {3.0, 4.0});
    const auto plan =
        flatten::sort(coords, WindowSpec{.w_x = 2.0, .w_y = 2.0});
    const auto grouping = flatten::group(plan, 4);
    const auto stats = spatial_proximity(grouping, coords);
    for (const double v : stats.max_pairwise) CHECK(v == 0.0);
    for (const double v : stats.mean_to_centroid) CHECK(v == 0.0);
}

TEST_CASE("a group spanning two adjacent major windows obeys the geometric bound") {
    // Two adjacent windows along x densely filled; group size forces a span.
    const double res = 0.32;
    const WindowSpec spec{.w_x = 9 * res, .w_y = 9 * res};
    std::vector<std::array<double, 2>> coords;
    for (int i = 0; i < 18; ++i)
        for (int j = 0; j < 9; ++j)
            coords.push_back({(i + 0.5) * res, (j + 0.5) * res});
    const auto plan = flatten::sort(coords, spec);
    const auto grouping = flatten::group(plan, 69);
    const auto stats = spatial_proximity(grouping, coords);
    const double diag = std::hypot(spec.w_x, spec.w_y);
    const double bound = 2.0 * spec.w_x + diag;
    for (const double v : stats.max_pairwise) CHECK(v <= bound);
}

TEST_CASE("proximity stats match the all-pairs oracle") {
    const auto coords = clustered_coords(61, 5, 50, 40);
    const auto plan =
        flatten::sort(coords, WindowSpec{.w_x = 2.88, .w_y = 2.88});
    const auto grouping = flatten::group(plan, 23);
    const auto got = spatial_proximity(grouping, coords);
    const auto want = oracle::all_pairs_distances(grouping, coords);
    REQUIRE(got.max_pairwise.size() == want.max_pairwise.size());
    for (std::size_t i = 0; i < got.max_pairwise.size(); ++i) {
        CHECK(got.max_pairwise[i] == Catch::Approx(want.max_pairwise[i]).margin(1e-12));
        CHECK(got.mean_to_centroid[i] ==
              Catch::Approx(want.mean_to_centroid[i]).margin(1e-12));
    }
}

TEST_CASE("workload report json round trip") {
    const auto coords = clustered_coords(67, 4, 30, 20);
    const auto rep = padding_cost(
        partition_equal_window(coords, WindowSpec{.w_x = 2.88, .w_y = 2.88}),
        default_bucket_edges(), 64);
    const nlohmann::json j = rep;
    const auto back = j.get<WorkloadReport>();
    CHECK(back.strategy == rep.strategy);
    CHECK(back.n_points == rep.n_points);
    CHECK(back.n_windows == rep.n_windows);
    CHECK(back.imbalance_ratio == rep.imbalance_ratio);
    CHECK(back.padding_factor == rep.padding_factor);
    CHECK(back.attention_macs_actual == rep.attention_macs_actual);
    CHECK(back.occupancy == rep.occupancy);
}

TEST_CASE("csv row has as many fields as the header") {
    const auto coords = clustered_coords(71, 3, 20, 10);
    const auto rep = equal_size_report(
        coords, WindowSpec{.w_x = 2.88, .w_y = 2.88}, 16, 32);
    const auto header = csv_header();
    const auto row = to_csv_row(rep);
    CHECK(std::count(header.begin(), header.end(), ',') ==
          std::count(row.begin(), row.end(), ','));
}
