#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fwa/dense.hpp"
#include "fwa/error.hpp"
#include "fwa/rng.hpp"

namespace fwa::geometry {

struct Point {
    double x = 0.0;
    double y = 0.0;
    std::vector<double> feature;
};

struct PointCloud {
    std::vector<Point> points;
    std::size_t f_in = 0;

    std::size_t size() const { return points.size(); }

    std::vector<std::array<double, 2>> coords() const {
        std::vector<std::array<double, 2>> c(points.size());
        for (std::size_t i = 0; i < points.size(); ++i)
            c[i] = {points[i].x, points[i].y};
        return c;
    }
};

// Sparse BEV pillars: one row per occupied cell, ordered by ascending
// (x-cell, y-cell).
struct PillarSet {
    std::vector<std::array<double, 2>> coords; // cell centers, meters
    Dense2<double> features;                   // n_pillars x d_out
    double resolution = 0.0;

    std::size_t size() const { return coords.size(); }
};

// The learned pillar feature map: mean-pooled input features go through one
// linear layer then GELU.
struct PillarParams {
    Dense2<double> weight; // d_out x f_in
    std::vector<double> bias;

    std::size_t d_out() const { return weight.rows; }
};

inline PillarParams identity_pillar_params(std::size_t f_in) {
    PillarParams p;
    p.weight = Dense2<double>(f_in, f_in);
    for (std::size_t i = 0; i < f_in; ++i) p.weight(i, i) = 1.0;
    p.bias.assign(f_in, 0.0);
    return p;
}

inline PillarParams random_pillar_params(std::size_t f_in, std::size_t d_out,
                                         std::uint64_t seed) {
    DetRng rng(seed);
    PillarParams p;
    p.weight = Dense2<double>(d_out, f_in);
    for (auto& w : p.weight.data) w = rng.normal(0.0, 0.5);
    p.bias.assign(d_out, 0.0);
    return p;
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

enum class PointFormat { Csv, Binary };

namespace detail {

inline double parse_double(std::string_view tok, std::size_t line_no) {
    double v = 0.0;
    const char* first = tok.data();
    const char* last = tok.data() + tok.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last)
        throw parse_error("line " + std::to_string(line_no) +
                          ": bad numeric field '" + std::string(tok) + "'");
    return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
        s.remove_suffix(1);
    return s;
}

} // namespace detail

// CSV layout: header `x,y,f0,...,f{k-1}`, one point per row.
inline PointCloud ingest_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line))
        throw parse_error("line 1: missing CSV header");

    const auto header = detail::split_csv(detail::trim(line));
    if (header.size() < 2 || detail::trim(header[0]) != "x" ||
        detail::trim(header[1]) != "y")
        throw schema_error("line 1: header must start with 'x,y'");
    for (std::size_t i = 2; i < header.size(); ++i) {
        const std::string expect = "f" + std::to_string(i - 2);
        if (detail::trim(header[i]) != expect)
            throw schema_error("line 1: expected feature column '" + expect +
                               "', got '" + std::string(header[i]) + "'");
    }

    PointCloud pc;
    pc.f_in = header.size() - 2;

    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        const auto trimmed = detail::trim(line);
        if (trimmed.empty()) continue;
        const auto fields = detail::split_csv(trimmed);
        if (fields.size() != header.size())
            throw schema_error("line " + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " fields, got " +
                               std::to_string(fields.size()));
        Point p;
        p.x = detail::parse_double(detail::trim(fields[0]), line_no);
        p.y = detail::parse_double(detail::trim(fields[1]), line_no);
        p.feature.resize(pc.f_in);
        for (std::size_t i = 0; i < pc.f_in; ++i)
            p.feature[i] = detail::parse_double(detail::trim(fields[i + 2]), line_no);
        if (!std::isfinite(p.x) || !std::isfinite(p.y))
            throw parse_error("line " + std::to_string(line_no) +
                              ": non-finite coordinate");
        pc.points.push_back(std::move(p));
    }
    return pc;
}

// Binary layout: magic `FWPC`, u32 point count, u32 f_in, then
// count * (2 + f_in) little-endian f64 values.
inline PointCloud ingest_binary(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "FWPC", 4) != 0)
        throw parse_error("bad magic, expected FWPC");
    std::uint32_t count = 0, f_in = 0;
    in.read(reinterpret_cast<char*>(&count), 4);
    in.read(reinterpret_cast<char*>(&f_in), 4);
    if (!in) throw parse_error("truncated header");

    PointCloud pc;
    pc.f_in = f_in;
    pc.points.resize(count);
    std::vector<double> rec(2 + f_in);
    for (std::uint32_t i = 0; i < count; ++i) {
        in.read(reinterpret_cast<char*>(rec.data()),
                static_cast<std::streamsize>(rec.size() * sizeof(double)));
        if (!in)
            throw parse_error("truncated record " + std::to_string(i));
        pc.points[i].x = rec[0];
        pc.points[i].y = rec[1];
        pc.points[i].feature.assign(rec.begin() + 2, rec.end());
    }
    return pc;
}

inline PointCloud ingest(const std::string& path, PointFormat format) {
    std::ifstream in(path, format == PointFormat::Binary ? std::ios::binary
                                                         : std::ios::in);
    if (!in) throw parse_error("cannot open '" + path + "'");
    return format == PointFormat::Csv ? ingest_csv(in) : ingest_binary(in);
}

inline void write_csv(std::ostream& out, const PointCloud& pc) {
    out << "x,y";
    for (std::size_t i = 0; i < pc.f_in; ++i) out << ",f" << i;
    out << "\n";
    char buf[32];
    const auto put = [&](double v, char sep) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << buf << sep;
    };
    for (const auto& p : pc.points) {
        put(p.x, ',');
        if (pc.f_in == 0) {
            std::snprintf(buf, sizeof(buf), "%.17g", p.y);
            out << buf << "\n";
            continue;
        }
        put(p.y, ',');
        for (std::size_t i = 0; i + 1 < pc.f_in; ++i) put(p.feature[i], ',');
        std::snprintf(buf, sizeof(buf), "%.17g", p.feature[pc.f_in - 1]);
        out << buf << "\n";
    }
}

inline void write_binary(std::ostream& out, const PointCloud& pc) {
    out.write("FWPC", 4);
    const std::uint32_t count = static_cast<std::uint32_t>(pc.points.size());
    const std::uint32_t f_in = static_cast<std::uint32_t>(pc.f_in);
    out.write(reinterpret_cast<const char*>(&count), 4);
    out.write(reinterpret_cast<const char*>(&f_in), 4);
    for (const auto& p : pc.points) {
        out.write(reinterpret_cast<const char*>(&p.x), 8);
        out.write(reinterpret_cast<const char*>(&p.y), 8);
        out.write(reinterpret_cast<const char*>(p.feature.data()),
                  static_cast<std::streamsize>(p.feature.size() * 8));
    }
}

// ---------------------------------------------------------------------------
// Pillarization
// ---------------------------------------------------------------------------

// Points sharing a resolution-sized cell are mean-pooled (pairwise summation in
// ingestion order), then mapped through the linear layer and GELU. Cells come
// out in ascending lexicographic (x-cell, y-cell) order.
inline PillarSet pillarize(const PointCloud& pc, double resolution,
                           const PillarParams& params) {
    if (resolution <= 0.0) throw config_error("pillarize: resolution must be > 0");
    if (params.d_out() < 1) throw config_error("pillarize: d_out must be >= 1");
    if (params.weight.cols != pc.f_in)
        throw shape_error("pillarize: weight expects f_in=" +
                          std::to_string(params.weight.cols) + ", cloud has " +
                          std::to_string(pc.f_in));
    if (params.bias.size() != params.d_out())
        throw shape_error("pillarize: bias length mismatch");

    PillarSet out;
    out.resolution = resolution;
    if (pc.points.empty()) {
        out.features = Dense2<double>(0, params.d_out());
        return out;
    }

    // std::map keys give the lexicographic output order directly.
    std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < pc.points.size(); ++i) {
        const auto cx = static_cast<std::int64_t>(
            std::floor(pc.points[i].x / resolution));
        const auto cy = static_cast<std::int64_t>(
            std::floor(pc.points[i].y / resolution));
        cells[{cx, cy}].push_back(i);
    }

    const std::size_t d_out = params.d_out();
    out.features = Dense2<double>(cells.size(), d_out);
    out.coords.reserve(cells.size());

    std::vector<double> channel;
    std::vector<double> pooled(pc.f_in);
    std::size_t row = 0;
    for (const auto& [cell, members] : cells) {
        for (std::size_t c = 0; c < pc.f_in; ++c) {
            channel.resize(members.size());
            for (std::size_t m = 0; m < members.size(); ++m)
                channel[m] = pc.points[members[m]].feature[c];
            pooled[c] = pairwise_sum(std::span<const double>(channel)) /
                        static_cast<double>(members.size());
        }
        for (std::size_t o = 0; o < d_out; ++o) {
            double acc = params.bias[o];
            const double* w = params.weight.row(o);
            for (std::size_t c = 0; c < pc.f_in; ++c) acc += w[c] * pooled[c];
            out.features(row, o) = gelu(acc);
        }
        out.coords.push_back({(static_cast<double>(cell.first) + 0.5) * resolution,
                              (static_cast<double>(cell.second) + 0.5) * resolution});
        ++row;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

// Clustered scene generator: cluster centers uniform over the extent
// (centered on the origin), members normal around the center, plus optional
// uniform background points. Output order is cluster-by-cluster then
// background, which fixes the tie-breaking identity downstream.
struct SceneSpec {
    int n_clusters = 0;
    int points_per_cluster_min = 1;
    int points_per_cluster_max = 1;
    double cluster_sigma = 1.0;
    double extent_x = 100.0;
    double extent_y = 100.0;
    int n_background = 0;
    int f_in = 1;
};

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
    j = nlohmann::json{{"n_clusters", s.n_clusters},
                       {"points_per_cluster_min", s.points_per_cluster_min},
                       {"points_per_cluster_max", s.points_per_cluster_max},
                       {"cluster_sigma", s.cluster_sigma},
                       {"extent_x", s.extent_x},
                       {"extent_y", s.extent_y},
                       {"n_background", s.n_background},
                       {"f_in", s.f_in}};
}

inline void from_json(const nlohmann::json& j, SceneSpec& s) {
    j.at("n_clusters").get_to(s.n_clusters);
    j.at("points_per_cluster_min").get_to(s.points_per_cluster_min);
    j.at("points_per_cluster_max").get_to(s.points_per_cluster_max);
    j.at("cluster_sigma").get_to(s.cluster_sigma);
    j.at("extent_x").get_to(s.extent_x);
    j.at("extent_y").get_to(s.extent_y);
    s.n_background = j.value("n_background", 0);
    s.f_in = j.value("f_in", 1);
}

inline void validate(const SceneSpec& s) {
    if (s.extent_x <= 0.0 || s.extent_y <= 0.0)
        throw config_error("scene: extents must be positive");
    if (s.n_clusters < 0 || s.n_background < 0)
        throw config_error("scene: counts must be non-negative");
    if (s.points_per_cluster_min < 1 ||
        s.points_per_cluster_max < s.points_per_cluster_min)
        throw config_error("scene: need 1 <= points_per_cluster_min <= max");
    if (s.cluster_sigma < 0.0) throw config_error("scene: sigma must be >= 0");
    if (s.f_in < 0) throw config_error("scene: f_in must be >= 0");
}

inline PointCloud generate_synthetic(const SceneSpec& spec, std::uint64_t seed) {
    validate(spec);
    DetRng rng(seed);
    PointCloud pc;
    pc.f_in = static_cast<std::size_t>(spec.f_in);

    const double hx = spec.extent_x / 2.0;
    const double hy = spec.extent_y / 2.0;
    const auto emit = [&](double x, double y) {
        Point p;
        p.x = x;
        p.y = y;
        p.feature.resize(pc.f_in);
        for (auto& f : p.feature) f = rng.normal();
        pc.points.push_back(std::move(p));
    };

    for (int c = 0; c < spec.n_clusters; ++c) {
        const double cx = rng.uniform(-hx, hx);
        const double cy = rng.uniform(-hy, hy);
        const auto span = static_cast<std::uint64_t>(
            spec.points_per_cluster_max - spec.points_per_cluster_min + 1);
        const int count = spec.points_per_cluster_min +
                          static_cast<int>(rng.uniform_int(span));
        for (int i = 0; i < count; ++i)
            emit(cx + spec.cluster_sigma * rng.normal(),
                 cy + spec.cluster_sigma * rng.normal());
    }
    for (int i = 0; i < spec.n_background; ++i)
        emit(rng.uniform(-hx, hx), rng.uniform(-hy, hy));
    return pc;
}

} // namespace fwa::geometry
