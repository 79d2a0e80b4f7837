// Command-line front end: scene generation, ingestion, partition analysis,
// backbone execution, micro-benchmarks, and report emission.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fwa/backbone.hpp"
#include "fwa/bench.hpp"
#include "fwa/error.hpp"
#include "fwa/flatten.hpp"
#include "fwa/geometry.hpp"
#include "fwa/kernels.hpp"
#include "fwa/workload.hpp"

namespace {

using nlohmann::json;

struct GlobalOpts {
    std::uint64_t seed = 0;
    int threads = 1;
    std::string out;
    std::string format = "json";
};

void emit(const GlobalOpts& g, const std::string& text) {
    if (g.out.empty()) {
        std::cout << text << "\n";
        return;
    }
    std::ofstream f(g.out);
    if (!f) throw fwa::config_error("cannot write '" + g.out + "'");
    f << text << "\n";
}

fwa::geometry::PointCloud read_points(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw fwa::config_error("missing input file '" + path + "'");
    char magic[4] = {};
    probe.read(magic, 4);
    probe.close();
    const bool binary = std::memcmp(magic, "FWPC", 4) == 0;
    return fwa::geometry::ingest(path, binary
                                           ? fwa::geometry::PointFormat::Binary
                                           : fwa::geometry::PointFormat::Csv);
}

fwa::backbone::FwaConfig read_config(const std::string& path) {
    if (path.empty()) return {};
    std::ifstream f(path);
    if (!f) throw fwa::config_error("missing config file '" + path + "'");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw fwa::parse_error("config '" + path + "': " + e.what());
    }
    return j.get<fwa::backbone::FwaConfig>();
}

std::string config_digest(const fwa::backbone::FwaConfig& cfg) {
    return fwa::bench::fnv1a64_hex(json(cfg).dump());
}

// Pillarize with a seeded feature map projecting straight to d_model, then
// derive block parameters: from a FWAP file when given, otherwise seeded.
struct Pipeline {
    fwa::geometry::PillarSet pillars;
    fwa::backbone::BackboneParams params;
};

Pipeline build_pipeline(const std::string& input,
                        const fwa::backbone::FwaConfig& cfg,
                        const std::string& params_path, std::uint64_t seed) {
    const auto cloud = read_points(input);
    Pipeline p;
    p.pillars = fwa::geometry::pillarize(
        cloud, cfg.resolution,
        fwa::geometry::random_pillar_params(
            cloud.f_in, static_cast<std::size_t>(cfg.d_model), seed));
    if (params_path.empty()) {
        p.params = fwa::backbone::init_backbone_params(
            cfg, p.pillars.features.cols, seed);
    } else {
        std::ifstream f(params_path, std::ios::binary);
        if (!f) throw fwa::config_error("missing params file '" + params_path + "'");
        for (int b = 0; b < cfg.n_blocks; ++b) {
            auto block = fwa::kernels::load_params(f);
            if (block.d_model != cfg.d_model || block.n_heads != cfg.n_heads ||
                block.d_ff != cfg.d_ff)
                throw fwa::config_error("params record " + std::to_string(b) +
                                        " disagrees with config dims");
            p.params.blocks.push_back(std::move(block));
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

int cmd_gen(const GlobalOpts& g, const std::string& spec_path) {
    const std::string& out_path = g.out;
    if (out_path.empty())
        throw fwa::config_error("gen writes a point file; --out is required");
    std::ifstream f(spec_path);
    if (!f) throw fwa::config_error("missing scene spec '" + spec_path + "'");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw fwa::parse_error("scene spec: " + std::string(e.what()));
    }
    const auto spec = j.get<fwa::geometry::SceneSpec>();
    const auto cloud = fwa::geometry::generate_synthetic(spec, g.seed);

    const bool csv = std::filesystem::path(out_path).extension() == ".csv";
    std::ofstream out(out_path, csv ? std::ios::out : std::ios::binary);
    if (!out) throw fwa::config_error("cannot write '" + out_path + "'");
    if (csv)
        fwa::geometry::write_csv(out, cloud);
    else
        fwa::geometry::write_binary(out, cloud);
    std::cerr << "wrote " << cloud.size() << " points to " << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// partition
// ---------------------------------------------------------------------------

int cmd_partition(const GlobalOpts& g, const std::string& input, double wx,
                  double wy, bool shift, const std::string& major, int group,
                  int d_model, const std::string& strategy,
                  std::vector<int> buckets, bool emit_plan) {
    const auto cloud = read_points(input);
    const auto coords = cloud.coords();
    const fwa::flatten::WindowSpec spec{
        .w_x = wx,
        .w_y = wy,
        .shift = shift,
        .major_axis = major == "Y" ? fwa::flatten::Axis::Y
                                   : fwa::flatten::Axis::X};
    if (buckets.empty()) buckets = fwa::workload::default_bucket_edges();

    json out = json::object();
    std::vector<fwa::workload::WorkloadReport> reports;
    if (strategy == "equal-window" || strategy == "both") {
        auto rep = fwa::workload::padding_cost(
            fwa::workload::partition_equal_window(coords, spec), buckets,
            d_model);
        out["equal_window"] = rep;
        reports.push_back(std::move(rep));
    }
    if (strategy == "equal-size" || strategy == "both") {
        auto rep = fwa::workload::equal_size_report(coords, spec, group, d_model);
        out["equal_size"] = rep;
        reports.push_back(std::move(rep));
    }
    if (reports.empty())
        throw fwa::config_error("unknown strategy '" + strategy + "'");

    if (emit_plan) {
        const auto plan = fwa::flatten::sort(coords, spec);
        out["sort_plan"] = plan;
        out["grouping"] = fwa::flatten::group(plan, group);
    }

    if (g.format == "csv") {
        std::ostringstream os;
        os << fwa::workload::csv_header() << "\n";
        for (const auto& r : reports) os << fwa::workload::to_csv_row(r) << "\n";
        emit(g, os.str());
    } else {
        emit(g, out.dump(2));
    }
    return 0;
}

// ---------------------------------------------------------------------------
// attend
// ---------------------------------------------------------------------------

int cmd_attend(const GlobalOpts& g, const std::string& input,
               const std::string& config_path, const std::string& params_path,
               const std::string& features_out) {
    const auto cfg = read_config(config_path);
    fwa::backbone::validate(cfg);
    const auto pipe = build_pipeline(input, cfg, params_path, g.seed);
    const auto result =
        fwa::backbone::run_backbone(pipe.pillars, cfg, pipe.params, g.threads);

    json j;
    j["n_input"] = result.n_input;
    j["n_kept"] = result.kept_indices.size();
    j["cache"] = {{"computed", result.stats.cache.computed},
                  {"hits", result.stats.cache.hits}};
    j["dropped_per_block"] = result.stats.dropped_per_block;
    j["config_digest"] = config_digest(cfg);

    json coords = json::array();
    std::vector<double> row_checksums;
    row_checksums.reserve(result.coords.size());
    for (std::size_t i = 0; i < result.coords.size(); ++i) {
        coords.push_back({result.coords[i][0], result.coords[i][1]});
        double sum = 0.0;
        for (std::size_t c = 0; c < result.features.cols; ++c)
            sum += static_cast<double>(result.features(i, c));
        row_checksums.push_back(sum);
    }
    j["coords"] = std::move(coords);
    j["row_checksums"] = std::move(row_checksums);
    j["feature_hash"] = fwa::bench::fnv1a64_hex(
        std::string(reinterpret_cast<const char*>(result.features.data.data()),
                    result.features.data.size() * sizeof(float)));

    if (!features_out.empty()) {
        std::ofstream f(features_out, std::ios::binary);
        if (!f) throw fwa::config_error("cannot write '" + features_out + "'");
        f.write("FWFB", 4);
        const auto n = static_cast<std::uint32_t>(result.features.rows);
        const auto d = static_cast<std::uint32_t>(result.features.cols);
        f.write(reinterpret_cast<const char*>(&n), 4);
        f.write(reinterpret_cast<const char*>(&d), 4);
        f.write(reinterpret_cast<const char*>(result.features.data.data()),
                static_cast<std::streamsize>(result.features.data.size() *
                                             sizeof(float)));
    }

    emit(g, j.dump(2));
    return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

int cmd_bench(const GlobalOpts& g, const std::string& input,
              const std::string& config_path, const std::string& mode,
              int runs, int warmup, std::vector<int> buckets,
              const std::string& name_override,
              const std::string& params_path) {
    const auto cfg = read_config(config_path);
    fwa::backbone::validate(cfg);
    if (runs < 1) throw fwa::config_error("--runs must be >= 1");
    if (warmup < 0) throw fwa::config_error("--warmup must be >= 0");
    if (buckets.empty()) buckets = fwa::workload::default_bucket_edges();

    const auto pipe = build_pipeline(input, cfg, params_path, g.seed);
    const std::string digest = config_digest(cfg);

    fwa::bench::BenchResult result;
    if (mode == "group") {
        result = fwa::bench::bench_group(pipe.pillars, cfg, pipe.params, digest,
                                         runs, warmup, g.threads);
    } else if (mode == "global") {
        result = fwa::bench::bench_global(pipe.pillars, cfg, pipe.params, digest,
                                          runs, warmup, g.threads);
    } else if (mode == "equal-window") {
        result = fwa::bench::bench_equal_window(pipe.pillars, cfg, pipe.params,
                                                buckets, digest, runs, warmup,
                                                g.threads);
    } else {
        throw fwa::config_error("unknown mode '" + mode + "'");
    }
    if (!name_override.empty()) result.name = name_override;

    emit(g, json(result).dump(2));
    return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportRow {
    std::string kind;
    std::string name;
    std::uint64_t n_points = 0;
    std::optional<fwa::bench::BenchResult> bench;
    std::optional<fwa::workload::WorkloadReport> workload;
};

int cmd_report(const GlobalOpts& g, const std::vector<std::string>& inputs) {
    std::vector<ReportRow> rows;
    for (const auto& path : inputs) {
        std::ifstream f(path);
        if (!f) throw fwa::config_error("missing report input '" + path + "'");
        json j;
        try {
            f >> j;
        } catch (const json::exception& e) {
            throw fwa::parse_error("report input '" + path + "': " + e.what());
        }
        const auto classify = [&](const json& node) {
            ReportRow row;
            if (node.contains("wall_time_ms")) {
                row.kind = "bench";
                row.bench = node.get<fwa::bench::BenchResult>();
                row.name = row.bench->name;
                row.n_points = row.bench->n_points;
            } else if (node.contains("strategy")) {
                row.kind = "workload";
                row.workload = node.get<fwa::workload::WorkloadReport>();
                row.name = row.workload->strategy;
                row.n_points = row.workload->n_points;
            } else {
                throw fwa::parse_error("report input '" + path +
                                       "': unrecognized record");
            }
            rows.push_back(std::move(row));
        };
        if (j.contains("equal_window")) classify(j.at("equal_window"));
        if (j.contains("equal_size")) classify(j.at("equal_size"));
        if (!j.contains("equal_window") && !j.contains("equal_size")) classify(j);
    }

    // Speedup rows: equal-window vs group wall time at matched point counts.
    struct Speedup {
        std::uint64_t n_points;
        double equal_window_ms;
        double group_ms;
        double speedup;
    };
    std::vector<Speedup> speedups;
    for (const auto& a : rows) {
        if (a.kind != "bench" || a.name != "equal-window") continue;
        for (const auto& b : rows) {
            if (b.kind != "bench" || b.name != "group" ||
                b.n_points != a.n_points)
                continue;
            speedups.push_back({a.n_points, a.bench->mean_ms, b.bench->mean_ms,
                                a.bench->mean_ms / b.bench->mean_ms});
        }
    }

    // Scaling: log-log slope per bench name over distinct point counts.
    std::map<std::string, std::map<std::uint64_t, double>> series;
    for (const auto& r : rows)
        if (r.kind == "bench")
            series[r.name][r.n_points] = r.bench->mean_ms;
    std::vector<std::pair<std::string, double>> scaling;
    for (const auto& [name, pts] : series) {
        if (pts.size() < 2) continue;
        std::vector<std::pair<double, double>> xy;
        for (const auto& [n, ms] : pts)
            xy.push_back({static_cast<double>(n), ms});
        scaling.push_back({name, fwa::bench::fit_loglog_slope(xy)});
    }

    if (g.format == "csv") {
        std::ostringstream os;
        os.precision(17);
        os << "kind,name,n_points,mean_ms,p50_ms,p95_ms,outliers_excluded,"
              "padding_factor,imbalance_ratio,macs_actual,macs_padded\n";
        for (const auto& r : rows) {
            os << r.kind << ',' << r.name << ',' << r.n_points << ',';
            if (r.bench)
                os << r.bench->mean_ms << ',' << r.bench->p50_ms << ','
                   << r.bench->p95_ms << ',' << r.bench->outliers_excluded
                   << ",,,,";
            else
                os << ",,,," << r.workload->padding_factor << ','
                   << r.workload->imbalance_ratio << ','
                   << r.workload->attention_macs_actual << ','
                   << r.workload->attention_macs_padded;
            os << "\n";
        }
        if (!speedups.empty()) {
            os << "\nn_points,equal_window_ms,group_ms,speedup\n";
            for (const auto& s : speedups)
                os << s.n_points << ',' << s.equal_window_ms << ',' << s.group_ms
                   << ',' << s.speedup << "\n";
        }
        if (!scaling.empty()) {
            os << "\nname,slope\n";
            for (const auto& [name, slope] : scaling)
                os << name << ',' << slope << "\n";
        }
        emit(g, os.str());
    } else {
        json j;
        j["rows"] = json::array();
        for (const auto& r : rows) {
            json row = {{"kind", r.kind}, {"name", r.name}, {"n_points", r.n_points}};
            if (r.bench) row["bench"] = *r.bench;
            if (r.workload) row["workload"] = *r.workload;
            j["rows"].push_back(std::move(row));
        }
        j["speedups"] = json::array();
        for (const auto& s : speedups)
            j["speedups"].push_back({{"n_points", s.n_points},
                                     {"equal_window_ms", s.equal_window_ms},
                                     {"group_ms", s.group_ms},
                                     {"speedup", s.speedup}});
        j["scaling"] = json::array();
        for (const auto& [name, slope] : scaling)
            j["scaling"].push_back({{"name", name}, {"slope", slope}});
        emit(g, j.dump(2));
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"flattened window attention pipeline and workload analyzer"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--seed", g.seed, "deterministic seed")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads for attention/FFN")
        ->capture_default_str();
    app.add_option("--out", g.out, "write output to a file instead of stdout");
    app.add_option("--format", g.format, "report format")
        ->check(CLI::IsMember({"json", "csv"}))
        ->capture_default_str();

    // gen
    auto* gen = app.add_subcommand(
        "gen", "generate a synthetic scene (--out picks the point file; .csv "
               "extension selects CSV, anything else binary)");
    gen->fallthrough();
    std::string gen_spec;
    gen->add_option("--spec", gen_spec, "scene spec JSON")->required();

    // partition
    auto* part = app.add_subcommand("partition", "partition analysis");
    part->fallthrough();
    std::string part_input, part_major = "X", part_strategy = "both";
    double part_wx = 2.88, part_wy = 2.88;
    bool part_shift = false, part_emit_plan = false;
    int part_group = 69, part_d = 128;
    std::vector<int> part_buckets;
    part->add_option("--input", part_input, "point file")->required();
    part->add_option("--wx", part_wx, "window width, meters")->capture_default_str();
    part->add_option("--wy", part_wy, "window height, meters")->capture_default_str();
    part->add_flag("--shift", part_shift, "shift by half a window");
    part->add_option("--major", part_major, "major sort axis")
        ->check(CLI::IsMember({"X", "Y"}));
    part->add_option("--group", part_group, "group size")->capture_default_str();
    part->add_option("--d-model", part_d, "channels for MAC accounting")
        ->capture_default_str();
    part->add_option("--strategy", part_strategy, "partition strategy")
        ->check(CLI::IsMember({"equal-window", "equal-size", "both"}));
    part->add_option("--buckets", part_buckets,
                     "bucket edges for batched padding")
        ->delimiter(',');
    part->add_flag("--emit-plan", part_emit_plan,
                   "include sort plan and grouping JSON");

    // attend
    auto* attend = app.add_subcommand("attend", "run the backbone");
    attend->fallthrough();
    std::string at_input, at_config, at_params, at_features;
    attend->add_option("--input", at_input, "point file")->required();
    attend->add_option("--config", at_config, "FwaConfig JSON file");
    attend->add_option("--params", at_params, "FWAP parameter blob");
    attend->add_option("--features-out", at_features, "raw feature dump");

    // bench
    auto* bench = app.add_subcommand("bench", "micro-benchmarks");
    bench->fallthrough();
    std::string bn_input, bn_config, bn_mode = "group", bn_name, bn_params;
    int bn_runs = 50, bn_warmup = 10;
    std::vector<int> bn_buckets;
    bench->add_option("--input", bn_input, "point file")->required();
    bench->add_option("--config", bn_config, "FwaConfig JSON file");
    bench->add_option("--mode", bn_mode, "attention path to time")
        ->check(CLI::IsMember({"group", "global", "equal-window"}));
    bench->add_option("--runs", bn_runs, "timed runs")->capture_default_str();
    bench->add_option("--warmup", bn_warmup, "warmup runs")->capture_default_str();
    bench->add_option("--buckets", bn_buckets, "bucket edges (equal-window mode)")
        ->delimiter(',');
    bench->add_option("--name", bn_name, "override result name");
    bench->add_option("--params", bn_params, "FWAP parameter blob");

    // report
    auto* report = app.add_subcommand("report", "merge run outputs");
    report->fallthrough();
    std::vector<std::string> rp_inputs;
    report->add_option("--inputs", rp_inputs, "BenchResult/WorkloadReport JSONs")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen(g, gen_spec);
        if (*part)
            return cmd_partition(g, part_input, part_wx, part_wy, part_shift,
                                 part_major, part_group, part_d, part_strategy,
                                 part_buckets, part_emit_plan);
        if (*attend) return cmd_attend(g, at_input, at_config, at_params, at_features);
        if (*bench)
            return cmd_bench(g, bn_input, bn_config, bn_mode, bn_runs, bn_warmup,
                             bn_buckets, bn_name, bn_params);
        if (*report) return cmd_report(g, rp_inputs);
    } catch (const fwa::config_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fwa::parse_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fwa::schema_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fwa::shape_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
