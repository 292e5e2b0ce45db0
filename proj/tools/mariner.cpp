// mariner: run scenarios, benchmark the sonar backends, build world archives.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 runtime fault.

#include "mariner/accel.hpp"
#include "mariner/archive.hpp"
#include "mariner/bridge.hpp"
#include "mariner/runner.hpp"
#include "mariner/scenario.hpp"
#include "mariner/world.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace mariner;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitFault = 3;

/// Raised for bad inputs; maps to exit code 2.
struct ConfigFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("mariner");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    spdlog::set_level(spdlog::level::info);
    if (const char* env = std::getenv("MARINER_LOG")) {
        const auto level = spdlog::level::from_str(env);
        if (level == spdlog::level::off && std::string(env) != "off")
            spdlog::warn("MARINER_LOG: unknown level '{}', keeping info", env);
        else
            spdlog::set_level(level);
    }
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigFailure(fmt::format("cannot read {}", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text)) throw Error(fmt::format("cannot write {}", path.string()));
}

// ---------------------------------------------------------------------------

struct RunArgs {
    std::string scenario;
    std::string out = "out";
    RunOptions options;
    int port = -1;
};

int cmd_run(RunArgs& args) {
    ScenarioConfig config;
    try {
        config = load_scenario(args.scenario);
    } catch (const FormatError& e) {
        throw ConfigFailure(e.what());
    }
    args.options.out_dir = args.out;
    args.options.base_dir = fs::path(args.scenario).parent_path();
    if (args.port >= 0) args.options.bridge_port = args.port;

    spdlog::info("running '{}': {} ticks at {} Hz", config.name, config.duration_ticks, config.ticks_per_sec);
    RunReport report;
    try {
        report = run_scenario(config, args.options);
    } catch (const FormatError& e) {
        throw ConfigFailure(e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigFailure(e.what());
    }
    if (report.bridge) spdlog::info("bridge on port {}", report.bridge_port);
    for (const auto& [topic, count] : report.sensor_messages) spdlog::debug("{}: {} messages", topic, count);
    spdlog::info("{} / {} ticks in {:.3f} s, status {}", report.ticks_executed, report.duration_ticks,
                 report.wall_time, to_string(report.status));
    if (report.status != RunReport::Status::ok) {
        spdlog::error("{}", report.error);
        return kExitFault;
    }
    return kExitOk;
}

struct BenchArgs {
    std::string world;
    std::string out = "bench";
    int ticks = 509;
    std::size_t rays_per_tick = 256;
    double leaf_size = kDefaultLeafSize;
    double max_range = 100.0;
    bool json = false;
};

int cmd_bench(const BenchArgs& args) {
    World world;
    try {
        world = args.world.empty() ? make_dam_world() : read_world_archive(args.world);
    } catch (const FormatError& e) {
        throw ConfigFailure(e.what());
    }
    const auto rays = survey_rays(world, args.rays_per_tick, args.max_range);
    spdlog::info("bench: {} ticks x {} rays, leaf {} m", args.ticks, rays.size(), args.leaf_size);
    BenchReport report;
    try {
        report = bench_backends(world, rays, args.ticks, args.leaf_size);
    } catch (const InvalidArgument& e) {
        throw ConfigFailure(e.what());
    }
    const fs::path json_path = fs::path(args.out) / "bench.json";
    write_text(json_path, report.to_json() + "\n");
    if (args.json)
        std::cout << report.to_json() << "\n";
    else
        std::cout << report.to_table();
    spdlog::info("wrote {}", json_path.string());
    return kExitOk;
}

struct GenArgs {
    std::string genspec;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_gen(const GenArgs& args) {
    World world;
    try {
        const GenSpec spec = genspec_from_json(nlohmann::json::parse(read_text(args.genspec)));
        world = generate_world(spec, args.seed);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigFailure(fmt::format("{}: {}", args.genspec, e.what()));
    } catch (const FormatError& e) {
        throw ConfigFailure(e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigFailure(e.what());
    }
    write_world_archive(world, args.out);
    spdlog::info("wrote {} ({} props)", args.out, world.props().size());
    return kExitOk;
}

struct ImportArgs {
    std::string grid;
    std::string out;
    std::optional<double> cell_size;
    std::vector<double> origin;
};

int cmd_import(const ImportArgs& args) {
    std::optional<Vec2> origin;
    if (!args.origin.empty()) origin = Vec2(args.origin[0], args.origin[1]);
    World world;
    try {
        world = World(load_bathymetry(args.grid, args.cell_size, origin));
    } catch (const FormatError& e) {
        throw ConfigFailure(e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigFailure(e.what());
    }
    write_world_archive(world, args.out);
    const auto& hf = *world.heightfield();
    spdlog::info("wrote {} ({} x {} grid, {} m cells)", args.out, hf.nx, hf.ny, hf.cell_size);
    return kExitOk;
}

struct SchemaArgs {
    std::string golden;
    bool default_scenario = false;
};

int cmd_schema(const SchemaArgs& args) {
    if (args.default_scenario) {
        std::cout << serialize_scenario(default_scenario()) << "\n";
        return kExitOk;
    }
    if (!args.golden.empty()) {
        fs::create_directories(args.golden);
        for (const auto& [name, bytes] : golden_frames()) write_text(fs::path(args.golden) / (name + ".frame"), bytes);
        spdlog::info("wrote {} golden frames to {}", golden_frames().size(), args.golden);
        return kExitOk;
    }
    std::cout << schema_registry_json().dump(2) << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    setup_logging();

    CLI::App app{"Headless marine robotics simulator"};
    app.require_subcommand(1);

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "Run a scenario and record state, sensor logs and a report");
    run_cmd->add_option("-s,--scenario", run.scenario, "Scenario JSON file")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("-o,--out", run.out, "Output directory")->capture_default_str();
    run_cmd->add_flag("--pgm", run.options.pgm, "Write sidescan waterfalls and multibeam range images");
    run_cmd->add_flag("--xyz", run.options.xyz, "Write lidar point clouds");
    run_cmd->add_flag("--no-bridge", run.options.no_bridge, "Do not start the bridge even if configured");
    run_cmd->add_option("--port", run.port, "Bridge port override (0 picks a free port)")->check(CLI::Range(0, 65535));
    run_cmd->add_option("--wait-clients", run.options.wait_clients, "Subscribed clients to wait for before tick 0");
    run_cmd->add_option("--wait-timeout", run.options.wait_timeout, "Seconds to wait for clients")
        ->capture_default_str();
    run_cmd->add_option("--realtime", run.options.realtime, "Pace at this multiple of wall-clock time (0: flat out)")
        ->check(CLI::NonNegativeNumber);

    BenchArgs bench;
    auto* bench_cmd = app.add_subcommand("bench", "Time octree caching, octree query and direct ray casting");
    bench_cmd->add_option("-w,--world", bench.world, "World archive (default: built-in dam world)")
        ->check(CLI::ExistingFile);
    bench_cmd->add_option("-o,--out", bench.out, "Directory for bench.json")->capture_default_str();
    bench_cmd->add_option("--ticks", bench.ticks, "Ticks per run")->capture_default_str()->check(CLI::PositiveNumber);
    bench_cmd->add_option("--rays-per-tick", bench.rays_per_tick, "Rays cast each tick")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    bench_cmd->add_option("--leaf-size", bench.leaf_size, "Octree leaf size, m")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    bench_cmd->add_option("--max-range", bench.max_range, "Ray length, m")->capture_default_str()->check(CLI::PositiveNumber);
    bench_cmd->add_flag("--json", bench.json, "Print JSON instead of the table");

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Generate a world archive from a generation spec");
    gen_cmd->add_option("genspec", gen.genspec, "Generation spec JSON")->required()->check(CLI::ExistingFile);
    gen_cmd->add_option("--seed", gen.seed, "Random seed")->capture_default_str();
    gen_cmd->add_option("-o,--out", gen.out, "Archive to write")->required();

    ImportArgs imp;
    auto* import_cmd = app.add_subcommand("import-bathy", "Convert an Esri ASCII grid into a world archive");
    import_cmd->add_option("grid", imp.grid, "ASCII grid (.asc)")->required()->check(CLI::ExistingFile);
    import_cmd->add_option("-o,--out", imp.out, "Archive to write")->required();
    import_cmd->add_option("--cell-size", imp.cell_size, "Override the grid cell size, m")->check(CLI::PositiveNumber);
    import_cmd->add_option("--origin", imp.origin, "Override the grid origin (north east), m")->expected(2);

    SchemaArgs schema;
    auto* schema_cmd = app.add_subcommand("schema", "Print the bridge message schemas");
    schema_cmd->add_option("--golden", schema.golden, "Write one encoded frame per schema and frame type here");
    schema_cmd->add_flag("--default-scenario", schema.default_scenario, "Print a complete default scenario instead");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*run_cmd) return cmd_run(run);
        if (*bench_cmd) return cmd_bench(bench);
        if (*gen_cmd) return cmd_gen(gen);
        if (*import_cmd) return cmd_import(imp);
        if (*schema_cmd) return cmd_schema(schema);
    } catch (const ConfigFailure& e) {
        spdlog::error("{}", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kExitFault;
    }
    return kExitConfig;
}
