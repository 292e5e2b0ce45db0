#include "mariner/archive.hpp"
#include "mariner/bridge.hpp"
#include "mariner/scenario.hpp"
#include "mariner/world.hpp"

#include <fmt/format.h>
#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mariner;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

/// Runs the CLI with stderr discarded and returns exit code and stdout.
Result cli(const std::string& args) {
    const std::string cmd = std::string(MARINER_CLI) + " " + args + " 2>/dev/null";
    Result r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return r;
    char buf[4096];
    for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, pipe)) > 0;) r.out.append(buf, n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("mariner_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write(const fs::path& path, const std::string& text) {
    std::ofstream(path, std::ios::binary) << text;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::pair<int, std::int64_t> hf_label(const World& w) {
    return {w.heightfield()->label.class_id, w.heightfield()->label.instance_id};
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
    EXPECT_EQ(cli("").code, 2);
    EXPECT_EQ(cli("frobnicate").code, 2);
    EXPECT_EQ(cli("run").code, 2);
    EXPECT_EQ(cli("run --scenario /nonexistent.json").code, 2);
    EXPECT_EQ(cli("--help").code, 0);
    EXPECT_EQ(cli("bench --help").code, 0);
}

TEST(Cli, RunWritesOutputsAndExitsZero) {
    const auto dir = scratch("run");
    ScenarioConfig c = default_scenario();
    c.duration_ticks = 30;
    write(dir / "s.json", serialize_scenario(c));
    const auto r = cli(fmt::format("run --scenario {} --out {}", (dir / "s.json").string(), (dir / "out").string()));
    EXPECT_EQ(r.code, 0);
    const auto report = json::parse(slurp(dir / "out" / "report.json"));
    EXPECT_EQ(report["ticks_executed"], 30);
    EXPECT_EQ(report["sensor_messages"]["auv0/echo"], 30);
    EXPECT_TRUE(fs::exists(dir / "out" / "state" / "auv0.csv"));
}

TEST(Cli, RunConfigErrorsExitWithTwo) {
    const auto dir = scratch("badrun");
    write(dir / "unknown.json", R"({"name": "x", "ticks_per_sec": 30, "duration_ticks": 1, "tick_rate": 3,
                                    "world": {"kind": "empty"}, "agents": []})");
    EXPECT_EQ(cli("run --scenario " + (dir / "unknown.json").string() + " --out " + (dir / "o1").string()).code, 2);

    write(dir / "syntax.json", "{\"name\": ");
    EXPECT_EQ(cli("run --scenario " + (dir / "syntax.json").string() + " --out " + (dir / "o2").string()).code, 2);

    ScenarioConfig c = default_scenario();
    c.duration_ticks = 0;
    write(dir / "invalid.json", serialize_scenario(c));
    EXPECT_EQ(cli("run --scenario " + (dir / "invalid.json").string() + " --out " + (dir / "o3").string()).code, 2);

    c = default_scenario();
    c.world.kind = WorldSpec::Kind::archive;
    c.world.path = "missing.zip";
    write(dir / "missing.json", serialize_scenario(c));
    EXPECT_EQ(cli("run --scenario " + (dir / "missing.json").string() + " --out " + (dir / "o4").string()).code, 2);
    EXPECT_FALSE(fs::exists(dir / "o4" / "report.json"));
}

TEST(Cli, RuntimeFaultExitsWithThreeAndKeepsLogs) {
    const auto dir = scratch("fault");
    ScenarioConfig c = default_scenario();
    c.duration_ticks = 100;
    c.agents[0].initial_pose[4] = 1.4;
    c.agents[0].initial_velocity[4] = 2.0;
    write(dir / "s.json", serialize_scenario(c));
    EXPECT_EQ(cli("run --scenario " + (dir / "s.json").string() + " --out " + (dir / "out").string()).code, 3);
    EXPECT_EQ(json::parse(slurp(dir / "out" / "report.json"))["status"], "fault");
    EXPECT_TRUE(fs::exists(dir / "out" / "state" / "auv0.csv"));
}

TEST(Cli, RunResolvesWorldFilesNextToTheScenario) {
    const auto dir = scratch("relative");
    write_world_archive(World(Heightfield::flat(12.0, 30.0, 30.0, 1.0)), dir / "w.zip");
    ScenarioConfig c = default_scenario();
    c.duration_ticks = 5;
    c.world = WorldSpec{};
    c.world.kind = WorldSpec::Kind::archive;
    c.world.path = "w.zip";
    write(dir / "s.json", serialize_scenario(c));
    ASSERT_EQ(cli("run --scenario " + (dir / "s.json").string() + " --out " + (dir / "out").string()).code, 0);
    std::ifstream in(dir / "out" / "sensors" / "auv0_echo.jsonl");
    std::string line;
    ASSERT_TRUE(std::getline(in, line));
    EXPECT_NEAR(json::parse(line)["payload"]["range"].get<double>(), 7.0, 0.1);
}

TEST(Cli, GenWithZeroDensityHasNoProps) {
    const auto dir = scratch("gen0");
    GenSpec g;
    g.terrain = "rolling";
    g.size_x = 20;
    g.size_y = 20;
    g.density = 0.0;
    g.prop_classes = {{"rock", 3, Vec3(1, 1, 1)}};
    write(dir / "g.json", genspec_to_json(g).dump());
    ASSERT_EQ(cli("gen " + (dir / "g.json").string() + " --seed 4 --out " + (dir / "w.zip").string()).code, 0);
    const World w = read_world_archive(dir / "w.zip");
    EXPECT_TRUE(w.props().empty());
    ASSERT_TRUE(w.heightfield());
    const World direct = generate_world(g, 4);
    EXPECT_EQ(hf_label(w), hf_label(direct));
    EXPECT_EQ(w.heightfield()->depth, direct.heightfield()->depth);
    EXPECT_EQ(w.heightfield()->cell_size, direct.heightfield()->cell_size);
}

TEST(Cli, GenIsByteIdenticalForSameSpecAndSeed) {
    const auto dir = scratch("gendet");
    GenSpec g;
    g.terrain = "canyon";
    g.size_x = 40;
    g.size_y = 30;
    g.density = 2.0;  // per 100 m^2
    g.prop_classes = {{"rock", 3, Vec3(1, 1, 1)}, {"pipe", 4, Vec3(4, 0.5, 0.5)}};
    write(dir / "g.json", genspec_to_json(g).dump());
    const std::string spec = (dir / "g.json").string();
    ASSERT_EQ(cli("gen " + spec + " --seed 11 --out " + (dir / "a.zip").string()).code, 0);
    ASSERT_EQ(cli("gen " + spec + " --seed 11 --out " + (dir / "b.zip").string()).code, 0);
    ASSERT_EQ(cli("gen " + spec + " --seed 12 --out " + (dir / "c.zip").string()).code, 0);
    EXPECT_EQ(slurp(dir / "a.zip"), slurp(dir / "b.zip"));
    EXPECT_NE(slurp(dir / "a.zip"), slurp(dir / "c.zip"));
    EXPECT_FALSE(read_world_archive(dir / "a.zip").props().empty());
}

TEST(Cli, GenRejectsBadSpecs) {
    const auto dir = scratch("genbad");
    write(dir / "unknown.json", R"({"terrain": "flat", "colour": "blue"})");
    EXPECT_EQ(cli("gen " + (dir / "unknown.json").string() + " --out " + (dir / "w.zip").string()).code, 2);
    write(dir / "terrain.json", R"({"terrain": "volcano"})");
    EXPECT_EQ(cli("gen " + (dir / "terrain.json").string() + " --out " + (dir / "w.zip").string()).code, 2);
    EXPECT_FALSE(fs::exists(dir / "w.zip"));
}

TEST(Cli, ImportFlatGridRoundTrips) {
    const auto dir = scratch("import");
    write(dir / "g.asc",
          "ncols 3\nnrows 3\nxllcorner 0\nyllcorner 0\ncellsize 2\nNODATA_value -9999\n"
          "7.5 7.5 7.5\n7.5 7.5 7.5\n7.5 7.5 7.5\n");
    ASSERT_EQ(cli("import-bathy " + (dir / "g.asc").string() + " --out " + (dir / "w.zip").string()).code, 0);
    const World w = read_world_archive(dir / "w.zip");
    ASSERT_TRUE(w.heightfield());
    const auto& hf = *w.heightfield();
    EXPECT_EQ(hf.nx, 3);
    EXPECT_EQ(hf.ny, 3);
    for (double x = 0.0; x <= 4.0; x += 0.25)
        for (double y = 0.0; y <= 4.0; y += 0.25) EXPECT_DOUBLE_EQ(height_at(hf, x, y), 7.5);

    ASSERT_EQ(cli("import-bathy " + (dir / "g.asc").string() + " --cell-size 0.5 --origin 10 20 --out " +
                  (dir / "w2.zip").string())
                  .code,
              0);
    const auto& hf2 = *read_world_archive(dir / "w2.zip").heightfield();
    EXPECT_EQ(hf2.cell_size, 0.5);
    EXPECT_EQ(hf2.origin, Vec2(10, 20));

    write(dir / "bad.asc", "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n3 nan\n");
    EXPECT_EQ(cli("import-bathy " + (dir / "bad.asc").string() + " --out " + (dir / "w3.zip").string()).code, 2);
}

TEST(Cli, SchemaPrintsTheRegistry) {
    const auto r = cli("schema");
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(json::parse(r.out), schema_registry_json());
}

TEST(Cli, SchemaGoldenFramesDecode) {
    const auto dir = scratch("golden");
    ASSERT_EQ(cli("schema --golden " + dir.string()).code, 0);
    const auto frames = golden_frames();
    for (const auto& [name, bytes] : frames) {
        const std::string on_disk = slurp(dir / (name + ".frame"));
        EXPECT_EQ(on_disk, bytes) << name;
        EXPECT_NO_THROW(decode_frame(on_disk)) << name;
    }
    EXPECT_EQ(static_cast<std::size_t>(std::distance(fs::directory_iterator(dir), fs::directory_iterator())),
              frames.size());
}

TEST(Cli, DefaultScenarioParses) {
    const auto r = cli("schema --default-scenario");
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(parse_scenario(r.out), default_scenario());
}

TEST(Cli, BenchSingleTickTotalsEqualMeans) {
    const auto dir = scratch("bench");
    const auto r = cli("bench --ticks 1 --rays-per-tick 16 --leaf-size 0.5 --json --out " + dir.string());
    ASSERT_EQ(r.code, 0);
    const auto j = json::parse(r.out);
    EXPECT_EQ(j, json::parse(slurp(dir / "bench.json")));
    ASSERT_EQ(j["runs"].size(), 3u);
    for (const auto& run : j["runs"]) {
        const double mean = run["mean_time_per_tick"].get<double>();
        EXPECT_GT(mean, 0.0) << run["name"];
        EXPECT_NEAR(run["total_time"].get<double>(), mean, 1e-12) << run["name"];
    }
}

TEST(Cli, BenchTablePrintsThreeRows) {
    const auto dir = scratch("bench_table");
    const auto r = cli("bench --ticks 2 --rays-per-tick 8 --leaf-size 0.5 --out " + dir.string());
    ASSERT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("Mean Time per Tick"), std::string::npos);
    EXPECT_NE(r.out.find("Total Time"), std::string::npos);
    EXPECT_NE(r.out.find("Caching"), std::string::npos);
    EXPECT_NE(r.out.find("Querying"), std::string::npos);
    EXPECT_NE(r.out.find("Ray Casting"), std::string::npos);
}

TEST(Cli, BenchOnArchivedWorld) {
    const auto dir = scratch("bench_world");
    write_world_archive(make_dam_world(), dir / "dam.zip");
    const auto r = cli("bench --world " + (dir / "dam.zip").string() +
                       " --ticks 1 --rays-per-tick 4 --leaf-size 1 --json --out " + dir.string());
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(json::parse(r.out)["rays_per_tick"], 4);
    write(dir / "junk.zip", "not a zip");
    EXPECT_EQ(cli("bench --world " + (dir / "junk.zip").string() + " --ticks 1 --out " + dir.string()).code, 2);
}
