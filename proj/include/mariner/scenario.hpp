#pragma once

// Scenario configuration: one JSON document describing the world, agents,
// sensors, environmental fields and bridge settings of a run. Parsing is
// strict (unknown fields are errors) and fills every omitted value with its
// default, so serialize_scenario(parse_scenario(t)) is a complete document.
//
// Conventions: NED metres with z down, angles in radians.

#include "mariner/dynamics.hpp"
#include "mariner/envfx.hpp"
#include "mariner/sensors.hpp"
#include "mariner/world.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mariner {

/// Thrown by parse_scenario. `path` locates the offending value
/// (e.g. "agents[0].params.physical.mass"); syntax errors carry line/column.
class ScenarioError : public FormatError {
public:
    ScenarioError(std::string path, const std::string& message, int line = 0, int column = 0);

    const std::string& path() const { return path_; }
    int line() const { return line_; }
    int column() const { return column_; }

private:
    std::string path_;
    int line_;
    int column_;
};

struct PropSpec {
    enum class Shape { box, stl };

    Shape shape = Shape::box;
    Vec3 size = Vec3::Ones();  // box edge lengths, m
    std::string mesh_path;     // stl, relative to the scenario file
    Vec6 pose = Vec6::Zero();
    SemanticLabel label{classes::kSpawned, 1};

    friend bool operator==(const PropSpec&, const PropSpec&) = default;
};

struct WorldSpec {
    enum class Kind { empty, flat, generate, dam, archive, bathymetry };

    Kind kind = Kind::flat;
    // flat
    double depth = 20.0;
    double size_x = 100.0;
    double size_y = 100.0;
    double cell_size = 1.0;
    Vec2 origin = Vec2::Zero();
    // generate
    GenSpec gen;
    std::uint64_t seed = 0;
    // archive, bathymetry (bathymetry may override cell size and origin)
    std::string path;
    std::optional<double> grid_cell_size;
    std::optional<Vec2> grid_origin;

    std::vector<PropSpec> props;  // spawned after the base world is built

    friend bool operator==(const WorldSpec&, const WorldSpec&) = default;
};

struct ScheduledCommand {
    std::int64_t tick = 0;  // applied before this tick is stepped
    ControlCommand command;

    friend bool operator==(const ScheduledCommand&, const ScheduledCommand&) = default;
};

struct AgentSpec {
    std::string name;
    AgentModel model = AgentModel::fossen_torpedo;
    VehicleParams params = default_remus100_params();
    Vec6 initial_pose = Vec6::Zero();
    Vec6 initial_velocity = Vec6::Zero();
    std::vector<SensorSpec> sensors;
    std::optional<Vec3> per_agent_current;  // NED m/s
    ControlCommand command;                 // held from tick 0
    std::vector<ScheduledCommand> schedule;

    /// params with the per-agent current folded in.
    VehicleParams effective_params() const;

    friend bool operator==(const AgentSpec&, const AgentSpec&) = default;
};

struct CurrentSpec {
    enum class Kind { constant, shear, grid };

    Kind kind = Kind::constant;
    Vec3 velocity = Vec3::Zero();          // constant
    Vec3 surface_velocity = Vec3::Zero();  // shear
    double decay_depth = 10.0;             // shear, m
    std::string path;                      // grid file, relative to the scenario file

    friend bool operator==(const CurrentSpec&, const CurrentSpec&) = default;
};

struct WaveSpec {
    WaveField field;
    bool orbital_current = false;  // add orbital velocity to the relative-velocity current

    friend bool operator==(const WaveSpec&, const WaveSpec&) = default;
};

inline constexpr int kDefaultBridgePort = 28510;
inline constexpr int kDefaultQueueDepth = 1024;

struct BridgeSpec {
    std::string host = "127.0.0.1";
    int port = kDefaultBridgePort;  // 0 picks an ephemeral port
    std::vector<std::string> topics{"*"};  // globs of topics to publish
    int queue_depth = kDefaultQueueDepth;
    bool publish_state = true;

    friend bool operator==(const BridgeSpec&, const BridgeSpec&) = default;
};

struct ScenarioConfig {
    std::string name;
    double ticks_per_sec = 30.0;
    std::int64_t duration_ticks = 1;
    std::uint64_t rng_seed = 0;
    bool surface_buoyancy = false;  // slice buoyancy under a flat sea without waves
    WorldSpec world;
    std::vector<AgentSpec> agents;
    std::optional<CurrentSpec> current;
    std::optional<WaveSpec> waves;
    std::optional<BridgeSpec> bridge;

    double dt() const { return 1.0 / ticks_per_sec; }

    friend bool operator==(const ScenarioConfig&, const ScenarioConfig&) = default;
};

struct Violation {
    std::string path;
    std::string message;

    friend bool operator==(const Violation&, const Violation&) = default;
};

/// Throws ScenarioError on a syntax error, unknown field or type mismatch.
ScenarioConfig parse_scenario(std::string_view text);
ScenarioConfig load_scenario(const std::filesystem::path& path);

/// Complete, canonical (sorted keys) JSON text.
std::string serialize_scenario(const ScenarioConfig& config);

/// Checks invariants and cross references without touching the filesystem.
std::vector<Violation> validate(const ScenarioConfig& config);

/// A small valid scenario: flat 20 m floor and one REMUS agent.
ScenarioConfig default_scenario();

// Blocks on their own, for the bridge and the gen command.
nlohmann::json params_to_json(const VehicleParams& params);
/// Missing fields keep the values already in `params`.
void params_from_json(const nlohmann::json& j, VehicleParams& params, const std::string& path = "params");
nlohmann::json command_to_json(const ControlCommand& command);
ControlCommand command_from_json(const nlohmann::json& j, const std::string& path = "command");
nlohmann::json sensor_to_json(const SensorSpec& spec);
nlohmann::json genspec_to_json(const GenSpec& spec);
GenSpec genspec_from_json(const nlohmann::json& j, const std::string& path = "genspec");
SensorSpec sensor_from_json(const nlohmann::json& j, const std::string& path = "sensor");

/// Relative paths resolve against `base_dir`.
World build_world(const WorldSpec& spec, const std::filesystem::path& base_dir = {});
std::optional<CurrentField> build_current(const ScenarioConfig& config, const std::filesystem::path& base_dir = {});

const char* to_string(AgentModel model);
const char* to_string(WorldSpec::Kind kind);

}  // namespace mariner
