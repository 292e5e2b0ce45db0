#pragma once

// Fixed-step scenario execution: dynamics, sensors, logs and the bridge.
//
// Output layout under RunOptions::out_dir:
//   state/<agent>.csv               one row per tick
//   sensors/<agent>_<sensor>.jsonl  one envelope per reading
//   sensors/<agent>_<sensor>.pgm    sidescan waterfall or multibeam range image, with --pgm
//   sensors/<agent>_<sensor>.xyz    lidar points of every scan, with --xyz
//   report.json

#include "mariner/bridge.hpp"
#include "mariner/scenario.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mariner {

struct RunOptions {
    std::filesystem::path out_dir = "out";
    std::filesystem::path base_dir;  // relative scenario paths resolve here
    bool pgm = false;
    bool xyz = false;
    bool no_bridge = false;
    std::optional<int> bridge_port;  // overrides the scenario
    std::size_t wait_clients = 0;    // subscribers to wait for before tick 0
    double wait_timeout = 10.0;      // s
    double realtime = 0.0;           // pace to this multiple of wall clock; 0 runs flat out
};

struct AgentReport {
    std::string name;
    RigidBodyState state;
};

struct RunReport {
    enum class Status { ok, contact, fault };

    std::string name;
    Status status = Status::ok;
    std::string error;
    std::int64_t ticks_executed = 0;
    std::int64_t duration_ticks = 0;
    double dt = 0.0;
    double wall_time = 0.0;  // s
    std::map<std::string, std::uint64_t> sensor_messages;  // topic -> count
    std::vector<AgentReport> agents;
    std::vector<ContactEvent> contacts;
    std::optional<BridgeStats> bridge;
    int bridge_port = 0;

    nlohmann::json to_json() const;
};

const char* to_string(RunReport::Status status);

/// Validates, builds the world and runs. Throws ScenarioError for validation
/// failures and FormatError/InvalidArgument for unusable inputs (nothing is
/// run). Runtime faults and terrain contact end the run early and are
/// reported through the status; logs written so far are kept.
RunReport run_scenario(const ScenarioConfig& config, const RunOptions& options);

/// Seed for the noise stream of sensor `k` on agent `a`.
std::uint64_t sensor_seed(std::uint64_t rng_seed, std::size_t agent, std::size_t sensor);

}  // namespace mariner
