#include "mariner/runner.hpp"

#include "mariner/accel.hpp"
#include "mariner/rng.hpp"

#include <fmt/format.h>

#include <chrono>
#include <fstream>
#include <memory>
#include <thread>

namespace mariner {

using nlohmann::json;

namespace {

json vec_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(fmt::format("cannot write {}", path.string()));
    return out;
}

std::string envelope_line(const Envelope& e) {
    const json j = {{"topic", e.topic}, {"schema", e.schema}, {"tick", e.tick}, {"stamp", e.stamp}, {"payload", e.payload}};
    return j.dump(-1, ' ', false, json::error_handler_t::strict) + "\n";
}

/// Sidescan row as a waterfall: port flipped so nadir sits in the middle.
std::vector<double> waterfall_row(const SidescanLine& line) {
    std::vector<double> row(line.port.rbegin(), line.port.rend());
    row.insert(row.end(), line.starboard.begin(), line.starboard.end());
    return row;
}

std::vector<double> range_row(const MultibeamReturn& scan, double max_range) {
    std::vector<double> row;
    row.reserve(scan.beams.size());
    for (const auto& b : scan.beams) row.push_back(b.hit() ? 1.0 - b.range / max_range : 0.0);
    return row;
}

struct SensorSlot {
    std::size_t agent = 0;
    SensorSpec spec;
    std::string topic;
    Rng rng;
    const Octree* octree = nullptr;
    std::ofstream jsonl;
    std::ofstream xyz;
    std::vector<std::vector<double>> image;
    std::filesystem::path pgm_path;
};

}  // namespace

const char* to_string(RunReport::Status status) {
    switch (status) {
        case RunReport::Status::ok: return "ok";
        case RunReport::Status::contact: return "contact";
        case RunReport::Status::fault: return "fault";
    }
    return "?";
}

json RunReport::to_json() const {
    json j;
    j["name"] = name;
    j["status"] = to_string(status);
    j["error"] = error;
    j["ticks_executed"] = ticks_executed;
    j["duration_ticks"] = duration_ticks;
    j["dt"] = dt;
    j["wall_time"] = wall_time;
    j["sensor_messages"] = sensor_messages;
    json agents_j = json::object();
    for (const auto& a : agents)
        agents_j[a.name] = {{"eta", vec_json(a.state.eta)},
                            {"nu", vec_json(a.state.nu)},
                            {"fin_angles", a.state.fin_angles},
                            {"prop_speed", a.state.prop_speed}};
    j["agents"] = agents_j;
    json contacts_j = json::array();
    for (const auto& c : contacts)
        contacts_j.push_back({{"agent", c.agent},
                              {"tick", c.tick},
                              {"position", vec_json(c.position)},
                              {"seafloor_depth", c.seafloor_depth}});
    j["contacts"] = contacts_j;
    if (bridge) {
        j["bridge"] = {{"port", bridge_port},
                       {"clients", bridge->clients},
                       {"published", bridge->published},
                       {"filtered", bridge->filtered},
                       {"delivered", bridge->delivered},
                       {"dropped", bridge->dropped},
                       {"commands", bridge->commands},
                       {"unknown_agent", bridge->unknown_agent},
                       {"protocol_errors", bridge->protocol_errors}};
    } else {
        j["bridge"] = nullptr;
    }
    return j;
}

std::uint64_t sensor_seed(std::uint64_t rng_seed, std::size_t agent, std::size_t sensor) {
    SplitMix64 sm(rng_seed ^ (static_cast<std::uint64_t>(agent) << 32) ^ static_cast<std::uint64_t>(sensor));
    return sm.next();
}

RunReport run_scenario(const ScenarioConfig& config, const RunOptions& options) {
    if (const auto violations = validate(config); !violations.empty()) {
        std::string message;
        for (const auto& v : violations) message += fmt::format("{}{}: {}", message.empty() ? "" : "; ", v.path, v.message);
        throw ScenarioError(violations.front().path, message);
    }

    const auto t0 = std::chrono::steady_clock::now();
    const double dt = config.dt();

    World world;
    std::optional<CurrentField> current;
    try {
        world = build_world(config.world, options.base_dir);
    } catch (const ScenarioError&) {
        throw;
    } catch (const Error& e) {
        throw ScenarioError("world.path", e.what());
    }
    try {
        current = build_current(config, options.base_dir);
    } catch (const ScenarioError&) {
        throw;
    } catch (const Error& e) {
        throw ScenarioError("current.path", e.what());
    }

    DynamicsManager manager(config.ticks_per_sec);
    for (const auto& a : config.agents) {
        const VehicleParams params = a.effective_params();
        manager.add_agent(a.name, a.model, params, initial_state(params, a.initial_pose, a.initial_velocity),
                          a.command);
    }

    EnvironmentFields fields;
    fields.current = current ? &*current : nullptr;
    fields.waves = config.waves ? &config.waves->field : nullptr;
    fields.wave_orbital_current = config.waves && config.waves->orbital_current;
    fields.surface_buoyancy = config.surface_buoyancy;
    fields.world = &world;

    namespace fs = std::filesystem;
    fs::create_directories(options.out_dir / "state");
    fs::create_directories(options.out_dir / "sensors");

    std::vector<std::ofstream> state_logs;
    for (const auto& a : manager.agents()) {
        state_logs.push_back(open_out(options.out_dir / "state" / (a.name + ".csv")));
        write_state_csv_header(state_logs.back(), a.state.fin_angles.size());
    }

    // One octree per leaf size; the world does not change during a run.
    std::map<double, std::unique_ptr<Octree>> octrees;
    std::vector<SensorSlot> slots;
    for (std::size_t ai = 0; ai < config.agents.size(); ++ai) {
        const auto& a = config.agents[ai];
        for (std::size_t si = 0; si < a.sensors.size(); ++si) {
            SensorSlot s;
            s.agent = ai;
            s.spec = a.sensors[si];
            s.topic = a.name + "/" + s.spec.name;
            s.rng = Rng(sensor_seed(config.rng_seed, ai, si));
            if (s.spec.backend == Backend::octree) {
                auto& tree = octrees[s.spec.leaf_size];
                if (!tree) tree = std::make_unique<Octree>(build_octree(world, s.spec.leaf_size));
                s.octree = tree.get();
            }
            const std::string stem = a.name + "_" + s.spec.name;
            s.jsonl = open_out(options.out_dir / "sensors" / (stem + ".jsonl"));
            if (options.xyz && s.spec.kind == SensorKind::lidar)
                s.xyz = open_out(options.out_dir / "sensors" / (stem + ".xyz"));
            if (options.pgm && (s.spec.kind == SensorKind::sidescan || s.spec.kind == SensorKind::multibeam))
                s.pgm_path = options.out_dir / "sensors" / (stem + ".pgm");
            slots.push_back(std::move(s));
        }
    }

    RunReport report;
    report.name = config.name;
    report.duration_ticks = config.duration_ticks;
    report.dt = dt;
    for (const auto& s : slots) report.sensor_messages[s.topic] = 0;

    std::unique_ptr<BridgeServer> bridge;
    bool publish_state = false;
    if (config.bridge && !options.no_bridge) {
        BridgeOptions bo;
        bo.host = config.bridge->host;
        bo.port = options.bridge_port.value_or(config.bridge->port);
        bo.queue_depth = static_cast<std::size_t>(config.bridge->queue_depth);
        bo.publish_topics = config.bridge->topics;
        std::set<std::string> names;
        for (const auto& a : config.agents) names.insert(a.name);
        bo.known_agents = names;
        bridge = std::make_unique<BridgeServer>(bo);
        report.bridge_port = bridge->port();
        publish_state = config.bridge->publish_state;
        if (options.wait_clients > 0) bridge->wait_for_subscribers(options.wait_clients, options.wait_timeout);
    }

    std::vector<Vec6> prev_nu;
    for (const auto& a : manager.agents()) prev_nu.push_back(a.state.nu);

    const auto loop_start = std::chrono::steady_clock::now();
    try {
        for (std::int64_t k = 0; k < config.duration_ticks; ++k) {
            std::map<std::string, ControlCommand> commands;
            for (const auto& a : config.agents)
                for (const auto& sc : a.schedule)
                    if (sc.tick == k) commands[a.name] = sc.command;
            if (bridge)
                for (auto& msg : bridge->poll_commands()) commands[msg.agent] = std::move(msg.command);

            manager.tick(commands, fields, dt);
            report.ticks_executed = k + 1;
            const auto tick = static_cast<std::uint64_t>(k + 1);
            const double stamp = manager.time();

            const auto& agents = manager.agents();
            for (std::size_t i = 0; i < agents.size(); ++i) {
                write_state_csv_row(state_logs[i], stamp, agents[i].name, agents[i].state, agents[i].last_current);
                if (bridge && publish_state) {
                    Envelope e;
                    e.topic = agents[i].name + "/state";
                    e.schema = schemas::kState;
                    e.tick = tick;
                    e.stamp = stamp;
                    e.payload = state_payload(agents[i].name, agents[i].state, agents[i].last_current);
                    bridge->publish(e);
                }
            }

            for (auto& s : slots) {
                if (tick % static_cast<std::uint64_t>(s.spec.rate_ticks) != 0) continue;
                const auto& agent = agents[s.agent];
                const Vec6 nu_dot = (agent.state.nu - prev_nu[s.agent]) / dt;
                SensorContext ctx{&world, s.octree, nullptr};
                const SensorReading reading = evaluate_sensor(s.spec, ctx, agent.state, s.rng, 9.81, nu_dot);
                const Envelope e = sensor_envelope(agent.name, s.spec, reading, tick, stamp);
                s.jsonl << envelope_line(e);
                ++report.sensor_messages[s.topic];
                if (bridge) bridge->publish(e);
                if (s.xyz.is_open()) write_xyz(s.xyz, std::get<PointCloud>(reading));
                if (!s.pgm_path.empty()) {
                    if (const auto* line = std::get_if<SidescanLine>(&reading)) s.image.push_back(waterfall_row(*line));
                    if (const auto* scan = std::get_if<MultibeamReturn>(&reading))
                        s.image.push_back(range_row(*scan, s.spec.max_range));
                }
            }
            for (std::size_t i = 0; i < agents.size(); ++i) prev_nu[i] = agents[i].state.nu;

            if (!manager.contacts().empty()) {
                report.status = RunReport::Status::contact;
                const auto& c = manager.contacts().front();
                report.error = fmt::format("agent '{}' touched the seafloor at tick {} ({:.3f}, {:.3f}, {:.3f})",
                                           c.agent, c.tick, c.position.x(), c.position.y(), c.position.z());
                break;
            }

            if (options.realtime > 0.0) {
                const auto due = loop_start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                  std::chrono::duration<double>(stamp / options.realtime));
                std::this_thread::sleep_until(due);
            }
        }
    } catch (const Error& e) {
        report.status = RunReport::Status::fault;
        report.error = e.what();
    }

    for (auto& s : slots)
        if (!s.pgm_path.empty() && !s.image.empty()) write_pgm(s.pgm_path, s.image);

    for (const auto& a : manager.agents()) report.agents.push_back({a.name, a.state});
    report.contacts = manager.contacts();
    if (bridge) {
        bridge->stop();
        report.bridge = bridge->stats();
    }
    report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    auto out = open_out(options.out_dir / "report.json");
    out << report.to_json().dump(2) << "\n";
    return report;
}

}  // namespace mariner
