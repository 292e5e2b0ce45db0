#include "mariner/scenario.hpp"

#include "mariner/archive.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace mariner {

using nlohmann::json;

ScenarioError::ScenarioError(std::string path, const std::string& message, int line, int column)
    : FormatError(line > 0 ? fmt::format("line {}, column {}: {}", line, column, message)
                           : (path.empty() ? message : fmt::format("{}: {}", path, message))),
      path_(std::move(path)),
      line_(line),
      column_(column) {}

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }
std::string index(const std::string& path, std::size_t i) { return fmt::format("{}[{}]", path, i); }

const char* type_name(const json& j) { return j.type_name(); }

[[noreturn]] void type_error(const json& j, const std::string& path, const char* expected) {
    throw ScenarioError(path, fmt::format("expected {}, got {}", expected, type_name(j)));
}

double as_double(const json& j, const std::string& path) {
    if (!j.is_number()) type_error(j, path, "a number");
    return j.get<double>();
}

std::int64_t as_int(const json& j, const std::string& path) {
    if (j.is_number_unsigned()) {
        if (j.get<std::uint64_t>() > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()))
            throw ScenarioError(path, "integer out of range");
        return static_cast<std::int64_t>(j.get<std::uint64_t>());
    }
    if (!j.is_number_integer()) type_error(j, path, "an integer");
    return j.get<std::int64_t>();
}

int as_int32(const json& j, const std::string& path) {
    const std::int64_t v = as_int(j, path);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max())
        throw ScenarioError(path, "integer out of range");
    return static_cast<int>(v);
}

std::uint64_t as_u64(const json& j, const std::string& path) {
    if (j.is_number_unsigned()) return j.get<std::uint64_t>();
    if (j.is_number_integer()) throw ScenarioError(path, "expected a non-negative integer");
    type_error(j, path, "a non-negative integer");
}

bool as_bool(const json& j, const std::string& path) {
    if (!j.is_boolean()) type_error(j, path, "a boolean");
    return j.get<bool>();
}

std::string as_string(const json& j, const std::string& path) {
    if (!j.is_string()) type_error(j, path, "a string");
    return j.get<std::string>();
}

template <int N>
Eigen::Matrix<double, N, 1> as_vec(const json& j, const std::string& path) {
    if (!j.is_array() || j.size() != N) type_error(j, path, N == 2 ? "an array of 2 numbers"
                                                          : N == 3 ? "an array of 3 numbers"
                                                                   : "an array of 6 numbers");
    Eigen::Matrix<double, N, 1> v;
    for (int i = 0; i < N; ++i) v[i] = as_double(j[static_cast<std::size_t>(i)], index(path, static_cast<std::size_t>(i)));
    return v;
}

Mat3 as_mat3(const json& j, const std::string& path) {
    if (!j.is_array() || j.size() != 3) type_error(j, path, "a 3x3 array");
    Mat3 m;
    for (int r = 0; r < 3; ++r) m.row(r) = as_vec<3>(j[static_cast<std::size_t>(r)], index(path, static_cast<std::size_t>(r))).transpose();
    return m;
}

const json& as_array(const json& j, const std::string& path) {
    if (!j.is_array()) type_error(j, path, "an array");
    return j;
}

template <typename Derived>
json to_json(const Eigen::MatrixBase<Derived>& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

json to_json(const Mat3& m) { return json::array({to_json(Vec3(m.row(0))), to_json(Vec3(m.row(1))), to_json(Vec3(m.row(2)))}); }

/// Object reader that records which keys were consumed so leftovers can be
/// reported as unknown fields.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) type_error(j, path_.empty() ? "<root>" : path_, "an object");
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end() || it->is_null()) return nullptr;
        return &*it;
    }

    const json& require(const std::string& key) {
        const json* v = find(key);
        if (!v) throw ScenarioError(at(key), "missing required field");
        return *v;
    }

    std::string at(const std::string& key) const { return join(path_, key); }
    const std::string& path() const { return path_; }

    template <typename T, typename Read>
    void read(const std::string& key, T& out, Read reader) {
        if (const json* v = find(key)) out = reader(*v, at(key));
    }

    void number(const std::string& key, double& out) { read(key, out, as_double); }
    void integer(const std::string& key, int& out) { read(key, out, as_int32); }
    void boolean(const std::string& key, bool& out) { read(key, out, as_bool); }
    void string(const std::string& key, std::string& out) { read(key, out, as_string); }
    void vec3(const std::string& key, Vec3& out) { read(key, out, as_vec<3>); }
    void vec6(const std::string& key, Vec6& out) { read(key, out, as_vec<6>); }

    void finish() const {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key()))
                throw ScenarioError(at(item.key()), fmt::format("unknown field '{}'", item.key()));
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// Enum names

template <typename E>
struct EnumName {
    E value;
    const char* name;
};

constexpr EnumName<AgentModel> kModels[] = {{AgentModel::fossen_torpedo, "fossen_torpedo"},
                                            {AgentModel::kinematic, "kinematic"}};
constexpr EnumName<WorldSpec::Kind> kWorldKinds[] = {
    {WorldSpec::Kind::empty, "empty"}, {WorldSpec::Kind::flat, "flat"},       {WorldSpec::Kind::generate, "generate"},
    {WorldSpec::Kind::dam, "dam"},     {WorldSpec::Kind::archive, "archive"}, {WorldSpec::Kind::bathymetry, "bathymetry"}};
constexpr EnumName<CurrentSpec::Kind> kCurrentKinds[] = {{CurrentSpec::Kind::constant, "constant"},
                                                         {CurrentSpec::Kind::shear, "shear"},
                                                         {CurrentSpec::Kind::grid, "grid"}};
constexpr EnumName<PropSpec::Shape> kShapes[] = {{PropSpec::Shape::box, "box"}, {PropSpec::Shape::stl, "stl"}};
constexpr EnumName<ControlCommand::Mode> kModes[] = {{ControlCommand::Mode::direct, "direct"},
                                                     {ControlCommand::Mode::setpoint, "setpoint"}};

template <typename E, std::size_t N>
const char* name_of(const EnumName<E> (&table)[N], E value) {
    for (const auto& e : table)
        if (e.value == value) return e.name;
    return "?";
}

template <typename E, std::size_t N>
E enum_of(const EnumName<E> (&table)[N], const json& j, const std::string& path) {
    const std::string s = as_string(j, path);
    std::string choices;
    for (const auto& e : table) {
        if (s == e.name) return e.value;
        choices += choices.empty() ? e.name : fmt::format(", {}", e.name);
    }
    throw ScenarioError(path, fmt::format("unknown value '{}' (expected one of: {})", s, choices));
}

SemanticLabel label_from(const json& j, const std::string& path) {
    Fields f(j, path);
    SemanticLabel l{classes::kSpawned, 0};
    l.class_id = as_int32(f.require("class_id"), f.at("class_id"));
    f.read("instance_id", l.instance_id, as_int);
    f.finish();
    return l;
}

json label_to_json(const SemanticLabel& l) { return {{"class_id", l.class_id}, {"instance_id", l.instance_id}}; }

// ---------------------------------------------------------------------------
// World

json prop_to_json(const PropSpec& p) {
    json j = {{"shape", name_of(kShapes, p.shape)}, {"pose", to_json(p.pose)}, {"label", label_to_json(p.label)}};
    if (p.shape == PropSpec::Shape::box) {
        j["size"] = to_json(p.size);
    } else {
        j["path"] = p.mesh_path;
    }
    return j;
}

PropSpec prop_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    PropSpec p;
    f.read("shape", p.shape, [](const json& v, const std::string& at) { return enum_of(kShapes, v, at); });
    if (p.shape == PropSpec::Shape::box) {
        f.vec3("size", p.size);
    } else {
        p.mesh_path = as_string(f.require("path"), f.at("path"));
    }
    f.vec6("pose", p.pose);
    f.read("label", p.label, label_from);
    f.finish();
    return p;
}

void write_gen(json& j, const GenSpec& g) {
    j["terrain"] = g.terrain;
    j["size_x"] = g.size_x;
    j["size_y"] = g.size_y;
    j["cell_size"] = g.cell_size;
    j["base_depth"] = g.base_depth;
    j["relief"] = g.relief;
    j["density"] = g.density;
    json classes = json::array();
    for (const auto& c : g.prop_classes)
        classes.push_back({{"name", c.name}, {"class_id", c.class_id}, {"size", to_json(c.size)}});
    j["prop_classes"] = classes;
}

void read_gen(Fields& f, GenSpec& g) {
    f.string("terrain", g.terrain);
    f.number("size_x", g.size_x);
    f.number("size_y", g.size_y);
    f.number("cell_size", g.cell_size);
    f.number("base_depth", g.base_depth);
    f.number("relief", g.relief);
    f.number("density", g.density);
    if (const json* a = f.find("prop_classes")) {
        const std::string at = f.at("prop_classes");
        for (std::size_t i = 0; i < as_array(*a, at).size(); ++i) {
            Fields c((*a)[i], index(at, i));
            PropClass pc;
            pc.name = as_string(c.require("name"), c.at("name"));
            c.integer("class_id", pc.class_id);
            c.vec3("size", pc.size);
            c.finish();
            g.prop_classes.push_back(std::move(pc));
        }
    }
}

json world_to_json(const WorldSpec& w) {
    json j = {{"kind", name_of(kWorldKinds, w.kind)}};
    switch (w.kind) {
        case WorldSpec::Kind::flat:
            j["depth"] = w.depth;
            j["size_x"] = w.size_x;
            j["size_y"] = w.size_y;
            j["cell_size"] = w.cell_size;
            j["origin"] = to_json(w.origin);
            break;
        case WorldSpec::Kind::generate:
            j["seed"] = w.seed;
            write_gen(j, w.gen);
            break;
        case WorldSpec::Kind::archive:
            j["path"] = w.path;
            break;
        case WorldSpec::Kind::bathymetry:
            j["path"] = w.path;
            if (w.grid_cell_size) j["cell_size"] = *w.grid_cell_size;
            if (w.grid_origin) j["origin"] = to_json(*w.grid_origin);
            break;
        case WorldSpec::Kind::empty:
        case WorldSpec::Kind::dam:
            break;
    }
    json props = json::array();
    for (const auto& p : w.props) props.push_back(prop_to_json(p));
    j["props"] = props;
    return j;
}

WorldSpec world_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    WorldSpec w;
    w.kind = enum_of(kWorldKinds, f.require("kind"), f.at("kind"));
    switch (w.kind) {
        case WorldSpec::Kind::flat:
            f.number("depth", w.depth);
            f.number("size_x", w.size_x);
            f.number("size_y", w.size_y);
            f.number("cell_size", w.cell_size);
            f.read("origin", w.origin, as_vec<2>);
            break;
        case WorldSpec::Kind::generate:
            f.read("seed", w.seed, as_u64);
            read_gen(f, w.gen);
            break;
        case WorldSpec::Kind::archive:
            w.path = as_string(f.require("path"), f.at("path"));
            break;
        case WorldSpec::Kind::bathymetry:
            w.path = as_string(f.require("path"), f.at("path"));
            if (const json* v = f.find("cell_size")) w.grid_cell_size = as_double(*v, f.at("cell_size"));
            if (const json* v = f.find("origin")) w.grid_origin = as_vec<2>(*v, f.at("origin"));
            break;
        case WorldSpec::Kind::empty:
        case WorldSpec::Kind::dam:
            break;
    }
    if (const json* a = f.find("props")) {
        const std::string at = f.at("props");
        for (std::size_t i = 0; i < as_array(*a, at).size(); ++i) w.props.push_back(prop_from_json((*a)[i], index(at, i)));
    }
    f.finish();
    return w;
}

// ---------------------------------------------------------------------------
// Environment

json current_to_json(const CurrentSpec& c) {
    json j = {{"kind", name_of(kCurrentKinds, c.kind)}};
    switch (c.kind) {
        case CurrentSpec::Kind::constant: j["velocity"] = to_json(c.velocity); break;
        case CurrentSpec::Kind::shear:
            j["surface_velocity"] = to_json(c.surface_velocity);
            j["decay_depth"] = c.decay_depth;
            break;
        case CurrentSpec::Kind::grid: j["path"] = c.path; break;
    }
    return j;
}

CurrentSpec current_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    CurrentSpec c;
    c.kind = enum_of(kCurrentKinds, f.require("kind"), f.at("kind"));
    switch (c.kind) {
        case CurrentSpec::Kind::constant: f.vec3("velocity", c.velocity); break;
        case CurrentSpec::Kind::shear:
            f.vec3("surface_velocity", c.surface_velocity);
            f.number("decay_depth", c.decay_depth);
            break;
        case CurrentSpec::Kind::grid: c.path = as_string(f.require("path"), f.at("path")); break;
    }
    f.finish();
    return c;
}

json waves_to_json(const WaveSpec& w) {
    json comps = json::array();
    for (const auto& c : w.field.components)
        comps.push_back({{"amplitude", c.amplitude},
                         {"wavelength", c.wavelength},
                         {"direction", to_json(c.direction)},
                         {"phase", c.phase},
                         {"steepness", c.steepness}});
    return {{"components", comps}, {"gravity", w.field.gravity}, {"orbital_current", w.orbital_current}};
}

WaveSpec waves_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    WaveSpec w;
    if (const json* a = f.find("components")) {
        const std::string at = f.at("components");
        for (std::size_t i = 0; i < as_array(*a, at).size(); ++i) {
            Fields c((*a)[i], index(at, i));
            WaveComponent wc;
            c.number("amplitude", wc.amplitude);
            c.number("wavelength", wc.wavelength);
            c.read("direction", wc.direction, as_vec<2>);
            c.number("phase", wc.phase);
            c.number("steepness", wc.steepness);
            c.finish();
            w.field.components.push_back(wc);
        }
    }
    f.number("gravity", w.field.gravity);
    f.boolean("orbital_current", w.orbital_current);
    f.finish();
    return w;
}

json bridge_to_json(const BridgeSpec& b) {
    return {{"host", b.host},
            {"port", b.port},
            {"topics", b.topics},
            {"queue_depth", b.queue_depth},
            {"publish_state", b.publish_state}};
}

BridgeSpec bridge_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    BridgeSpec b;
    f.string("host", b.host);
    f.integer("port", b.port);
    if (const json* a = f.find("topics")) {
        const std::string at = f.at("topics");
        b.topics.clear();
        for (std::size_t i = 0; i < as_array(*a, at).size(); ++i) b.topics.push_back(as_string((*a)[i], index(at, i)));
    }
    f.integer("queue_depth", b.queue_depth);
    f.boolean("publish_state", b.publish_state);
    f.finish();
    return b;
}

// ---------------------------------------------------------------------------
// Agents

bool is_ranging(SensorKind k) {
    return k == SensorKind::echo || k == SensorKind::multibeam || k == SensorKind::sidescan || k == SensorKind::lidar;
}

json noise_to_json(const SensorNoise& n) {
    return {{"range_std", n.range_std},       {"speckle", n.speckle},   {"accel_std", n.accel_std},
            {"gyro_std", n.gyro_std},         {"velocity_std", n.velocity_std}, {"depth_std", n.depth_std}};
}

SensorNoise noise_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    SensorNoise n;
    f.number("range_std", n.range_std);
    f.boolean("speckle", n.speckle);
    f.number("accel_std", n.accel_std);
    f.number("gyro_std", n.gyro_std);
    f.number("velocity_std", n.velocity_std);
    f.number("depth_std", n.depth_std);
    f.finish();
    return n;
}

json schedule_to_json(const std::vector<ScheduledCommand>& schedule) {
    json a = json::array();
    for (const auto& s : schedule) a.push_back({{"tick", s.tick}, {"command", command_to_json(s.command)}});
    return a;
}

json agent_to_json(const AgentSpec& a) {
    json sensors = json::array();
    for (const auto& s : a.sensors) sensors.push_back(sensor_to_json(s));
    json j = {{"name", a.name},
              {"model", name_of(kModels, a.model)},
              {"params", params_to_json(a.params)},
              {"initial_pose", to_json(a.initial_pose)},
              {"initial_velocity", to_json(a.initial_velocity)},
              {"sensors", sensors},
              {"command", command_to_json(a.command)},
              {"schedule", schedule_to_json(a.schedule)}};
    if (a.per_agent_current) j["per_agent_current"] = to_json(*a.per_agent_current);
    return j;
}

AgentSpec agent_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    AgentSpec a;
    a.name = as_string(f.require("name"), f.at("name"));
    f.read("model", a.model, [](const json& v, const std::string& at) { return enum_of(kModels, v, at); });
    if (const json* p = f.find("params")) params_from_json(*p, a.params, f.at("params"));
    f.vec6("initial_pose", a.initial_pose);
    f.vec6("initial_velocity", a.initial_velocity);
    if (const json* s = f.find("sensors")) {
        const std::string at = f.at("sensors");
        for (std::size_t i = 0; i < as_array(*s, at).size(); ++i) a.sensors.push_back(sensor_from_json((*s)[i], index(at, i)));
    }
    if (const json* c = f.find("per_agent_current")) a.per_agent_current = as_vec<3>(*c, f.at("per_agent_current"));
    if (const json* c = f.find("command")) a.command = command_from_json(*c, f.at("command"));
    if (const json* s = f.find("schedule")) {
        const std::string at = f.at("schedule");
        for (std::size_t i = 0; i < as_array(*s, at).size(); ++i) {
            Fields e((*s)[i], index(at, i));
            ScheduledCommand sc;
            sc.tick = as_int(e.require("tick"), e.at("tick"));
            sc.command = command_from_json(e.require("command"), e.at("command"));
            e.finish();
            a.schedule.push_back(std::move(sc));
        }
    }
    f.finish();
    return a;
}

std::pair<int, int> line_column(std::string_view text, std::size_t byte) {
    int line = 1, column = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            column = 1;
        } else {
            ++column;
        }
    }
    return {line, column};
}

}  // namespace

// ---------------------------------------------------------------------------
// Public blocks

json params_to_json(const VehicleParams& p) {
    json fins = json::array();
    for (const auto& fin : p.control_surfaces.fins)
        fins.push_back({{"name", fin.name},
                        {"position", to_json(fin.position)},
                        {"axis", to_json(fin.axis)},
                        {"area", fin.area},
                        {"lift_coefficient", fin.lift_coefficient},
                        {"time_constant", fin.time_constant},
                        {"max_deflection", fin.max_deflection}});
    auto pid = [](const PidGains& g) { return json{{"kp", g.kp}, {"ki", g.ki}, {"kd", g.kd}}; };
    const auto& ap = p.autopilot;
    return {
        {"environmental", {{"water_density", p.environmental.water_density}, {"gravity", p.environmental.gravity}}},
        {"physical",
         {{"mass", p.physical.mass},
          {"length", p.physical.length},
          {"diameter", p.physical.diameter},
          {"inertia", to_json(p.physical.inertia)},
          {"added_mass", to_json(p.physical.added_mass)}}},
        {"hydrodynamic",
         {{"linear_damping", to_json(p.hydrodynamic.linear_damping)},
          {"quadratic_drag", to_json(p.hydrodynamic.quadratic_drag)},
          {"linear_decay", p.hydrodynamic.linear_decay}}},
        {"hydrostatic",
         {{"r_cb", to_json(p.hydrostatic.r_cb)},
          {"r_cg", to_json(p.hydrostatic.r_cg)},
          {"displaced_volume", p.hydrostatic.displaced_volume}}},
        {"control_surfaces",
         {{"fins", fins},
          {"thrust_coefficient", p.control_surfaces.thrust_coefficient},
          {"prop_diameter", p.control_surfaces.prop_diameter},
          {"prop_time_constant", p.control_surfaces.prop_time_constant},
          {"max_prop_speed", p.control_surfaces.max_prop_speed}}},
        {"autopilot",
         {{"depth", pid(ap.depth)},
          {"pitch", pid(ap.pitch)},
          {"max_pitch", ap.max_pitch},
          {"depth_integral_limit", ap.depth_integral_limit},
          {"pitch_integral_limit", ap.pitch_integral_limit},
          {"heading",
           {{"lambda", ap.heading.lambda},
            {"k_s", ap.heading.k_s},
            {"phi_boundary", ap.heading.phi_boundary},
            {"nomoto_gain", ap.heading.nomoto_gain},
            {"nomoto_time", ap.heading.nomoto_time}}}}},
    };
}

void params_from_json(const json& j, VehicleParams& p, const std::string& path) {
    Fields f(j, path);
    if (const json* v = f.find("environmental")) {
        Fields e(*v, f.at("environmental"));
        e.number("water_density", p.environmental.water_density);
        e.number("gravity", p.environmental.gravity);
        e.finish();
    }
    if (const json* v = f.find("physical")) {
        Fields e(*v, f.at("physical"));
        e.number("mass", p.physical.mass);
        e.number("length", p.physical.length);
        e.number("diameter", p.physical.diameter);
        e.read("inertia", p.physical.inertia, as_mat3);
        e.vec6("added_mass", p.physical.added_mass);
        e.finish();
    }
    if (const json* v = f.find("hydrodynamic")) {
        Fields e(*v, f.at("hydrodynamic"));
        e.vec6("linear_damping", p.hydrodynamic.linear_damping);
        e.vec6("quadratic_drag", p.hydrodynamic.quadratic_drag);
        e.number("linear_decay", p.hydrodynamic.linear_decay);
        e.finish();
    }
    if (const json* v = f.find("hydrostatic")) {
        Fields e(*v, f.at("hydrostatic"));
        e.vec3("r_cb", p.hydrostatic.r_cb);
        e.vec3("r_cg", p.hydrostatic.r_cg);
        e.number("displaced_volume", p.hydrostatic.displaced_volume);
        e.finish();
    }
    if (const json* v = f.find("control_surfaces")) {
        Fields e(*v, f.at("control_surfaces"));
        auto& cs = p.control_surfaces;
        if (const json* a = e.find("fins")) {
            // A fin list replaces the defaults; each entry starts from the
            // default fin at the same index so partial entries stay usable.
            const std::string at = e.at("fins");
            std::vector<FinParams> fins;
            for (std::size_t i = 0; i < as_array(*a, at).size(); ++i) {
                FinParams fin = i < cs.fins.size() ? cs.fins[i] : FinParams{};
                Fields g((*a)[i], index(at, i));
                g.string("name", fin.name);
                g.vec3("position", fin.position);
                g.vec3("axis", fin.axis);
                g.number("area", fin.area);
                g.number("lift_coefficient", fin.lift_coefficient);
                g.number("time_constant", fin.time_constant);
                g.number("max_deflection", fin.max_deflection);
                g.finish();
                fins.push_back(std::move(fin));
            }
            cs.fins = std::move(fins);
        }
        e.number("thrust_coefficient", cs.thrust_coefficient);
        e.number("prop_diameter", cs.prop_diameter);
        e.number("prop_time_constant", cs.prop_time_constant);
        e.number("max_prop_speed", cs.max_prop_speed);
        e.finish();
    }
    if (const json* v = f.find("autopilot")) {
        Fields e(*v, f.at("autopilot"));
        auto& ap = p.autopilot;
        auto pid = [&](const char* key, PidGains& g) {
            if (const json* x = e.find(key)) {
                Fields k(*x, e.at(key));
                k.number("kp", g.kp);
                k.number("ki", g.ki);
                k.number("kd", g.kd);
                k.finish();
            }
        };
        pid("depth", ap.depth);
        pid("pitch", ap.pitch);
        e.number("max_pitch", ap.max_pitch);
        e.number("depth_integral_limit", ap.depth_integral_limit);
        e.number("pitch_integral_limit", ap.pitch_integral_limit);
        if (const json* x = e.find("heading")) {
            Fields k(*x, e.at("heading"));
            k.number("lambda", ap.heading.lambda);
            k.number("k_s", ap.heading.k_s);
            k.number("phi_boundary", ap.heading.phi_boundary);
            k.number("nomoto_gain", ap.heading.nomoto_gain);
            k.number("nomoto_time", ap.heading.nomoto_time);
            k.finish();
        }
        e.finish();
    }
    f.finish();
}

json command_to_json(const ControlCommand& c) {
    if (c.mode == ControlCommand::Mode::setpoint)
        return {{"mode", "setpoint"}, {"depth", c.depth}, {"heading", c.heading}, {"speed", c.speed}};
    return {{"mode", "direct"}, {"fins", c.fin_commands}, {"prop_speed", c.prop_speed}};
}

ControlCommand command_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    ControlCommand c;
    c.mode = enum_of(kModes, f.require("mode"), f.at("mode"));
    if (c.mode == ControlCommand::Mode::setpoint) {
        f.number("depth", c.depth);
        f.number("heading", c.heading);
        f.number("speed", c.speed);
    } else {
        if (const json* a = f.find("fins")) {
            const std::string at = f.at("fins");
            for (std::size_t i = 0; i < as_array(*a, at).size(); ++i) c.fin_commands.push_back(as_double((*a)[i], index(at, i)));
        }
        f.number("prop_speed", c.prop_speed);
    }
    f.finish();
    return c;
}

json sensor_to_json(const SensorSpec& s) {
    json j = {{"name", s.name},
              {"kind", to_string(s.kind)},
              {"mount_pose", to_json(s.mount_pose)},
              {"rate_ticks", s.rate_ticks},
              {"noise", noise_to_json(s.noise)}};
    if (is_ranging(s.kind)) {
        j["backend"] = to_string(s.backend);
        j["semantic"] = s.semantic;
        j["max_range"] = s.max_range;
        j["leaf_size"] = s.leaf_size;
    }
    switch (s.kind) {
        case SensorKind::multibeam:
            j["n_beams"] = s.n_beams;
            j["swath_aperture"] = s.swath_aperture;
            break;
        case SensorKind::sidescan:
            j["n_bins"] = s.n_bins;
            j["tilt"] = s.tilt;
            j["vertical_aperture"] = s.vertical_aperture;
            j["rays_per_bin"] = s.rays_per_bin;
            break;
        case SensorKind::lidar:
            j["n_lasers"] = s.n_lasers;
            j["fov_vertical"] = s.fov_vertical;
            j["fov_horizontal"] = s.fov_horizontal;
            j["points_per_rotation"] = s.points_per_rotation;
            break;
        default: break;
    }
    return j;
}

SensorSpec sensor_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    SensorSpec s;
    s.name = as_string(f.require("name"), f.at("name"));
    {
        const std::string at = f.at("kind");
        try {
            s.kind = sensor_kind_from_string(as_string(f.require("kind"), at));
        } catch (const InvalidArgument& e) {
            throw ScenarioError(at, e.what());
        }
    }
    f.vec6("mount_pose", s.mount_pose);
    f.integer("rate_ticks", s.rate_ticks);
    f.read("noise", s.noise, noise_from_json);
    if (is_ranging(s.kind)) {
        if (const json* v = f.find("backend")) {
            try {
                s.backend = backend_from_string(as_string(*v, f.at("backend")));
            } catch (const InvalidArgument& e) {
                throw ScenarioError(f.at("backend"), e.what());
            }
        }
        f.boolean("semantic", s.semantic);
        f.number("max_range", s.max_range);
        f.number("leaf_size", s.leaf_size);
    }
    switch (s.kind) {
        case SensorKind::multibeam:
            f.integer("n_beams", s.n_beams);
            f.number("swath_aperture", s.swath_aperture);
            break;
        case SensorKind::sidescan:
            f.integer("n_bins", s.n_bins);
            f.number("tilt", s.tilt);
            f.number("vertical_aperture", s.vertical_aperture);
            f.integer("rays_per_bin", s.rays_per_bin);
            break;
        case SensorKind::lidar:
            f.integer("n_lasers", s.n_lasers);
            f.number("fov_vertical", s.fov_vertical);
            f.number("fov_horizontal", s.fov_horizontal);
            f.integer("points_per_rotation", s.points_per_rotation);
            break;
        default: break;
    }
    f.finish();
    return s;
}

json genspec_to_json(const GenSpec& g) {
    json j = json::object();
    write_gen(j, g);
    return j;
}

GenSpec genspec_from_json(const json& j, const std::string& path) {
    Fields f(j, path);
    GenSpec g;
    read_gen(f, g);
    f.finish();
    return g;
}

// ---------------------------------------------------------------------------
// Documents

VehicleParams AgentSpec::effective_params() const {
    VehicleParams p = params;
    p.environmental.current = per_agent_current;
    return p;
}

ScenarioConfig parse_scenario(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text.begin(), text.end());
    } catch (const json::parse_error& e) {
        const auto [line, column] = line_column(text, e.byte > 0 ? e.byte - 1 : 0);
        throw ScenarioError("", fmt::format("syntax error: {}", e.what()), line, column);
    }
    Fields f(doc, "");
    ScenarioConfig c;
    c.name = as_string(f.require("name"), "name");
    c.ticks_per_sec = as_double(f.require("ticks_per_sec"), "ticks_per_sec");
    c.duration_ticks = as_int(f.require("duration_ticks"), "duration_ticks");
    f.read("rng_seed", c.rng_seed, as_u64);
    f.boolean("surface_buoyancy", c.surface_buoyancy);
    c.world = world_from_json(f.require("world"), "world");
    const json& agents = as_array(f.require("agents"), "agents");
    for (std::size_t i = 0; i < agents.size(); ++i) c.agents.push_back(agent_from_json(agents[i], index("agents", i)));
    if (const json* v = f.find("current")) c.current = current_from_json(*v, "current");
    if (const json* v = f.find("waves")) c.waves = waves_from_json(*v, "waves");
    if (const json* v = f.find("bridge")) c.bridge = bridge_from_json(*v, "bridge");
    f.finish();
    return c;
}

ScenarioConfig load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open scenario {}", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_scenario(ss.str());
}

std::string serialize_scenario(const ScenarioConfig& c) {
    json agents = json::array();
    for (const auto& a : c.agents) agents.push_back(agent_to_json(a));
    json j = {{"name", c.name},
              {"ticks_per_sec", c.ticks_per_sec},
              {"duration_ticks", c.duration_ticks},
              {"rng_seed", c.rng_seed},
              {"surface_buoyancy", c.surface_buoyancy},
              {"world", world_to_json(c.world)},
              {"agents", agents}};
    if (c.current) j["current"] = current_to_json(*c.current);
    if (c.waves) j["waves"] = waves_to_json(*c.waves);
    if (c.bridge) j["bridge"] = bridge_to_json(*c.bridge);
    return j.dump(2) + "\n";
}

std::vector<Violation> validate(const ScenarioConfig& c) {
    std::vector<Violation> out;
    auto add = [&](std::string path, std::string message) { out.push_back({std::move(path), std::move(message)}); };
    auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };

    if (c.name.empty()) add("name", "must not be empty");
    if (!positive(c.ticks_per_sec)) add("ticks_per_sec", "must be a positive finite rate");
    if (c.duration_ticks < 1) add("duration_ticks", "must be >= 1");

    const WorldSpec& w = c.world;
    switch (w.kind) {
        case WorldSpec::Kind::flat:
            if (!std::isfinite(w.depth)) add("world.depth", "must be finite");
            if (!positive(w.cell_size)) add("world.cell_size", "must be positive");
            if (!positive(w.size_x) || !(w.size_x >= w.cell_size)) add("world.size_x", "must span at least one cell");
            if (!positive(w.size_y) || !(w.size_y >= w.cell_size)) add("world.size_y", "must span at least one cell");
            if (!w.origin.allFinite()) add("world.origin", "must be finite");
            break;
        case WorldSpec::Kind::generate: {
            const GenSpec& g = w.gen;
            if (g.terrain != "flat" && g.terrain != "rolling" && g.terrain != "canyon")
                add("world.terrain", "must be flat, rolling or canyon");
            if (!positive(g.cell_size)) add("world.cell_size", "must be positive");
            if (!positive(g.size_x) || !(g.size_x >= g.cell_size)) add("world.size_x", "must span at least one cell");
            if (!positive(g.size_y) || !(g.size_y >= g.cell_size)) add("world.size_y", "must span at least one cell");
            if (!std::isfinite(g.base_depth)) add("world.base_depth", "must be finite");
            if (!std::isfinite(g.relief) || g.relief < 0.0) add("world.relief", "must be non-negative");
            if (!std::isfinite(g.density) || g.density < 0.0) add("world.density", "must be non-negative");
            if (g.density > 0.0 && g.prop_classes.empty()) add("world.prop_classes", "needed when density > 0");
            for (std::size_t i = 0; i < g.prop_classes.size(); ++i)
                if (!(g.prop_classes[i].size.array() > 0.0).all() || !g.prop_classes[i].size.allFinite())
                    add(fmt::format("world.prop_classes[{}].size", i), "must be positive");
            break;
        }
        case WorldSpec::Kind::archive:
        case WorldSpec::Kind::bathymetry:
            if (w.path.empty()) add("world.path", "must not be empty");
            if (w.grid_cell_size && !positive(*w.grid_cell_size)) add("world.cell_size", "must be positive");
            break;
        case WorldSpec::Kind::empty:
        case WorldSpec::Kind::dam:
            break;
    }
    for (std::size_t i = 0; i < w.props.size(); ++i) {
        const PropSpec& p = w.props[i];
        const std::string at = fmt::format("world.props[{}]", i);
        if (p.shape == PropSpec::Shape::box && (!p.size.allFinite() || !(p.size.array() > 0.0).all()))
            add(at + ".size", "must be positive");
        if (p.shape == PropSpec::Shape::stl && p.mesh_path.empty()) add(at + ".path", "must not be empty");
        if (!p.pose.allFinite()) add(at + ".pose", "must be finite");
    }

    std::set<std::string> names;
    for (std::size_t i = 0; i < c.agents.size(); ++i) {
        const AgentSpec& a = c.agents[i];
        const std::string at = index("agents", i);
        if (a.name.empty()) {
            add(at + ".name", "must not be empty");
        } else if (!names.insert(a.name).second) {
            add(at + ".name", fmt::format("duplicate agent name '{}'", a.name));
        }
        try {
            a.params.validate();
        } catch (const InvalidArgument& e) {
            add(at + ".params", e.what());
        }
        if (!a.initial_pose.allFinite()) add(at + ".initial_pose", "must be finite");
        if (!a.initial_velocity.allFinite()) add(at + ".initial_velocity", "must be finite");
        if (a.per_agent_current) {
            if (!a.per_agent_current->allFinite()) add(at + ".per_agent_current", "must be finite");
            if (c.current)
                add(at + ".per_agent_current",
                    "a per-agent current cannot be combined with a world current field; use one or the other");
        }
        auto check_command = [&](const ControlCommand& cmd, const std::string& cat) {
            const std::size_t fins = a.params.control_surfaces.fins.size();
            if (cmd.mode == ControlCommand::Mode::direct && !cmd.fin_commands.empty() && cmd.fin_commands.size() != fins)
                add(cat + ".fins", fmt::format("has {} entries, vehicle has {} fins", cmd.fin_commands.size(), fins));
        };
        check_command(a.command, at + ".command");
        std::int64_t last = 0;
        for (std::size_t k = 0; k < a.schedule.size(); ++k) {
            const auto& s = a.schedule[k];
            const std::string sat = fmt::format("{}.schedule[{}]", at, k);
            if (s.tick < 0 || s.tick >= c.duration_ticks) add(sat + ".tick", "must lie in [0, duration_ticks)");
            if (s.tick < last) add(sat + ".tick", "schedule must be in tick order");
            last = std::max(last, s.tick);
            check_command(s.command, sat + ".command");
        }
        std::set<std::string> sensor_names;
        for (std::size_t k = 0; k < a.sensors.size(); ++k) {
            const SensorSpec& s = a.sensors[k];
            const std::string sat = fmt::format("{}.sensors[{}]", at, k);
            if (s.name.empty()) {
                add(sat + ".name", "must not be empty");
            } else if (!sensor_names.insert(s.name).second) {
                add(sat + ".name", fmt::format("duplicate sensor name '{}' on agent '{}'", s.name, a.name));
            }
            try {
                s.validate();
            } catch (const InvalidArgument& e) {
                add(sat, e.what());
            }
        }
    }

    if (c.current) {
        const CurrentSpec& cur = *c.current;
        if (cur.kind == CurrentSpec::Kind::constant && !cur.velocity.allFinite()) add("current.velocity", "must be finite");
        if (cur.kind == CurrentSpec::Kind::shear) {
            if (!cur.surface_velocity.allFinite()) add("current.surface_velocity", "must be finite");
            if (!positive(cur.decay_depth)) add("current.decay_depth", "must be positive");
        }
        if (cur.kind == CurrentSpec::Kind::grid && cur.path.empty()) add("current.path", "must not be empty");
    }
    if (c.waves) {
        try {
            c.waves->field.validate();
        } catch (const InvalidArgument& e) {
            add("waves", e.what());
        }
    }
    if (c.bridge) {
        const BridgeSpec& b = *c.bridge;
        if (b.host.empty()) add("bridge.host", "must not be empty");
        if (b.port < 0 || b.port > 65535) add("bridge.port", "must lie in [0, 65535]");
        if (b.queue_depth < 1) add("bridge.queue_depth", "must be >= 1");
        for (std::size_t i = 0; i < b.topics.size(); ++i)
            if (b.topics[i].empty()) add(fmt::format("bridge.topics[{}]", i), "must not be empty");
    }
    return out;
}

ScenarioConfig default_scenario() {
    ScenarioConfig c;
    c.name = "default";
    c.ticks_per_sec = 30.0;
    c.duration_ticks = 300;
    c.world.kind = WorldSpec::Kind::flat;

    AgentSpec a;
    a.name = "auv0";
    a.initial_pose[2] = 5.0;
    a.initial_velocity[0] = 1.5;
    a.command = ControlCommand::setpoint(5.0, 0.0, 1.5);
    SensorSpec echo;
    echo.name = "echo";
    echo.kind = SensorKind::echo;
    echo.mount_pose[4] = -kPi / 2.0;
    SensorSpec depth;
    depth.name = "depth";
    depth.kind = SensorKind::depth;
    a.sensors = {echo, depth};
    c.agents.push_back(std::move(a));
    return c;
}

// ---------------------------------------------------------------------------
// Builders

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_relative() && !base.empty() ? base / path : path;
}

}  // namespace

World build_world(const WorldSpec& spec, const std::filesystem::path& base_dir) {
    World world;
    switch (spec.kind) {
        case WorldSpec::Kind::empty: break;
        case WorldSpec::Kind::flat:
            world = World(Heightfield::flat(spec.depth, spec.size_x, spec.size_y, spec.cell_size, spec.origin));
            break;
        case WorldSpec::Kind::generate: world = generate_world(spec.gen, spec.seed); break;
        case WorldSpec::Kind::dam: world = make_dam_world(); break;
        case WorldSpec::Kind::archive: world = read_world_archive(resolve(base_dir, spec.path)); break;
        case WorldSpec::Kind::bathymetry:
            world = World(load_bathymetry(resolve(base_dir, spec.path), spec.grid_cell_size, spec.grid_origin));
            break;
    }
    for (const auto& p : spec.props) {
        Mesh mesh = p.shape == PropSpec::Shape::box ? make_box(p.size) : load_stl(resolve(base_dir, p.mesh_path));
        world.spawn_prop(std::move(mesh), p.pose, p.label);
    }
    return world;
}

std::optional<CurrentField> build_current(const ScenarioConfig& config, const std::filesystem::path& base_dir) {
    if (!config.current) return std::nullopt;
    const CurrentSpec& c = *config.current;
    switch (c.kind) {
        case CurrentSpec::Kind::constant: return CurrentField::make_constant(c.velocity);
        case CurrentSpec::Kind::shear: return CurrentField::make_shear(c.surface_velocity, c.decay_depth);
        case CurrentSpec::Kind::grid: return read_current_grid(resolve(base_dir, c.path));
    }
    return std::nullopt;
}

const char* to_string(AgentModel model) { return name_of(kModels, model); }
const char* to_string(WorldSpec::Kind kind) { return name_of(kWorldKinds, kind); }

}  // namespace mariner
