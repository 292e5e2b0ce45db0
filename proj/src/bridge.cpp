#include "mariner/bridge.hpp"

#include "mariner/scenario.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <fmt/format.h>
#include <fnmatch.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <deque>

namespace mariner {

using nlohmann::json;

const char* to_string(FrameType type) {
    switch (type) {
        case FrameType::subscribe: return "SUBSCRIBE";
        case FrameType::publish: return "PUBLISH";
        case FrameType::command: return "COMMAND";
        case FrameType::error: return "ERROR";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Schemas

namespace {

FieldSpec num(const char* name, const char* doc, bool nullable = false) {
    return {name, FieldType::number, nullable, doc};
}
FieldSpec arr(const char* name, const char* doc) { return {name, FieldType::array, false, doc}; }

std::vector<SchemaSpec> make_registry() {
    return {
        {schemas::kState,
         "Pose and twist of one agent (NED, SNAME order).",
         {{"agent", FieldType::string, false, "agent name"},
          arr("position", "[x, y, z] m, NED"),
          arr("orientation", "[phi, theta, psi] rad"),
          arr("linear_velocity", "[u, v, w] body m/s"),
          arr("angular_velocity", "[p, q, r] body rad/s"),
          arr("fin_angles", "actuator deflections, rad"),
          num("prop_speed", "rev/s"),
          arr("current", "current at the agent, NED m/s")}},
        {schemas::kSonarEcho,
         "Single-beam echo sounder return.",
         {num("range", "m, null for no return", true), num("intensity", "[0, 1]"),
          {"label", FieldType::object, true, "{class_id, instance_id} or null"}}},
        {schemas::kMultibeamScan,
         "Across-track fan of beams.",
         {arr("angles", "beam angles, rad"), arr("ranges", "m per beam, null for no return"),
          arr("intensities", "[0, 1] per beam"), arr("labels", "label object or null per beam; empty when not semantic")}},
        {schemas::kSidescanLine,
         "One sidescan line, bins ordered near range first.",
         {arr("port", "[0, 1] per bin"), arr("starboard", "[0, 1] per bin"),
          arr("port_labels", "label or null per bin; empty when not semantic"),
          arr("starboard_labels", "label or null per bin; empty when not semantic")}},
        {schemas::kPointCloud,
         "LiDAR points in the sensor frame.",
         {arr("points", "[[x, y, z, intensity], ...]"), arr("labels", "label or null per point; empty when not semantic")}},
        {schemas::kImu,
         "Specific force and angular rate in the body frame.",
         {arr("specific_force", "m/s^2"), arr("angular_rate", "rad/s")}},
        {schemas::kDvl, "Body velocity over ground.", {arr("velocity", "[u, v, w] m/s")}},
        {schemas::kDepth, "Depth below the surface.", {num("depth", "m, positive down")}},
        {schemas::kCommand,
         "Vehicle command. command.mode is \"direct\" (fins rad, prop_speed rev/s) or \"setpoint\" "
         "(depth m, heading rad, speed m/s).",
         {{"agent", FieldType::string, false, "target agent"}, {"command", FieldType::object, false, "command body"}}},
    };
}

const char* type_name(FieldType t) {
    switch (t) {
        case FieldType::number: return "number";
        case FieldType::integer: return "integer";
        case FieldType::string: return "string";
        case FieldType::boolean: return "boolean";
        case FieldType::array: return "array";
        case FieldType::object: return "object";
    }
    return "?";
}

bool has_type(const json& v, FieldType t) {
    switch (t) {
        case FieldType::number: return v.is_number();
        case FieldType::integer: return v.is_number_integer();
        case FieldType::string: return v.is_string();
        case FieldType::boolean: return v.is_boolean();
        case FieldType::array: return v.is_array();
        case FieldType::object: return v.is_object();
    }
    return false;
}

void check_finite(const json& j) {
    if (j.is_number_float() && !std::isfinite(j.get<double>())) throw FormatError("payload holds a non-finite number");
    if (j.is_structured())
        for (const auto& v : j) check_finite(v);
}

}  // namespace

const std::vector<SchemaSpec>& schema_registry() {
    static const std::vector<SchemaSpec> registry = make_registry();
    return registry;
}

const SchemaSpec* find_schema(std::string_view name) {
    for (const auto& s : schema_registry())
        if (s.name == name) return &s;
    return nullptr;
}

void check_payload(const SchemaSpec& schema, const json& payload) {
    if (!payload.is_object()) throw FormatError(fmt::format("{}: payload must be an object", schema.name));
    for (const auto& f : schema.fields) {
        const auto it = payload.find(f.name);
        if (it == payload.end()) throw FormatError(fmt::format("{}: missing field '{}'", schema.name, f.name));
        if (it->is_null() ? !f.nullable : !has_type(*it, f.type))
            throw FormatError(fmt::format("{}: field '{}' must be {}{}", schema.name, f.name, type_name(f.type),
                                          f.nullable ? " or null" : ""));
    }
    if (payload.size() != schema.fields.size()) {
        for (const auto& item : payload.items()) {
            bool known = false;
            for (const auto& f : schema.fields) known = known || f.name == item.key();
            if (!known) throw FormatError(fmt::format("{}: unknown field '{}'", schema.name, item.key()));
        }
    }
}

json schema_registry_json() {
    json out = json::array();
    for (const auto& s : schema_registry()) {
        json fields = json::array();
        for (const auto& f : s.fields)
            fields.push_back({{"name", f.name}, {"type", type_name(f.type)}, {"nullable", f.nullable}, {"doc", f.doc}});
        out.push_back({{"name", s.name}, {"doc", s.doc}, {"fields", fields}});
    }
    return {{"frame", "u32 little-endian body length, then canonical JSON (sorted keys, no whitespace)"},
            {"frame_types", {"SUBSCRIBE", "PUBLISH", "COMMAND", "ERROR"}},
            {"schemas", out}};
}

// ---------------------------------------------------------------------------
// Framing

namespace {

json envelope_body(const char* type, const Envelope& e) {
    const SchemaSpec* schema = find_schema(e.schema);
    if (!schema) throw FormatError(fmt::format("unknown schema '{}'", e.schema));
    if (e.topic.empty()) throw FormatError("envelope topic must not be empty");
    if (!std::isfinite(e.stamp)) throw FormatError("envelope stamp must be finite");
    check_payload(*schema, e.payload);
    check_finite(e.payload);
    return {{"type", type}, {"topic", e.topic}, {"schema", e.schema}, {"tick", e.tick}, {"stamp", e.stamp},
            {"payload", e.payload}};
}

std::string frame_of(const json& body) {
    std::string text;
    try {
        text = body.dump();
    } catch (const json::exception& e) {
        throw FormatError(fmt::format("cannot encode frame: {}", e.what()));
    }
    if (text.size() > kMaxFrameBytes) throw FormatError("frame too large");
    std::string out(4, '\0');
    const auto n = static_cast<std::uint32_t>(text.size());
    for (int b = 0; b < 4; ++b) out[static_cast<std::size_t>(b)] = static_cast<char>((n >> (8 * b)) & 0xff);
    return out + text;
}

std::uint32_t length_prefix(std::string_view bytes) {
    std::uint32_t n = 0;
    for (int b = 3; b >= 0; --b) n = (n << 8) | static_cast<unsigned char>(bytes[static_cast<std::size_t>(b)]);
    return n;
}

void expect_keys(const json& body, std::initializer_list<const char*> keys) {
    for (const auto& item : body.items()) {
        bool ok = false;
        for (const char* k : keys) ok = ok || item.key() == k;
        if (!ok) throw FormatError(fmt::format("unknown frame field '{}'", item.key()));
    }
    for (const char* k : keys)
        if (!body.contains(k)) throw FormatError(fmt::format("frame is missing '{}'", k));
}

}  // namespace

std::string encode_frame(const Frame& f) {
    switch (f.type) {
        case FrameType::publish: return frame_of(envelope_body("PUBLISH", f.envelope));
        case FrameType::command:
            if (f.envelope.schema != schemas::kCommand) throw FormatError("COMMAND frames carry mariner.Command.v1");
            return frame_of(envelope_body("COMMAND", f.envelope));
        case FrameType::subscribe: return frame_of({{"type", "SUBSCRIBE"}, {"topics", f.topics}});
        case FrameType::error: return frame_of({{"type", "ERROR"}, {"message", f.message}});
    }
    throw FormatError("bad frame type");
}

std::string encode(const Envelope& envelope) { return frame_of(envelope_body("PUBLISH", envelope)); }

Frame decode_frame_body(std::string_view text) {
    json body;
    try {
        body = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(fmt::format("malformed frame body: {}", e.what()));
    }
    if (!body.is_object() || !body.contains("type") || !body["type"].is_string())
        throw FormatError("frame body must be an object with a string 'type'");
    const std::string type = body["type"].get<std::string>();
    Frame f;
    if (type == "PUBLISH" || type == "COMMAND") {
        f.type = type == "PUBLISH" ? FrameType::publish : FrameType::command;
        expect_keys(body, {"type", "topic", "schema", "tick", "stamp", "payload"});
        if (!body["topic"].is_string() || body["topic"].get<std::string>().empty())
            throw FormatError("topic must be a non-empty string");
        if (!body["schema"].is_string()) throw FormatError("schema must be a string");
        if (!body["tick"].is_number_unsigned() && !(body["tick"].is_number_integer() && body["tick"].get<std::int64_t>() >= 0))
            throw FormatError("tick must be a non-negative integer");
        if (!body["stamp"].is_number()) throw FormatError("stamp must be a number");
        Envelope& e = f.envelope;
        e.topic = body["topic"].get<std::string>();
        e.schema = body["schema"].get<std::string>();
        e.tick = body["tick"].get<std::uint64_t>();
        e.stamp = body["stamp"].get<double>();
        e.payload = std::move(body["payload"]);
        const SchemaSpec* schema = find_schema(e.schema);
        if (!schema) throw FormatError(fmt::format("unknown schema '{}'", e.schema));
        if (f.type == FrameType::command && e.schema != schemas::kCommand)
            throw FormatError("COMMAND frames carry mariner.Command.v1");
        check_payload(*schema, e.payload);
    } else if (type == "SUBSCRIBE") {
        f.type = FrameType::subscribe;
        expect_keys(body, {"type", "topics"});
        if (!body["topics"].is_array()) throw FormatError("topics must be an array");
        for (const auto& t : body["topics"]) {
            if (!t.is_string() || t.get<std::string>().empty()) throw FormatError("topics must be non-empty strings");
            f.topics.push_back(t.get<std::string>());
        }
    } else if (type == "ERROR") {
        f.type = FrameType::error;
        expect_keys(body, {"type", "message"});
        if (!body["message"].is_string()) throw FormatError("message must be a string");
        f.message = body["message"].get<std::string>();
    } else {
        throw FormatError(fmt::format("unknown frame type '{}'", type));
    }
    return f;
}

Frame decode_frame(std::string_view bytes) {
    if (bytes.size() < 4) throw FormatError("truncated frame: missing length prefix");
    const std::uint32_t n = length_prefix(bytes);
    if (n > kMaxFrameBytes) throw FormatError("frame too large");
    if (bytes.size() - 4 < n)
        throw FormatError(fmt::format("truncated frame: length {} but {} body bytes", n, bytes.size() - 4));
    if (bytes.size() - 4 > n) throw FormatError("trailing bytes after frame");
    return decode_frame_body(bytes.substr(4));
}

Envelope decode(std::string_view bytes) {
    Frame f = decode_frame(bytes);
    if (f.type != FrameType::publish && f.type != FrameType::command)
        throw FormatError(fmt::format("{} frame carries no envelope", to_string(f.type)));
    return std::move(f.envelope);
}

std::optional<std::string> FrameReader::next() {
    if (buffer_.size() < 4) return std::nullopt;
    const std::uint32_t n = length_prefix(buffer_);
    if (n > kMaxFrameBytes) throw FormatError("frame too large");
    if (buffer_.size() - 4 < n) return std::nullopt;
    std::string body = buffer_.substr(4, n);
    buffer_.erase(0, 4 + static_cast<std::size_t>(n));
    return body;
}

// ---------------------------------------------------------------------------
// Payloads

namespace {

template <typename Derived>
json vec_json(const Eigen::MatrixBase<Derived>& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

json label_json(const std::optional<SemanticLabel>& l) {
    if (!l) return nullptr;
    return {{"class_id", l->class_id}, {"instance_id", l->instance_id}};
}

json range_json(double r) { return std::isfinite(r) ? json(r) : json(nullptr); }

template <typename T>
json labels_json(const std::vector<std::optional<T>>& labels) {
    json a = json::array();
    for (const auto& l : labels) a.push_back(label_json(l));
    return a;
}

}  // namespace

json state_payload(const std::string& agent, const RigidBodyState& s, const Vec3& current) {
    return {{"agent", agent},
            {"position", vec_json(s.eta.head<3>())},
            {"orientation", vec_json(s.eta.tail<3>())},
            {"linear_velocity", vec_json(s.nu.head<3>())},
            {"angular_velocity", vec_json(s.nu.tail<3>())},
            {"fin_angles", s.fin_angles},
            {"prop_speed", s.prop_speed},
            {"current", vec_json(current)}};
}

json echo_payload(const BeamReturn& b) {
    return {{"range", range_json(b.range)}, {"intensity", b.intensity}, {"label", label_json(b.label)}};
}

json multibeam_payload(const MultibeamReturn& scan) {
    json ranges = json::array(), intensities = json::array(), labels = json::array();
    bool any_label = false;
    for (const auto& b : scan.beams) any_label = any_label || b.label.has_value();
    for (const auto& b : scan.beams) {
        ranges.push_back(range_json(b.range));
        intensities.push_back(b.intensity);
        if (any_label) labels.push_back(label_json(b.label));
    }
    return {{"angles", scan.angles}, {"ranges", ranges}, {"intensities", intensities}, {"labels", labels}};
}

json sidescan_payload(const SidescanLine& line) {
    return {{"port", line.port},
            {"starboard", line.starboard},
            {"port_labels", labels_json(line.port_labels)},
            {"starboard_labels", labels_json(line.starboard_labels)}};
}

json pointcloud_payload(const PointCloud& cloud) {
    json points = json::array(), labels = json::array();
    bool any_label = false;
    for (const auto& p : cloud.points) any_label = any_label || p.label.has_value();
    for (const auto& p : cloud.points) {
        points.push_back({p.position.x(), p.position.y(), p.position.z(), p.intensity});
        if (any_label) labels.push_back(label_json(p.label));
    }
    return {{"points", points}, {"labels", labels}};
}

json imu_payload(const NavReading& n) {
    return {{"specific_force", vec_json(n.specific_force)}, {"angular_rate", vec_json(n.angular_rate)}};
}

json dvl_payload(const NavReading& n) { return {{"velocity", vec_json(n.velocity)}}; }

json depth_payload(const NavReading& n) { return {{"depth", n.depth}}; }

json command_payload(const std::string& agent, const ControlCommand& command) {
    return {{"agent", agent}, {"command", command_to_json(command)}};
}

Envelope sensor_envelope(const std::string& agent, const SensorSpec& spec, const SensorReading& reading,
                         std::uint64_t tick, double stamp) {
    Envelope e;
    e.topic = agent + "/" + spec.name;
    e.tick = tick;
    e.stamp = stamp;
    if (const auto* b = std::get_if<BeamReturn>(&reading)) {
        e.schema = schemas::kSonarEcho;
        e.payload = echo_payload(*b);
    } else if (const auto* m = std::get_if<MultibeamReturn>(&reading)) {
        e.schema = schemas::kMultibeamScan;
        e.payload = multibeam_payload(*m);
    } else if (const auto* s = std::get_if<SidescanLine>(&reading)) {
        e.schema = schemas::kSidescanLine;
        e.payload = sidescan_payload(*s);
    } else if (const auto* c = std::get_if<PointCloud>(&reading)) {
        e.schema = schemas::kPointCloud;
        e.payload = pointcloud_payload(*c);
    } else {
        const auto& n = std::get<NavReading>(reading);
        switch (spec.kind) {
            case SensorKind::imu:
                e.schema = schemas::kImu;
                e.payload = imu_payload(n);
                break;
            case SensorKind::dvl:
                e.schema = schemas::kDvl;
                e.payload = dvl_payload(n);
                break;
            case SensorKind::depth:
                e.schema = schemas::kDepth;
                e.payload = depth_payload(n);
                break;
            default: throw InvalidArgument(fmt::format("sensor '{}' returned a navigation reading", spec.name));
        }
    }
    return e;
}

CommandMsg command_from_envelope(const Envelope& e) {
    if (e.schema != schemas::kCommand) throw FormatError(fmt::format("expected {}, got {}", schemas::kCommand, e.schema));
    check_payload(*find_schema(schemas::kCommand), e.payload);
    return {e.payload["agent"].get<std::string>(), command_from_json(e.payload["command"], "payload.command")};
}

Envelope command_envelope(const CommandMsg& msg, std::uint64_t tick, double stamp) {
    return {msg.agent + "/command", schemas::kCommand, tick, stamp, command_payload(msg.agent, msg.command)};
}

std::vector<std::pair<std::string, std::string>> golden_frames() {
    std::vector<std::pair<std::string, std::string>> out;
    auto add = [&](const std::string& name, const Frame& f) { out.emplace_back(name, encode_frame(f)); };
    auto publish = [&](const std::string& name, const Envelope& e) { add(name, Frame{FrameType::publish, e, {}, {}}); };

    RigidBodyState s;
    s.eta << 1.5, -2.25, 10.0, 0.01, -0.02, 1.5707963267948966;
    s.nu << 1.5, 0.0, 0.01, 0.0, 0.001, -0.002;
    s.fin_angles = {0.1, -0.1, 0.05, -0.05};
    s.prop_speed = 20.0;
    publish("publish_state", {"auv0/state", schemas::kState, 42, 1.4, state_payload("auv0", s, Vec3(0.5, 0.0, 0.0))});

    BeamReturn hit{19.75, 0.0025, SemanticLabel{1, 0}};
    publish("publish_echo_hit", {"auv0/echo", schemas::kSonarEcho, 42, 1.4, echo_payload(hit)});
    publish("publish_echo_miss", {"auv0/echo", schemas::kSonarEcho, 43, 1.4333333333333333, echo_payload(BeamReturn{})});

    MultibeamReturn mb;
    mb.angles = {-0.5, 0.0, 0.5};
    mb.beams = {BeamReturn{22.8, 0.0017, SemanticLabel{1, 0}}, BeamReturn{20.0, 0.0025, SemanticLabel{2, 7}},
                BeamReturn{}};
    publish("publish_multibeam", {"auv0/multibeam", schemas::kMultibeamScan, 42, 1.4, multibeam_payload(mb)});

    SidescanLine ss;
    ss.port = {0.0, 0.25, 1.0, 0.5};
    ss.starboard = {0.0, 0.0, 0.75, 0.125};
    ss.port_labels = {std::nullopt, SemanticLabel{1, 0}, SemanticLabel{1, 0}, SemanticLabel{3, 2}};
    ss.starboard_labels = {std::nullopt, std::nullopt, SemanticLabel{1, 0}, SemanticLabel{1, 0}};
    publish("publish_sidescan", {"auv0/sidescan", schemas::kSidescanLine, 42, 1.4, sidescan_payload(ss)});

    PointCloud pc;
    pc.points = {{Vec3(10.0, 0.0, 0.0), 0.01, SemanticLabel{6, 1}}, {Vec3(9.5, 0.5, -0.25), 0.011, SemanticLabel{1, 0}}};
    publish("publish_pointcloud", {"auv0/lidar", schemas::kPointCloud, 42, 1.4, pointcloud_payload(pc)});

    NavReading nav;
    nav.specific_force = Vec3(0.0, 0.0, -9.81);
    nav.angular_rate = Vec3(0.0, 0.001, -0.002);
    nav.velocity = Vec3(1.5, 0.0, 0.01);
    nav.depth = 10.0;
    publish("publish_imu", {"auv0/imu", schemas::kImu, 42, 1.4, imu_payload(nav)});
    publish("publish_dvl", {"auv0/dvl", schemas::kDvl, 42, 1.4, dvl_payload(nav)});
    publish("publish_depth", {"auv0/depth", schemas::kDepth, 42, 1.4, depth_payload(nav)});

    add("command_setpoint",
        Frame{FrameType::command, command_envelope({"auv0", ControlCommand::setpoint(10.0, 1.5707963267948966, 1.5)}), {}, {}});
    add("command_direct",
        Frame{FrameType::command, command_envelope({"auv0", ControlCommand::direct({0.1, 0.1, -0.2, -0.2}, 25.0)}), {}, {}});
    add("subscribe", Frame{FrameType::subscribe, {}, {"auv0/*", "*/depth"}, {}});
    add("error", Frame{FrameType::error, {}, {}, "malformed frame body"});
    return out;
}

bool topic_matches(const std::string& glob, const std::string& topic) {
    return fnmatch(glob.c_str(), topic.c_str(), 0) == 0;
}

// ---------------------------------------------------------------------------
// Server

namespace {

void set_nonblocking(int fd) {
    const int flags = fcntl(fd, F_GETFL, 0);
    fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

using Clock = std::chrono::steady_clock;

}  // namespace

struct BridgeServer::Client {
    int fd = -1;
    FrameReader reader;
    std::vector<std::string> globs;
    std::deque<std::shared_ptr<const std::string>> queue;
    std::size_t offset = 0;  // bytes of queue.front() already written
    bool closing = false;    // flush the ERROR frame, then close
    bool dead = false;
};

BridgeServer::BridgeServer(BridgeOptions options) : options_(std::move(options)) {
    if (options_.queue_depth == 0) throw InvalidArgument("bridge queue depth must be >= 1");
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(options_.port);
    if (getaddrinfo(options_.host.c_str(), port.c_str(), &hints, &res) != 0 || !res)
        throw Error(fmt::format("bridge: cannot resolve host '{}'", options_.host));
    listen_fd_ = socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (listen_fd_ < 0) {
        freeaddrinfo(res);
        throw Error(fmt::format("bridge: socket failed: {}", std::strerror(errno)));
    }
    const int one = 1;
    setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (bind(listen_fd_, res->ai_addr, res->ai_addrlen) != 0 || listen(listen_fd_, 16) != 0) {
        const std::string why = std::strerror(errno);
        freeaddrinfo(res);
        close(listen_fd_);
        throw Error(fmt::format("bridge: cannot listen on {}:{}: {}", options_.host, options_.port, why));
    }
    freeaddrinfo(res);
    sockaddr_in bound{};
    socklen_t len = sizeof bound;
    getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    set_nonblocking(listen_fd_);
    if (pipe(wake_fd_) != 0) {
        close(listen_fd_);
        throw Error("bridge: pipe failed");
    }
    set_nonblocking(wake_fd_[0]);
    set_nonblocking(wake_fd_[1]);
    running_ = true;
    worker_ = std::thread([this] { run(); });
}

BridgeServer::~BridgeServer() { stop(); }

void BridgeServer::stop() {
    if (!running_.exchange(false)) return;
    wake();
    if (worker_.joinable()) worker_.join();
    std::lock_guard lock(mutex_);
    for (auto& c : clients_)
        if (c->fd >= 0) close(c->fd);
    clients_.clear();
    close(listen_fd_);
    close(wake_fd_[0]);
    close(wake_fd_[1]);
}

void BridgeServer::wake() {
    const char b = 1;
    [[maybe_unused]] const auto n = write(wake_fd_[1], &b, 1);  // a full pipe already means "wake"
}

void BridgeServer::publish(const Envelope& envelope) {
    bool wanted = false;
    for (const auto& g : options_.publish_topics) wanted = wanted || topic_matches(g, envelope.topic);
    auto frame = std::make_shared<const std::string>(encode(envelope));
    {
        std::lock_guard lock(mutex_);
        auto [it, fresh] = last_tick_.try_emplace(envelope.topic, envelope.tick);
        if (!fresh) {
            if (envelope.tick < it->second)
                throw InvalidArgument(fmt::format("tick went backwards on topic '{}'", envelope.topic));
            it->second = envelope.tick;
        }
        if (!wanted) {
            ++stats_.filtered;
            return;
        }
        ++stats_.published;
        for (auto& c : clients_) {
            if (c->dead || c->closing) continue;
            bool match = false;
            for (const auto& g : c->globs) match = match || topic_matches(g, envelope.topic);
            if (!match) continue;
            // Drop the oldest frame that has not started going out.
            if (c->queue.size() >= options_.queue_depth) {
                const std::size_t victim = c->offset > 0 ? 1 : 0;
                if (victim < c->queue.size()) {
                    c->queue.erase(c->queue.begin() + static_cast<std::ptrdiff_t>(victim));
                    ++stats_.dropped;
                }
            }
            c->queue.push_back(frame);
        }
    }
    wake();
}

std::vector<CommandMsg> BridgeServer::poll_commands() {
    std::map<std::string, CommandMsg> taken;
    {
        std::lock_guard lock(mutex_);
        taken.swap(pending_);
    }
    std::vector<CommandMsg> out;
    out.reserve(taken.size());
    for (auto& [_, msg] : taken) out.push_back(std::move(msg));
    return out;
}

BridgeStats BridgeServer::stats() const {
    std::lock_guard lock(mutex_);
    BridgeStats s = stats_;
    s.clients = clients_.size();
    return s;
}

bool BridgeServer::wait_for_subscribers(std::size_t n, double timeout_s) const {
    const auto deadline = Clock::now() + std::chrono::duration<double>(timeout_s);
    while (true) {
        {
            std::lock_guard lock(mutex_);
            std::size_t ready = 0;
            for (const auto& c : clients_) ready += !c->globs.empty() && !c->dead;
            if (ready >= n) return true;
        }
        if (Clock::now() > deadline) return false;
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
}

void BridgeServer::accept_clients() {
    while (true) {
        const int fd = accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) return;
        set_nonblocking(fd);
        const int one = 1;
        setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        auto c = std::make_shared<Client>();
        c->fd = fd;
        std::lock_guard lock(mutex_);
        clients_.push_back(std::move(c));
    }
}

void BridgeServer::reject(Client& c, const std::string& message) {
    // Caller holds the lock.
    ++stats_.protocol_errors;
    c.queue.clear();
    c.offset = 0;
    c.queue.push_back(std::make_shared<const std::string>(encode_frame(Frame{FrameType::error, {}, {}, message})));
    c.closing = true;
}

void BridgeServer::handle_frame(Client& c, const std::string& body) {
    Frame f;
    try {
        f = decode_frame_body(body);
    } catch (const FormatError& e) {
        std::lock_guard lock(mutex_);
        reject(c, e.what());
        return;
    }
    std::lock_guard lock(mutex_);
    switch (f.type) {
        case FrameType::subscribe:
            for (auto& g : f.topics) c.globs.push_back(std::move(g));
            break;
        case FrameType::command: {
            CommandMsg msg;
            try {
                msg = command_from_envelope(f.envelope);
            } catch (const FormatError& e) {
                reject(c, e.what());
                return;
            }
            if (options_.known_agents && !options_.known_agents->count(msg.agent)) {
                ++stats_.unknown_agent;
                return;
            }
            ++stats_.commands;
            pending_[msg.agent] = std::move(msg);
            break;
        }
        case FrameType::publish:
        case FrameType::error:
            reject(c, fmt::format("clients may not send {} frames", to_string(f.type)));
            break;
    }
}

bool BridgeServer::read_client(Client& c) {
    char buf[65536];
    while (true) {
        const ssize_t n = recv(c.fd, buf, sizeof buf, 0);
        if (n > 0) {
            c.reader.feed(std::string_view(buf, static_cast<std::size_t>(n)));
            continue;
        }
        if (n == 0) return false;
        if (errno == EAGAIN || errno == EWOULDBLOCK) break;
        if (errno == EINTR) continue;
        return false;
    }
    try {
        while (auto body = c.reader.next()) {
            handle_frame(c, *body);
            if (c.closing) break;
        }
    } catch (const FormatError& e) {
        std::lock_guard lock(mutex_);
        reject(c, e.what());
    }
    return true;
}

bool BridgeServer::flush_client(Client& c) {
    while (true) {
        std::shared_ptr<const std::string> frame;
        std::size_t offset;
        {
            std::lock_guard lock(mutex_);
            if (c.queue.empty()) return !c.closing;
            frame = c.queue.front();
            offset = c.offset;
        }
        const ssize_t n = send(c.fd, frame->data() + offset, frame->size() - offset, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EAGAIN || errno == EWOULDBLOCK) return true;
            if (errno == EINTR) continue;
            return false;
        }
        std::lock_guard lock(mutex_);
        // publish() never evicts a partly written front frame, so it is still ours.
        c.offset += static_cast<std::size_t>(n);
        if (c.offset == frame->size()) {
            c.queue.pop_front();
            c.offset = 0;
            ++stats_.delivered;
        }
    }
}

void BridgeServer::run() {
    std::vector<pollfd> fds;
    std::vector<std::shared_ptr<Client>> polled;
    while (running_) {
        fds.clear();
        polled.clear();
        fds.push_back({wake_fd_[0], POLLIN, 0});
        fds.push_back({listen_fd_, POLLIN, 0});
        {
            std::lock_guard lock(mutex_);
            for (auto& c : clients_) {
                short events = c->closing ? 0 : POLLIN;
                if (!c->queue.empty()) events |= POLLOUT;
                fds.push_back({c->fd, events, 0});
                polled.push_back(c);
            }
        }
        if (poll(fds.data(), fds.size(), 100) < 0 && errno != EINTR) break;
        if (fds[0].revents & POLLIN) {
            char drain[256];
            while (read(wake_fd_[0], drain, sizeof drain) > 0) {
            }
        }
        if (fds[1].revents & POLLIN) accept_clients();
        for (std::size_t i = 0; i < polled.size(); ++i) {
            Client& c = *polled[i];
            const short rev = fds[i + 2].revents;
            bool alive = true;
            if (rev & (POLLIN | POLLHUP | POLLERR)) alive = read_client(c);
            // Newly queued frames arrive via the wake pipe, so try every client.
            if (alive) alive = flush_client(c);
            if (!alive) {
                std::lock_guard lock(mutex_);
                c.dead = true;
            }
        }
        std::lock_guard lock(mutex_);
        for (auto it = clients_.begin(); it != clients_.end();) {
            if ((*it)->dead) {
                close((*it)->fd);
                it = clients_.erase(it);
            } else {
                ++it;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Client

BridgeClient::BridgeClient(const std::string& host, int port, int receive_buffer) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
        throw Error(fmt::format("cannot resolve '{}'", host));
    fd_ = socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd_ >= 0 && receive_buffer > 0) setsockopt(fd_, SOL_SOCKET, SO_RCVBUF, &receive_buffer, sizeof receive_buffer);
    const int rc = fd_ < 0 ? -1 : connect(fd_, res->ai_addr, res->ai_addrlen);
    freeaddrinfo(res);
    if (rc != 0) {
        const std::string why = std::strerror(errno);
        if (fd_ >= 0) close(fd_);
        throw Error(fmt::format("cannot connect to {}:{}: {}", host, port, why));
    }
    const int one = 1;
    setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

BridgeClient::~BridgeClient() {
    if (fd_ >= 0) close(fd_);
}

void BridgeClient::send_raw(std::string_view bytes) {
    while (!bytes.empty()) {
        const ssize_t n = send(fd_, bytes.data(), bytes.size(), MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw Error(fmt::format("send failed: {}", std::strerror(errno)));
        }
        bytes.remove_prefix(static_cast<std::size_t>(n));
    }
}

void BridgeClient::subscribe(const std::vector<std::string>& globs) {
    send_raw(encode_frame(Frame{FrameType::subscribe, {}, globs, {}}));
}

void BridgeClient::send_command(const std::string& agent, const ControlCommand& command) {
    send_raw(encode_frame(Frame{FrameType::command, command_envelope({agent, command}), {}, {}}));
}

std::optional<Frame> BridgeClient::receive(double timeout_s) {
    const auto deadline = Clock::now() + std::chrono::duration<double>(timeout_s);
    while (true) {
        if (auto body = reader_.next()) return decode_frame_body(*body);
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
        if (left < 0) return std::nullopt;
        pollfd p{fd_, POLLIN, 0};
        const int rc = poll(&p, 1, static_cast<int>(left));
        if (rc < 0 && errno != EINTR) throw Error("poll failed");
        if (rc <= 0) continue;
        char buf[65536];
        const ssize_t n = recv(fd_, buf, sizeof buf, 0);
        if (n == 0) throw Error("connection closed by server");
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) continue;
            throw Error(fmt::format("recv failed: {}", std::strerror(errno)));
        }
        reader_.feed(std::string_view(buf, static_cast<std::size_t>(n)));
    }
}

}  // namespace mariner
