#pragma once

// Pub/sub gateway between the tick loop and external clients.
//
// Wire format: every frame is a little-endian u32 body length followed by a
// UTF-8 JSON object with sorted keys and no whitespace. Frame bodies:
//   {"type":"SUBSCRIBE","topics":[glob, ...]}
//   {"type":"PUBLISH","topic":..,"schema":..,"tick":..,"stamp":..,"payload":{..}}
//   {"type":"COMMAND", same fields as PUBLISH, schema "mariner.Command.v1"}
//   {"type":"ERROR","message":..}
// JSON has no infinity, so sonar misses travel as null ranges.

#include "mariner/dynamics.hpp"
#include "mariner/sensors.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace mariner {

inline constexpr std::size_t kMaxFrameBytes = 64u << 20;

enum class FrameType { subscribe, publish, command, error };
const char* to_string(FrameType type);

struct Envelope {
    std::string topic;
    std::string schema;
    std::uint64_t tick = 0;
    double stamp = 0.0;  // s
    nlohmann::json payload = nlohmann::json::object();

    friend bool operator==(const Envelope&, const Envelope&) = default;
};

struct Frame {
    FrameType type = FrameType::publish;
    Envelope envelope;                // publish, command
    std::vector<std::string> topics;  // subscribe
    std::string message;              // error

    friend bool operator==(const Frame&, const Frame&) = default;
};

// ---------------------------------------------------------------------------
// Schemas

enum class FieldType { number, integer, string, boolean, array, object };

struct FieldSpec {
    std::string name;
    FieldType type;
    bool nullable = false;
    std::string doc;
};

struct SchemaSpec {
    std::string name;  // family.Name.vN
    std::string doc;
    std::vector<FieldSpec> fields;
};

namespace schemas {
inline constexpr const char* kState = "mariner.State.v1";
inline constexpr const char* kSonarEcho = "mariner.SonarEcho.v1";
inline constexpr const char* kMultibeamScan = "mariner.MultibeamScan.v1";
inline constexpr const char* kSidescanLine = "mariner.SidescanLine.v1";
inline constexpr const char* kPointCloud = "mariner.PointCloud.v1";
inline constexpr const char* kImu = "mariner.Imu.v1";
inline constexpr const char* kDvl = "mariner.Dvl.v1";
inline constexpr const char* kDepth = "mariner.Depth.v1";
inline constexpr const char* kCommand = "mariner.Command.v1";
}  // namespace schemas

const std::vector<SchemaSpec>& schema_registry();
const SchemaSpec* find_schema(std::string_view name);

/// Throws FormatError unless `payload` has exactly the schema's fields with
/// the declared types.
void check_payload(const SchemaSpec& schema, const nlohmann::json& payload);

/// Registry as JSON, for `mariner schema` and client code generators.
nlohmann::json schema_registry_json();

// ---------------------------------------------------------------------------
// Framing

/// Throws FormatError for an unregistered schema, a payload that does not
/// match it, or non-finite numbers (which JSON cannot carry).
std::string encode_frame(const Frame& frame);
std::string encode(const Envelope& envelope);  // PUBLISH frame

/// `bytes` must hold exactly one frame. Throws FormatError when it is
/// truncated, has trailing bytes, or the body is malformed.
Frame decode_frame(std::string_view bytes);
Frame decode_frame_body(std::string_view body);
/// PUBLISH or COMMAND frame to its envelope.
Envelope decode(std::string_view bytes);

/// Splits a byte stream into frame bodies.
class FrameReader {
public:
    void feed(std::string_view data) { buffer_.append(data); }

    /// Next complete body, or nullopt. Throws FormatError on an oversize
    /// length prefix.
    std::optional<std::string> next();

    std::size_t buffered() const { return buffer_.size(); }

private:
    std::string buffer_;
};

// ---------------------------------------------------------------------------
// Payloads

nlohmann::json state_payload(const std::string& agent, const RigidBodyState& state, const Vec3& current);
nlohmann::json echo_payload(const BeamReturn& beam);
nlohmann::json multibeam_payload(const MultibeamReturn& scan);
nlohmann::json sidescan_payload(const SidescanLine& line);
nlohmann::json pointcloud_payload(const PointCloud& cloud);
nlohmann::json imu_payload(const NavReading& nav);
nlohmann::json dvl_payload(const NavReading& nav);
nlohmann::json depth_payload(const NavReading& nav);
nlohmann::json command_payload(const std::string& agent, const ControlCommand& command);

/// Envelope for a sensor reading; nav readings pick the schema by kind.
Envelope sensor_envelope(const std::string& agent, const SensorSpec& spec, const SensorReading& reading,
                         std::uint64_t tick, double stamp);

struct CommandMsg {
    std::string agent;
    ControlCommand command;

    friend bool operator==(const CommandMsg&, const CommandMsg&) = default;
};

CommandMsg command_from_envelope(const Envelope& envelope);
Envelope command_envelope(const CommandMsg& msg, std::uint64_t tick = 0, double stamp = 0.0);

/// One frame of every type and schema, for client decoder tests.
std::vector<std::pair<std::string, std::string>> golden_frames();

bool topic_matches(const std::string& glob, const std::string& topic);

// ---------------------------------------------------------------------------
// Server

struct BridgeOptions {
    std::string host = "127.0.0.1";
    int port = 28510;  // 0 picks an ephemeral port
    std::size_t queue_depth = 1024;           // per client, drop-oldest
    std::vector<std::string> publish_topics{"*"};
    std::optional<std::set<std::string>> known_agents;  // commands for others are dropped
};

struct BridgeStats {
    std::size_t clients = 0;
    std::uint64_t published = 0;       // envelopes accepted by publish()
    std::uint64_t filtered = 0;        // rejected by publish_topics
    std::uint64_t delivered = 0;       // frames fully written to sockets
    std::uint64_t dropped = 0;         // frames evicted from full client queues
    std::uint64_t commands = 0;        // COMMAND frames accepted
    std::uint64_t unknown_agent = 0;   // COMMAND frames for unregistered agents
    std::uint64_t protocol_errors = 0; // clients disconnected for bad frames
};

/// TCP server. publish() encodes and hands the frame to per-client queues
/// and returns; all socket I/O happens on one worker thread.
class BridgeServer {
public:
    /// Binds and starts the worker. Throws Error on bind failure.
    explicit BridgeServer(BridgeOptions options);
    ~BridgeServer();

    BridgeServer(const BridgeServer&) = delete;
    BridgeServer& operator=(const BridgeServer&) = delete;

    int port() const { return port_; }

    /// Throws InvalidArgument if the tick goes backwards on a topic, and
    /// FormatError if the envelope does not encode.
    void publish(const Envelope& envelope);

    /// Commands since the previous poll, one per agent (the last received),
    /// ordered by agent name.
    std::vector<CommandMsg> poll_commands();

    BridgeStats stats() const;

    /// Blocks until `n` clients are connected and subscribed to at least one
    /// glob, or the timeout passes. For tests and lock-step startup.
    bool wait_for_subscribers(std::size_t n, double timeout_s) const;

    void stop();

private:
    struct Client;

    void run();
    void accept_clients();
    bool read_client(Client& c);
    bool flush_client(Client& c);
    void handle_frame(Client& c, const std::string& body);
    void reject(Client& c, const std::string& message);
    void wake();

    BridgeOptions options_;
    int listen_fd_ = -1;
    int wake_fd_[2] = {-1, -1};
    int port_ = 0;
    std::atomic<bool> running_{false};
    std::thread worker_;

    mutable std::mutex mutex_;
    std::vector<std::shared_ptr<Client>> clients_;
    std::map<std::string, CommandMsg> pending_;
    std::map<std::string, std::uint64_t> last_tick_;
    BridgeStats stats_;
};

/// Blocking client used by tests and tools.
class BridgeClient {
public:
    /// Throws Error when the connection is refused. A positive
    /// `receive_buffer` shrinks the kernel receive buffer (to simulate a slow
    /// reader); it must be set before connecting.
    BridgeClient(const std::string& host, int port, int receive_buffer = 0);
    ~BridgeClient();

    BridgeClient(const BridgeClient&) = delete;
    BridgeClient& operator=(const BridgeClient&) = delete;

    void subscribe(const std::vector<std::string>& globs);
    void send_command(const std::string& agent, const ControlCommand& command);
    void send_raw(std::string_view bytes);

    /// Next frame, or nullopt on timeout. Throws Error if the server closed.
    std::optional<Frame> receive(double timeout_s);

private:
    int fd_ = -1;
    FrameReader reader_;
};

}  // namespace mariner
