#pragma once

// Ranging sensors (echo sounder, multibeam profiler, sidescan, LiDAR) over
// either accel backend, and a navigation suite (IMU, DVL, depth).
//
// Sensor frames. Echo, multibeam and LiDAR look along the sensor +x axis;
// multibeam fans toward +y, LiDAR elevation is positive toward -z. Sidescan
// uses the vehicle convention: x along track, y starboard, z down, so with an
// identity mount it looks sideways and down by `tilt`.

#include "mariner/accel.hpp"
#include "mariner/rng.hpp"
#include "mariner/vehicle.hpp"

#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

namespace mariner {

enum class SensorKind { echo, multibeam, sidescan, lidar, imu, dvl, depth };
enum class Backend { octree, raycast };

const char* to_string(SensorKind kind);
const char* to_string(Backend backend);
SensorKind sensor_kind_from_string(const std::string& s);
Backend backend_from_string(const std::string& s);

struct SensorNoise {
    double range_std = 0.0;  // m, additive on sonar/LiDAR ranges
    bool speckle = false;    // Rayleigh multiplicative speckle on sonar intensity
    double accel_std = 0.0;  // m/s^2
    double gyro_std = 0.0;   // rad/s
    double velocity_std = 0.0;  // m/s
    double depth_std = 0.0;     // m

    friend bool operator==(const SensorNoise&, const SensorNoise&) = default;
};

struct SensorSpec {
    std::string name;
    SensorKind kind = SensorKind::echo;
    Vec6 mount_pose = Vec6::Zero();  // relative to the body frame
    int rate_ticks = 1;
    Backend backend = Backend::raycast;
    bool semantic = false;
    SensorNoise noise;
    double max_range = 50.0;  // m
    double leaf_size = kDefaultLeafSize;  // octree backend

    // multibeam
    int n_beams = 1;
    double swath_aperture = 0.0;  // rad

    // sidescan
    int n_bins = 256;
    double tilt = 0.35;                // rad, depression of the beam centre
    double vertical_aperture = 1.0;    // rad
    int rays_per_bin = 8;

    // lidar
    int n_lasers = 16;
    double fov_vertical = 0.5236;      // rad
    double fov_horizontal = 2.0 * kPi; // rad
    int points_per_rotation = 360;

    /// Throws InvalidArgument naming the offending field.
    void validate() const;

    friend bool operator==(const SensorSpec& a, const SensorSpec& b);
};

/// Geometry the ranging sensors read. `octree` is required for the octree
/// backend; it must be built from world.revision() or casts throw
/// StaleOctreeError.
struct SensorContext {
    const World* world = nullptr;
    const Octree* octree = nullptr;
    QueryStats* stats = nullptr;  // optional
};

/// One cast through the chosen backend.
std::optional<Hit> cast_ray(const SensorContext& ctx, Backend backend, const Ray& ray);

inline constexpr double kMissRange = std::numeric_limits<double>::infinity();

struct BeamReturn {
    double range = kMissRange;
    double intensity = 0.0;
    std::optional<SemanticLabel> label;

    bool hit() const { return range != kMissRange; }
    friend bool operator==(const BeamReturn&, const BeamReturn&) = default;
};

struct MultibeamReturn {
    std::vector<double> angles;  // rad, across-track
    std::vector<BeamReturn> beams;
};

struct SidescanLine {
    std::vector<double> port;       // n_bins, [0, 1], near range first
    std::vector<double> starboard;
    std::vector<std::optional<SemanticLabel>> port_labels;  // only with semantic
    std::vector<std::optional<SemanticLabel>> starboard_labels;
};

struct CloudPoint {
    Vec3 position = Vec3::Zero();  // sensor frame
    double intensity = 0.0;
    std::optional<SemanticLabel> label;
};

struct PointCloud {
    std::vector<CloudPoint> points;
};

struct NavReading {
    Vec3 specific_force = Vec3::Zero();  // body, m/s^2
    Vec3 angular_rate = Vec3::Zero();    // body, rad/s
    Vec3 velocity = Vec3::Zero();        // body, over ground, m/s
    double depth = 0.0;                  // m
};

/// Lambertian return with inverse-square falloff referenced to 1 m:
/// clamp(cos(incidence) / max(range, 1)^2, 0, 1).
double echo_intensity(double range, const Vec3& direction, const Vec3& normal);

/// World pose of a sensor mounted on a body at `eta`: origin and rotation.
struct SensorPose {
    Vec3 origin = Vec3::Zero();
    Mat3 rotation = Mat3::Identity();
};
SensorPose sensor_pose(const Vec6& body_eta, const Vec6& mount_pose);

BeamReturn echo_sounder(const SensorContext& ctx, const SensorPose& pose, const SensorSpec& spec);
MultibeamReturn multibeam_scan(const SensorContext& ctx, const SensorPose& pose, const SensorSpec& spec);
SidescanLine sidescan_line(const SensorContext& ctx, const SensorPose& pose, const SensorSpec& spec);
PointCloud lidar_scan(const SensorContext& ctx, const SensorPose& pose, const SensorSpec& spec);

/// Truth from the state plus Gaussian noise. `nu_dot` is the body
/// acceleration (finite-differenced by the caller); zero for a static body.
NavReading nav_suite(const RigidBodyState& state, const SensorNoise& noise, Rng& rng, double gravity = 9.81,
                     const Vec6& nu_dot = Vec6::Zero());

/// Applies range noise and speckle to a beam in place.
void apply_sonar_noise(BeamReturn& beam, const SensorNoise& noise, Rng& rng);

using SensorReading = std::variant<BeamReturn, MultibeamReturn, SidescanLine, PointCloud, NavReading>;

/// Evaluates any sensor kind at the agent state, noise included.
SensorReading evaluate_sensor(const SensorSpec& spec, const SensorContext& ctx, const RigidBodyState& state,
                              Rng& rng, double gravity = 9.81, const Vec6& nu_dot = Vec6::Zero());

/// 8-bit binary PGM of a stack of rows with values in [0, 1]. Rows may differ
/// in length; short rows are padded with black.
void write_pgm(const std::filesystem::path& path, const std::vector<std::vector<double>>& rows);

/// One "x y z intensity [class instance]" line per point.
void write_xyz(std::ostream& out, const PointCloud& cloud);

}  // namespace mariner
