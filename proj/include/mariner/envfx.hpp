#pragma once

// Environmental forcing: volumetric current fields, a Gerstner wave surface
// and slice-based buoyancy under that surface.

#include "mariner/core.hpp"
#include "mariner/vehicle.hpp"

#include <filesystem>
#include <vector>

namespace mariner {

/// Water velocity field in NED, m/s.
struct CurrentField {
    enum class Kind { constant, analytic_shear, grid };

    Kind kind = Kind::constant;

    Vec3 constant = Vec3::Zero();

    // analytic_shear: v(z) = surface_velocity * exp(-z / decay_depth), z >= 0
    Vec3 surface_velocity = Vec3::Zero();
    double decay_depth = 1.0;

    // grid: node (i, j, k) sits at origin + (i, j, k) * cell_size
    Vec3 origin = Vec3::Zero();
    double cell_size = 1.0;
    int nx = 0, ny = 0, nz = 0;
    std::vector<Vec3> values;  // index (i * ny + j) * nz + k

    static CurrentField make_constant(const Vec3& v);
    static CurrentField make_shear(const Vec3& surface_velocity, double decay_depth);
    static CurrentField make_grid(const Vec3& origin, double cell_size, int nx, int ny, int nz,
                                  std::vector<Vec3> values);

    const Vec3& node(int i, int j, int k) const { return values[(static_cast<std::size_t>(i) * ny + j) * nz + k]; }

    /// Throws InvalidArgument on bad sizes or non-finite data.
    void validate() const;

    friend bool operator==(const CurrentField&, const CurrentField&) = default;
};

/// Constant and shear kinds are evaluated directly; grids are sampled
/// trilinearly with positions clamped to the grid box.
Vec3 sample_current(const CurrentField& field, const Vec3& position, double t);

/// Grid file: one line of JSON header, then nx*ny*nz little-endian float32
/// triplets in (i, j, k) order with k fastest.
void write_current_grid(const CurrentField& field, const std::filesystem::path& path);
CurrentField read_current_grid(const std::filesystem::path& path);

struct WaveComponent {
    double amplitude = 0.0;   // m
    double wavelength = 1.0;  // m
    Vec2 direction = Vec2::UnitX();  // unit, horizontal propagation direction
    double phase = 0.0;       // rad
    double steepness = 0.0;   // Q in [0, 1]

    double wavenumber() const { return 2.0 * kPi / wavelength; }

    friend bool operator==(const WaveComponent&, const WaveComponent&) = default;
};

struct WaveField {
    std::vector<WaveComponent> components;
    double gravity = 9.81;

    /// Deep-water angular frequency of a component.
    double angular_frequency(const WaveComponent& c) const { return std::sqrt(gravity * c.wavenumber()); }

    void validate() const;

    friend bool operator==(const WaveField&, const WaveField&) = default;
};

struct WaveSample {
    double height = 0.0;  // surface elevation above z = 0, m (up positive)
    Vec3 normal = -Vec3::UnitZ();  // unit, NED, pointing out of the water
    Vec3 orbital_velocity = Vec3::Zero();  // NED m/s at the requested depth
    Vec2 displacement = Vec2::Zero();      // horizontal Lagrangian offset, m
};

/// Gerstner superposition for the surface point whose rest position is
/// (x, y). Each component has phase theta = k d.(x, y) - omega t + phase,
/// elevation A cos(theta) and horizontal offset -Q A d sin(theta).
/// Orbital velocity is evaluated `depth` metres below the mean surface.
WaveSample wave_sample(const WaveField& field, double x, double y, double t, double depth = 0.0);

/// Default slice count for a hull: max(10, ceil(length / diameter)).
int default_buoyancy_slices(const VehicleParams& params);

/// Buoyancy wrench in the body frame (moments about the body origin) from a
/// hull split into `slices` equal-volume cylindrical slices along body x
/// through r_cb. Each slice carries rho g V / slices times its submerged
/// circular-segment fraction under the local surface. waves == nullptr means
/// a flat sea at z = 0. slices <= 0 picks default_buoyancy_slices.
Vec6 buoyancy_force(const WaveField* waves, const VehicleParams& params, const RigidBodyState& state,
                    double t = 0.0, int slices = 0);

/// Submerged fraction of a circle of radius r whose centre lies `depth`
/// below a straight waterline.
double submerged_fraction(double depth, double radius);

}  // namespace mariner
