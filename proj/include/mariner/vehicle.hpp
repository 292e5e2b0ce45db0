#pragma once

// Parameter ledger and state of a torpedo-shaped vehicle. Grouped by the
// categories a mission engineer tunes: environment, hull, hydrodynamics,
// hydrostatics, control surfaces and autopilot gains.

#include "mariner/core.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mariner {

struct EnvironmentalParams {
    double water_density = 1026.0;  // kg/m^3
    double gravity = 9.81;          // m/s^2
    std::optional<Vec3> current;    // per-agent constant current, NED m/s
};

struct PhysicalParams {
    double mass = 0.0;      // kg
    double length = 0.0;    // m
    double diameter = 0.0;  // m
    Mat3 inertia = Mat3::Zero();  // about the CG, kg m^2
    Vec6 added_mass = Vec6::Zero();  // diagonal of M_A, positive magnitudes
};

struct HydrodynamicParams {
    Vec6 linear_damping = Vec6::Zero();  // diagonal of D_lin
    Vec6 quadratic_drag = Vec6::Zero();  // D_quad = diag(quadratic_drag .* |nu_r|)
    // Surge and sway linear damping fade as exp(-decay * U_r) so quadratic
    // drag dominates at cruise speed.
    double linear_decay = 3.0;
};

struct HydrostaticParams {
    Vec3 r_cb = Vec3::Zero();  // centre of buoyancy w.r.t. body origin, m
    Vec3 r_cg = Vec3::Zero();  // centre of gravity w.r.t. body origin, m
    double displaced_volume = 0.0;  // m^3
};

/// One lifting surface. A positive deflection produces lift along `axis`.
struct FinParams {
    std::string name;
    Vec3 position = Vec3::Zero();  // body frame, m
    Vec3 axis = Vec3::UnitY();     // unit
    double area = 0.0;             // m^2
    double lift_coefficient = 0.0;  // per rad
    double time_constant = 1.0;    // s
    double max_deflection = 0.0;   // rad
};

struct ControlSurfaceParams {
    std::vector<FinParams> fins;
    double thrust_coefficient = 0.0;  // K_T at zero advance
    double prop_diameter = 0.0;       // m
    double prop_time_constant = 1.0;  // s
    double max_prop_speed = 0.0;      // rev/s
};

struct PidGains {
    double kp = 0.0;
    double ki = 0.0;
    double kd = 0.0;
};

struct SmcGains {
    double lambda = 0.0;
    double k_s = 0.0;
    double phi_boundary = 0.0;
    double nomoto_gain = 0.0;  // K in T r' + r = K delta
    double nomoto_time = 0.0;  // T, s
};

struct AutopilotParams {
    PidGains depth;        // outer loop: depth error -> pitch command
    PidGains pitch;        // inner loop: pitch error -> stern plane
    double max_pitch = 0.0;  // rad
    double depth_integral_limit = 0.0;  // m s
    double pitch_integral_limit = 0.0;  // rad s
    SmcGains heading;
};

struct VehicleParams {
    EnvironmentalParams environmental;
    PhysicalParams physical;
    HydrodynamicParams hydrodynamic;
    HydrostaticParams hydrostatic;
    ControlSurfaceParams control_surfaces;
    AutopilotParams autopilot;

    double weight() const { return physical.mass * environmental.gravity; }
    double buoyancy() const {
        return environmental.water_density * environmental.gravity * hydrostatic.displaced_volume;
    }

    /// Throws InvalidArgument naming the first offending field.
    void validate() const;

    friend bool operator==(const VehicleParams&, const VehicleParams&);
};

/// Names of the parameter groups, in declaration order.
inline const std::vector<std::string>& parameter_categories() {
    static const std::vector<std::string> names{"environmental",   "physical",         "hydrodynamic",
                                                "hydrostatic",     "control_surfaces", "autopilot"};
    return names;
}

/// Fin indices in default_remus100_params().
enum FinIndex : int { kRudderTop = 0, kRudderBottom = 1, kSternPort = 2, kSternStarboard = 3 };

/// REMUS 100 reference set after Fossen's torpedo model. Source values are
/// listed in docs/remus100_parameters.md.
VehicleParams default_remus100_params();

struct RigidBodyState {
    Vec6 eta = Vec6::Zero();  // x y z phi theta psi (NED m, rad)
    Vec6 nu = Vec6::Zero();   // u v w p q r (body m/s, rad/s)
    std::vector<double> fin_angles;  // actuator states, rad
    double prop_speed = 0.0;         // rev/s

    friend bool operator==(const RigidBodyState&, const RigidBodyState&) = default;
};

/// State at rest at `pose` with fins and prop sized for `params`.
RigidBodyState initial_state(const VehicleParams& params, const Vec6& pose = Vec6::Zero(),
                             const Vec6& velocity = Vec6::Zero());

}  // namespace mariner
