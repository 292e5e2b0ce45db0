#pragma once

// Six-degree-of-freedom torpedo model in SNAME notation:
//
//   eta'  = J(eta) nu
//   nu_r' = M^-1 (tau - C(nu_r) nu_r - D(nu_r) nu_r - g(eta))
//   nu'   = nu_r' + nu_c x omega        (irrotational current, constant in NED)
//   delta' = (delta_cmd - delta) / T_fin,   n' = (n_cmd - n) / T_n
//
// integrated with classical RK4. Also hosts the depth and heading
// autopilots, the speed map and the per-tick dynamics manager.

#include "mariner/envfx.hpp"
#include "mariner/vehicle.hpp"

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace mariner {

class World;

/// Integration produced NaN/inf; the message lists the force breakdown.
class NonFiniteStateError : public Error {
public:
    using Error::Error;
};

/// |theta| crossed the Euler-angle guard (85 deg).
class AttitudeGuardError : public Error {
public:
    using Error::Error;
};

inline constexpr double kPitchGuard = 85.0 * kPi / 180.0;

struct SystemMatrix {
    Mat6 m;
    Mat6 m_inv;
};

/// Rigid-body inertia about the body origin: H(r_cg)^T diag(m, m, m, I_g) H(r_cg).
Mat6 rigid_body_mass(const VehicleParams& params);

/// M = M_RB + M_A. Throws InvalidArgument when M is not symmetric positive
/// definite.
SystemMatrix system_matrix(const VehicleParams& params);

/// Coriolis-centripetal matrix built from the symmetric part of M; skew
/// symmetric for every velocity.
Mat6 coriolis_matrix(const Mat6& m, const Vec6& nu);

/// C_RB(nu) + C_A(nu) for the vehicle. The Munk moment entries of C_A in
/// pitch and yaw are zeroed in skew pairs, as the reference torpedo model
/// does, so C stays skew symmetric.
Mat6 vehicle_coriolis(const VehicleParams& params, const Vec6& nu_r);

/// D_lin(U_r) + D_quad(nu_r).
Mat6 damping_matrix(const VehicleParams& params, const Vec6& nu_r);

/// g(eta): weight at r_cg and buoyancy at r_cb, as the term on the left-hand
/// side of the equations of motion.
Vec6 restoring_vector(const VehicleParams& params, const Vec6& eta);

/// Body-to-NED velocity transform. Throws AttitudeGuardError past the guard.
Mat6 kinematics_matrix(const Vec6& eta);

/// Force terms with the sign they carry on the right-hand side, except
/// `coriolis` which is C(nu_r) nu_r as subtracted:
///   M nu_r' = actuation - coriolis + damping + restoring.
struct HydroForces {
    Vec6 coriolis = Vec6::Zero();
    Vec6 damping = Vec6::Zero();    // -D(nu_r) nu_r
    Vec6 restoring = Vec6::Zero();  // -g(eta)
    Vec6 actuation = Vec6::Zero();

    Vec6 net() const { return actuation - coriolis + damping + restoring; }
};

HydroForces hydro_forces(const VehicleParams& params, const Vec6& eta, const Vec6& nu_r);

/// Propeller thrust along body x plus lift and induced drag of every fin at
/// its deflection corrected by the local flow angle.
Vec6 actuator_forces(const VehicleParams& params, const Vec6& nu_r, const std::vector<double>& fin_angles,
                     double prop_speed);

/// Steady thrust along body x for a prop speed in rev/s.
double propeller_thrust(const VehicleParams& params, double prop_speed);

struct ControlCommand {
    enum class Mode { direct, setpoint };

    Mode mode = Mode::direct;
    // direct
    std::vector<double> fin_commands;  // rad, one per fin; empty means all zero
    double prop_speed = 0.0;           // rev/s
    // setpoint
    double depth = 0.0;    // m
    double heading = 0.0;  // rad
    double speed = 0.0;    // m/s

    static ControlCommand direct(std::vector<double> fins, double prop_speed);
    static ControlCommand setpoint(double depth, double heading, double speed);

    friend bool operator==(const ControlCommand&, const ControlCommand&) = default;
};

struct StepOptions {
    const WaveField* waves = nullptr;  // when set, buoyancy comes from hull slices under this surface
    double time = 0.0;                 // s, for the wave phase
    bool surface_buoyancy = false;     // slice buoyancy under a flat sea when waves is null
};

/// One RK4 step with a direct-mode command (setpoint commands must be
/// resolved through the autopilots first; InvalidArgument otherwise).
/// `current` is the water velocity in NED.
RigidBodyState step(const VehicleParams& params, const RigidBodyState& state, const ControlCommand& command,
                    const Vec3& current, double dt, const StepOptions& options = {});

/// Successive-loop depth controller: depth error -> pitch command (PID,
/// saturated at max_pitch) -> stern-plane deflection (PID on pitch error with
/// pitch-rate damping). Integrators are clamped for anti-windup. Positive
/// output pitches the nose down.
class DepthAutopilot {
public:
    double update(const VehicleParams& params, const RigidBodyState& state, double depth_setpoint, double dt);
    void reset() { *this = DepthAutopilot{}; }

    double depth_integral() const { return z_int_; }
    double pitch_integral() const { return theta_int_; }
    double pitch_command() const { return theta_cmd_; }

private:
    double z_int_ = 0.0;
    double theta_int_ = 0.0;
    double theta_cmd_ = 0.0;
};

/// Sliding-mode heading controller on s = r + lambda * wrap(psi - psi_d)
/// with a first-order Nomoto equivalent control and a saturated switching
/// term; output saturated at the rudder limit.
double heading_autopilot(const VehicleParams& params, const RigidBodyState& state, double heading_setpoint,
                         double dt);

/// Steady-state speed <-> prop speed relation from thrust = drag in straight
/// and level flight, tabulated once and interpolated.
class SpeedMap {
public:
    explicit SpeedMap(const VehicleParams& params, int samples = 256);

    double prop_speed_for(double speed) const;
    double max_speed() const { return speeds_.back(); }

private:
    std::vector<double> speeds_;
    std::vector<double> props_;
};

/// Straight-and-level drag at forward speed u (N), the quantity the speed map
/// balances against thrust.
double surge_drag(const VehicleParams& params, double u);

enum class AgentModel { fossen_torpedo, kinematic };

struct ContactEvent {
    std::string agent;
    std::uint64_t tick = 0;
    Vec3 position = Vec3::Zero();
    double seafloor_depth = 0.0;
};

/// Fields sampled by the manager each tick.
struct EnvironmentFields {
    const CurrentField* current = nullptr;
    const WaveField* waves = nullptr;
    const World* world = nullptr;  // for keel contact checks
    bool wave_orbital_current = false;
    bool surface_buoyancy = false;  // slice buoyancy under a flat sea when waves is null
};

class DynamicsManager {
public:
    struct Agent {
        std::string name;
        AgentModel model = AgentModel::fossen_torpedo;
        VehicleParams params;
        RigidBodyState state;
        ControlCommand command;  // held until replaced
        Vec3 last_current = Vec3::Zero();
        DepthAutopilot depth_autopilot;
        SpeedMap speed_map;
    };

    explicit DynamicsManager(double ticks_per_sec);

    /// Throws InvalidArgument on a duplicate name or invalid params.
    void add_agent(const std::string& name, AgentModel model, const VehicleParams& params,
                   const RigidBodyState& state, const ControlCommand& command = {});

    /// Applies `commands` (replacing each addressed agent's held command),
    /// samples the current at every agent, resolves setpoints and steps each
    /// agent once. Throws InvalidArgument for an unknown agent or a dt that
    /// does not match the tick rate.
    std::vector<RigidBodyState> tick(const std::map<std::string, ControlCommand>& commands,
                                     const EnvironmentFields& fields, double dt);

    const std::vector<Agent>& agents() const { return agents_; }
    const Agent& agent(const std::string& name) const;
    double time() const { return static_cast<double>(ticks_) / rate_; }
    std::uint64_t ticks() const { return ticks_; }
    double dt() const { return 1.0 / rate_; }
    const std::vector<ContactEvent>& contacts() const { return contacts_; }

private:
    double rate_;
    std::uint64_t ticks_ = 0;
    std::vector<Agent> agents_;
    std::vector<ContactEvent> contacts_;
};

/// Current at `position` by precedence: world field, per-agent constant, zero.
Vec3 resolve_current(const EnvironmentFields& fields, const VehicleParams& params, const Vec3& position, double t);

/// State log, one row per agent per tick.
void write_state_csv_header(std::ostream& out, std::size_t fin_count);
void write_state_csv_row(std::ostream& out, double t, const std::string& agent, const RigidBodyState& state,
                         const Vec3& current);

}  // namespace mariner
