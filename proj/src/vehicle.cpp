#include "mariner/vehicle.hpp"

#include <fmt/format.h>

#include <Eigen/Eigenvalues>

#include <cmath>

namespace mariner {

namespace {

void require(bool ok, const char* field, const char* what) {
    if (!ok) throw InvalidArgument(fmt::format("vehicle params: {} {}", field, what));
}

bool finite(const auto& m) { return m.allFinite(); }

}  // namespace

void VehicleParams::validate() const {
    require(environmental.water_density > 0.0, "environmental.water_density", "must be positive");
    require(environmental.gravity > 0.0, "environmental.gravity", "must be positive");
    require(!environmental.current || finite(*environmental.current), "environmental.current", "must be finite");

    require(physical.mass > 0.0, "physical.mass", "must be positive");
    require(physical.length > 0.0, "physical.length", "must be positive");
    require(physical.diameter > 0.0, "physical.diameter", "must be positive");
    require(finite(physical.inertia), "physical.inertia", "must be finite");
    require((physical.inertia - physical.inertia.transpose()).cwiseAbs().maxCoeff() <=
                1e-12 * (1.0 + physical.inertia.cwiseAbs().maxCoeff()),
            "physical.inertia", "must be symmetric");
    Eigen::SelfAdjointEigenSolver<Mat3> eig(physical.inertia);
    require(eig.eigenvalues().minCoeff() > 0.0, "physical.inertia", "must be positive definite");
    require(finite(physical.added_mass), "physical.added_mass", "must be finite");

    require(finite(hydrodynamic.linear_damping) && hydrodynamic.linear_damping.minCoeff() >= 0.0,
            "hydrodynamic.linear_damping", "must be finite and non-negative");
    require(finite(hydrodynamic.quadratic_drag) && hydrodynamic.quadratic_drag.minCoeff() >= 0.0,
            "hydrodynamic.quadratic_drag", "must be finite and non-negative");
    require(std::isfinite(hydrodynamic.linear_decay) && hydrodynamic.linear_decay >= 0.0,
            "hydrodynamic.linear_decay", "must be non-negative");

    require(finite(hydrostatic.r_cb) && finite(hydrostatic.r_cg), "hydrostatic.r_cb/r_cg", "must be finite");
    require(hydrostatic.displaced_volume > 0.0, "hydrostatic.displaced_volume", "must be positive");

    for (const auto& fin : control_surfaces.fins) {
        require(fin.time_constant > 0.0, "control_surfaces.fins.time_constant", "must be positive");
        require(fin.area >= 0.0, "control_surfaces.fins.area", "must be non-negative");
        require(fin.max_deflection >= 0.0, "control_surfaces.fins.max_deflection", "must be non-negative");
        require(std::abs(fin.axis.norm() - 1.0) < 1e-9, "control_surfaces.fins.axis", "must be a unit vector");
        require(finite(fin.position) && std::isfinite(fin.lift_coefficient), "control_surfaces.fins",
                "must be finite");
    }
    require(control_surfaces.prop_time_constant > 0.0, "control_surfaces.prop_time_constant",
            "must be positive");
    require(control_surfaces.prop_diameter >= 0.0 && control_surfaces.thrust_coefficient >= 0.0,
            "control_surfaces.propeller", "must be non-negative");
    require(control_surfaces.max_prop_speed >= 0.0, "control_surfaces.max_prop_speed", "must be non-negative");

    const auto& ap = autopilot;
    require(ap.max_pitch > 0.0 && ap.max_pitch < kPi / 2, "autopilot.max_pitch", "must be in (0, pi/2)");
    require(ap.depth_integral_limit >= 0.0 && ap.pitch_integral_limit >= 0.0, "autopilot integral limits",
            "must be non-negative");
    require(ap.heading.lambda > 0.0, "autopilot.heading.lambda", "must be positive");
    require(ap.heading.k_s > 0.0, "autopilot.heading.k_s", "must be positive");
    require(ap.heading.phi_boundary > 0.0, "autopilot.heading.phi_boundary", "must be positive");
    require(ap.heading.nomoto_gain > 0.0 && ap.heading.nomoto_time > 0.0, "autopilot.heading.nomoto",
            "must be positive");
}

bool operator==(const VehicleParams& a, const VehicleParams& b) {
    auto fin_eq = [](const FinParams& x, const FinParams& y) {
        return x.name == y.name && x.position == y.position && x.axis == y.axis && x.area == y.area &&
               x.lift_coefficient == y.lift_coefficient && x.time_constant == y.time_constant &&
               x.max_deflection == y.max_deflection;
    };
    const auto& fa = a.control_surfaces.fins;
    const auto& fb = b.control_surfaces.fins;
    if (fa.size() != fb.size()) return false;
    for (std::size_t i = 0; i < fa.size(); ++i) {
        if (!fin_eq(fa[i], fb[i])) return false;
    }
    auto gains_eq = [](const PidGains& x, const PidGains& y) {
        return x.kp == y.kp && x.ki == y.ki && x.kd == y.kd;
    };
    const auto& ha = a.autopilot.heading;
    const auto& hb = b.autopilot.heading;
    return a.environmental.water_density == b.environmental.water_density &&
           a.environmental.gravity == b.environmental.gravity &&
           a.environmental.current == b.environmental.current && a.physical.mass == b.physical.mass &&
           a.physical.length == b.physical.length && a.physical.diameter == b.physical.diameter &&
           a.physical.inertia == b.physical.inertia && a.physical.added_mass == b.physical.added_mass &&
           a.hydrodynamic.linear_damping == b.hydrodynamic.linear_damping &&
           a.hydrodynamic.quadratic_drag == b.hydrodynamic.quadratic_drag &&
           a.hydrodynamic.linear_decay == b.hydrodynamic.linear_decay &&
           a.hydrostatic.r_cb == b.hydrostatic.r_cb && a.hydrostatic.r_cg == b.hydrostatic.r_cg &&
           a.hydrostatic.displaced_volume == b.hydrostatic.displaced_volume &&
           a.control_surfaces.thrust_coefficient == b.control_surfaces.thrust_coefficient &&
           a.control_surfaces.prop_diameter == b.control_surfaces.prop_diameter &&
           a.control_surfaces.prop_time_constant == b.control_surfaces.prop_time_constant &&
           a.control_surfaces.max_prop_speed == b.control_surfaces.max_prop_speed &&
           gains_eq(a.autopilot.depth, b.autopilot.depth) && gains_eq(a.autopilot.pitch, b.autopilot.pitch) &&
           a.autopilot.max_pitch == b.autopilot.max_pitch &&
           a.autopilot.depth_integral_limit == b.autopilot.depth_integral_limit &&
           a.autopilot.pitch_integral_limit == b.autopilot.pitch_integral_limit && ha.lambda == hb.lambda &&
           ha.k_s == hb.k_s && ha.phi_boundary == hb.phi_boundary && ha.nomoto_gain == hb.nomoto_gain &&
           ha.nomoto_time == hb.nomoto_time;
}

VehicleParams default_remus100_params() {
    VehicleParams p;
    const double rho = p.environmental.water_density;
    const double g = p.environmental.gravity;

    // Hull: prolate spheroid with semi-axes a = L/2, b = D/2.
    const double length = 1.6;
    const double diameter = 0.19;
    const double a = 0.5 * length;
    const double b = 0.5 * diameter;
    const double m = 4.0 / 3.0 * kPi * rho * a * b * b;
    const double ix = 0.4 * m * b * b;
    const double iy = 0.2 * m * (a * a + b * b);
    p.physical.mass = m;
    p.physical.length = length;
    p.physical.diameter = diameter;
    p.physical.inertia = Vec3(ix, iy, iy).asDiagonal();

    // Lamb's k-factors for a prolate spheroid.
    const double e = std::sqrt(1.0 - (b / a) * (b / a));
    const double log_term = std::log((1.0 + e) / (1.0 - e));
    const double alpha0 = 2.0 * (1.0 - e * e) / (e * e * e) * (0.5 * log_term - e);
    const double beta0 = 1.0 / (e * e) - (1.0 - e * e) / (2.0 * e * e * e) * log_term;
    const double k1 = alpha0 / (2.0 - alpha0);
    const double k2 = beta0 / (2.0 - beta0);
    const double e4 = e * e * e * e;
    const double k_prime =
        e4 * (beta0 - alpha0) / ((2.0 - e * e) * (2.0 * e * e - (2.0 - e * e) * (beta0 - alpha0)));
    p.physical.added_mass << m * k1, m * k2, m * k2, 0.3 * ix, k_prime * iy, k_prime * iy;

    p.hydrostatic.r_cg = Vec3(0.0, 0.0, 0.02);
    p.hydrostatic.r_cb = Vec3::Zero();
    p.hydrostatic.displaced_volume = m / rho;  // neutrally buoyant

    // Linear damping from time constants and relative damping ratios.
    const Vec6 m_diag = Vec6(m, m, m, ix, iy, iy) + p.physical.added_mass;
    const double w = m * g;
    const double bg = p.hydrostatic.r_cg.z() - p.hydrostatic.r_cb.z();
    const double w_roll = std::sqrt(w * bg / m_diag[3]);
    const double w_pitch = std::sqrt(w * bg / m_diag[4]);
    const double t_surge = 20.0, t_sway = 20.0, t_heave = 20.0, t_yaw = 1.0;
    const double zeta_roll = 0.3, zeta_pitch = 0.8;
    p.hydrodynamic.linear_damping << m_diag[0] / t_surge, m_diag[1] / t_sway, m_diag[2] / t_heave,
        m_diag[3] * 2.0 * zeta_roll * w_roll, m_diag[4] * 2.0 * zeta_pitch * w_pitch, m_diag[5] / t_yaw;
    p.hydrodynamic.linear_decay = 3.0;

    // Quadratic drag: parasitic surge drag on 70% of the L x D rectangle,
    // cross-flow strip drag for sway/heave and the matching rotational terms.
    const double cd0 = 0.42;
    const double s_ref = 0.7 * length * diameter;
    const double cd_2d = 1.0;
    const double cross = 0.5 * rho * cd_2d * diameter * length;
    const double rot = 0.5 * rho * cd_2d * diameter * std::pow(length, 4) / 32.0;
    p.hydrodynamic.quadratic_drag << 0.5 * rho * s_ref * cd0, cross, cross, 0.0, rot, rot;

    // Cruciform tail at x = -a: vertical rudders (lift along -y for positive
    // deflection, turning to starboard) and horizontal stern planes (lift
    // along -z, pitching the nose down).
    const double fin_area = 0.00665;
    const double max_fin = 30.0 * kPi / 180.0;
    p.control_surfaces.fins = {
        {"rudder_top", Vec3(-a, 0.0, -b), -Vec3::UnitY(), fin_area, 0.5, 1.0, max_fin},
        {"rudder_bottom", Vec3(-a, 0.0, b), -Vec3::UnitY(), fin_area, 0.5, 1.0, max_fin},
        {"stern_port", Vec3(-a, -b, 0.0), -Vec3::UnitZ(), fin_area, 0.7, 1.0, max_fin},
        {"stern_starboard", Vec3(-a, b, 0.0), -Vec3::UnitZ(), fin_area, 0.7, 1.0, max_fin},
    };
    p.control_surfaces.thrust_coefficient = 0.4566;
    p.control_surfaces.prop_diameter = 0.14;
    p.control_surfaces.prop_time_constant = 1.0;
    p.control_surfaces.max_prop_speed = 1525.0 / 60.0;

    p.autopilot.depth = {0.1, 0.001, 0.1};
    p.autopilot.pitch = {4.0, 0.3, 2.0};
    p.autopilot.max_pitch = 20.0 * kPi / 180.0;
    p.autopilot.depth_integral_limit = 20.0;
    p.autopilot.pitch_integral_limit = 0.5;
    p.autopilot.heading = {0.1, 0.5, 0.1, 0.25, 1.0};
    return p;
}

RigidBodyState initial_state(const VehicleParams& params, const Vec6& pose, const Vec6& velocity) {
    RigidBodyState s;
    s.eta = pose;
    s.nu = velocity;
    s.fin_angles.assign(params.control_surfaces.fins.size(), 0.0);
    return s;
}

}  // namespace mariner
