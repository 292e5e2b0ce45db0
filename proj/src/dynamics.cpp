#include "mariner/dynamics.hpp"

#include "mariner/world.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>

namespace mariner {

namespace {

Mat6 transport(const Vec3& r) {
    Mat6 h = Mat6::Identity();
    h.block<3, 3>(0, 3) = skew(r).transpose();
    return h;
}

Vec6 gvect(double w, double b, const Vec6& eta, const Vec3& r_bg, const Vec3& r_bb) {
    const double sth = std::sin(eta[4]), cth = std::cos(eta[4]);
    const double sphi = std::sin(eta[3]), cphi = std::cos(eta[3]);
    const Vec3 wg = w * r_bg - b * r_bb;
    Vec6 g;
    g << (w - b) * sth,
         -(w - b) * cth * sphi,
         -(w - b) * cth * cphi,
         -wg.y() * cth * cphi + wg.z() * cth * sphi,
         wg.z() * sth + wg.x() * cth * cphi,
         -wg.x() * cth * sphi - wg.y() * sth;
    return g;
}

double sat(double x) { return std::clamp(x, -1.0, 1.0); }

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// Deflection limit of the fins steering about one body axis.
double fin_limit(const VehicleParams& params, int axis) {
    double limit = 0.0;
    for (const auto& fin : params.control_surfaces.fins) {
        if (std::abs(fin.axis[axis]) > 0.5) limit = std::max(limit, fin.max_deflection);
    }
    return limit;
}

std::string breakdown(const VehicleParams& params, const RigidBodyState& s, const Vec3& current) {
    const Vec3 nu_c = rotation_of(s.eta).transpose() * current;
    Vec6 nu_r = s.nu;
    nu_r.head<3>() -= nu_c;
    const auto f = hydro_forces(params, s.eta, nu_r);
    const Vec6 tau = actuator_forces(params, nu_r, s.fin_angles, s.prop_speed);
    auto v = [](const Vec6& x) { return fmt::format("[{}]", fmt::join(x.data(), x.data() + 6, ", ")); };
    return fmt::format("eta={} nu={} coriolis={} damping={} restoring={} actuation={}", v(s.eta), v(s.nu),
                       v(f.coriolis), v(f.damping), v(f.restoring), v(tau));
}

}  // namespace

Mat6 rigid_body_mass(const VehicleParams& params) {
    Mat6 m_cg = Mat6::Zero();
    m_cg.block<3, 3>(0, 0) = params.physical.mass * Mat3::Identity();
    m_cg.block<3, 3>(3, 3) = params.physical.inertia;
    const Mat6 h = transport(params.hydrostatic.r_cg);
    return h.transpose() * m_cg * h;
}

SystemMatrix system_matrix(const VehicleParams& params) {
    SystemMatrix s;
    s.m = rigid_body_mass(params);
    s.m.diagonal() += params.physical.added_mass;
    if (!s.m.allFinite()) throw InvalidArgument("system matrix has non-finite entries");
    const double asym = (s.m - s.m.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * s.m.cwiseAbs().maxCoeff()) throw InvalidArgument("system matrix is not symmetric");
    Eigen::LLT<Mat6> llt(s.m);
    if (llt.info() != Eigen::Success) throw InvalidArgument("system matrix is not positive definite");
    s.m_inv = llt.solve(Mat6::Identity());
    return s;
}

Mat6 coriolis_matrix(const Mat6& m, const Vec6& nu) {
    const Mat6 ms = 0.5 * (m + m.transpose());
    const Vec3 nu1 = nu.head<3>(), nu2 = nu.tail<3>();
    const Vec3 p1 = ms.block<3, 3>(0, 0) * nu1 + ms.block<3, 3>(0, 3) * nu2;
    const Vec3 p2 = ms.block<3, 3>(3, 0) * nu1 + ms.block<3, 3>(3, 3) * nu2;
    Mat6 c = Mat6::Zero();
    c.block<3, 3>(0, 3) = -skew(p1);
    c.block<3, 3>(3, 0) = -skew(p1);
    c.block<3, 3>(3, 3) = -skew(p2);
    return c;
}

Mat6 vehicle_coriolis(const VehicleParams& params, const Vec6& nu_r) {
    Mat6 ca = coriolis_matrix(Mat6(params.physical.added_mass.asDiagonal()), nu_r);
    for (auto [i, j] : {std::pair{4, 0}, {4, 2}, {5, 0}, {5, 1}}) {
        ca(i, j) = 0.0;
        ca(j, i) = 0.0;
    }
    return coriolis_matrix(rigid_body_mass(params), nu_r) + ca;
}

Mat6 damping_matrix(const VehicleParams& params, const Vec6& nu_r) {
    const auto& h = params.hydrodynamic;
    Vec6 lin = h.linear_damping;
    const double fade = std::exp(-h.linear_decay * nu_r.head<3>().norm());
    lin[0] *= fade;
    lin[1] *= fade;
    const Vec6 diag = lin + h.quadratic_drag.cwiseProduct(nu_r.cwiseAbs());
    return diag.asDiagonal();
}

Vec6 restoring_vector(const VehicleParams& params, const Vec6& eta) {
    return gvect(params.weight(), params.buoyancy(), eta, params.hydrostatic.r_cg, params.hydrostatic.r_cb);
}

Mat6 kinematics_matrix(const Vec6& eta) {
    const double phi = eta[3], theta = eta[4];
    if (std::abs(theta) > kPitchGuard)
        throw AttitudeGuardError(fmt::format("pitch {:.4f} rad exceeds the Euler-angle guard", theta));
    const double cphi = std::cos(phi), sphi = std::sin(phi);
    const double cth = std::cos(theta), tth = std::tan(theta);
    Mat3 t;
    t << 1.0, sphi * tth, cphi * tth,
         0.0, cphi, -sphi,
         0.0, sphi / cth, cphi / cth;
    Mat6 j = Mat6::Zero();
    j.block<3, 3>(0, 0) = rotation_of(eta);
    j.block<3, 3>(3, 3) = t;
    return j;
}

HydroForces hydro_forces(const VehicleParams& params, const Vec6& eta, const Vec6& nu_r) {
    HydroForces f;
    f.coriolis = vehicle_coriolis(params, nu_r) * nu_r;
    f.damping = -(damping_matrix(params, nu_r) * nu_r);
    f.restoring = -restoring_vector(params, eta);
    return f;
}

double propeller_thrust(const VehicleParams& params, double n) {
    const auto& cs = params.control_surfaces;
    return cs.thrust_coefficient * params.environmental.water_density * n * std::abs(n) *
           std::pow(cs.prop_diameter, 4);
}

Vec6 actuator_forces(const VehicleParams& params, const Vec6& nu_r, const std::vector<double>& fin_angles,
                     double prop_speed) {
    const auto& fins = params.control_surfaces.fins;
    if (fin_angles.size() != fins.size())
        throw InvalidArgument(fmt::format("expected {} fin angles, got {}", fins.size(), fin_angles.size()));
    const double rho = params.environmental.water_density;
    Vec3 force(propeller_thrust(params, prop_speed), 0.0, 0.0);
    Vec3 moment = Vec3::Zero();
    const Vec3 v = nu_r.head<3>(), w = nu_r.tail<3>();
    for (std::size_t i = 0; i < fins.size(); ++i) {
        const auto& fin = fins[i];
        const Vec3 vf = v + w.cross(fin.position);
        const double vn = fin.axis.dot(vf);
        const double uf = vf.x();
        const double q = 0.5 * rho * (uf * uf + vn * vn) * fin.area * fin.lift_coefficient;
        if (q == 0.0) continue;
        const double delta_eff = fin_angles[i] - std::atan2(vn, std::abs(uf));
        const Vec3 f = q * delta_eff * fin.axis - sign(uf) * q * delta_eff * delta_eff * Vec3::UnitX();
        force += f;
        moment += fin.position.cross(f);
    }
    Vec6 tau;
    tau << force, moment;
    return tau;
}

ControlCommand ControlCommand::direct(std::vector<double> fins, double prop_speed) {
    ControlCommand c;
    c.mode = Mode::direct;
    c.fin_commands = std::move(fins);
    c.prop_speed = prop_speed;
    return c;
}

ControlCommand ControlCommand::setpoint(double depth, double heading, double speed) {
    ControlCommand c;
    c.mode = Mode::setpoint;
    c.depth = depth;
    c.heading = heading;
    c.speed = speed;
    return c;
}

namespace {

using StateVec = Eigen::VectorXd;

struct Model {
    const VehicleParams& params;
    SystemMatrix sm;
    std::vector<double> fin_targets;
    double prop_target;
    Vec3 current;
    StepOptions options;

    StateVec derivative(const StateVec& y, double t) const {
        const std::size_t nf = fin_targets.size();
        const Vec6 eta = y.segment<6>(0);
        const Vec6 nu = y.segment<6>(6);
        std::vector<double> fins(nf);
        for (std::size_t i = 0; i < nf; ++i) fins[i] = y[12 + i];
        const double n = y[12 + nf];

        const Mat6 j = kinematics_matrix(eta);
        const Vec3 nu_c = j.block<3, 3>(0, 0).transpose() * current;
        Vec6 nu_r = nu;
        nu_r.head<3>() -= nu_c;

        Vec6 net = actuator_forces(params, nu_r, fins, n) - vehicle_coriolis(params, nu_r) * nu_r -
                   damping_matrix(params, nu_r) * nu_r;
        if (options.waves || options.surface_buoyancy) {
            RigidBodyState s;
            s.eta = eta;
            net -= gvect(params.weight(), 0.0, eta, params.hydrostatic.r_cg, params.hydrostatic.r_cb);
            net += buoyancy_force(options.waves, params, s, t);
        } else {
            net -= restoring_vector(params, eta);
        }
        Vec6 nu_dot = sm.m_inv * net;
        nu_dot.head<3>() += nu_c.cross(nu.tail<3>());

        StateVec dy(y.size());
        dy.segment<6>(0) = j * nu;
        dy.segment<6>(6) = nu_dot;
        const auto& fp = params.control_surfaces.fins;
        for (std::size_t i = 0; i < nf; ++i) dy[12 + i] = (fin_targets[i] - fins[i]) / fp[i].time_constant;
        dy[12 + nf] = (prop_target - n) / params.control_surfaces.prop_time_constant;
        return dy;
    }
};

}  // namespace

RigidBodyState step(const VehicleParams& params, const RigidBodyState& state, const ControlCommand& command,
                    const Vec3& current, double dt, const StepOptions& options) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("step: dt must be positive");
    if (command.mode != ControlCommand::Mode::direct)
        throw InvalidArgument("step: setpoint commands must pass through the autopilots first");
    const auto& fins = params.control_surfaces.fins;
    if (state.fin_angles.size() != fins.size())
        throw InvalidArgument(fmt::format("step: state has {} fin angles, vehicle has {} fins",
                                          state.fin_angles.size(), fins.size()));
    if (!command.fin_commands.empty() && command.fin_commands.size() != fins.size())
        throw InvalidArgument(fmt::format("step: command has {} fin angles, vehicle has {} fins",
                                          command.fin_commands.size(), fins.size()));

    Model model{params, system_matrix(params), {}, 0.0, current, options};
    model.fin_targets.resize(fins.size(), 0.0);
    for (std::size_t i = 0; i < fins.size() && !command.fin_commands.empty(); ++i) {
        model.fin_targets[i] = std::clamp(command.fin_commands[i], -fins[i].max_deflection, fins[i].max_deflection);
    }
    const double n_max = params.control_surfaces.max_prop_speed;
    model.prop_target = std::clamp(command.prop_speed, -n_max, n_max);

    const std::size_t nf = fins.size();
    StateVec y(13 + nf);
    y.segment<6>(0) = state.eta;
    y.segment<6>(6) = state.nu;
    for (std::size_t i = 0; i < nf; ++i) y[12 + i] = state.fin_angles[i];
    y[12 + nf] = state.prop_speed;

    const double t = options.time;
    const StateVec k1 = model.derivative(y, t);
    const StateVec k2 = model.derivative(y + 0.5 * dt * k1, t + 0.5 * dt);
    const StateVec k3 = model.derivative(y + 0.5 * dt * k2, t + 0.5 * dt);
    const StateVec k4 = model.derivative(y + dt * k3, t + dt);
    const StateVec next = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);

    if (!next.allFinite())
        throw NonFiniteStateError("step produced a non-finite state; " + breakdown(params, state, current));

    RigidBodyState out;
    out.eta = next.segment<6>(0);
    for (int a = 3; a < 6; ++a) out.eta[a] = wrap_angle(out.eta[a]);
    out.nu = next.segment<6>(6);
    out.fin_angles.resize(nf);
    for (std::size_t i = 0; i < nf; ++i) {
        out.fin_angles[i] = std::clamp(next[12 + i], -fins[i].max_deflection, fins[i].max_deflection);
    }
    out.prop_speed = next[12 + nf];
    if (std::abs(out.eta[4]) > kPitchGuard)
        throw AttitudeGuardError(fmt::format("pitch {:.4f} rad exceeds the Euler-angle guard", out.eta[4]));
    return out;
}

double DepthAutopilot::update(const VehicleParams& params, const RigidBodyState& state, double depth_setpoint,
                              double dt) {
    const auto& ap = params.autopilot;
    const Vec6& eta = state.eta;
    const double z_err = depth_setpoint - eta[2];
    const double z_rate = kinematics_matrix(eta).row(2) * state.nu;

    z_int_ = std::clamp(z_int_ + z_err * dt, -ap.depth_integral_limit, ap.depth_integral_limit);
    const double dive = ap.depth.kp * z_err + ap.depth.ki * z_int_ - ap.depth.kd * z_rate;
    theta_cmd_ = -std::clamp(dive, -ap.max_pitch, ap.max_pitch);

    const double theta_err = eta[4] - theta_cmd_;
    theta_int_ = std::clamp(theta_int_ + theta_err * dt, -ap.pitch_integral_limit, ap.pitch_integral_limit);
    const double cmd = ap.pitch.kp * theta_err + ap.pitch.ki * theta_int_ + ap.pitch.kd * state.nu[4];
    const double limit = fin_limit(params, 2);
    return std::clamp(cmd, -limit, limit);
}

double heading_autopilot(const VehicleParams& params, const RigidBodyState& state, double heading_setpoint,
                         double /*dt*/) {
    const auto& g = params.autopilot.heading;
    const double r = state.nu[5];
    const double err = wrap_angle(state.eta[5] - heading_setpoint);
    const double s = r + g.lambda * err;
    const double cmd =
        ((1.0 - g.lambda * g.nomoto_time) * r - g.nomoto_time * g.k_s * sat(s / g.phi_boundary)) / g.nomoto_gain;
    const double limit = fin_limit(params, 1);
    return std::clamp(cmd, -limit, limit);
}

double surge_drag(const VehicleParams& params, double u) {
    const auto& h = params.hydrodynamic;
    return h.linear_damping[0] * std::exp(-h.linear_decay * std::abs(u)) * u + h.quadratic_drag[0] * u * std::abs(u);
}

SpeedMap::SpeedMap(const VehicleParams& params, int samples) {
    const double n_max = params.control_surfaces.max_prop_speed;
    const double t_max = propeller_thrust(params, n_max);
    // Top speed: thrust at full prop speed equals drag (drag is monotone in u).
    double lo = 0.0, hi = 1.0;
    while (surge_drag(params, hi) < t_max && hi < 1e3) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (surge_drag(params, mid) < t_max ? lo : hi) = mid;
    }
    const double u_max = lo;
    const auto& cs = params.control_surfaces;
    const double k = cs.thrust_coefficient * params.environmental.water_density * std::pow(cs.prop_diameter, 4);
    samples = std::max(samples, 2);
    for (int i = 0; i < samples; ++i) {
        const double u = u_max * i / (samples - 1);
        speeds_.push_back(u);
        props_.push_back(k > 0.0 ? std::sqrt(std::max(surge_drag(params, u), 0.0) / k) : 0.0);
    }
}

double SpeedMap::prop_speed_for(double speed) const {
    const double u = std::min(std::abs(speed), speeds_.back());
    const auto it = std::upper_bound(speeds_.begin(), speeds_.end(), u);
    double n;
    if (it == speeds_.end()) {
        n = props_.back();
    } else {
        const auto i = static_cast<std::size_t>(it - speeds_.begin());
        const double f = (u - speeds_[i - 1]) / (speeds_[i] - speeds_[i - 1]);
        n = props_[i - 1] + f * (props_[i] - props_[i - 1]);
    }
    return speed < 0.0 ? -n : n;
}

DynamicsManager::DynamicsManager(double ticks_per_sec) : rate_(ticks_per_sec) {
    if (!(ticks_per_sec > 0.0) || !std::isfinite(ticks_per_sec))
        throw InvalidArgument("dynamics manager: ticks_per_sec must be positive");
}

void DynamicsManager::add_agent(const std::string& name, AgentModel model, const VehicleParams& params,
                                const RigidBodyState& state, const ControlCommand& command) {
    for (const auto& a : agents_) {
        if (a.name == name) throw InvalidArgument(fmt::format("dynamics manager: duplicate agent '{}'", name));
    }
    params.validate();
    system_matrix(params);
    RigidBodyState s = state;
    s.fin_angles.resize(params.control_surfaces.fins.size(), 0.0);
    agents_.push_back(Agent{name, model, params, s, command, Vec3::Zero(), {}, SpeedMap(params)});
}

const DynamicsManager::Agent& DynamicsManager::agent(const std::string& name) const {
    for (const auto& a : agents_) {
        if (a.name == name) return a;
    }
    throw InvalidArgument(fmt::format("dynamics manager: unknown agent '{}'", name));
}

Vec3 resolve_current(const EnvironmentFields& fields, const VehicleParams& params, const Vec3& position, double t) {
    if (fields.current) return sample_current(*fields.current, position, t);
    if (params.environmental.current) return *params.environmental.current;
    return Vec3::Zero();
}

namespace {

std::vector<double> fin_targets(const VehicleParams& params, double rudder, double stern) {
    std::vector<double> out;
    for (const auto& fin : params.control_surfaces.fins) {
        if (std::abs(fin.axis.y()) > 0.5) {
            out.push_back(-fin.axis.y() * rudder);
        } else if (std::abs(fin.axis.z()) > 0.5) {
            out.push_back(-fin.axis.z() * stern);
        } else {
            out.push_back(0.0);
        }
    }
    return out;
}

}  // namespace

std::vector<RigidBodyState> DynamicsManager::tick(const std::map<std::string, ControlCommand>& commands,
                                                  const EnvironmentFields& fields, double dt) {
    if (std::abs(dt - 1.0 / rate_) > 1e-9 / rate_)
        throw InvalidArgument(fmt::format("dynamics manager: dt {} does not match tick rate {} Hz", dt, rate_));
    for (const auto& [name, cmd] : commands) {
        auto it = std::find_if(agents_.begin(), agents_.end(), [&](const Agent& a) { return a.name == name; });
        if (it == agents_.end()) throw InvalidArgument(fmt::format("dynamics manager: unknown agent '{}'", name));
        it->command = cmd;
    }

    const double t = time();
    std::vector<RigidBodyState> out;
    out.reserve(agents_.size());
    for (auto& a : agents_) {
        const Vec3 pos = a.state.eta.head<3>();
        Vec3 current = resolve_current(fields, a.params, pos, t);
        if (fields.wave_orbital_current && fields.waves) {
            current += wave_sample(*fields.waves, pos.x(), pos.y(), t, pos.z()).orbital_velocity;
        }
        a.last_current = current;

        if (a.model == AgentModel::kinematic) {
            RigidBodyState s = a.state;
            if (a.command.mode == ControlCommand::Mode::setpoint) {
                s.nu = Vec6::Zero();
                s.nu[0] = a.command.speed;
                s.eta[2] = a.command.depth;
                s.eta[3] = 0.0;
                s.eta[4] = 0.0;
                s.eta[5] = wrap_angle(a.command.heading);
            }
            Vec6 rate = kinematics_matrix(s.eta) * s.nu;
            rate.head<3>() += current;
            s.eta += dt * rate;
            for (int k = 3; k < 6; ++k) s.eta[k] = wrap_angle(s.eta[k]);
            a.state = s;
        } else {
            ControlCommand direct = a.command;
            if (a.command.mode == ControlCommand::Mode::setpoint) {
                const double stern = a.depth_autopilot.update(a.params, a.state, a.command.depth, dt);
                const double rudder = heading_autopilot(a.params, a.state, a.command.heading, dt);
                direct = ControlCommand::direct(fin_targets(a.params, rudder, stern),
                                                a.speed_map.prop_speed_for(a.command.speed));
            }
            StepOptions opts;
            opts.waves = fields.waves;
            opts.time = t;
            opts.surface_buoyancy = fields.surface_buoyancy;
            a.state = step(a.params, a.state, direct, current, dt, opts);
        }

        if (fields.world && fields.world->heightfield()) {
            const auto& hf = *fields.world->heightfield();
            const Vec3 keel = a.state.eta.head<3>() +
                              rotation_of(a.state.eta) * Vec3(0.0, 0.0, 0.5 * a.params.physical.diameter);
            if (hf.contains(keel.x(), keel.y())) {
                const double floor = height_at(hf, keel.x(), keel.y());
                if (keel.z() > floor) contacts_.push_back({a.name, ticks_ + 1, keel, floor});
            }
        }
        out.push_back(a.state);
    }
    ++ticks_;
    return out;
}

void write_state_csv_header(std::ostream& out, std::size_t fin_count) {
    out << "t,agent,x,y,z,phi,theta,psi,u,v,w,p,q,r";
    for (std::size_t i = 0; i < fin_count; ++i) out << ",fin" << i;
    out << ",prop,current_x,current_y,current_z\n";
}

void write_state_csv_row(std::ostream& out, double t, const std::string& agent, const RigidBodyState& state,
                         const Vec3& current) {
    std::string row = fmt::format("{:.10g},{}", t, agent);
    for (int i = 0; i < 6; ++i) row += fmt::format(",{:.10g}", state.eta[i]);
    for (int i = 0; i < 6; ++i) row += fmt::format(",{:.10g}", state.nu[i]);
    for (double f : state.fin_angles) row += fmt::format(",{:.10g}", f);
    row += fmt::format(",{:.10g},{:.10g},{:.10g},{:.10g}\n", state.prop_speed, current.x(), current.y(), current.z());
    out << row;
}

}  // namespace mariner
