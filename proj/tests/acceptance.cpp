// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Oracles are computed here, independently of the code under test.

#include "mariner/accel.hpp"
#include "mariner/bridge.hpp"
#include "mariner/dynamics.hpp"
#include "mariner/envfx.hpp"
#include "mariner/rng.hpp"
#include "mariner/runner.hpp"
#include "mariner/sensors.hpp"
#include "mariner/world.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

using namespace mariner;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what) {
        pass = pass && ok;
        notes.push_back(fmt::format("{}{}", ok ? "" : "FAILED ", what));
    }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Vec6 vec6(double a, double b, double c, double d, double e, double f) {
    Vec6 v;
    v << a, b, c, d, e, f;
    return v;
}

Vec6 nadir_mount() { return vec6(0, 0, 0, 0, -kPi / 2, 0); }

World rolling_world(std::uint64_t seed, double density) {
    GenSpec spec;
    spec.terrain = "rolling";
    spec.size_x = 40.0;
    spec.size_y = 40.0;
    spec.cell_size = 1.0;
    spec.base_depth = 15.0;
    spec.relief = 3.0;
    spec.density = density;
    spec.prop_classes = {{"rock", classes::kRock, Vec3(1.5, 1.5, 1.0)}, {"pipe", classes::kPipe, Vec3(3, 0.4, 0.4)}};
    return generate_world(spec, seed);
}

// Nearest hit by brute force: every prop triangle plus a fine march with
// bisection over the heightfield.
std::optional<std::pair<double, SemanticLabel>> exhaustive_cast(const World& w, const Ray& ray) {
    std::optional<std::pair<double, SemanticLabel>> best;
    auto offer = [&](double t, SemanticLabel label) {
        if (t >= 0.0 && t <= ray.max_range && (!best || t < best->first)) best = {{t, label}};
    };
    for (const auto& prop : w.props()) {
        for (const auto& tri : prop.world_mesh) {
            const Vec3 e1 = tri.b - tri.a, e2 = tri.c - tri.a;
            const Vec3 p = ray.direction.cross(e2);
            const double det = e1.dot(p);
            if (std::abs(det) < 1e-14) continue;
            const Vec3 s = ray.origin - tri.a;
            const double u = s.dot(p) / det;
            const Vec3 q = s.cross(e1);
            const double v = ray.direction.dot(q) / det;
            if (u < 0 || v < 0 || u + v > 1) continue;
            offer(e2.dot(q) / det, prop.label);
        }
    }
    if (!w.heightfield()) return best;
    const auto& hf = *w.heightfield();
    auto f = [&](double t) {
        const Vec3 p = ray.at(t);
        return hf.contains(p.x(), p.y()) ? std::optional(p.z() - height_at(hf, p.x(), p.y())) : std::nullopt;
    };
    double prev_t = 0.0;
    auto prev = f(0.0);
    for (double t = 0.01; t <= ray.max_range; t += 0.01) {
        auto cur = f(t);
        if (prev && cur && *prev < 0.0 && *cur >= 0.0) {
            double lo = prev_t, hi = t;
            for (int k = 0; k < 60; ++k) {
                const double mid = 0.5 * (lo + hi);
                (*f(mid) < 0.0 ? lo : hi) = mid;
            }
            offer(0.5 * (lo + hi), hf.label);
            break;
        }
        prev = cur;
        prev_t = t;
    }
    return best;
}

double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    return v[static_cast<std::size_t>(q * static_cast<double>(v.size() - 1))];
}

// ---------------------------------------------------------------------------

Outcome benchmark_ordering() {
    Outcome o;
    const auto t0 = Clock::now();
    const World world = make_dam_world();
    const auto rays = survey_rays(world, 256);
    const BenchReport r = bench_backends(world, rays, 509);
    const double runtime = seconds_since(t0);
    const double rc = r.raycast.mean_time_per_tick, q = r.query.mean_time_per_tick, c = r.caching.mean_time_per_tick;
    o.check(rc < q && q < c, fmt::format("mean per tick raycast {:.3g} s < query {:.3g} s < caching {:.3g} s", rc, q, c));
    o.check(q >= 2.0 * rc, fmt::format("query / raycast = {:.2f} (>= 2)", q / rc));
    o.check(runtime < 300.0, fmt::format("509 ticks x {} rays in {:.1f} s (< 300 s)", rays.size(), runtime));
    return o;
}

Outcome backend_equivalence() {
    Outcome o;
    const auto t0 = Clock::now();
    const World w = rolling_world(77, 3.0);
    const double leaf = 0.25;
    const Octree tree = build_octree(w, leaf);
    QueryStats s1, s2;
    Rng rng(10000);

    auto hits = [&](const Ray& r) { return direct_cast(w, r, s2).has_value(); };
    // True when some parallel ray within 2 leaf sizes sees a different
    // hit/miss outcome, or the true surface lies within 2 leaf sizes past the
    // range limit: the ray is in the silhouette band.
    auto in_band = [&](const Ray& r) {
        const bool here = hits(r);
        if (!here && direct_cast(w, Ray::make(r.origin, r.direction, r.max_range + 2 * leaf), s2)) return true;
        const Vec3 u = r.direction.unitOrthogonal();
        const Vec3 v = r.direction.cross(u);
        for (double rad : {0.5 * leaf, leaf, 1.5 * leaf, 2.0 * leaf})
            for (int k = 0; k < 16; ++k) {
                const double a = 2.0 * kPi * k / 16.0;
                const Vec3 off = rad * (std::cos(a) * u + std::sin(a) * v);
                if (hits(Ray::make(r.origin + off, r.direction, r.max_range)) != here) return true;
            }
        return false;
    };

    int dual = 0, range_bad = 0, disagree = 0, disagree_outside = 0, label_checked = 0, label_bad = 0;
    double worst = 0.0;
    for (int k = 0; k < 10000; ++k) {
        const Vec3 origin(rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(0, 10));
        Vec3 d;
        do {
            d = Vec3(rng.normal(), rng.normal(), rng.normal());
        } while (d.norm() < 1e-6);
        d.normalize();
        if (d.z() < -0.2) d.z() = -d.z();
        const Ray ray = Ray::make(origin, d, 40.0);
        const auto a = octree_cast(tree, w, ray, s1);
        const auto b = direct_cast(w, ray, s2);
        if (a && b) {
            ++dual;
            const double err = std::abs(a->range - b->range);
            worst = std::max(worst, err);
            if (err > 2 * leaf) {
                ++range_bad;
            } else {
                ++label_checked;
                if (!(a->label == b->label)) ++label_bad;
            }
        } else if (a.has_value() != b.has_value()) {
            ++disagree;
            if (!in_band(ray)) ++disagree_outside;
        }
    }
    o.check(range_bad == 0, fmt::format("{} dual hits, worst range gap {:.3f} m (<= {} m), {} outside", dual, worst,
                                        2 * leaf, range_bad));
    o.check(disagree_outside == 0,
            fmt::format("{} hit/miss disagreements, {} outside the silhouette band", disagree, disagree_outside));
    o.check(label_bad == 0, fmt::format("labels agree on {}/{} agreeing ranges", label_checked - label_bad,
                                        label_checked));
    o.check(seconds_since(t0) < 60.0, fmt::format("{:.1f} s (< 60 s)", seconds_since(t0)));
    return o;
}

Outcome dynamics_properties() {
    Outcome o;
    const auto t0 = Clock::now();
    Rng rng(2024);
    auto random_vec6 = [&](double lin, double ang) {
        return vec6(rng.uniform(-lin, lin), rng.uniform(-lin, lin), rng.uniform(-lin, lin), rng.uniform(-ang, ang),
                    rng.uniform(-ang, ang), rng.uniform(-ang, ang));
    };

    double worst_skew = 0.0;
    for (int k = 0; k < 1000; ++k) {
        VehicleParams p = default_remus100_params();
        p.physical.mass *= rng.uniform(0.5, 2.0);
        for (int i = 0; i < 6; ++i) p.physical.added_mass[i] *= rng.uniform(0.0, 2.0);
        const Vec6 nu = random_vec6(3.0, 1.0);
        const Mat6 c = vehicle_coriolis(p, nu);
        const double power = std::abs(nu.dot(c * nu)) / (c.norm() * nu.squaredNorm());
        const double asym = (c + c.transpose()).norm() / c.norm();
        worst_skew = std::max({worst_skew, power, asym});
    }
    o.check(worst_skew <= 1e-9, fmt::format("Coriolis skew symmetry, worst relative residual {:.2e} (<= 1e-9)", worst_skew));

    const auto remus = default_remus100_params();
    double min_dissipation = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 1000; ++k) {
        const Vec6 nu = random_vec6(3.0, 2.0);
        min_dissipation = std::min(min_dissipation, nu.dot(damping_matrix(remus, nu) * nu));
    }
    o.check(min_dissipation >= 0.0, fmt::format("min nu.D(nu).nu over 1000 states = {:.3g} (>= 0)", min_dissipation));

    // Passive decay: CG on CB so gravity does no work, no fins, no thrust.
    VehicleParams passive = remus;
    passive.hydrostatic.r_cg = Vec3::Zero();
    passive.hydrostatic.r_cb = Vec3::Zero();
    passive.control_surfaces.fins.clear();
    const Mat6 m = system_matrix(passive).m;
    auto s = initial_state(passive, vec6(0, 0, 20, 0, 0, 0), vec6(1.2, 0.3, -0.2, 0.4, 0.05, -0.3));
    double e = 0.5 * s.nu.dot(m * s.nu);
    const double e0 = e;
    int increases = 0;
    for (int k = 0; k < 10000; ++k) {
        s = step(passive, s, ControlCommand::direct({}, 0.0), Vec3::Zero(), 1.0 / 30.0);
        const double next = 0.5 * s.nu.dot(m * s.nu);
        if (next > e * (1.0 + 1e-12)) ++increases;
        e = next;
    }
    o.check(increases == 0, fmt::format("passive kinetic energy {:.3g} J -> {:.3g} J over 10000 ticks, {} increases",
                                        e0, e, increases));

    // Convergence order against a 3840 Hz reference.
    auto run = [&](int rate) {
        auto st = initial_state(remus, Vec6::Zero(), vec6(1.4, 0, 0, 0, 0, 0));
        st.prop_speed = 22.0;
        for (int k = 0; k < 10 * rate; ++k)
            st = step(remus, st, ControlCommand::direct({0.08, 0.08, 0.05, 0.05}, 22.0), Vec3(0.1, 0.2, 0.0),
                      1.0 / rate);
        Eigen::VectorXd x(12);
        x << st.eta, st.nu;
        return x;
    };
    const Eigen::VectorXd ref = run(3840);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int rate : {30, 60, 120, 240}) {
        const double lx = std::log(1.0 / rate), ly = std::log((run(rate) - ref).norm());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double slope = (4 * sxy - sx * sy) / (4 * sxx - sx * sx);
    o.check(std::abs(slope - 4.0) <= 0.3, fmt::format("RK4 order fit {:.3f} (4 +/- 0.3)", slope));
    o.check(seconds_since(t0) < 120.0, fmt::format("{:.1f} s (< 120 s)", seconds_since(t0)));
    return o;
}

struct Trace {
    std::vector<double> t, z, psi;
    std::vector<double> rudder_cmd;  // every tick
};

// Closed loop through the manager at `rate`, sampled every 0.1 s.
Trace closed_loop(double rate, const ControlCommand& command, double horizon) {
    const auto p = default_remus100_params();
    DynamicsManager m(rate);
    m.add_agent("auv", AgentModel::fossen_torpedo, p, initial_state(p, Vec6::Zero(), vec6(1.5, 0, 0, 0, 0, 0)),
                command);
    Trace tr;
    const long n = std::lround(horizon * rate);
    const long every = std::lround(0.1 * rate);
    for (long k = 1; k <= n; ++k) {
        tr.rudder_cmd.push_back(heading_autopilot(p, m.agents()[0].state, command.heading, 1.0 / rate));
        m.tick({}, {}, 1.0 / rate);
        if (k % every != 0) continue;
        const auto& s = m.agents()[0].state;
        tr.t.push_back(static_cast<double>(k) / rate);
        tr.z.push_back(s.eta[2]);
        tr.psi.push_back(s.eta[5]);
    }
    return tr;
}

double rms_gap(const std::vector<double>& a, const std::vector<double>& b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(sum / static_cast<double>(a.size()));
}

Outcome autopilot_regressions() {
    Outcome o;
    const auto t0 = Clock::now();

    const auto depth_cmd = ControlCommand::setpoint(10.0, 0.0, 1.5);
    const Trace dz = closed_loop(30.0, depth_cmd, 120.0);
    const Trace dz_ref = closed_loop(1e4, depth_cmd, 120.0);
    const double peak = *std::max_element(dz.z.begin(), dz.z.end());
    double settle = 0.0;
    for (std::size_t i = 0; i < dz.z.size(); ++i)
        if (std::abs(dz.z[i] - 10.0) > 0.25) settle = dz.t[i];
    o.check(settle < 120.0, fmt::format("depth 0 -> 10 m inside +/-0.25 m from {:.1f} s (by 120 s)", settle));
    o.check(peak - 10.0 < 2.0, fmt::format("depth overshoot {:.1f}% (< 20%)", 10.0 * (peak - 10.0)));
    const double depth_rms = rms_gap(dz.z, dz_ref.z);
    o.check(depth_rms < 0.05, fmt::format("depth RMS vs dt = 1e-4 reference {:.2e} m (< 0.05 m)", depth_rms));

    const double target = kPi / 2;
    const auto heading_cmd = ControlCommand::setpoint(0.0, target, 1.5);
    const Trace hz = closed_loop(30.0, heading_cmd, 60.0);
    const Trace hz_ref = closed_loop(1e4, heading_cmd, 60.0);
    settle = 0.0;
    for (std::size_t i = 0; i < hz.psi.size(); ++i)
        if (std::abs(hz.psi[i] - target) > 2.0 * kPi / 180.0) settle = hz.t[i];
    o.check(settle < 60.0, fmt::format("heading 0 -> 90 deg inside +/-2 deg from {:.1f} s (by 60 s)", settle));
    // Steady state: every 1 s window after settling.
    const auto first = static_cast<std::size_t>(std::ceil(settle * 30.0));
    int worst_rate = 0;
    for (std::size_t w = first; w + 30 <= hz.rudder_cmd.size(); w += 30) {
        int changes = 0;
        for (std::size_t i = w + 1; i < w + 30; ++i)
            if ((hz.rudder_cmd[i] > 0.0) != (hz.rudder_cmd[i - 1] > 0.0)) ++changes;
        worst_rate = std::max(worst_rate, changes);
    }
    o.check(worst_rate < 5, fmt::format("steady-state rudder command sign changes, worst {}/s (< 5/s)", worst_rate));
    const double heading_rms = rms_gap(hz.psi, hz_ref.psi) * 180.0 / kPi;
    o.check(heading_rms < 0.5, fmt::format("heading RMS vs dt = 1e-4 reference {:.2e} deg (< 0.5 deg)", heading_rms));
    o.check(seconds_since(t0) < 120.0, fmt::format("{:.1f} s (< 120 s)", seconds_since(t0)));
    return o;
}

Outcome current_drift() {
    Outcome o;
    const auto p = default_remus100_params();
    const double dt = 1.0 / 30.0;
    const Vec3 current(0.5, 0.0, 0.0);
    const auto idle = ControlCommand::direct({}, 0.0);
    auto s = initial_state(p, vec6(0, 0, 10, 0, 0, 0.3));
    for (int k = 0; k < 600 * 30; ++k) s = step(p, s, idle, current, dt);
    const Vec3 ground = rotation_of(s.eta) * s.nu.head<3>();
    const double rel = (ground - current).norm() / current.norm();
    o.check(rel < 0.01, fmt::format("ground velocity within {:.3f}% of the 0.5 m/s current (< 1%)", 100 * rel));

    // Shear: same actuation in still water and in the shear; the drifting
    // vehicle starts moving with the water. Oracle is the trapezoid integral
    // of the current sampled along the drifting track.
    const auto shear = CurrentField::make_shear(Vec3(0.0, 0.4, 0.0), 8.0);
    const auto still0 = initial_state(p, vec6(0, 0, 4, 0, 0, 0), vec6(1.5, 0, 0, 0, 0, 0));
    auto drift0 = still0;
    drift0.nu.head<3>() += sample_current(shear, still0.eta.head<3>(), 0.0);
    const auto cmd = ControlCommand::direct({0.0, 0.0, 0.02, 0.02}, SpeedMap(p).prop_speed_for(1.5));
    DynamicsManager still(30.0), drifting(30.0);
    still.add_agent("auv", AgentModel::fossen_torpedo, p, still0, cmd);
    drifting.add_agent("auv", AgentModel::fossen_torpedo, p, drift0, cmd);
    EnvironmentFields fields;
    fields.current = &shear;
    double integral = 0.0;
    double prev = sample_current(shear, drift0.eta.head<3>(), 0.0).y();
    for (int k = 0; k < 200 * 30; ++k) {
        still.tick({}, {}, dt);
        const auto out = drifting.tick({}, fields, dt);
        const double cur = sample_current(shear, out[0].eta.head<3>(), 0.0).y();
        integral += 0.5 * dt * (prev + cur);
        prev = cur;
    }
    const double offset = drifting.agent("auv").state.eta[1] - still.agent("auv").state.eta[1];
    const double err = std::abs(offset - integral) / integral;
    o.check(err < 0.05, fmt::format("shear cross-track {:.3f} m vs oracle {:.3f} m, {:.2f}% (< 5%)", offset, integral,
                                    100 * err));
    return o;
}

Outcome spawned_prop_liveness() {
    Outcome o;
    World world(Heightfield::flat(20.0, 40.0, 40.0, 1.0));
    const auto p = default_remus100_params();
    DynamicsManager m(30.0);
    m.add_agent("auv", AgentModel::kinematic, p, initial_state(p, vec6(20, 20, 2, 0, 0, 0)),
                ControlCommand::setpoint(2.0, 0.0, 0.0));
    SensorSpec echo;
    echo.name = "echo";
    echo.mount_pose = nadir_mount();
    echo.semantic = true;
    const double leaf = 0.25;
    const Octree tree = build_octree(world, leaf);
    Rng rng(1);

    std::vector<BeamReturn> returns;
    bool stale_raised = false;
    std::optional<BeamReturn> octree_after_rebuild;
    for (int k = 0; k < 10; ++k) {
        if (k == 5) {
            // 1 m cube 5 m below the sensor: top face at 2 + 4.5 m.
            world.spawn_prop(make_box(Vec3::Ones()), vec6(20, 20, 7, 0, 0, 0), {classes::kSpawned, 1});
        }
        const RigidBodyState state = m.tick({}, {}, 1.0 / 30.0)[0];
        returns.push_back(std::get<BeamReturn>(evaluate_sensor(echo, {&world}, state, rng)));
        echo.backend = Backend::octree;
        try {
            evaluate_sensor(echo, {&world, &tree}, state, rng);
        } catch (const StaleOctreeError&) {
            stale_raised = stale_raised || k >= 5;
        }
        echo.backend = Backend::raycast;
        if (k == 9) {
            const Octree rebuilt = build_octree(world, leaf);
            echo.backend = Backend::octree;
            octree_after_rebuild = std::get<BeamReturn>(evaluate_sensor(echo, {&world, &rebuilt}, state, rng));
            echo.backend = Backend::raycast;
        }
    }
    o.check(std::abs(returns[4].range - 18.0) < 1e-9 && returns[4].label->class_id == classes::kSeafloor,
            fmt::format("raycast before spawn: {:.6f} m, seafloor", returns[4].range));
    o.check(std::abs(returns[5].range - 4.5) < 1e-9 && returns[5].label->class_id == classes::kSpawned,
            fmt::format("raycast on the next tick: {:.6f} m, spawned prop, no rebuild", returns[5].range));
    o.check(stale_raised, "octree backend raises staleness after the spawn");
    o.check(octree_after_rebuild && std::abs(octree_after_rebuild->range - 4.5) <= 2 * leaf &&
                octree_after_rebuild->label->class_id == classes::kSpawned,
            fmt::format("octree after rebuild: {:.3f} m, spawned prop",
                        octree_after_rebuild ? octree_after_rebuild->range : -1.0));
    return o;
}

Outcome sensor_semantic_suite() {
    Outcome o;
    // Multibeam profile against the heightfield.
    const World terrain = rolling_world(8, 0.0);
    const double leaf = 0.25;
    const Octree tree = build_octree(terrain, leaf);
    SensorSpec mb;
    mb.name = "mb";
    mb.kind = SensorKind::multibeam;
    mb.mount_pose = nadir_mount();
    mb.n_beams = 256;
    mb.swath_aperture = 120.0 * kPi / 180.0;
    mb.max_range = 80.0;
    const SensorPose pose = sensor_pose(vec6(20, 20, 5, 0, 0, 0), mb.mount_pose);
    const auto& hf = *terrain.heightfield();
    auto profile_rms = [&](Backend backend) {
        mb.backend = backend;
        const auto scan = multibeam_scan({&terrain, &tree}, pose, mb);
        double sum = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < scan.beams.size(); ++i) {
            if (!scan.beams[i].hit()) continue;
            const Vec3 pt = pose.origin + scan.beams[i].range * (pose.rotation * Vec3(std::cos(scan.angles[i]),
                                                                                      std::sin(scan.angles[i]), 0));
            if (!hf.contains(pt.x(), pt.y())) continue;
            const double e = pt.z() - height_at(hf, pt.x(), pt.y());
            sum += e * e;
            ++n;
        }
        return std::pair(std::sqrt(sum / n), n);
    };
    const auto [rms_ray, n_ray] = profile_rms(Backend::raycast);
    const auto [rms_oct, n_oct] = profile_rms(Backend::octree);
    o.check(rms_oct <= 2 * leaf, fmt::format("multibeam octree profile RMS {:.4f} m over {} beams (<= {} m)", rms_oct,
                                             n_oct, 2 * leaf));
    o.check(rms_ray <= 1e-6, fmt::format("multibeam raycast profile RMS {:.2e} m over {} beams (<= 1e-6 m)", rms_ray,
                                         n_ray));

    // Semantic labels against brute force.
    const World cluttered = rolling_world(31, 4.0);
    SensorSpec sem = mb;
    sem.backend = Backend::raycast;
    sem.semantic = true;
    sem.n_beams = 50;
    sem.swath_aperture = 1.6;
    sem.max_range = 60.0;
    Rng rng(13);
    int checked = 0, wrong = 0, on_props = 0;
    while (checked < 1000) {
        const auto sp = sensor_pose(
            vec6(rng.uniform(12, 28), rng.uniform(12, 28), rng.uniform(4, 9), 0, 0, rng.uniform(-kPi, kPi)),
            sem.mount_pose);
        const auto scan = multibeam_scan({&cluttered}, sp, sem);
        for (std::size_t i = 0; i < scan.beams.size() && checked < 1000; ++i) {
            const Ray ray = Ray::make(
                sp.origin, sp.rotation * Vec3(std::cos(scan.angles[i]), std::sin(scan.angles[i]), 0), sem.max_range);
            const auto oracle = exhaustive_cast(cluttered, ray);
            if (!oracle) {
                if (scan.beams[i].hit()) ++wrong;
                continue;
            }
            ++checked;
            if (!scan.beams[i].label || !(*scan.beams[i].label == oracle->second) ||
                std::abs(scan.beams[i].range - oracle->first) > 1e-6)
                ++wrong;
            if (oracle->second.class_id != classes::kSeafloor) ++on_props;
        }
    }
    o.check(wrong == 0, fmt::format("semantic labels exact on {}/{} returns ({} on props)", checked - wrong, checked,
                                    on_props));

    // Cadence through the runner.
    ScenarioConfig c = default_scenario();
    c.duration_ticks = 509;
    c.agents[0].sensors.clear();
    for (int rate : {1, 5, 7, 509, 600}) {
        SensorSpec s;
        s.name = fmt::format("echo{}", rate);
        s.mount_pose = nadir_mount();
        s.rate_ticks = rate;
        c.agents[0].sensors.push_back(s);
    }
    RunOptions opts;
    opts.out_dir = fs::temp_directory_path() / "mariner_acceptance_cadence";
    fs::remove_all(opts.out_dir);
    const RunReport report = run_scenario(c, opts);
    bool exact = report.status == RunReport::Status::ok;
    std::string counts;
    for (int rate : {1, 5, 7, 509, 600}) {
        const std::string topic = fmt::format("auv0/echo{}", rate);
        const std::uint64_t expected = 509 / rate;
        std::ifstream in(opts.out_dir / "sensors" / fmt::format("auv0_echo{}.jsonl", rate));
        const auto lines = static_cast<std::uint64_t>(
            std::count(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>(), '\n'));
        exact = exact && report.sensor_messages.at(topic) == expected && lines == expected;
        counts += fmt::format("{}{}:{}", counts.empty() ? "" : " ", rate, report.sensor_messages.at(topic));
    }
    o.check(exact, fmt::format("cadence over 509 ticks, rate:count {} (floor(509/rate))", counts));
    return o;
}

Outcome waves_buoyancy() {
    Outcome o;
    for (double wavelength : {10.0, 30.0, 80.0}) {
        WaveField w;
        w.components.push_back({0.5, wavelength, Vec2::UnitX(), 0.0, 0.3});
        const double dt = 1e-3;
        std::vector<double> crossings;
        double prev = wave_sample(w, 2.0, 1.0, 0.0).height;
        for (double t = dt; t <= 120.0; t += dt) {
            const double h = wave_sample(w, 2.0, 1.0, t).height;
            if (prev < 0.0 && h >= 0.0) crossings.push_back(t - dt * h / (h - prev));
            prev = h;
        }
        const double period = (crossings.back() - crossings.front()) / static_cast<double>(crossings.size() - 1);
        const double oracle = std::sqrt(2.0 * kPi * wavelength / 9.81);
        const double err = std::abs(period - oracle) / oracle;
        o.check(err < 0.01, fmt::format("wavelength {} m: period {:.4f} s vs {:.4f} s ({:.3f}%, < 1%)", wavelength,
                                        period, oracle, 100 * err));
    }

    const auto p = default_remus100_params();
    auto state_at = [&](double z, double pitch, double roll) {
        return initial_state(p, vec6(0, 0, z, roll, pitch, 0.4));
    };
    const Vec6 half = buoyancy_force(nullptr, p, state_at(0.0, 0.0, 0.0), 0.0, 100);
    const double analytic = 0.5 * p.buoyancy();
    const double half_err = std::abs(-half[2] - analytic) / analytic;
    o.check(half_err < 0.02, fmt::format("half-submerged hull, K = 100: {:.2f} N vs {:.2f} N ({:.3f}%, < 2%)", -half[2],
                                         analytic, 100 * half_err));

    // The buoyancy part of the restoring vector is g(eta) with zero weight.
    VehicleParams weightless = p;
    weightless.physical.mass = 0.0;
    double worst = 0.0;
    for (double pitch : {0.0, 0.3, -0.5})
        for (double roll : {0.0, 0.2}) {
            const Vec6 eta = vec6(0, 0, 10, roll, pitch, 0.4);
            worst = std::max(worst, (buoyancy_force(nullptr, p, state_at(10.0, pitch, roll)) +
                                     restoring_vector(weightless, eta))
                                        .norm());
        }
    o.check(worst <= 1e-9, fmt::format("fully submerged vs restoring-term buoyancy, worst gap {:.2e} (<= 1e-9)", worst));
    return o;
}

// Random reading of every schema for the fuzz.
std::string random_text(Rng& rng) {
    static const std::vector<std::string> pieces = {"a", "Z", "/", "_", "-", "7", " ", "\"", "\\", "\xc3\xa9",
                                                    "\xe6\xb0\xb4", "\xf0\x9f\x8c\x8a", "\t", "."};
    std::string s;
    const auto n = 1 + rng.below(16);
    for (std::uint64_t i = 0; i < n; ++i) s += pieces[rng.below(pieces.size())];
    return s;
}

double random_double(Rng& rng) {
    switch (rng.below(4)) {
        case 0: return rng.normal() * 1e-300;
        case 1: return rng.normal() * 1e300;
        case 2: return static_cast<double>(static_cast<std::int64_t>(rng.below(1000)) - 500);
        default: return rng.uniform(-1e3, 1e3);
    }
}

std::optional<SemanticLabel> random_label(Rng& rng) {
    if (rng.below(3) == 0) return std::nullopt;
    return SemanticLabel{static_cast<int>(rng.below(8)), static_cast<std::int64_t>(rng.below(1u << 20)) - 1};
}

BeamReturn random_beam(Rng& rng) {
    BeamReturn b;
    if (rng.below(4) != 0) b.range = std::abs(random_double(rng));
    b.intensity = rng.uniform();
    b.label = random_label(rng);
    return b;
}

Envelope random_envelope(Rng& rng) {
    Envelope e;
    e.topic = random_text(rng);
    e.tick = rng.next() >> rng.below(64);
    e.stamp = random_double(rng);
    const auto n = rng.below(6);
    switch (rng.below(9)) {
        case 0: {
            RigidBodyState s;
            for (int i = 0; i < 6; ++i) s.eta[i] = random_double(rng), s.nu[i] = random_double(rng);
            s.fin_angles.resize(n);
            for (auto& f : s.fin_angles) f = random_double(rng);
            s.prop_speed = random_double(rng);
            e.schema = schemas::kState;
            e.payload = state_payload(random_text(rng), s, Vec3(random_double(rng), 0.0, random_double(rng)));
            break;
        }
        case 1:
            e.schema = schemas::kSonarEcho;
            e.payload = echo_payload(random_beam(rng));
            break;
        case 2: {
            MultibeamReturn m;
            for (std::uint64_t i = 0; i < n; ++i) m.angles.push_back(random_double(rng)), m.beams.push_back(random_beam(rng));
            e.schema = schemas::kMultibeamScan;
            e.payload = multibeam_payload(m);
            break;
        }
        case 3: {
            SidescanLine l;
            const bool sem = rng.below(2) == 0;
            for (std::uint64_t i = 0; i < n; ++i) {
                l.port.push_back(rng.uniform());
                l.starboard.push_back(rng.uniform());
                if (sem) l.port_labels.push_back(random_label(rng)), l.starboard_labels.push_back(random_label(rng));
            }
            e.schema = schemas::kSidescanLine;
            e.payload = sidescan_payload(l);
            break;
        }
        case 4: {
            PointCloud c;
            for (std::uint64_t i = 0; i < n; ++i)
                c.points.push_back({Vec3(random_double(rng), random_double(rng), random_double(rng)), rng.uniform(),
                                    random_label(rng)});
            e.schema = schemas::kPointCloud;
            e.payload = pointcloud_payload(c);
            break;
        }
        case 5:
        case 6:
        case 7: {
            NavReading r{Vec3(random_double(rng), random_double(rng), random_double(rng)),
                         Vec3(random_double(rng), random_double(rng), random_double(rng)),
                         Vec3(random_double(rng), random_double(rng), random_double(rng)), random_double(rng)};
            const auto k = rng.below(3);
            e.schema = k == 0 ? schemas::kImu : k == 1 ? schemas::kDvl : schemas::kDepth;
            e.payload = k == 0 ? imu_payload(r) : k == 1 ? dvl_payload(r) : depth_payload(r);
            break;
        }
        default: {
            std::vector<double> fins(n);
            for (auto& f : fins) f = random_double(rng);
            const auto cmd = rng.below(2) == 0
                                 ? ControlCommand::direct(fins, random_double(rng))
                                 : ControlCommand::setpoint(random_double(rng), random_double(rng), random_double(rng));
            e.schema = schemas::kCommand;
            e.payload = command_payload(random_text(rng), cmd);
        }
    }
    return e;
}

// Per-tick wall time of a loop that steps one agent, scans a lidar and
// publishes state and cloud, with `stalled` extra clients that never read.
std::vector<double> tick_times(int stalled, std::uint64_t& dropped) {
    BridgeOptions bo;
    bo.port = 0;
    bo.queue_depth = 64;
    BridgeServer server(bo);
    BridgeClient live("127.0.0.1", server.port());
    live.subscribe({"*"});
    std::vector<std::unique_ptr<BridgeClient>> idle;
    for (int i = 0; i < stalled; ++i) {
        idle.push_back(std::make_unique<BridgeClient>("127.0.0.1", server.port(), 4096));
        idle.back()->subscribe({"*"});
    }
    server.wait_for_subscribers(1 + static_cast<std::size_t>(stalled), 5.0);
    std::atomic<bool> done{false};
    std::thread drain([&] {
        try {
            while (!done) live.receive(0.05);
        } catch (const Error&) {
        }
    });

    const World world(Heightfield::flat(15.0, 60.0, 60.0, 1.0));
    const auto p = default_remus100_params();
    DynamicsManager m(30.0);
    m.add_agent("auv", AgentModel::fossen_torpedo, p, initial_state(p, vec6(5, 30, 5, 0, 0, 0), vec6(1.5, 0, 0, 0, 0, 0)),
                ControlCommand::setpoint(5.0, 0.0, 1.5));
    SensorSpec lidar;
    lidar.name = "lidar";
    lidar.kind = SensorKind::lidar;
    lidar.n_lasers = 8;
    lidar.fov_vertical = 1.2;
    lidar.points_per_rotation = 180;
    lidar.mount_pose = vec6(0, 0, 0, 0, -0.6, 0);
    Rng rng(3);
    std::vector<double> times;
    for (std::uint64_t k = 1; k <= 300; ++k) {
        const auto t0 = Clock::now();
        const RigidBodyState s = m.tick({}, {}, 1.0 / 30.0)[0];
        Envelope st{"auv/state", schemas::kState, k, m.time(), state_payload("auv", s, Vec3::Zero())};
        server.publish(st);
        server.publish(sensor_envelope("auv", lidar, evaluate_sensor(lidar, {&world}, s, rng), k, m.time()));
        times.push_back(seconds_since(t0));
    }
    done = true;
    drain.join();
    dropped = server.stats().dropped;
    return times;
}

Outcome bridge_protocol() {
    Outcome o;
    Rng rng(10000);
    int mismatches = 0;
    for (int k = 0; k < 10000; ++k) {
        const Envelope e = random_envelope(rng);
        const std::string bytes = encode(e);
        const Envelope back = decode(bytes);
        if (!(back == e) || encode(back) != bytes) ++mismatches;
    }
    o.check(mismatches == 0, fmt::format("10000 random envelopes round trip, {} mismatches", mismatches));

    // Fan-out to two clients.
    {
        BridgeOptions bo;
        bo.port = 0;
        BridgeServer server(bo);
        BridgeClient a("127.0.0.1", server.port()), b("127.0.0.1", server.port());
        a.subscribe({"*"});
        b.subscribe({"*"});
        server.wait_for_subscribers(2, 5.0);
        const int n = 600;
        for (int k = 0; k < n; ++k) {
            Envelope e{fmt::format("auv{}/depth", k % 3), schemas::kDepth, static_cast<std::uint64_t>(k / 3 + 1), k * 0.01,
                       depth_payload(NavReading{Vec3::Zero(), Vec3::Zero(), Vec3::Zero(), 0.1 * k})};
            server.publish(e);
        }
        auto in_order = [&](BridgeClient& c) {
            for (int k = 0; k < n; ++k) {
                const auto f = c.receive(5.0);
                if (!f || f->envelope.payload["depth"].get<double>() != 0.1 * k) return false;
            }
            return true;
        };
        const bool ok_a = in_order(a), ok_b = in_order(b);
        o.check(ok_a && ok_b, fmt::format("2 clients each receive all {} frames in publish order", n));
    }

    // Stalled client: compare tick wall time with and without it.
    std::vector<double> base, stalled;
    std::uint64_t dropped_base = 0, dropped_stalled = 0, d = 0;
    for (int rep = 0; rep < 3; ++rep) {
        const auto b = tick_times(0, d);
        dropped_base += d;
        base.insert(base.end(), b.begin(), b.end());
        const auto s = tick_times(1, d);
        dropped_stalled += d;
        stalled.insert(stalled.end(), s.begin(), s.end());
    }
    const double base_p99 = percentile(base, 0.99), stalled_p99 = percentile(stalled, 0.99);
    o.check(dropped_stalled > 0 && dropped_base == 0,
            fmt::format("stalled client lost {} frames to drop-oldest, live-only runs lost {}", dropped_stalled,
                        dropped_base));
    o.check(stalled_p99 < 2.0 * base_p99,
            fmt::format("p99 tick wall time {:.3f} ms with a stalled client vs {:.3f} ms baseline (< 2x)",
                        1e3 * stalled_p99, 1e3 * base_p99));
    return o;
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"benchmark ordering", benchmark_ordering},
        {"backend equivalence", backend_equivalence},
        {"dynamics properties", dynamics_properties},
        {"autopilot regressions", autopilot_regressions},
        {"current drift", current_drift},
        {"spawned prop liveness", spawned_prop_liveness},
        {"sensor and semantic suite", sensor_semantic_suite},
        {"waves and buoyancy", waves_buoyancy},
        {"bridge protocol", bridge_protocol},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.check(false, fmt::format("threw: {}", e.what()));
        }
        std::string notes;
        for (const auto& n : o.notes) notes += fmt::format("{}{}", notes.empty() ? "" : "; ", n);
        fmt::print("{} {} {} ({:.1f} s): {}\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, seconds_since(t0),
                   notes);
        std::fflush(stdout);
        if (!o.pass) ++failed;
    }
    fmt::print("{} of {} criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
    return failed == 0 ? 0 : 1;
}
