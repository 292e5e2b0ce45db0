#include "mariner/sensors.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace mariner {

const char* to_string(SensorKind kind) {
    switch (kind) {
        case SensorKind::echo: return "echo";
        case SensorKind::multibeam: return "multibeam";
        case SensorKind::sidescan: return "sidescan";
        case SensorKind::lidar: return "lidar";
        case SensorKind::imu: return "imu";
        case SensorKind::dvl: return "dvl";
        case SensorKind::depth: return "depth";
    }
    return "?";
}

const char* to_string(Backend backend) { return backend == Backend::octree ? "octree" : "raycast"; }

SensorKind sensor_kind_from_string(const std::string& s) {
    for (auto k : {SensorKind::echo, SensorKind::multibeam, SensorKind::sidescan, SensorKind::lidar, SensorKind::imu,
                   SensorKind::dvl, SensorKind::depth}) {
        if (s == to_string(k)) return k;
    }
    throw InvalidArgument(fmt::format("unknown sensor kind '{}'", s));
}

Backend backend_from_string(const std::string& s) {
    if (s == "octree") return Backend::octree;
    if (s == "raycast") return Backend::raycast;
    throw InvalidArgument(fmt::format("unknown backend '{}'", s));
}

void SensorSpec::validate() const {
    auto fail = [&](const char* field, const char* what) {
        throw InvalidArgument(fmt::format("sensor '{}': {} {}", name, field, what));
    };
    if (rate_ticks < 1) fail("rate_ticks", "must be >= 1");
    if (!mount_pose.allFinite()) fail("mount_pose", "must be finite");
    if (!(max_range > 0.0) || !std::isfinite(max_range)) fail("max_range", "must be positive");
    if (!(leaf_size > 0.0)) fail("leaf_size", "must be positive");
    if (n_beams < 1) fail("n_beams", "must be >= 1");
    if (!(swath_aperture >= 0.0) || swath_aperture > kPi) fail("swath_aperture", "must lie in [0, pi]");
    if (n_bins < 1) fail("n_bins", "must be >= 1");
    if (rays_per_bin < 1) fail("rays_per_bin", "must be >= 1");
    if (!(vertical_aperture >= 0.0) || vertical_aperture > kPi) fail("vertical_aperture", "must lie in [0, pi]");
    if (n_lasers < 1) fail("n_lasers", "must be >= 1");
    if (points_per_rotation < 1) fail("points_per_rotation", "must be >= 1");
    if (!(fov_vertical >= 0.0) || fov_vertical > kPi) fail("fov_vertical", "must lie in [0, pi]");
    if (!(fov_horizontal >= 0.0) || fov_horizontal > 2.0 * kPi) fail("fov_horizontal", "must lie in [0, 2 pi]");
    const auto& n = noise;
    if (n.range_std < 0.0 || n.accel_std < 0.0 || n.gyro_std < 0.0 || n.velocity_std < 0.0 || n.depth_std < 0.0)
        fail("noise", "standard deviations must be non-negative");
}

bool operator==(const SensorSpec& a, const SensorSpec& b) {
    return a.name == b.name && a.kind == b.kind && a.mount_pose == b.mount_pose && a.rate_ticks == b.rate_ticks &&
           a.backend == b.backend && a.semantic == b.semantic && a.noise == b.noise && a.max_range == b.max_range &&
           a.leaf_size == b.leaf_size && a.n_beams == b.n_beams && a.swath_aperture == b.swath_aperture &&
           a.n_bins == b.n_bins && a.tilt == b.tilt && a.vertical_aperture == b.vertical_aperture &&
           a.rays_per_bin == b.rays_per_bin && a.n_lasers == b.n_lasers && a.fov_vertical == b.fov_vertical &&
           a.fov_horizontal == b.fov_horizontal && a.points_per_rotation == b.points_per_rotation;
}

std::optional<Hit> cast_ray(const SensorContext& ctx, Backend backend, const Ray& ray) {
    if (!ctx.world) throw InvalidArgument("sensor context has no world");
    QueryStats scratch;
    QueryStats& stats = ctx.stats ? *ctx.stats : scratch;
    if (backend == Backend::octree) {
        if (!ctx.octree) throw InvalidArgument("octree backend requested without an octree");
        return octree_cast(*ctx.octree, *ctx.world, ray, stats);
    }
    return direct_cast(*ctx.world, ray, stats);
}

double echo_intensity(double range, const Vec3& direction, const Vec3& normal) {
    const double cos_inc = -direction.normalized().dot(normal);
    const double r = std::max(range, 1.0);
    return std::clamp(cos_inc / (r * r), 0.0, 1.0);
}

SensorPose sensor_pose(const Vec6& body_eta, const Vec6& mount_pose) {
    const Mat3 body = rotation_of(body_eta);
    return {body_eta.head<3>() + body * mount_pose.head<3>(), body * rotation_of(mount_pose)};
}

namespace {

BeamReturn beam(const SensorContext& ctx, const SensorSpec& spec, const Vec3& origin, const Vec3& direction) {
    const auto hit = cast_ray(ctx, spec.backend, Ray::make(origin, direction, spec.max_range));
    BeamReturn out;
    if (!hit) return out;
    out.range = hit->range;
    out.intensity = echo_intensity(hit->range, direction, hit->normal);
    if (spec.semantic) out.label = hit->label;
    return out;
}

// n angles spread over `aperture` centred on zero; a single sample sits at 0.
std::vector<double> fan(int n, double aperture) {
    std::vector<double> a(n, 0.0);
    if (n == 1) return a;
    for (int i = 0; i < n; ++i) a[i] = -0.5 * aperture + aperture * i / (n - 1);
    return a;
}

}  // namespace

BeamReturn echo_sounder(const SensorContext& ctx, const SensorPose& pose, const SensorSpec& spec) {
    return beam(ctx, spec, pose.origin, pose.rotation * Vec3::UnitX());
}

MultibeamReturn multibeam_scan(const SensorContext& ctx, const SensorPose& pose, const SensorSpec& spec) {
    MultibeamReturn out;
    out.angles = fan(spec.n_beams, spec.swath_aperture);
    out.beams.reserve(out.angles.size());
    for (double b : out.angles) {
        const Vec3 dir = pose.rotation * Vec3(std::cos(b), std::sin(b), 0.0);
        out.beams.push_back(beam(ctx, spec, pose.origin, dir));
    }
    return out;
}

SidescanLine sidescan_line(const SensorContext& ctx, const SensorPose& pose, const SensorSpec& spec) {
    const int bins = spec.n_bins;
    const int rays = bins * spec.rays_per_bin;
    const double width = spec.vertical_aperture / rays;  // angular weight of one ray
    SidescanLine line;
    line.port.assign(bins, 0.0);
    line.starboard.assign(bins, 0.0);

    const double bin_width = spec.max_range / bins;
    auto side = [&](double sign, std::vector<double>& energy, std::vector<std::optional<SemanticLabel>>& labels) {
        struct Sample {
            double range = kMissRange;
            double energy = 0.0;
            SemanticLabel label;
        };
        std::vector<Sample> samples(rays);
        for (int i = 0; i < rays; ++i) {
            const double dep = spec.tilt - 0.5 * spec.vertical_aperture + spec.vertical_aperture * (i + 0.5) / rays;
            const Vec3 dir = pose.rotation * Vec3(0.0, sign * std::cos(dep), std::sin(dep));
            const auto hit = cast_ray(ctx, spec.backend, Ray::make(pose.origin, dir, spec.max_range));
            if (!hit) continue;
            samples[i] = {hit->range, echo_intensity(hit->range, dir, hit->normal) * width, hit->label};
        }
        // Each ray covers the slant ranges halfway to its neighbours on the
        // same surface; its energy is spread uniformly over that interval.
        // Without this the bins alias against the ray spacing.
        const double jump = 4.0 * bin_width;
        auto edge = [&](int i, int n) {
            if (n < 0 || n >= rays || !std::isfinite(samples[n].range)) return samples[i].range;
            if (std::abs(samples[n].range - samples[i].range) > jump) return samples[i].range;
            return 0.5 * (samples[i].range + samples[n].range);
        };
        std::vector<std::map<std::pair<int, std::int64_t>, double>> votes(spec.semantic ? bins : 0);
        auto deposit = [&](int bin, double e, const SemanticLabel& label) {
            bin = std::clamp(bin, 0, bins - 1);
            energy[bin] += e;
            if (spec.semantic) votes[bin][{label.class_id, label.instance_id}] += e;
        };
        for (int i = 0; i < rays; ++i) {
            const Sample& s = samples[i];
            if (!std::isfinite(s.range)) continue;
            const double a = edge(i, i - 1), b = edge(i, i + 1);
            const double lo = std::min({a, b, s.range}), hi = std::max({a, b, s.range});
            const int first = static_cast<int>(lo / bin_width), last = static_cast<int>(hi / bin_width);
            if (first == last || hi - lo < 1e-12) {
                deposit(static_cast<int>(s.range / bin_width), s.energy, s.label);
                continue;
            }
            for (int bin = first; bin <= last; ++bin) {
                const double overlap = std::min(hi, (bin + 1) * bin_width) - std::max(lo, bin * bin_width);
                if (overlap > 0.0) deposit(bin, s.energy * overlap / (hi - lo), s.label);
            }
        }
        if (spec.semantic) {
            labels.assign(bins, std::nullopt);
            for (int b = 0; b < bins; ++b) {
                if (votes[b].empty()) continue;
                const auto best = std::max_element(votes[b].begin(), votes[b].end(),
                                                   [](const auto& x, const auto& y) { return x.second < y.second; });
                labels[b] = SemanticLabel{best->first.first, best->first.second};
            }
        }
    };
    side(-1.0, line.port, line.port_labels);
    side(1.0, line.starboard, line.starboard_labels);

    double peak = 0.0;
    for (double v : line.port) peak = std::max(peak, v);
    for (double v : line.starboard) peak = std::max(peak, v);
    if (peak > 0.0) {
        for (double& v : line.port) v /= peak;
        for (double& v : line.starboard) v /= peak;
    }
    return line;
}

PointCloud lidar_scan(const SensorContext& ctx, const SensorPose& pose, const SensorSpec& spec) {
    PointCloud cloud;
    const std::vector<double> elevation = fan(spec.n_lasers, spec.fov_vertical);
    std::vector<double> azimuth;
    if (spec.fov_horizontal >= 2.0 * kPi) {
        // Full rotation: no duplicate sample at +pi.
        for (int j = 0; j < spec.points_per_rotation; ++j)
            azimuth.push_back(-kPi + 2.0 * kPi * j / spec.points_per_rotation);
    } else {
        azimuth = fan(spec.points_per_rotation, spec.fov_horizontal);
    }
    for (double el : elevation) {
        for (double az : azimuth) {
            const Vec3 local(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), -std::sin(el));
            const Vec3 dir = pose.rotation * local;
            const auto hit = cast_ray(ctx, spec.backend, Ray::make(pose.origin, dir, spec.max_range));
            if (!hit) continue;
            CloudPoint p;
            p.position = hit->range * local;
            p.intensity = echo_intensity(hit->range, dir, hit->normal);
            if (spec.semantic) p.label = hit->label;
            cloud.points.push_back(p);
        }
    }
    return cloud;
}

NavReading nav_suite(const RigidBodyState& state, const SensorNoise& noise, Rng& rng, double gravity,
                     const Vec6& nu_dot) {
    const Vec3 v = state.nu.head<3>();
    const Vec3 w = state.nu.tail<3>();
    const Vec3 g_body = rotation_of(state.eta).transpose() * Vec3(0.0, 0.0, gravity);
    NavReading r;
    r.specific_force = nu_dot.head<3>() + w.cross(v) - g_body;
    r.angular_rate = w;
    r.velocity = v;
    r.depth = state.eta[2];
    auto jitter = [&](Vec3& x, double s) {
        if (s > 0.0) x += Vec3(rng.normal(0.0, s), rng.normal(0.0, s), rng.normal(0.0, s));
    };
    jitter(r.specific_force, noise.accel_std);
    jitter(r.angular_rate, noise.gyro_std);
    jitter(r.velocity, noise.velocity_std);
    if (noise.depth_std > 0.0) r.depth += rng.normal(0.0, noise.depth_std);
    return r;
}

void apply_sonar_noise(BeamReturn& b, const SensorNoise& noise, Rng& rng) {
    if (!b.hit()) return;
    if (noise.range_std > 0.0) b.range = std::max(0.0, b.range + rng.normal(0.0, noise.range_std));
    if (noise.speckle) {
        // Unit-mean Rayleigh: sigma = sqrt(2 / pi).
        const double u = std::max(rng.uniform(), 1e-300);
        const double sigma = std::sqrt(2.0 / kPi);
        b.intensity = std::clamp(b.intensity * sigma * std::sqrt(-2.0 * std::log(u)), 0.0, 1.0);
    }
}

SensorReading evaluate_sensor(const SensorSpec& spec, const SensorContext& ctx, const RigidBodyState& state,
                              Rng& rng, double gravity, const Vec6& nu_dot) {
    const SensorPose pose = sensor_pose(state.eta, spec.mount_pose);
    switch (spec.kind) {
        case SensorKind::echo: {
            auto b = echo_sounder(ctx, pose, spec);
            apply_sonar_noise(b, spec.noise, rng);
            return b;
        }
        case SensorKind::multibeam: {
            auto m = multibeam_scan(ctx, pose, spec);
            for (auto& b : m.beams) apply_sonar_noise(b, spec.noise, rng);
            return m;
        }
        case SensorKind::sidescan:
            return sidescan_line(ctx, pose, spec);
        case SensorKind::lidar: {
            auto cloud = lidar_scan(ctx, pose, spec);
            if (spec.noise.range_std > 0.0) {
                for (auto& p : cloud.points) {
                    const double r = p.position.norm();
                    p.position *= std::max(0.0, r + rng.normal(0.0, spec.noise.range_std)) / r;
                }
            }
            return cloud;
        }
        case SensorKind::imu:
        case SensorKind::dvl:
        case SensorKind::depth:
            return nav_suite(state, spec.noise, rng, gravity, nu_dot);
    }
    throw InvalidArgument("unknown sensor kind");
}

void write_pgm(const std::filesystem::path& path, const std::vector<std::vector<double>>& rows) {
    std::size_t width = 0;
    for (const auto& r : rows) width = std::max(width, r.size());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(fmt::format("cannot open {} for writing", path.string()));
    out << "P5\n" << width << ' ' << rows.size() << "\n255\n";
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < width; ++i) {
            const double v = i < r.size() ? std::clamp(r[i], 0.0, 1.0) : 0.0;
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
    }
    if (!out) throw Error(fmt::format("failed writing {}", path.string()));
}

void write_xyz(std::ostream& out, const PointCloud& cloud) {
    for (const auto& p : cloud.points) {
        out << fmt::format("{:.6f} {:.6f} {:.6f} {:.6f}", p.position.x(), p.position.y(), p.position.z(),
                           p.intensity);
        if (p.label) out << fmt::format(" {} {}", p.label->class_id, p.label->instance_id);
        out << '\n';
    }
}

}  // namespace mariner
