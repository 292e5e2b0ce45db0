#include "mariner/envfx.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace mariner {

CurrentField CurrentField::make_constant(const Vec3& v) {
    CurrentField f;
    f.kind = Kind::constant;
    f.constant = v;
    f.validate();
    return f;
}

CurrentField CurrentField::make_shear(const Vec3& surface_velocity, double decay_depth) {
    CurrentField f;
    f.kind = Kind::analytic_shear;
    f.surface_velocity = surface_velocity;
    f.decay_depth = decay_depth;
    f.validate();
    return f;
}

CurrentField CurrentField::make_grid(const Vec3& origin, double cell_size, int nx, int ny, int nz,
                                     std::vector<Vec3> values) {
    CurrentField f;
    f.kind = Kind::grid;
    f.origin = origin;
    f.cell_size = cell_size;
    f.nx = nx;
    f.ny = ny;
    f.nz = nz;
    f.values = std::move(values);
    f.validate();
    return f;
}

void CurrentField::validate() const {
    switch (kind) {
        case Kind::constant:
            if (!constant.allFinite()) throw InvalidArgument("current: constant vector must be finite");
            break;
        case Kind::analytic_shear:
            if (!surface_velocity.allFinite()) throw InvalidArgument("current: surface_velocity must be finite");
            if (!(decay_depth > 0.0) || !std::isfinite(decay_depth))
                throw InvalidArgument("current: decay_depth must be positive");
            break;
        case Kind::grid: {
            if (!(cell_size > 0.0) || !std::isfinite(cell_size))
                throw InvalidArgument("current: grid cell_size must be positive");
            if (nx < 1 || ny < 1 || nz < 1) throw InvalidArgument("current: grid dimensions must be >= 1");
            const auto n = static_cast<std::size_t>(nx) * ny * nz;
            if (values.size() != n)
                throw InvalidArgument(fmt::format("current: grid expects {} vectors, got {}", n, values.size()));
            if (!origin.allFinite()) throw InvalidArgument("current: grid origin must be finite");
            for (const auto& v : values) {
                if (!v.allFinite()) throw InvalidArgument("current: grid vectors must be finite");
            }
            break;
        }
    }
}

namespace {

// Lower node index and fraction along one axis, clamped to the grid.
std::pair<int, double> locate(double g, int n) {
    if (n == 1) return {0, 0.0};
    g = std::clamp(g, 0.0, static_cast<double>(n - 1));
    const int i = std::min(static_cast<int>(std::floor(g)), n - 2);
    return {i, g - i};
}

}  // namespace

Vec3 sample_current(const CurrentField& field, const Vec3& position, double /*t*/) {
    switch (field.kind) {
        case CurrentField::Kind::constant:
            return field.constant;
        case CurrentField::Kind::analytic_shear:
            return field.surface_velocity * std::exp(-std::max(position.z(), 0.0) / field.decay_depth);
        case CurrentField::Kind::grid:
            break;
    }
    const Vec3 g = (position - field.origin) / field.cell_size;
    const auto [i, fx] = locate(g.x(), field.nx);
    const auto [j, fy] = locate(g.y(), field.ny);
    const auto [k, fz] = locate(g.z(), field.nz);
    const int i1 = std::min(i + 1, field.nx - 1);
    const int j1 = std::min(j + 1, field.ny - 1);
    const int k1 = std::min(k + 1, field.nz - 1);
    // Fractions of exactly 0 or 1 return a node untouched, so node queries are exact.
    auto lerp = [](const Vec3& a, const Vec3& b, double f) -> Vec3 {
        if (f == 0.0) return a;
        if (f == 1.0) return b;
        return a + f * (b - a);
    };
    const Vec3 c00 = lerp(field.node(i, j, k), field.node(i1, j, k), fx);
    const Vec3 c10 = lerp(field.node(i, j1, k), field.node(i1, j1, k), fx);
    const Vec3 c01 = lerp(field.node(i, j, k1), field.node(i1, j, k1), fx);
    const Vec3 c11 = lerp(field.node(i, j1, k1), field.node(i1, j1, k1), fx);
    return lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz);
}

void write_current_grid(const CurrentField& field, const std::filesystem::path& path) {
    if (field.kind != CurrentField::Kind::grid) throw InvalidArgument("current: only grid fields can be written");
    field.validate();
    nlohmann::json header = {
        {"format", "mariner-current-grid"},
        {"version", 1},
        {"origin", {field.origin.x(), field.origin.y(), field.origin.z()}},
        {"cell_size", field.cell_size},
        {"nx", field.nx},
        {"ny", field.ny},
        {"nz", field.nz},
        {"layout", "float32le xyz triplets, i-major, k fastest"},
    };
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(fmt::format("cannot open {} for writing", path.string()));
    out << header.dump() << '\n';
    for (const auto& v : field.values) {
        for (int a = 0; a < 3; ++a) {
            auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v[a]));
            unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                      static_cast<unsigned char>(bits >> 16),
                                      static_cast<unsigned char>(bits >> 24)};
            out.write(reinterpret_cast<const char*>(bytes), 4);
        }
    }
    if (!out) throw Error(fmt::format("failed writing {}", path.string()));
}

CurrentField read_current_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(fmt::format("cannot open current grid {}", path.string()));
    std::string line;
    std::getline(in, line);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("{}: bad header: {}", path.string(), e.what()));
    }
    if (header.value("format", "") != "mariner-current-grid" || header.value("version", 0) != 1)
        throw FormatError(fmt::format("{}: not a version 1 current grid", path.string()));
    CurrentField f;
    f.kind = CurrentField::Kind::grid;
    try {
        const auto& o = header.at("origin");
        f.origin = Vec3(o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>());
        f.cell_size = header.at("cell_size").get<double>();
        f.nx = header.at("nx").get<int>();
        f.ny = header.at("ny").get<int>();
        f.nz = header.at("nz").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("{}: bad header: {}", path.string(), e.what()));
    }
    if (f.nx < 1 || f.ny < 1 || f.nz < 1) throw FormatError(fmt::format("{}: bad grid dimensions", path.string()));
    const auto n = static_cast<std::size_t>(f.nx) * f.ny * f.nz;
    f.values.resize(n);
    for (auto& v : f.values) {
        for (int a = 0; a < 3; ++a) {
            unsigned char b[4];
            if (!in.read(reinterpret_cast<char*>(b), 4))
                throw FormatError(fmt::format("{}: truncated grid data", path.string()));
            const std::uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
            v[a] = std::bit_cast<float>(bits);
        }
    }
    try {
        f.validate();
    } catch (const InvalidArgument& e) {
        throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return f;
}

void WaveField::validate() const {
    if (!(gravity > 0.0)) throw InvalidArgument("waves: gravity must be positive");
    for (std::size_t i = 0; i < components.size(); ++i) {
        const auto& c = components[i];
        if (!(c.wavelength > 0.0) || !std::isfinite(c.wavelength))
            throw InvalidArgument(fmt::format("waves[{}]: wavelength must be positive", i));
        if (!std::isfinite(c.amplitude) || c.amplitude < 0.0)
            throw InvalidArgument(fmt::format("waves[{}]: amplitude must be non-negative", i));
        if (!(c.steepness >= 0.0 && c.steepness <= 1.0))
            throw InvalidArgument(fmt::format("waves[{}]: steepness must lie in [0, 1]", i));
        if (std::abs(c.direction.norm() - 1.0) > 1e-9)
            throw InvalidArgument(fmt::format("waves[{}]: direction must be a unit vector", i));
        if (c.steepness * c.wavenumber() * c.amplitude > 1.0)
            throw InvalidArgument(fmt::format("waves[{}]: Q k A exceeds 1, surface would self-intersect", i));
    }
}

WaveSample wave_sample(const WaveField& field, double x, double y, double t, double depth) {
    WaveSample s;
    // Partial derivatives of the displaced surface point w.r.t. rest (x, y).
    Vec3 dx(1.0, 0.0, 0.0), dy(0.0, 1.0, 0.0);
    const double decay_depth = std::max(depth, 0.0);
    for (const auto& c : field.components) {
        const double k = c.wavenumber();
        const double omega = field.angular_frequency(c);
        const double theta = k * (c.direction.x() * x + c.direction.y() * y) - omega * t + c.phase;
        const double ct = std::cos(theta), st = std::sin(theta);
        const double a = c.amplitude;
        const double qa = c.steepness * a;
        const Vec2& d = c.direction;

        s.height += a * ct;
        s.displacement -= qa * st * d;

        // z = -sum A cos(theta); x += -Q A d_x sin(theta)
        dx += Vec3(-qa * k * d.x() * d.x() * ct, -qa * k * d.x() * d.y() * ct, a * k * d.x() * st);
        dy += Vec3(-qa * k * d.y() * d.x() * ct, -qa * k * d.y() * d.y() * ct, a * k * d.y() * st);

        const double amp = a * omega * std::exp(-k * decay_depth);
        s.orbital_velocity += Vec3(amp * ct * d.x(), amp * ct * d.y(), -amp * st);
    }
    Vec3 n = dx.cross(dy);
    if (n.z() > 0.0) n = -n;
    s.normal = n.normalized();
    return s;
}

int default_buoyancy_slices(const VehicleParams& params) {
    const double ratio = params.physical.length / params.physical.diameter;
    return std::max(10, static_cast<int>(std::ceil(ratio)));
}

double submerged_fraction(double depth, double radius) {
    if (depth >= radius) return 1.0;
    if (depth <= -radius) return 0.0;
    const double h = depth / radius;
    // Dry cap above the waterline: (acos(h) - h sqrt(1 - h^2)) / pi of the disc.
    return 1.0 - (std::acos(h) - h * std::sqrt(1.0 - h * h)) / kPi;
}

Vec6 buoyancy_force(const WaveField* waves, const VehicleParams& params, const RigidBodyState& state,
                    double t, int slices) {
    if (slices <= 0) slices = default_buoyancy_slices(params);
    const Mat3 r = rotation_of(state.eta);
    const Vec3 pos = state.eta.head<3>();
    const double length = params.physical.length;
    const double radius = 0.5 * params.physical.diameter;
    const double slice_force = params.buoyancy() / slices;

    Vec3 force = Vec3::Zero(), moment = Vec3::Zero();
    for (int k = 0; k < slices; ++k) {
        const double xk = -0.5 * length + (k + 0.5) * length / slices;
        const Vec3 arm = params.hydrostatic.r_cb + Vec3(xk, 0.0, 0.0);
        const Vec3 p = pos + r * arm;
        const double surface_z = waves ? -wave_sample(*waves, p.x(), p.y(), t).height : 0.0;
        const double frac = submerged_fraction(p.z() - surface_z, radius);
        if (frac == 0.0) continue;
        const Vec3 f_body = r.transpose() * Vec3(0.0, 0.0, -slice_force * frac);
        force += f_body;
        moment += arm.cross(f_body);
    }
    Vec6 tau;
    tau << force, moment;
    return tau;
}

}  // namespace mariner
