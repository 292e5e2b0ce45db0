#include "mariner/world.hpp"

#include "mariner/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mariner {

void Heightfield::validate() const {
    if (nx < 2 || ny < 2) {
        throw InvalidArgument(fmt::format("heightfield needs at least 2x2 nodes, got {}x{}", nx, ny));
    }
    if (!(cell_size > 0.0) || !std::isfinite(cell_size)) {
        throw InvalidArgument("heightfield cell_size must be positive");
    }
    if (depth.size() != static_cast<std::size_t>(nx) * ny) {
        throw InvalidArgument("heightfield depth array does not match nx*ny");
    }
    for (std::size_t k = 0; k < depth.size(); ++k) {
        if (!std::isfinite(depth[k])) {
            throw InvalidArgument(fmt::format("non-finite depth at ({}, {})", k / ny, k % ny));
        }
    }
    if (label.class_id < 0) throw InvalidArgument("negative semantic class id");
}

Heightfield Heightfield::flat(double depth, double size_x, double size_y, double cell_size,
                              Vec2 origin) {
    Heightfield hf;
    hf.origin = origin;
    hf.cell_size = cell_size;
    hf.nx = static_cast<int>(std::lround(size_x / cell_size)) + 1;
    hf.ny = static_cast<int>(std::lround(size_y / cell_size)) + 1;
    hf.depth.assign(static_cast<std::size_t>(hf.nx) * hf.ny, depth);
    hf.validate();
    return hf;
}

double height_at(const Heightfield& hf, double x, double y) {
    if (!hf.contains(x, y)) {
        throw InvalidArgument(fmt::format("height query ({}, {}) outside heightfield footprint", x, y));
    }
    const double gx = (x - hf.origin.x()) / hf.cell_size;
    const double gy = (y - hf.origin.y()) / hf.cell_size;
    const int i = std::clamp(static_cast<int>(std::floor(gx)), 0, hf.nx - 2);
    const int j = std::clamp(static_cast<int>(std::floor(gy)), 0, hf.ny - 2);
    const double fx = gx - i;
    const double fy = gy - j;
    const double h00 = hf.at(i, j), h10 = hf.at(i + 1, j);
    const double h01 = hf.at(i, j + 1), h11 = hf.at(i + 1, j + 1);
    return (1.0 - fx) * ((1.0 - fy) * h00 + fy * h01) + fx * ((1.0 - fy) * h10 + fy * h11);
}

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

bool parse_number(std::string_view tok, double& out) {
    if (tok == "nan" || tok == "NaN" || tok == "NAN") {
        out = std::numeric_limits<double>::quiet_NaN();
        return true;
    }
    // from_chars does not accept a leading '+'.
    if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
    const auto* end = tok.data() + tok.size();
    auto [ptr, ec] = std::from_chars(tok.data(), end, out);
    return ec == std::errc{} && ptr == end;
}

std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> toks;
    std::size_t k = 0;
    while (k < line.size()) {
        while (k < line.size() && std::isspace(static_cast<unsigned char>(line[k]))) ++k;
        std::size_t start = k;
        while (k < line.size() && !std::isspace(static_cast<unsigned char>(line[k]))) ++k;
        if (k > start) toks.push_back(line.substr(start, k - start));
    }
    return toks;
}

}  // namespace

Heightfield parse_ascii_grid(std::string_view text, std::optional<double> cell_size,
                             std::optional<Vec2> origin) {
    std::vector<std::string_view> lines;
    for (std::size_t pos = 0; pos <= text.size();) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        lines.push_back(line);
        pos = nl + 1;
    }

    long ncols = -1, nrows = -1;
    double xll = 0.0, yll = 0.0, header_cell = -1.0;
    std::optional<double> nodata;
    std::size_t li = 0;
    for (; li < lines.size(); ++li) {
        auto toks = split_ws(lines[li]);
        if (toks.empty()) continue;
        const std::string key = lower(toks[0]);
        double v = 0.0;
        const bool is_header = key == "ncols" || key == "nrows" || key == "xllcorner" ||
                               key == "yllcorner" || key == "xllcenter" || key == "yllcenter" ||
                               key == "cellsize" || key == "nodata_value";
        if (!is_header) break;
        if (toks.size() != 2 || !parse_number(toks[1], v)) {
            throw FormatError(fmt::format("ascii grid line {}: malformed header '{}'", li + 1, lines[li]));
        }
        if (key == "ncols") ncols = std::lround(v);
        else if (key == "nrows") nrows = std::lround(v);
        else if (key == "xllcorner" || key == "xllcenter") xll = v;
        else if (key == "yllcorner" || key == "yllcenter") yll = v;
        else if (key == "cellsize") header_cell = v;
        else nodata = v;
    }
    if (ncols < 2 || nrows < 2) throw FormatError("ascii grid header needs ncols and nrows >= 2");

    Heightfield hf;
    hf.nx = static_cast<int>(nrows);
    hf.ny = static_cast<int>(ncols);
    hf.cell_size = cell_size.value_or(header_cell);
    if (!(hf.cell_size > 0.0)) throw FormatError("ascii grid needs a positive cellsize");
    hf.origin = origin.value_or(Vec2(xll, yll));
    hf.depth.reserve(static_cast<std::size_t>(nrows) * ncols);

    long row = 0;
    for (; li < lines.size() && row < nrows; ++li) {
        auto toks = split_ws(lines[li]);
        if (toks.empty()) continue;
        if (static_cast<long>(toks.size()) != ncols) {
            throw FormatError(fmt::format("ascii grid row {}: expected {} values, found {}", row,
                                          ncols, toks.size()));
        }
        for (long col = 0; col < ncols; ++col) {
            double v = 0.0;
            if (!parse_number(toks[col], v)) {
                throw FormatError(fmt::format("ascii grid cell ({}, {}): non-numeric value '{}'", row,
                                              col, toks[col]));
            }
            if (!std::isfinite(v) || (nodata && v == *nodata)) {
                throw FormatError(fmt::format("ascii grid cell ({}, {}): missing or non-finite value",
                                              row, col));
            }
            hf.depth.push_back(v);
        }
        ++row;
    }
    if (row != nrows) {
        throw FormatError(fmt::format("ascii grid: expected {} rows, found {}", nrows, row));
    }
    for (; li < lines.size(); ++li) {
        if (!split_ws(lines[li]).empty()) throw FormatError("ascii grid: trailing data after last row");
    }
    hf.validate();
    return hf;
}

Heightfield load_bathymetry(const std::filesystem::path& grid_file, std::optional<double> cell_size,
                            std::optional<Vec2> origin) {
    std::ifstream in(grid_file, std::ios::binary);
    if (!in) throw Error(fmt::format("bathymetry file not found: {}", grid_file.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_ascii_grid(ss.str(), cell_size, origin);
}

std::string write_ascii_grid(const Heightfield& hf) {
    std::string out = fmt::format("ncols {}\nnrows {}\nxllcorner {}\nyllcorner {}\ncellsize {}\n",
                                  hf.ny, hf.nx, hf.origin.x(), hf.origin.y(), hf.cell_size);
    for (int i = 0; i < hf.nx; ++i) {
        for (int j = 0; j < hf.ny; ++j) {
            if (j > 0) out += ' ';
            out += fmt::format("{}", hf.at(i, j));
        }
        out += '\n';
    }
    return out;
}

Aabb bounds_of(const Mesh& mesh) {
    Aabb box;
    for (const auto& t : mesh) {
        box.extend(t.a);
        box.extend(t.b);
        box.extend(t.c);
    }
    return box;
}

Mesh make_box(const Vec3& size) {
    const Vec3 h = 0.5 * size;
    auto v = [&](int sx, int sy, int sz) { return Vec3(sx * h.x(), sy * h.y(), sz * h.z()); };
    // Each face as two triangles, wound counter-clockwise seen from outside.
    const int faces[6][4][3] = {
        {{1, -1, -1}, {1, 1, -1}, {1, 1, 1}, {1, -1, 1}},
        {{-1, -1, -1}, {-1, -1, 1}, {-1, 1, 1}, {-1, 1, -1}},
        {{-1, 1, -1}, {-1, 1, 1}, {1, 1, 1}, {1, 1, -1}},
        {{-1, -1, -1}, {1, -1, -1}, {1, -1, 1}, {-1, -1, 1}},
        {{-1, -1, 1}, {1, -1, 1}, {1, 1, 1}, {-1, 1, 1}},
        {{-1, -1, -1}, {-1, 1, -1}, {1, 1, -1}, {1, -1, -1}},
    };
    Mesh mesh;
    mesh.reserve(12);
    for (const auto& f : faces) {
        const Vec3 p0 = v(f[0][0], f[0][1], f[0][2]);
        const Vec3 p1 = v(f[1][0], f[1][1], f[1][2]);
        const Vec3 p2 = v(f[2][0], f[2][1], f[2][2]);
        const Vec3 p3 = v(f[3][0], f[3][1], f[3][2]);
        mesh.push_back({p0, p1, p2});
        mesh.push_back({p0, p2, p3});
    }
    return mesh;
}

World::World(Heightfield hf) {
    hf.validate();
    const auto [lo, hi] = std::minmax_element(hf.depth.begin(), hf.depth.end());
    terrain_z_ = Vec2(*lo, *hi);
    heightfield_ = std::move(hf);
}

void World::set_heightfield(Heightfield hf) {
    hf.validate();
    const auto [lo, hi] = std::minmax_element(hf.depth.begin(), hf.depth.end());
    terrain_z_ = Vec2(*lo, *hi);
    heightfield_ = std::move(hf);
    ++revision_;
}

const Prop* World::find_prop(PropId id) const {
    auto it = std::find_if(props_.begin(), props_.end(), [id](const Prop& p) { return p.id == id; });
    return it == props_.end() ? nullptr : &*it;
}

PropId World::spawn_prop(Mesh mesh, const Vec6& pose, SemanticLabel label) {
    if (mesh.empty()) throw InvalidArgument("cannot spawn a prop with an empty mesh");
    if (!pose.allFinite()) throw InvalidArgument("prop pose must be finite");
    if (label.class_id < 0) throw InvalidArgument("negative semantic class id");
    for (const auto& t : mesh) {
        if (!t.a.allFinite() || !t.b.allFinite() || !t.c.allFinite()) {
            throw InvalidArgument("prop mesh has non-finite vertices");
        }
    }
    Prop p;
    p.id = next_id_++;
    p.pose = pose;
    p.label = label;
    p.generation = ++generation_;
    const Transform tf = Transform::from_pose(pose);
    p.world_mesh.reserve(mesh.size());
    for (const auto& t : mesh) p.world_mesh.push_back({tf.apply(t.a), tf.apply(t.b), tf.apply(t.c)});
    p.bounds = bounds_of(p.world_mesh);
    p.mesh = std::move(mesh);
    props_.push_back(std::move(p));
    ++revision_;
    return props_.back().id;
}

bool World::remove_prop(PropId id) {
    auto it = std::find_if(props_.begin(), props_.end(), [id](const Prop& p) { return p.id == id; });
    if (it == props_.end()) return false;
    props_.erase(it);
    ++revision_;
    return true;
}

Aabb World::bounds() const {
    Aabb box;
    if (heightfield_) {
        const auto& hf = *heightfield_;
        box.extend(Vec3(hf.origin.x(), hf.origin.y(), terrain_z_.x()));
        box.extend(Vec3(hf.x_max(), hf.y_max(), terrain_z_.y()));
    }
    for (const auto& p : props_) box.extend(p.bounds);
    return box;
}

namespace {

bool same_mesh(const Mesh& a, const Mesh& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (a[k].a != b[k].a || a[k].b != b[k].b || a[k].c != b[k].c) return false;
    }
    return true;
}

}  // namespace

bool operator==(const World& a, const World& b) {
    if (a.revision_ != b.revision_ || a.next_id_ != b.next_id_ || a.generation_ != b.generation_) {
        return false;
    }
    if (a.heightfield_.has_value() != b.heightfield_.has_value()) return false;
    if (a.heightfield_) {
        const auto& x = *a.heightfield_;
        const auto& y = *b.heightfield_;
        if (x.origin != y.origin || x.cell_size != y.cell_size || x.nx != y.nx || x.ny != y.ny ||
            x.depth != y.depth || !(x.label == y.label)) {
            return false;
        }
    }
    if (a.props_.size() != b.props_.size()) return false;
    for (std::size_t k = 0; k < a.props_.size(); ++k) {
        const auto& p = a.props_[k];
        const auto& q = b.props_[k];
        if (p.id != q.id || p.pose != q.pose || !(p.label == q.label) ||
            p.generation != q.generation || !same_mesh(p.mesh, q.mesh)) {
            return false;
        }
    }
    return true;
}

std::size_t expected_prop_count(const GenSpec& spec) {
    return static_cast<std::size_t>(std::llround(spec.density * spec.size_x * spec.size_y / 100.0));
}

namespace {

Heightfield generate_terrain(const GenSpec& spec, Rng& rng) {
    Heightfield hf = Heightfield::flat(spec.base_depth, spec.size_x, spec.size_y, spec.cell_size);
    if (spec.terrain == "flat") return hf;

    struct Wave {
        double kx, ky, phase, amp;
    };
    std::vector<Wave> waves;
    for (int k = 0; k < 4; ++k) {
        const double wavelength = rng.uniform(15.0, 60.0);
        const double heading = rng.uniform(0.0, 2.0 * kPi);
        const double kmag = 2.0 * kPi / wavelength;
        waves.push_back({kmag * std::cos(heading), kmag * std::sin(heading), rng.uniform(0.0, 2.0 * kPi),
                         rng.uniform(0.5, 1.0)});
    }
    double amp_sum = 0.0;
    for (const auto& w : waves) amp_sum += w.amp;

    const double channel_y = spec.size_y * rng.uniform(0.35, 0.65);
    const double channel_w = spec.size_y * 0.12;
    const double meander = rng.uniform(0.5, 1.5) * channel_w;
    const double meander_k = 2.0 * kPi / std::max(spec.size_x, 1.0);

    for (int i = 0; i < hf.nx; ++i) {
        for (int j = 0; j < hf.ny; ++j) {
            const double x = i * hf.cell_size;
            const double y = j * hf.cell_size;
            double noise = 0.0;
            for (const auto& w : waves) noise += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
            noise /= amp_sum;
            double d = spec.base_depth;
            if (spec.terrain == "rolling") {
                d += spec.relief * noise;
            } else if (spec.terrain == "canyon") {
                const double off = (y - channel_y - meander * std::sin(meander_k * x)) / channel_w;
                d += spec.relief * (2.0 * std::exp(-off * off) + 0.25 * noise);
            } else {
                throw InvalidArgument(fmt::format("unknown terrain type '{}'", spec.terrain));
            }
            hf.at(i, j) = d;
        }
    }
    return hf;
}

}  // namespace

World generate_world(const GenSpec& spec, std::uint64_t seed) {
    if (!(spec.density >= 0.0)) throw InvalidArgument("prop density must be non-negative");
    if (spec.density > 0.0 && spec.prop_classes.empty()) {
        throw InvalidArgument("prop density > 0 requires at least one prop class");
    }
    if (!(spec.size_x > 0.0 && spec.size_y > 0.0 && spec.cell_size > 0.0)) {
        throw InvalidArgument("generated world needs positive extents and cell size");
    }
    Rng rng(seed);
    World world(generate_terrain(spec, rng));
    const auto& hf = *world.heightfield();

    const std::size_t count = expected_prop_count(spec);
    for (std::size_t n = 0; n < count; ++n) {
        const auto& cls = spec.prop_classes[rng.below(spec.prop_classes.size())];
        const double inset = 0.5 * std::hypot(cls.size.x(), cls.size.y());
        const double x = rng.uniform(std::min(inset, spec.size_x / 2), std::max(spec.size_x - inset, spec.size_x / 2));
        const double y = rng.uniform(std::min(inset, spec.size_y / 2), std::max(spec.size_y - inset, spec.size_y / 2));
        const double yaw = rng.uniform(-kPi, kPi);
        // Bottom face rests on the terrain below the prop centre.
        const double ground = height_at(hf, x, y);
        Vec6 pose;
        pose << x, y, ground - 0.5 * cls.size.z(), 0.0, 0.0, yaw;
        world.spawn_prop(make_box(cls.size), pose,
                         SemanticLabel{cls.class_id, static_cast<std::int64_t>(n + 1)});
    }
    return world;
}

World make_dam_world() {
    constexpr double kLength = 60.0;
    constexpr double kWidth = 40.0;
    constexpr double kCell = 0.5;
    Heightfield hf = Heightfield::flat(0.0, kLength, kWidth, kCell);
    for (int i = 0; i < hf.nx; ++i) {
        for (int j = 0; j < hf.ny; ++j) {
            const double x = i * kCell;
            const double y = j * kCell;
            // Reservoir bowl deepening toward the dam at the north end.
            const double across = (y - 0.5 * kWidth) / (0.5 * kWidth);
            hf.at(i, j) = 4.0 + 9.0 * (x / kLength) + 3.0 * (1.0 - across * across) +
                          0.4 * std::sin(0.35 * x) * std::cos(0.27 * y);
        }
    }
    World world(std::move(hf));

    Vec6 dam;
    dam << 57.0, 20.0, 6.0, 0.0, 0.0, 0.0;
    world.spawn_prop(make_box(Vec3(2.0, 40.0, 18.0)), dam, {classes::kDam, 1});

    Rng rng(509);
    for (int k = 0; k < 12; ++k) {
        const bool pipe = k % 3 == 0;
        const Vec3 size = pipe ? Vec3(6.0, 0.6, 0.6) : Vec3::Constant(rng.uniform(0.5, 1.5));
        const double x = rng.uniform(5.0, 52.0);
        const double y = rng.uniform(5.0, 35.0);
        const double ground = height_at(*world.heightfield(), x, y);
        Vec6 pose;
        pose << x, y, ground - 0.5 * size.z(), 0.0, 0.0, rng.uniform(-kPi, kPi);
        world.spawn_prop(make_box(size), pose,
                         {pipe ? classes::kPipe : classes::kDebris, static_cast<std::int64_t>(k + 2)});
    }
    return world;
}

}  // namespace mariner
