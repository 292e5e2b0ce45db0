#pragma once

#include "mariner/core.hpp"

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mariner {

/// Regular bathymetry grid. Node (i, j) sits at origin + (i, j) * cell_size,
/// i along north (x), j along east (y). Depth is positive down.
struct Heightfield {
    Vec2 origin = Vec2::Zero();
    double cell_size = 1.0;
    int nx = 0;
    int ny = 0;
    std::vector<double> depth;  // row-major, index i * ny + j
    SemanticLabel label{1, 0};

    double at(int i, int j) const { return depth[static_cast<std::size_t>(i) * ny + j]; }
    double& at(int i, int j) { return depth[static_cast<std::size_t>(i) * ny + j]; }

    double x_max() const { return origin.x() + (nx - 1) * cell_size; }
    double y_max() const { return origin.y() + (ny - 1) * cell_size; }
    bool contains(double x, double y) const {
        return x >= origin.x() && x <= x_max() && y >= origin.y() && y <= y_max();
    }

    /// Throws InvalidArgument when the grid breaks its invariants.
    void validate() const;

    static Heightfield flat(double depth, double size_x, double size_y, double cell_size,
                            Vec2 origin = Vec2::Zero());
};

/// Bilinear depth at (x, y). Throws InvalidArgument outside the footprint.
double height_at(const Heightfield& hf, double x, double y);

/// Parse the Esri ASCII grid subset (ncols/nrows/xllcorner/yllcorner/cellsize/
/// NODATA_value header). depth(i, j) is the value at file row i, column j.
/// cell_size / origin override the header values when given.
Heightfield parse_ascii_grid(std::string_view text, std::optional<double> cell_size = {},
                             std::optional<Vec2> origin = {});

Heightfield load_bathymetry(const std::filesystem::path& grid_file,
                            std::optional<double> cell_size = {},
                            std::optional<Vec2> origin = {});

std::string write_ascii_grid(const Heightfield& hf);

struct Triangle {
    Vec3 a, b, c;
};
using Mesh = std::vector<Triangle>;

struct Aabb {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

    bool empty() const { return lo.x() > hi.x(); }
    void extend(const Vec3& p) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    void extend(const Aabb& o) {
        if (o.empty()) return;
        extend(o.lo);
        extend(o.hi);
    }
};

Aabb bounds_of(const Mesh& mesh);

/// Axis-aligned box mesh centred on the local origin (12 triangles).
Mesh make_box(const Vec3& size);

using PropId = std::uint64_t;

struct Prop {
    PropId id = 0;
    Mesh mesh;  // local frame
    Vec6 pose = Vec6::Zero();
    SemanticLabel label;
    std::uint64_t generation = 0;

    Mesh world_mesh;  // mesh transformed by pose, cached at spawn
    Aabb bounds;
};

/// Bathymetry plus rigid, static props. Every mutation bumps revision().
class World {
public:
    World() = default;
    explicit World(Heightfield hf);

    const std::optional<Heightfield>& heightfield() const { return heightfield_; }
    const std::vector<Prop>& props() const { return props_; }
    std::uint64_t revision() const { return revision_; }

    const Prop* find_prop(PropId id) const;

    /// Throws InvalidArgument for an empty or non-finite mesh.
    PropId spawn_prop(Mesh mesh, const Vec6& pose, SemanticLabel label);
    bool remove_prop(PropId id);

    void set_heightfield(Heightfield hf);

    /// Shallowest and deepest heightfield node, cached at assignment.
    double terrain_min_depth() const { return terrain_z_.x(); }
    double terrain_max_depth() const { return terrain_z_.y(); }

    bool empty() const { return !heightfield_ && props_.empty(); }

    /// Bounding box of terrain and props; empty box for an empty world.
    Aabb bounds() const;

    friend bool operator==(const World& a, const World& b);

private:
    std::optional<Heightfield> heightfield_;
    Vec2 terrain_z_ = Vec2::Zero();
    std::vector<Prop> props_;
    std::uint64_t revision_ = 0;
    PropId next_id_ = 1;
    std::uint64_t generation_ = 0;
};

struct PropClass {
    std::string name;
    int class_id = 2;
    Vec3 size = Vec3::Ones();

    friend bool operator==(const PropClass&, const PropClass&) = default;
};

/// Procedural environment parameters. density is props per 100 m^2.
struct GenSpec {
    std::string terrain = "flat";  // flat | rolling | canyon
    double size_x = 100.0;
    double size_y = 100.0;
    double cell_size = 1.0;
    double base_depth = 20.0;
    double relief = 2.0;
    std::vector<PropClass> prop_classes;
    double density = 0.0;

    friend bool operator==(const GenSpec&, const GenSpec&) = default;
};

/// Deterministic for a fixed (spec, seed). Props rest on the terrain.
World generate_world(const GenSpec& spec, std::uint64_t seed);

/// Expected prop count for a spec: density * area / 100, rounded.
std::size_t expected_prop_count(const GenSpec& spec);

/// Reservoir floor sloping toward a dam wall, plus debris. Used by the
/// benchmark as the default scene.
World make_dam_world();

/// Semantic class ids used by the bundled worlds.
namespace classes {
inline constexpr int kUnlabeled = 0;
inline constexpr int kSeafloor = 1;
inline constexpr int kRock = 2;
inline constexpr int kPipe = 3;
inline constexpr int kDebris = 4;
inline constexpr int kDam = 5;
inline constexpr int kSpawned = 6;
}  // namespace classes

}  // namespace mariner
