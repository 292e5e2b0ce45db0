#include "mariner/accel.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

namespace mariner {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

using Clock = std::chrono::steady_clock;

/// Slab test. Returns the parametric interval of the ray inside the box,
/// clipped to [t_lo, t_hi]; empty optional when disjoint.
std::optional<std::pair<double, double>> slab(const Vec3& origin, const Vec3& inv_dir, const Vec3& lo,
                                              const Vec3& hi, double t_lo, double t_hi) {
    for (int a = 0; a < 3; ++a) {
        if (std::isinf(inv_dir[a])) {
            if (origin[a] < lo[a] || origin[a] > hi[a]) return std::nullopt;
            continue;
        }
        double t0 = (lo[a] - origin[a]) * inv_dir[a];
        double t1 = (hi[a] - origin[a]) * inv_dir[a];
        if (t0 > t1) std::swap(t0, t1);
        t_lo = std::max(t_lo, t0);
        t_hi = std::min(t_hi, t1);
        if (t_lo > t_hi) return std::nullopt;
    }
    return std::make_pair(t_lo, t_hi);
}

Vec3 inverse_direction(const Vec3& d) {
    return {d.x() != 0.0 ? 1.0 / d.x() : kInf, d.y() != 0.0 ? 1.0 / d.y() : kInf,
            d.z() != 0.0 ? 1.0 / d.z() : kInf};
}

Vec3 facing(Vec3 n, const Vec3& dir) { return n.dot(dir) > 0.0 ? Vec3(-n) : n; }

// ---------------------------------------------------------------------------
// Terrain helpers

struct Patch {
    // h(u, v) = a + b u + c v + e u v over the unit cell
    double a, b, c, e;
};

Patch patch_of(const Heightfield& hf, int i, int j) {
    const double h00 = hf.at(i, j), h10 = hf.at(i + 1, j);
    const double h01 = hf.at(i, j + 1), h11 = hf.at(i + 1, j + 1);
    return {h00, h10 - h00, h01 - h00, h00 - h10 - h01 + h11};
}

Vec3 terrain_normal(const Heightfield& hf, double x, double y) {
    const double gx = (x - hf.origin.x()) / hf.cell_size;
    const double gy = (y - hf.origin.y()) / hf.cell_size;
    const int i = std::clamp(static_cast<int>(std::floor(gx)), 0, hf.nx - 2);
    const int j = std::clamp(static_cast<int>(std::floor(gy)), 0, hf.ny - 2);
    const Patch p = patch_of(hf, i, j);
    const double u = gx - i, v = gy - j;
    const double hx = (p.b + p.e * v) / hf.cell_size;
    const double hy = (p.c + p.e * u) / hf.cell_size;
    return Vec3(hx, hy, -1.0).normalized();
}

/// Smallest root of q2 s^2 + q1 s + q0 in [0, s_max], or +inf.
double first_root(double q2, double q1, double q0, double s_max) {
    constexpr double kEps = 1e-12;
    double best = kInf;
    auto consider = [&](double s) {
        if (s >= -kEps && s <= s_max + kEps && s < best) best = std::clamp(s, 0.0, s_max);
    };
    const double scale = std::abs(q1) + std::abs(q0) + 1.0;
    if (std::abs(q2) <= 1e-14 * scale) {
        if (q1 != 0.0) consider(-q0 / q1);
        return best;
    }
    const double disc = q1 * q1 - 4.0 * q2 * q0;
    if (disc < 0.0) return best;
    const double sq = std::sqrt(disc);
    const double qq = -0.5 * (q1 + std::copysign(sq, q1));
    if (qq != 0.0) {
        consider(qq / q2);
        consider(q0 / qq);
    } else {
        consider(0.0);
    }
    return best;
}

struct TerrainHit {
    double t = kInf;
    Vec3 normal = -Vec3::UnitZ();
};

/// Intersect the ray segment [t_a, t_b] with the bilinear patch of cell (i, j).
bool intersect_cell(const Heightfield& hf, int i, int j, const Ray& ray, double t_a, double t_b,
                    TerrainHit& out) {
    const Patch p = patch_of(hf, i, j);
    // Quick reject: segment stays above the shallowest corner.
    const double zmin_cell = std::min({p.a, p.a + p.b, p.a + p.c, p.a + p.b + p.c + p.e});
    const double za = ray.origin.z() + t_a * ray.direction.z();
    const double zb = ray.origin.z() + t_b * ray.direction.z();
    if (std::max(za, zb) < zmin_cell) return false;

    const Vec3 start = ray.at(t_a);
    const double inv = 1.0 / hf.cell_size;
    const double u0 = (start.x() - hf.origin.x()) * inv - i;
    const double v0 = (start.y() - hf.origin.y()) * inv - j;
    const double du = ray.direction.x() * inv;
    const double dv = ray.direction.y() * inv;
    // f(s) = z(s) - h(u(s), v(s)); water side is f < 0.
    const double h0 = p.a + p.b * u0 + p.c * v0 + p.e * u0 * v0;
    const double h1 = p.b * du + p.c * dv + p.e * (u0 * dv + v0 * du);
    const double h2 = p.e * du * dv;
    const double q0 = start.z() - h0;
    const double q1 = ray.direction.z() - h1;
    const double q2 = -h2;
    const double s_max = t_b - t_a;

    double s;
    if (q0 >= 0.0) {
        s = 0.0;
    } else {
        s = first_root(q2, q1, q0, s_max);
        if (!std::isfinite(s)) return false;
        // Newton polish toward the 1e-9 m tolerance.
        for (int it = 0; it < 3; ++it) {
            const double f = (q2 * s + q1) * s + q0;
            const double df = 2.0 * q2 * s + q1;
            if (df == 0.0 || std::abs(f) < 1e-15) break;
            const double next = s - f / df;
            if (next < 0.0 || next > s_max) break;
            s = next;
        }
    }
    const double t = t_a + s;
    if (t >= out.t) return false;
    const double u = u0 + du * s, v = v0 + dv * s;
    const double hx = (p.b + p.e * v) * inv;
    const double hy = (p.c + p.e * u) * inv;
    out.t = t;
    out.normal = Vec3(hx, hy, -1.0).normalized();
    return true;
}

/// March the 2-D cell grid under the ray and return the first patch hit.
/// `zlo` and `zhi` bound the node depths.
TerrainHit cast_terrain(const Heightfield& hf, double zlo, double zhi, const Ray& ray) {
    TerrainHit best;
    const Vec3 inv_dir = inverse_direction(ray.direction);
    // Clip to the footprint and to the slab above the deepest node, padded so
    // rounding cannot clip away a ray that ends exactly on a flat floor.
    const double pad = 1e-6 * (1.0 + std::abs(zhi));
    const Vec3 lo(hf.origin.x(), hf.origin.y(), -kInf);
    const Vec3 hi(hf.x_max(), hf.y_max(), zhi + pad);
    auto span = slab(ray.origin, inv_dir, lo, hi, 0.0, ray.max_range);
    if (!span) return best;
    double t_start = span->first;
    const double t_end = span->second;
    // Skip the water column above the shallowest node.
    if (ray.origin.z() < zlo) {
        if (ray.direction.z() <= 0.0) return best;
        t_start = std::max(t_start, (zlo - pad - ray.origin.z()) * inv_dir.z());
    }
    if (t_start > t_end) return best;

    const double cs = hf.cell_size;
    const Vec3 p = ray.at(t_start);
    int i = std::clamp(static_cast<int>(std::floor((p.x() - hf.origin.x()) / cs)), 0, hf.nx - 2);
    int j = std::clamp(static_cast<int>(std::floor((p.y() - hf.origin.y()) / cs)), 0, hf.ny - 2);

    const double dx = ray.direction.x(), dy = ray.direction.y();
    const int step_i = dx > 0.0 ? 1 : (dx < 0.0 ? -1 : 0);
    const int step_j = dy > 0.0 ? 1 : (dy < 0.0 ? -1 : 0);
    auto boundary_t = [&](int idx, int step, double o, double origin, double inv) {
        if (step == 0) return kInf;
        const double edge = origin + (idx + (step > 0 ? 1 : 0)) * cs;
        return (edge - o) * inv;
    };
    double t_next_i = boundary_t(i, step_i, ray.origin.x(), hf.origin.x(), inv_dir.x());
    double t_next_j = boundary_t(j, step_j, ray.origin.y(), hf.origin.y(), inv_dir.y());
    const double dt_i = step_i != 0 ? cs * std::abs(inv_dir.x()) : kInf;
    const double dt_j = step_j != 0 ? cs * std::abs(inv_dir.y()) : kInf;

    double t_a = t_start;
    while (t_a <= t_end) {
        const double t_b = std::min({t_next_i, t_next_j, t_end});
        if (intersect_cell(hf, i, j, ray, t_a, std::max(t_a, t_b), best)) return best;
        if (t_b >= t_end) break;
        if (t_next_i < t_next_j) {
            i += step_i;
            t_next_i += dt_i;
        } else {
            j += step_j;
            t_next_j += dt_j;
        }
        if (i < 0 || i > hf.nx - 2 || j < 0 || j > hf.ny - 2) break;
        t_a = t_b;
    }
    return best;
}

/// Two-sided Moller-Trumbore. Returns t or +inf.
double intersect_triangle(const Ray& ray, const Triangle& tri) {
    constexpr double kEps = 1e-12;
    const Vec3 e1 = tri.b - tri.a;
    const Vec3 e2 = tri.c - tri.a;
    const Vec3 pvec = ray.direction.cross(e2);
    const double det = e1.dot(pvec);
    if (std::abs(det) < kEps) return kInf;
    const double inv_det = 1.0 / det;
    const Vec3 tvec = ray.origin - tri.a;
    const double u = tvec.dot(pvec) * inv_det;
    if (u < 0.0 || u > 1.0) return kInf;
    const Vec3 qvec = tvec.cross(e1);
    const double v = ray.direction.dot(qvec) * inv_det;
    if (v < 0.0 || u + v > 1.0) return kInf;
    const double t = e2.dot(qvec) * inv_det;
    return t >= 0.0 ? t : kInf;
}

std::size_t world_geometry_bytes(const World& world) {
    std::size_t bytes = 0;
    if (world.heightfield()) bytes += world.heightfield()->depth.size() * sizeof(double);
    for (const auto& p : world.props()) bytes += p.world_mesh.size() * sizeof(Triangle) + sizeof(Aabb);
    return bytes;
}

// ---------------------------------------------------------------------------
// Triangle / box overlap (separating axis test, Akenine-Moller).

bool axis_separates(const Vec3& axis, const Vec3& v0, const Vec3& v1, const Vec3& v2, const Vec3& half) {
    const double p0 = axis.dot(v0), p1 = axis.dot(v1), p2 = axis.dot(v2);
    const double r = half.x() * std::abs(axis.x()) + half.y() * std::abs(axis.y()) +
                     half.z() * std::abs(axis.z());
    return std::min({p0, p1, p2}) > r || std::max({p0, p1, p2}) < -r;
}

bool triangle_box_overlap(const Triangle& tri, const Vec3& center, const Vec3& half) {
    const Vec3 v0 = tri.a - center, v1 = tri.b - center, v2 = tri.c - center;
    const Vec3 edges[3] = {v1 - v0, v2 - v1, v0 - v2};
    for (int a = 0; a < 3; ++a) {
        const double lo = std::min({v0[a], v1[a], v2[a]});
        const double hi = std::max({v0[a], v1[a], v2[a]});
        if (lo > half[a] || hi < -half[a]) return false;
    }
    const Vec3 normal = edges[0].cross(edges[1]);
    if (axis_separates(normal, v0, v1, v2, half)) return false;
    for (const auto& e : edges) {
        for (int a = 0; a < 3; ++a) {
            Vec3 unit = Vec3::Zero();
            unit[a] = 1.0;
            const Vec3 axis = unit.cross(e);
            if (axis.squaredNorm() < 1e-24) continue;
            if (axis_separates(axis, v0, v1, v2, half)) return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Octree build accumulation

struct Contribution {
    SemanticLabel label;
    Vec3 normal_sum = Vec3::Zero();
    Vec3 point_sum = Vec3::Zero();
    Vec3 first_normal = Vec3::Zero();
    double weight = 0.0;
    std::vector<std::uint32_t> tris;
};

using LeafMap = std::unordered_map<std::uint64_t, std::vector<Contribution>>;

std::uint64_t pack_key(std::int64_t ix, std::int64_t iy, std::int64_t iz) {
    return (static_cast<std::uint64_t>(ix) << 42) | (static_cast<std::uint64_t>(iy) << 21) |
           static_cast<std::uint64_t>(iz);
}

void contribute(LeafMap& leaves, std::uint64_t key, SemanticLabel label, const Vec3& normal,
                const Vec3& point, double weight, std::optional<std::uint32_t> tri = std::nullopt) {
    auto& list = leaves[key];
    auto it = std::find_if(list.begin(), list.end(), [&](const Contribution& c) { return c.label == label; });
    if (it == list.end()) {
        list.push_back({label, Vec3::Zero(), Vec3::Zero(), normal, 0.0, {}});
        it = std::prev(list.end());
    }
    it->normal_sum += weight * normal;
    it->point_sum += weight * point;
    it->weight += weight;
    if (tri) it->tris.push_back(*tri);
}

}  // namespace

// ---------------------------------------------------------------------------

Ray Ray::make(const Vec3& origin, const Vec3& direction, double max_range) {
    const double n = direction.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw InvalidArgument("ray direction must be non-zero");
    Ray r{origin, direction / n, max_range};
    r.validate();
    return r;
}

void Ray::validate() const {
    if (!origin.allFinite()) throw InvalidArgument("ray origin must be finite");
    if (std::abs(direction.norm() - 1.0) > 1e-9) throw InvalidArgument("ray direction must be unit length");
    if (!(max_range > 0.0)) throw InvalidArgument("ray max_range must be positive");
}

StaleOctreeError::StaleOctreeError(std::uint64_t built, std::uint64_t current)
    : Error(fmt::format("octree built from world revision {} but world is at revision {}; rebuild required",
                        built, current)),
      built_(built),
      current_(current) {}

std::size_t Octree::memory_bytes() const {
    return sizeof(Octree) + nodes_.capacity() * sizeof(Node) + leaves_.capacity() * sizeof(Leaf) +
           surfels_.capacity() * sizeof(Surfel) + tri_refs_.capacity() * sizeof(std::uint32_t) +
           triangles_.capacity() * sizeof(Triangle) + keys_.capacity() * sizeof(keys_[0]);
}

Vec3 Octree::leaf_normal(std::size_t k) const {
    const auto& s = surfels_[leaves_[k].first_surfel];
    return Vec3(s.normal[0], s.normal[1], s.normal[2]);
}

SemanticLabel Octree::leaf_label(std::size_t k) const { return surfels_[leaves_[k].first_surfel].label; }

Octree build_octree(const World& world, double leaf_size) {
    if (!(leaf_size > 0.0) || !std::isfinite(leaf_size)) throw InvalidArgument("leaf_size must be positive");
    if (world.empty()) throw InvalidArgument("cannot build an octree over an empty world");
    const Aabb box = world.bounds();
    const double extent = (box.hi - box.lo).maxCoeff();
    if (leaf_size > extent) {
        throw InvalidArgument(fmt::format("leaf_size {} is coarser than the world bounding box ({} m)", leaf_size,
                                          extent));
    }
    const auto cells_needed = static_cast<std::int64_t>(std::floor(extent / leaf_size)) + 1;
    int depth = 0;
    while ((std::int64_t{1} << depth) < cells_needed) ++depth;
    if (depth > 20) throw InvalidArgument("leaf_size too fine for the world extent");

    Octree tree;
    tree.root_min_ = box.lo;
    tree.leaf_size_ = leaf_size;
    tree.depth_ = depth;
    tree.revision_ = world.revision();
    const std::int64_t n = std::int64_t{1} << depth;
    const double s = leaf_size;
    const Vec3& rmin = tree.root_min_;

    LeafMap acc;

    if (world.heightfield()) {
        const auto& hf = *world.heightfield();
        const double fx0 = hf.origin.x(), fx1 = hf.x_max();
        const double fy0 = hf.origin.y(), fy1 = hf.y_max();
        const auto ix0 = static_cast<std::int64_t>(std::floor((fx0 - rmin.x()) / s));
        const auto ix1 = static_cast<std::int64_t>(std::ceil((fx1 - rmin.x()) / s)) - 1;
        const auto iy0 = static_cast<std::int64_t>(std::floor((fy0 - rmin.y()) / s));
        const auto iy1 = static_cast<std::int64_t>(std::ceil((fy1 - rmin.y()) / s)) - 1;

        // Bilinear extrema over a rectangle lie on the corners of its pieces
        // cut by grid lines.
        auto sample_lines = [&](double a, double b, double origin) {
            std::vector<double> pts{a};
            const double first = std::ceil((a - origin) / hf.cell_size);
            for (double g = first;; g += 1.0) {
                const double x = origin + g * hf.cell_size;
                if (x >= b) break;
                if (x > a) pts.push_back(x);
            }
            pts.push_back(b);
            return pts;
        };

        for (std::int64_t ix = std::max<std::int64_t>(ix0, 0); ix <= std::min(ix1, n - 1); ++ix) {
            const double rx0 = std::max(rmin.x() + ix * s, fx0);
            const double rx1 = std::min(rmin.x() + (ix + 1) * s, fx1);
            if (!(rx1 > rx0)) continue;
            const auto xs = sample_lines(rx0, rx1, hf.origin.x());
            for (std::int64_t iy = std::max<std::int64_t>(iy0, 0); iy <= std::min(iy1, n - 1); ++iy) {
                const double ry0 = std::max(rmin.y() + iy * s, fy0);
                const double ry1 = std::min(rmin.y() + (iy + 1) * s, fy1);
                if (!(ry1 > ry0)) continue;
                const auto ys = sample_lines(ry0, ry1, hf.origin.y());
                double hmin = kInf, hmax = -kInf;
                for (double x : xs) {
                    for (double y : ys) {
                        const double h = height_at(hf, x, y);
                        hmin = std::min(hmin, h);
                        hmax = std::max(hmax, h);
                    }
                }
                const double cx = 0.5 * (rx0 + rx1), cy = 0.5 * (ry0 + ry1);
                const Vec3 point(cx, cy, height_at(hf, cx, cy));
                const Vec3 normal = terrain_normal(hf, cx, cy);
                const double weight = (rx1 - rx0) * (ry1 - ry0);
                const auto iz0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor((hmin - rmin.z()) / s)));
                const auto iz1 = std::min<std::int64_t>(n - 1, static_cast<std::int64_t>(std::floor((hmax - rmin.z()) / s)));
                for (std::int64_t iz = iz0; iz <= iz1; ++iz) {
                    contribute(acc, pack_key(ix, iy, iz), hf.label, normal, point, weight);
                }
            }
        }
    }

    const Vec3 half = Vec3::Constant(0.5 * s);
    for (const auto& prop : world.props()) {
        for (const auto& tri : prop.world_mesh) {
            Vec3 normal = (tri.b - tri.a).cross(tri.c - tri.a);
            const double area2 = normal.norm();
            if (area2 < 1e-18) continue;
            normal /= area2;
            const auto tri_id = static_cast<std::uint32_t>(tree.triangles_.size());
            tree.triangles_.push_back({tri.a - rmin, tri.b - rmin, tri.c - rmin});
            Aabb tb;
            tb.extend(tri.a);
            tb.extend(tri.b);
            tb.extend(tri.c);
            std::int64_t lo[3], hi[3];
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor((tb.lo[a] - rmin[a]) / s)));
                hi[a] = std::min<std::int64_t>(n - 1, static_cast<std::int64_t>(std::floor((tb.hi[a] - rmin[a]) / s)));
            }
            for (std::int64_t ix = lo[0]; ix <= hi[0]; ++ix) {
                for (std::int64_t iy = lo[1]; iy <= hi[1]; ++iy) {
                    for (std::int64_t iz = lo[2]; iz <= hi[2]; ++iz) {
                        const Vec3 center = rmin + s * Vec3(ix + 0.5, iy + 0.5, iz + 0.5);
                        if (!triangle_box_overlap(tri, center, half)) continue;
                        const Vec3 point = center - normal * normal.dot(center - tri.a);
                        contribute(acc, pack_key(ix, iy, iz), prop.label, normal, point, s * s, tri_id);
                    }
                }
            }
        }
    }

    // Deterministic storage order: sort leaves by key.
    std::vector<std::uint64_t> keys;
    keys.reserve(acc.size());
    for (const auto& [k, _] : acc) keys.push_back(k);
    std::sort(keys.begin(), keys.end());

    tree.nodes_.push_back(Octree::Node{{-1, -1, -1, -1, -1, -1, -1, -1}});
    tree.leaves_.reserve(keys.size());
    tree.keys_.reserve(keys.size());
    constexpr std::uint64_t kMask = (1u << 21) - 1;
    for (std::uint64_t key : keys) {
        const auto ix = static_cast<std::int32_t>((key >> 42) & kMask);
        const auto iy = static_cast<std::int32_t>((key >> 21) & kMask);
        const auto iz = static_cast<std::int32_t>(key & kMask);

        auto list = acc[key];
        std::stable_sort(list.begin(), list.end(),
                         [](const Contribution& a, const Contribution& b) { return a.weight > b.weight; });
        Octree::Leaf leaf{static_cast<std::uint32_t>(tree.surfels_.size()),
                          static_cast<std::uint32_t>(list.size())};
        for (const auto& c : list) {
            Vec3 nrm = c.normal_sum.norm() > 1e-9 * c.weight ? c.normal_sum.normalized() : c.first_normal;
            const Vec3 centroid = c.point_sum / c.weight;
            Octree::Surfel sf{};
            sf.normal[0] = static_cast<float>(nrm.x());
            sf.normal[1] = static_cast<float>(nrm.y());
            sf.normal[2] = static_cast<float>(nrm.z());
            sf.offset = static_cast<float>(nrm.dot(centroid - rmin));
            sf.weight = static_cast<float>(c.weight);
            sf.label = c.label;
            sf.first_tri = static_cast<std::uint32_t>(tree.tri_refs_.size());
            sf.tri_count = static_cast<std::uint32_t>(c.tris.size());
            tree.tri_refs_.insert(tree.tri_refs_.end(), c.tris.begin(), c.tris.end());
            tree.surfels_.push_back(sf);
        }
        const auto leaf_index = static_cast<std::int32_t>(tree.leaves_.size());
        tree.leaves_.push_back(leaf);
        tree.keys_.push_back({ix, iy, iz});

        std::int32_t node = 0;
        for (int level = 0; level < depth; ++level) {
            const int shift = depth - 1 - level;
            const int child = ((ix >> shift) & 1) | (((iy >> shift) & 1) << 1) | (((iz >> shift) & 1) << 2);
            if (level == depth - 1) {
                tree.nodes_[node].child[child] = leaf_index;
            } else {
                if (tree.nodes_[node].child[child] < 0) {
                    tree.nodes_[node].child[child] = static_cast<std::int32_t>(tree.nodes_.size());
                    tree.nodes_.push_back(Octree::Node{{-1, -1, -1, -1, -1, -1, -1, -1}});
                }
                node = tree.nodes_[node].child[child];
            }
        }
    }
    tree.nodes_.shrink_to_fit();
    tree.surfels_.shrink_to_fit();
    tree.tri_refs_.shrink_to_fit();
    return tree;
}

namespace {

struct OctreeQuery {
    const Octree& tree;
    const std::vector<Octree::Node>& nodes;
    const std::vector<std::uint32_t>& tri_refs;
    const std::vector<Triangle>& triangles;
    const Ray& ray;
    Vec3 origin_local;  // ray origin relative to the root corner
    Vec3 inv_dir;

    struct Found {
        double t_entry;
        const Octree::Surfel* surfel;
        Vec3 normal;
    };

    std::optional<Found> test_leaf(std::int32_t leaf_index, double t0, double t1) const {
        const auto& leaf = tree.leaf(static_cast<std::size_t>(leaf_index));
        constexpr double kSlack = 1e-9;
        const Octree::Surfel* best = nullptr;
        double best_t = kInf;
        Vec3 best_normal = Vec3::Zero();
        const Ray local{origin_local, ray.direction, ray.max_range};
        for (const auto& sf : tree.surfels(leaf)) {
            const Vec3 n(sf.normal[0], sf.normal[1], sf.normal[2]);
            if (sf.tri_count > 0) {
                for (std::uint32_t k = 0; k < sf.tri_count; ++k) {
                    const Triangle& tri = triangles[tri_refs[sf.first_tri + k]];
                    const double t = intersect_triangle(local, tri);
                    if (t >= t0 - kSlack && t <= t1 + kSlack && t < best_t) {
                        best_t = t;
                        best = &sf;
                        best_normal = (tri.b - tri.a).cross(tri.c - tri.a);
                    }
                }
                continue;
            }
            const double s_in = n.dot(origin_local + t0 * ray.direction) - sf.offset;
            const double s_out = n.dot(origin_local + t1 * ray.direction) - sf.offset;
            // The segment ends on or behind the cached terrain plane.
            if (s_out > 0.0 && s_in > 0.0) continue;
            double t_cross = t0;
            if (s_in > 0.0) t_cross = t0 + (t1 - t0) * s_in / (s_in - s_out);
            if (t_cross < best_t) {
                best_t = t_cross;
                best = &sf;
                best_normal = n;
            }
        }
        if (!best) return std::nullopt;
        return Found{t0, best, best_normal};
    }

    std::optional<Found> descend(std::int32_t node, int level, const Vec3& node_min, double node_size,
                                 double t_lo, double t_hi) const {
        struct Candidate {
            double t0, t1;
            std::int32_t index;
            Vec3 min;
        };
        Candidate cand[8];
        int count = 0;
        const double half = 0.5 * node_size;
        for (int c = 0; c < 8; ++c) {
            const std::int32_t idx = nodes[node].child[c];
            if (idx < 0) continue;
            const Vec3 cmin = node_min + half * Vec3(c & 1, (c >> 1) & 1, (c >> 2) & 1);
            auto iv = slab(origin_local, inv_dir, cmin, cmin + Vec3::Constant(half), t_lo, t_hi);
            if (!iv) continue;
            Candidate cd{iv->first, iv->second, idx, cmin};
            int k = count++;
            while (k > 0 && cand[k - 1].t0 > cd.t0) {
                cand[k] = cand[k - 1];
                --k;
            }
            cand[k] = cd;
        }
        const bool leaves_next = level + 1 == tree.depth();
        for (int k = 0; k < count; ++k) {
            const auto& cd = cand[k];
            std::optional<Found> found =
                leaves_next ? test_leaf(cd.index, cd.t0, cd.t1)
                            : descend(cd.index, level + 1, cd.min, half, cd.t0, cd.t1);
            if (found) return found;
        }
        return std::nullopt;
    }
};

}  // namespace

std::optional<Hit> octree_cast(const Octree& tree, const World& world, const Ray& ray, QueryStats& stats) {
    if (tree.revision_ != world.revision()) throw StaleOctreeError(tree.revision_, world.revision());
    ray.validate();
    const auto start = Clock::now();
    OctreeQuery q{tree, tree.nodes_, tree.tri_refs_, tree.triangles_, ray, ray.origin - tree.root_min_,
                  inverse_direction(ray.direction)};
    std::optional<Hit> result;
    const double size = tree.root_size();
    if (auto root = slab(q.origin_local, q.inv_dir, Vec3::Zero(), Vec3::Constant(size), 0.0, ray.max_range)) {
        if (auto found = q.descend(0, 0, Vec3::Zero(), size, root->first, root->second)) {
            result = Hit{found->t_entry, ray.at(found->t_entry), facing(found->normal.normalized(), ray.direction),
                         found->surfel->label};
        }
    }
    stats.record(Clock::now() - start, tree.memory_bytes());
    return result;
}

std::optional<Hit> direct_cast(const World& world, const Ray& ray, QueryStats& stats) {
    ray.validate();
    const auto start = Clock::now();
    double best_t = kInf;
    Vec3 best_normal = -Vec3::UnitZ();
    SemanticLabel best_label;

    if (world.heightfield()) {
        const auto th = cast_terrain(*world.heightfield(), world.terrain_min_depth(), world.terrain_max_depth(), ray);
        if (th.t <= ray.max_range) {
            best_t = th.t;
            best_normal = th.normal;
            best_label = world.heightfield()->label;
        }
    }

    const Vec3 inv_dir = inverse_direction(ray.direction);
    for (const auto& prop : world.props()) {
        const double limit = std::min(best_t, ray.max_range);
        if (!slab(ray.origin, inv_dir, prop.bounds.lo, prop.bounds.hi, 0.0, limit)) continue;
        for (const auto& tri : prop.world_mesh) {
            const double t = intersect_triangle(ray, tri);
            if (t < best_t && t <= ray.max_range) {
                best_t = t;
                best_normal = (tri.b - tri.a).cross(tri.c - tri.a).normalized();
                best_label = prop.label;
            }
        }
    }

    std::optional<Hit> result;
    if (std::isfinite(best_t)) {
        result = Hit{best_t, ray.at(best_t), facing(best_normal, ray.direction), best_label};
    }
    stats.record(Clock::now() - start, world_geometry_bytes(world));
    return result;
}

std::size_t direct_cast_resident_bytes(const World& world) { return world_geometry_bytes(world); }

namespace {

template <typename Cast>
BenchRun timed_ticks(const std::string& name, std::span<const Ray> batch, int ticks, Cast&& cast) {
    BenchRun run;
    run.name = name;
    const auto start = Clock::now();
    for (int t = 0; t < ticks; ++t) {
        for (const auto& ray : batch) {
            if (cast(ray)) ++run.hits;
            ++run.rays;
        }
    }
    run.total_time = std::chrono::duration<double>(Clock::now() - start).count();
    return run;
}

}  // namespace

BenchReport bench_backends(const World& world, std::span<const Ray> ray_batch, int ticks, double leaf_size) {
    if (ray_batch.empty()) throw InvalidArgument("benchmark ray batch is empty");
    if (ticks < 1) throw InvalidArgument("benchmark needs at least one tick");
    for (const auto& r : ray_batch) r.validate();

    BenchReport report;
    report.ticks = ticks;
    report.rays_per_tick = ray_batch.size();
    report.leaf_size = leaf_size;

    {
        const auto start = Clock::now();
        const Octree tree = build_octree(world, leaf_size);
        report.octree_build_time = std::chrono::duration<double>(Clock::now() - start).count();
    }

    // Caching run: generate the octree, then query it every tick.
    {
        QueryStats stats;
        const auto start = Clock::now();
        const Octree tree = build_octree(world, leaf_size);
        BenchRun run = timed_ticks("Octree Caching Run", ray_batch, ticks,
                                   [&](const Ray& r) { return octree_cast(tree, world, r, stats).has_value(); });
        run.total_time = std::chrono::duration<double>(Clock::now() - start).count();
        run.peak_bytes = tree.memory_bytes();
        report.caching = run;
    }

    // Query run: octree already resident.
    {
        const Octree tree = build_octree(world, leaf_size);
        QueryStats stats;
        report.query = timed_ticks("Octree Querying Run", ray_batch, ticks,
                                   [&](const Ray& r) { return octree_cast(tree, world, r, stats).has_value(); });
        report.query.peak_bytes = tree.memory_bytes();
    }

    {
        QueryStats stats;
        report.raycast = timed_ticks("Ray Casting Run", ray_batch, ticks,
                                     [&](const Ray& r) { return direct_cast(world, r, stats).has_value(); });
        report.raycast.peak_bytes = direct_cast_resident_bytes(world);
    }

    for (BenchRun* run : {&report.caching, &report.query, &report.raycast}) {
        run->mean_time_per_tick = run->total_time / ticks;
    }
    return report;
}

std::string BenchReport::to_json() const {
    nlohmann::json j;
    j["ticks"] = ticks;
    j["rays_per_tick"] = rays_per_tick;
    j["leaf_size"] = leaf_size;
    j["octree_build_time"] = octree_build_time;
    auto run_json = [](const BenchRun& r) {
        return nlohmann::json{{"name", r.name},
                              {"mean_time_per_tick", r.mean_time_per_tick},
                              {"total_time", r.total_time},
                              {"peak_bytes", r.peak_bytes},
                              {"rays", r.rays},
                              {"hits", r.hits}};
    };
    j["runs"] = nlohmann::json::array({run_json(caching), run_json(query), run_json(raycast)});
    return j.dump(2);
}

std::string BenchReport::to_table() const {
    std::string out = fmt::format("{:<22} {:>24} {:>16} {:>18}\n", "Run Type", "Mean Time per Tick (s)",
                                  "Total Time (s)", "Peak Memory (B)");
    for (const BenchRun* r : {&caching, &query, &raycast}) {
        out += fmt::format("{:<22} {:>24.6f} {:>16.4f} {:>18}\n", r->name, r->mean_time_per_tick, r->total_time,
                           r->peak_bytes);
    }
    out += fmt::format("{} ticks, {} rays per tick, leaf size {} m\n", ticks, rays_per_tick, leaf_size);
    return out;
}

std::vector<Ray> survey_rays(const World& world, std::size_t count, double max_range) {
    const Aabb box = world.bounds();
    if (box.empty()) throw InvalidArgument("cannot plan survey rays over an empty world");
    std::vector<Ray> rays;
    rays.reserve(count);
    const double z = std::min(0.0, box.lo.z() - 1.0);
    for (std::size_t k = 0; k < count; ++k) {
        const double f = (static_cast<double>(k) + 0.5) / static_cast<double>(count);
        // Lawn-mower track: several legs across the footprint.
        const double legs = 6.0;
        const double leg_pos = f * legs;
        const double along = leg_pos - std::floor(leg_pos);
        const int leg = static_cast<int>(std::floor(leg_pos));
        const double x = box.lo.x() + (0.05 + 0.9 * (leg % 2 == 0 ? along : 1.0 - along)) * (box.hi.x() - box.lo.x());
        const double y = box.lo.y() + (0.05 + 0.9 * (leg + 0.5) / legs) * (box.hi.y() - box.lo.y());
        // Small across-track tilt, as a wobbling nadir beam would have.
        const double tilt = 0.2 * std::sin(1.7 * static_cast<double>(k));
        rays.push_back(Ray::make(Vec3(x, y, z), Vec3(0.0, std::sin(tilt), std::cos(tilt)), max_range));
    }
    return rays;
}

}  // namespace mariner
