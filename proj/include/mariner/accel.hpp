#pragma once

// Two interchangeable ray-query backends over a World:
//   * direct_cast: exact first intersection, reads the live world every call;
//   * octree_cast: walks a cached surface octree built from one world revision.
// Both return the same Hit type so sensors can switch between them.

#include "mariner/world.hpp"

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mariner {

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitX();
    double max_range = 100.0;

    /// Normalises direction; throws InvalidArgument for a zero direction or
    /// non-positive range.
    static Ray make(const Vec3& origin, const Vec3& direction, double max_range);

    void validate() const;
    Vec3 at(double t) const { return origin + t * direction; }
};

struct Hit {
    double range = 0.0;
    Vec3 point = Vec3::Zero();
    Vec3 normal = -Vec3::UnitZ();  // unit, facing the incoming ray
    SemanticLabel label;
};

/// Thread-safe query counters. Wall time accumulates per cast call.
class QueryStats {
public:
    QueryStats() = default;
    QueryStats(const QueryStats& other) { *this = other; }
    QueryStats& operator=(const QueryStats& other) {
        rays_.store(other.rays_cast());
        wall_ns_.store(other.wall_ns_.load());
        bytes_.store(other.bytes_resident());
        return *this;
    }

    std::uint64_t rays_cast() const { return rays_.load(std::memory_order_relaxed); }
    double wall_time() const { return 1e-9 * static_cast<double>(wall_ns_.load(std::memory_order_relaxed)); }
    std::uint64_t bytes_resident() const { return bytes_.load(std::memory_order_relaxed); }

    void record(std::chrono::nanoseconds elapsed, std::uint64_t bytes) {
        rays_.fetch_add(1, std::memory_order_relaxed);
        wall_ns_.fetch_add(static_cast<std::uint64_t>(elapsed.count()), std::memory_order_relaxed);
        std::uint64_t prev = bytes_.load(std::memory_order_relaxed);
        while (prev < bytes && !bytes_.compare_exchange_weak(prev, bytes, std::memory_order_relaxed)) {
        }
    }

private:
    std::atomic<std::uint64_t> rays_{0};
    std::atomic<std::uint64_t> wall_ns_{0};
    std::atomic<std::uint64_t> bytes_{0};
};

/// Raised by octree queries when the world changed after the build.
class StaleOctreeError : public Error {
public:
    StaleOctreeError(std::uint64_t built, std::uint64_t current);
    std::uint64_t built_revision() const { return built_; }
    std::uint64_t current_revision() const { return current_; }

private:
    std::uint64_t built_;
    std::uint64_t current_;
};

/// Sparse surface octree. Only leaves crossed by terrain or prop triangles
/// are stored. Each leaf keeps one surfel per contributing label, the dominant
/// (largest-weight) one first. Terrain surfels carry a local plane; prop
/// surfels also reference the prop triangles cached in the tree, so a ray
/// that merely clips a box edge leaf is not reported as a hit.
class Octree {
public:
    struct Node {
        std::int32_t child[8];  // node index, or leaf index at the last level; -1 empty
    };
    struct Surfel {
        float normal[3];  // outward unit normal
        float offset;     // plane: normal . p == offset
        float weight;
        SemanticLabel label;
        std::uint32_t first_tri;
        std::uint32_t tri_count;  // 0 for terrain surfels
    };
    struct Leaf {
        std::uint32_t first_surfel;
        std::uint32_t surfel_count;
    };

    Vec3 root_min() const { return root_min_; }
    double root_size() const { return leaf_size_ * static_cast<double>(1u << depth_); }
    double leaf_size() const { return leaf_size_; }
    int depth() const { return depth_; }
    std::uint64_t built_from_revision() const { return revision_; }
    std::size_t leaf_count() const { return leaves_.size(); }
    std::size_t node_count() const { return nodes_.size(); }
    std::size_t memory_bytes() const;

    /// Integer coordinates of every occupied leaf, in storage order.
    const std::vector<std::array<std::int32_t, 3>>& leaf_keys() const { return keys_; }
    const Leaf& leaf(std::size_t k) const { return leaves_[k]; }
    std::span<const Surfel> surfels(const Leaf& l) const {
        return {surfels_.data() + l.first_surfel, l.surfel_count};
    }

    /// Representative (dominant) normal and label of a leaf.
    Vec3 leaf_normal(std::size_t k) const;
    SemanticLabel leaf_label(std::size_t k) const;

private:
    friend Octree build_octree(const World& world, double leaf_size);
    friend std::optional<Hit> octree_cast(const Octree& tree, const World& world, const Ray& ray,
                                          QueryStats& stats);

    Vec3 root_min_ = Vec3::Zero();
    double leaf_size_ = 0.1;
    int depth_ = 0;
    std::uint64_t revision_ = 0;
    std::vector<Node> nodes_;
    std::vector<Leaf> leaves_;
    std::vector<Surfel> surfels_;
    std::vector<std::uint32_t> tri_refs_;
    std::vector<Triangle> triangles_;  // prop triangles, relative to root_min_
    std::vector<std::array<std::int32_t, 3>> keys_;
};

inline constexpr double kDefaultLeafSize = 0.1;

/// Throws InvalidArgument for a non-positive leaf size, a leaf coarser than the
/// world bounding box, or an empty world.
Octree build_octree(const World& world, double leaf_size = kDefaultLeafSize);

/// First occupied leaf along the ray; range is the entry distance into it.
/// Throws StaleOctreeError when world.revision() differs from the build.
std::optional<Hit> octree_cast(const Octree& tree, const World& world, const Ray& ray,
                               QueryStats& stats);

/// Exact first intersection with the terrain (bilinear patches via 2-D DDA)
/// and prop triangles (Moller-Trumbore behind per-prop bounding boxes).
std::optional<Hit> direct_cast(const World& world, const Ray& ray, QueryStats& stats);

/// Geometry bytes the direct caster reads per query (terrain + prop meshes).
std::size_t direct_cast_resident_bytes(const World& world);

struct BenchRun {
    std::string name;
    double mean_time_per_tick = 0.0;  // s
    double total_time = 0.0;          // s
    std::uint64_t peak_bytes = 0;
    std::uint64_t rays = 0;
    std::uint64_t hits = 0;
};

struct BenchReport {
    int ticks = 0;
    std::size_t rays_per_tick = 0;
    double leaf_size = 0.0;
    double octree_build_time = 0.0;  // separately timed build, s
    BenchRun caching;                // build + query
    BenchRun query;                  // query only, octree already built
    BenchRun raycast;

    std::string to_json() const;
    /// Aligned text table with the run name, mean time per tick and total time.
    std::string to_table() const;
};

/// Times the three runs over the same ray batch each tick. Throws
/// InvalidArgument for an empty batch or ticks < 1.
BenchReport bench_backends(const World& world, std::span<const Ray> ray_batch, int ticks,
                           double leaf_size = kDefaultLeafSize);

/// Downward-looking echo-sounder rays spread along a survey track across the
/// world footprint, one per position.
std::vector<Ray> survey_rays(const World& world, std::size_t count, double max_range = 100.0);

}  // namespace mariner
