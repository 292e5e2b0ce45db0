#include "mariner/accel.hpp"
#include "mariner/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace mariner;

namespace {

World flat_world(double depth = 10.0, double size = 20.0, double cell = 1.0) {
    return World(Heightfield::flat(depth, size, size, cell));
}

Ray down_from(double x, double y, double z = 0.0, double max_range = 100.0) {
    return Ray::make(Vec3(x, y, z), Vec3::UnitZ(), max_range);
}

/// Independent terrain oracle: fine fixed-step march on height_at with
/// bisection refinement. Only valid inside the heightfield footprint.
std::optional<double> marched_terrain_range(const Heightfield& hf, const Ray& ray, double step = 0.005) {
    auto f = [&](double t) -> std::optional<double> {
        const Vec3 p = ray.at(t);
        if (!hf.contains(p.x(), p.y())) return std::nullopt;
        return p.z() - height_at(hf, p.x(), p.y());
    };
    double prev_t = 0.0;
    auto prev = f(0.0);
    for (double t = step; t <= ray.max_range; t += step) {
        auto cur = f(t);
        if (prev && cur && *prev < 0.0 && *cur >= 0.0) {
            double lo = prev_t, hi = t;
            for (int k = 0; k < 80; ++k) {
                const double mid = 0.5 * (lo + hi);
                (*f(mid) < 0.0 ? lo : hi) = mid;
            }
            return 0.5 * (lo + hi);
        }
        prev = cur;
        prev_t = t;
    }
    return std::nullopt;
}

World rolling_world(std::uint64_t seed, double density = 0.0) {
    GenSpec spec;
    spec.terrain = "rolling";
    spec.size_x = 40.0;
    spec.size_y = 40.0;
    spec.cell_size = 1.0;
    spec.base_depth = 15.0;
    spec.relief = 3.0;
    spec.density = density;
    spec.prop_classes = {{"rock", classes::kRock, Vec3(1.5, 1.5, 1.0)}};
    return generate_world(spec, seed);
}

}  // namespace

// ----------------------------------------------------------------------------
// Octree construction

TEST(BuildOctree, FlatPlaneSingleLayer) {
    const World w = flat_world();
    const Octree tree = build_octree(w, 1.0);
    EXPECT_EQ(tree.leaf_count(), 400u);
    for (const auto& key : tree.leaf_keys()) EXPECT_EQ(key[2], 0);
    EXPECT_DOUBLE_EQ(tree.root_min().z(), 10.0);
    EXPECT_NEAR(tree.leaf_normal(0).z(), -1.0, 1e-6);
    EXPECT_EQ(tree.leaf_label(0).class_id, classes::kSeafloor);
}

TEST(BuildOctree, RefinementQuadruplesFlatLeaves) {
    const World w = flat_world();
    EXPECT_EQ(build_octree(w, 0.5).leaf_count(), 4 * build_octree(w, 1.0).leaf_count());
}

TEST(BuildOctree, Errors) {
    EXPECT_THROW(build_octree(World{}, 1.0), InvalidArgument);
    const World w = flat_world();
    EXPECT_THROW(build_octree(w, 0.0), InvalidArgument);
    EXPECT_THROW(build_octree(w, 25.0), InvalidArgument);
}

TEST(BuildOctree, EveryLeafTouchesASurface) {
    const World w = rolling_world(4, 2.0);
    const Octree tree = build_octree(w, 0.5);
    const auto& hf = *w.heightfield();
    // Each occupied leaf either brackets the terrain somewhere in its column
    // or overlaps a prop's bounding box.
    for (const auto& key : tree.leaf_keys()) {
        const Vec3 lo = tree.root_min() + tree.leaf_size() * Vec3(key[0], key[1], key[2]);
        const Vec3 hi = lo + Vec3::Constant(tree.leaf_size());
        bool near_prop = false;
        for (const auto& p : w.props()) {
            near_prop |= (p.bounds.lo.array() <= hi.array()).all() && (p.bounds.hi.array() >= lo.array()).all();
        }
        if (near_prop) continue;
        double hmin = 1e9, hmax = -1e9;
        for (int a = 0; a <= 4; ++a) {
            for (int b = 0; b <= 4; ++b) {
                const double x = std::clamp(lo.x() + a * 0.25 * tree.leaf_size(), hf.origin.x(), hf.x_max());
                const double y = std::clamp(lo.y() + b * 0.25 * tree.leaf_size(), hf.origin.y(), hf.y_max());
                const double h = height_at(hf, x, y);
                hmin = std::min(hmin, h);
                hmax = std::max(hmax, h);
            }
        }
        EXPECT_TRUE(hmax >= lo.z() - 1e-9 && hmin <= hi.z() + 1e-9);
    }
}

TEST(BuildOctree, MemoryExceedsDirectCastFootprint) {
    const World w = rolling_world(2, 1.0);
    const Octree tree = build_octree(w, 0.25);
    EXPECT_GT(tree.memory_bytes(), direct_cast_resident_bytes(w));
}

// ----------------------------------------------------------------------------
// Octree queries

TEST(OctreeCast, StraightDownWithinOneLeaf) {
    const World w = flat_world();
    const Octree tree = build_octree(w, 0.25);
    QueryStats stats;
    const auto hit = octree_cast(tree, w, down_from(7.3, 4.1), stats);
    ASSERT_TRUE(hit);
    EXPECT_GE(hit->range, 9.75);
    EXPECT_LE(hit->range, 10.25);
    EXPECT_EQ(hit->label.class_id, classes::kSeafloor);
    EXPECT_EQ(stats.rays_cast(), 1u);
    EXPECT_GT(stats.bytes_resident(), 0u);
}

TEST(OctreeCast, ParallelRayMisses) {
    const World w = flat_world();
    const Octree tree = build_octree(w, 0.25);
    QueryStats stats;
    EXPECT_FALSE(octree_cast(tree, w, Ray::make(Vec3(-5, 3, 5), Vec3::UnitX(), 50.0), stats));
}

TEST(OctreeCast, StaleAfterSpawn) {
    World w = flat_world();
    const Octree tree = build_octree(w, 0.5);
    QueryStats stats;
    EXPECT_NO_THROW(octree_cast(tree, w, down_from(5, 5), stats));
    w.spawn_prop(make_box(Vec3::Ones()), Vec6::Zero(), {classes::kSpawned, 1});
    EXPECT_THROW(octree_cast(tree, w, down_from(5, 5), stats), StaleOctreeError);
    const Octree rebuilt = build_octree(w, 0.5);
    EXPECT_NO_THROW(octree_cast(rebuilt, w, down_from(5, 5), stats));
}

TEST(OctreeCast, AgreesWithDirectCastOnRandomDownwardRays) {
    const World w = rolling_world(9, 1.0);
    const double leaf = 0.25;
    const Octree tree = build_octree(w, leaf);
    QueryStats s1, s2;
    Rng rng(1234);
    int both = 0;
    for (int k = 0; k < 1000; ++k) {
        const Vec3 o(rng.uniform(14, 26), rng.uniform(14, 26), rng.uniform(0, 5));
        const double tilt = rng.uniform(0.0, 0.5);
        const double az = rng.uniform(-kPi, kPi);
        const Ray ray = Ray::make(o, Vec3(std::sin(tilt) * std::cos(az), std::sin(tilt) * std::sin(az), std::cos(tilt)),
                                  60.0);
        const auto a = octree_cast(tree, w, ray, s1);
        const auto b = direct_cast(w, ray, s2);
        ASSERT_TRUE(b);
        if (!a) continue;
        ++both;
        EXPECT_LE(std::abs(a->range - b->range), 2.0 * leaf) << "ray " << k;
    }
    EXPECT_GT(both, 990);
}

// ----------------------------------------------------------------------------
// Direct ray casting

TEST(DirectCast, StraightDownOverFlatFloor) {
    const World w = flat_world();
    QueryStats stats;
    const auto hit = direct_cast(w, down_from(3.3, 12.7), stats);
    ASSERT_TRUE(hit);
    EXPECT_NEAR(hit->range, 10.0, 1e-9);
    EXPECT_NEAR(hit->normal.z(), -1.0, 1e-12);
}

TEST(DirectCast, FortyFiveDegreeIncidence) {
    const World w = flat_world();
    QueryStats stats;
    const auto hit = direct_cast(w, Ray::make(Vec3(2, 2, 0), Vec3(1, 0, 1), 100.0), stats);
    ASSERT_TRUE(hit);
    EXPECT_NEAR(hit->range, 10.0 * std::sqrt(2.0), 1e-9);
    EXPECT_NEAR(hit->point.x(), 12.0, 1e-9);
}

TEST(DirectCast, SpawnedCubeVisibleWithoutRebuild) {
    World w = flat_world();
    QueryStats stats;
    const Vec3 sensor(10.0, 10.0, 0.0);
    ASSERT_NEAR(direct_cast(w, down_from(10, 10), stats)->range, 10.0, 1e-9);
    Vec6 pose;
    pose << 10.0, 10.0, 5.5, 0.0, 0.0, 0.0;  // top face 5 m below the sensor
    w.spawn_prop(make_box(Vec3::Ones()), pose, {classes::kSpawned, 77});
    const auto hit = direct_cast(w, down_from(10, 10), stats);
    ASSERT_TRUE(hit);
    EXPECT_NEAR(hit->range, 5.0, 1e-9);
    EXPECT_EQ(hit->label, (SemanticLabel{classes::kSpawned, 77}));
    EXPECT_NEAR(hit->normal.z(), -1.0, 1e-12);
}

TEST(DirectCast, MaxRangeAndMiss) {
    const World w = flat_world();
    QueryStats stats;
    EXPECT_FALSE(direct_cast(w, down_from(5, 5, 0.0, 9.5), stats));
    EXPECT_FALSE(direct_cast(w, Ray::make(Vec3(5, 5, 0), -Vec3::UnitZ(), 50.0), stats));
    EXPECT_FALSE(direct_cast(w, Ray::make(Vec3(-5, 3, 5), Vec3::UnitX(), 50.0), stats));
}

TEST(DirectCast, MatchesMarchingOracleOnBilinearTerrain) {
    const World w = rolling_world(21);
    const auto& hf = *w.heightfield();
    Rng rng(77);
    QueryStats stats;
    for (int k = 0; k < 200; ++k) {
        const Vec3 o(rng.uniform(10, 30), rng.uniform(10, 30), rng.uniform(0, 8));
        const double tilt = rng.uniform(0.0, 1.0);
        const double az = rng.uniform(-kPi, kPi);
        const Ray ray = Ray::make(o, Vec3(std::sin(tilt) * std::cos(az), std::sin(tilt) * std::sin(az), std::cos(tilt)),
                                  60.0);
        const auto expected = marched_terrain_range(hf, ray);
        const auto hit = direct_cast(w, ray, stats);
        ASSERT_EQ(expected.has_value(), hit.has_value()) << "ray " << k;
        if (hit) {
            EXPECT_NEAR(hit->range, *expected, 1e-9) << "ray " << k;
            EXPECT_NEAR(hit->point.z(), height_at(hf, hit->point.x(), hit->point.y()), 1e-9);
        }
    }
}

TEST(DirectCast, PureForFixedRevision) {
    const World w = rolling_world(5, 2.0);
    QueryStats stats;
    const Ray ray = Ray::make(Vec3(20, 20, 1), Vec3(0.3, -0.2, 1.0), 80.0);
    const auto a = direct_cast(w, ray, stats);
    const auto b = direct_cast(w, ray, stats);
    ASSERT_TRUE(a && b);
    EXPECT_EQ(a->range, b->range);
    EXPECT_EQ(a->point, b->point);
    EXPECT_EQ(a->normal, b->normal);
    EXPECT_EQ(a->label, b->label);
}

TEST(DirectCast, InvalidRayRejected) {
    const World w = flat_world();
    QueryStats stats;
    EXPECT_THROW(Ray::make(Vec3::Zero(), Vec3::Zero(), 10.0), InvalidArgument);
    EXPECT_THROW(Ray::make(Vec3::Zero(), Vec3::UnitZ(), 0.0), InvalidArgument);
    Ray bad{Vec3::Zero(), Vec3(0, 0, 2), 10.0};
    EXPECT_THROW(direct_cast(w, bad, stats), InvalidArgument);
}

// ----------------------------------------------------------------------------
// Benchmark harness

TEST(Bench, SmokeSingleTickSingleRay) {
    const World w = flat_world(10.0, 4.0, 1.0);
    const std::vector<Ray> rays{down_from(2, 2)};
    const auto report = bench_backends(w, rays, 1, 0.5);
    EXPECT_GT(report.caching.total_time, 0.0);
    EXPECT_GT(report.query.total_time, 0.0);
    EXPECT_GT(report.raycast.total_time, 0.0);
    EXPECT_EQ(report.caching.mean_time_per_tick, report.caching.total_time);
    EXPECT_NE(report.to_table().find("Mean Time per Tick"), std::string::npos);
    EXPECT_NE(report.to_json().find("Ray Casting Run"), std::string::npos);
}

TEST(Bench, EmptyBatchRejected) {
    const World w = flat_world();
    EXPECT_THROW(bench_backends(w, {}, 3, 0.5), InvalidArgument);
}
