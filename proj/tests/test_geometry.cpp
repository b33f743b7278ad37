#include <catch2/catch_amalgamated.hpp>

#include "ikf/geometry.hpp"
#include "ikf/rng.hpp"
#include "ikf/sampling.hpp"

using namespace ikf;

namespace {

SphereField single_sphere(const Vec3& c, double r = 0.08) {
    SphereField f;
    f.keypoints.points = {c};
    f.radius = r;
    return f;
}

Vec3 fd_gradient(const SphereField& f, const Vec3& p, double h) {
    Vec3 g;
    for (int a = 0; a < 3; ++a) {
        Vec3 hi = p, lo = p;
        hi[a] += h;
        lo[a] -= h;
        g[a] = (sphere_sdf(hi, f) - sphere_sdf(lo, f)) / (2.0 * h);
    }
    return g;
}

} // namespace

TEST_CASE("sphere_sdf hand examples") {
    CHECK(sphere_sdf(Vec3(0, 0, 0), single_sphere(Vec3(0, 0, 0))) == -0.08);
    CHECK(sphere_sdf(Vec3(0.08, 0, 0), single_sphere(Vec3(0, 0, 0))) == 0.0);

    SphereField two;
    two.keypoints.points = {Vec3(0, 0, 0), Vec3(0.5, 0, 0)};
    two.radius = 0.08;
    CHECK(sphere_sdf(Vec3(0.25, 0, 0), two) == Catch::Approx(0.17).margin(1e-15));
}

TEST_CASE("sphere_sdf rejects an empty field") {
    SphereField empty;
    CHECK_THROWS_AS(sphere_sdf(Vec3(0, 0, 0), empty), validation_error);
    CHECK_THROWS_AS(sphere_sdf_gradient(Vec3(0, 0, 0), empty), validation_error);
}

TEST_CASE("sphere_sdf_gradient hand examples") {
    const SphereField f = single_sphere(Vec3(0, 0, 0));
    CHECK((sphere_sdf_gradient(Vec3(0.5, 0, 0), f) - Vec3(1, 0, 0)).norm() < 1e-15);
    CHECK((sphere_sdf_gradient(Vec3(0, -0.2, 0), f) - Vec3(0, -1, 0)).norm() < 1e-15);

    // equidistant point: the lower keypoint index wins
    SphereField two;
    two.keypoints.points = {Vec3(0, 0, 0), Vec3(0.5, 0, 0)};
    const Vec3 p(0.25, 0.1, 0);
    const Vec3 expected = p.normalized();
    CHECK((sphere_sdf_gradient(p, two) - expected).norm() < 1e-15);
}

TEST_CASE("sphere_sdf_gradient is singular at a center") {
    CHECK_THROWS_AS(sphere_sdf_gradient(Vec3(0.1, 0.2, 0.3), single_sphere(Vec3(0.1, 0.2, 0.3))),
                    numeric_error);
}

TEST_CASE("gradient matches central finite differences away from seams") {
    Rng rng(11);
    SphereField f;
    f.keypoints.points = {Vec3(-0.4, 0.1, 0.0), Vec3(0.3, -0.2, 0.5), Vec3(0.1, 0.6, -0.3)};
    f.radius = 0.08;
    const double h = 1e-5;
    int checked = 0;
    while (checked < 500) {
        const Vec3 p = rng.uniform_in(Box3{});
        std::vector<double> dist;
        for (const Vec3& c : f.keypoints.points) dist.push_back((p - c).norm());
        std::sort(dist.begin(), dist.end());
        if (dist[0] < 1e-3 || dist[1] - dist[0] < 1e-3) continue; // center or seam
        const Vec3 g = sphere_sdf_gradient(p, f);
        CHECK((g - fd_gradient(f, p, h)).norm() < 1e-6);
        ++checked;
    }
}

TEST_CASE("Eikonal property holds almost everywhere") {
    Rng rng(7);
    SphereField f;
    f.keypoints = random_keypoint_set(6, 0.3, Box3{}, 99);
    f.radius = 0.08;
    const double h = 1e-6;
    int kinked = 0;
    const int total = 10000;
    for (int i = 0; i < total; ++i) {
        const Vec3 p = rng.uniform_in(Box3{});
        std::vector<double> dist;
        for (const Vec3& c : f.keypoints.points) dist.push_back((p - c).norm());
        std::sort(dist.begin(), dist.end());
        if (dist[0] < 1e-6) continue;
        if (dist.size() > 1 && dist[1] - dist[0] < 1e-4) {
            // min-of-distances seam: the gradient is only defined a.e.
            ++kinked;
            continue;
        }
        REQUIRE(std::abs(fd_gradient(f, p, h).norm() - 1.0) < 1e-4);
    }
    CHECK(kinked < total / 100);
}

TEST_CASE("zero level set sits on isolated sphere boundaries") {
    SphereField f;
    f.keypoints = random_keypoint_set(5, 0.4, Box3{}, 3);
    f.radius = 0.08;
    for (const Vec3& c : f.keypoints.points) {
        const TriangleMesh s = icosphere(c, f.radius, 3);
        for (const Vec3& v : s.vertices) CHECK(std::abs(sphere_sdf(v, f)) < 1e-9);
    }
}

TEST_CASE("sphere_sdf is 1-Lipschitz") {
    Rng rng(21);
    SphereField f;
    f.keypoints = random_keypoint_set(4, 0.2, Box3{}, 17);
    f.radius = 0.08;
    for (int i = 0; i < 2000; ++i) {
        const Vec3 p = rng.uniform_in(Box3{});
        const Vec3 q = rng.uniform_in(Box3{});
        CHECK(std::abs(sphere_sdf(p, f) - sphere_sdf(q, f)) <= (p - q).norm() + 1e-12);
    }
}

TEST_CASE("stacked_udf hand examples") {
    KeypointSet kps;
    kps.points = {Vec3(0.1, 0, 0), Vec3(0, 0.2, 0)};
    kps.labels = std::vector<int>{3, 0};
    kps.label_count = 10;

    SECTION("zero self-distance at a keypoint, sentinel elsewhere") {
        const auto udf = stacked_udf(Vec3(0.1, 0, 0), kps);
        REQUIRE(udf.size() == 10);
        CHECK(udf[3] == 0.0);
        CHECK(udf[0] > 0.0);
        for (std::size_t k = 0; k < udf.size(); ++k)
            if (k != 0 && k != 3) CHECK(udf[k] == 1.0);
    }

    SECTION("nonexistent labels are exactly 1.0 anywhere") {
        Rng rng(5);
        for (int i = 0; i < 50; ++i) {
            const auto udf = stacked_udf(rng.uniform_in(Box3{}), kps);
            for (std::size_t k = 0; k < udf.size(); ++k)
                if (k != 0 && k != 3) CHECK(udf[k] == 1.0);
        }
    }
}

TEST_CASE("stacked_udf with all labels present is the per-keypoint distance") {
    KeypointSet kps = random_keypoint_set(10, 0.1, Box3{}, 12);
    kps.labels = std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    kps.label_count = 10;
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
        const Vec3 p = rng.uniform_in(Box3{});
        const auto udf = stacked_udf(p, kps);
        for (std::size_t k = 0; k < 10; ++k)
            CHECK(udf[k] == (p - kps.points[k]).norm());
    }
}

TEST_CASE("stacked_udf takes the minimum over duplicate labels") {
    KeypointSet kps;
    kps.points = {Vec3(0.5, 0, 0), Vec3(-0.5, 0, 0)};
    kps.labels = std::vector<int>{2, 2};
    kps.label_count = 4;
    const auto udf = stacked_udf(Vec3(0.4, 0, 0), kps);
    CHECK(udf[2] == Catch::Approx(0.1).margin(1e-15));
}

TEST_CASE("stacked_udf requires labels") {
    KeypointSet kps;
    kps.points = {Vec3(0, 0, 0)};
    CHECK_THROWS_AS(stacked_udf(Vec3(1, 0, 0), kps), validation_error);
}

TEST_CASE("label_of hand examples") {
    CHECK(label_of({0.3, 0.05, 1.0}) == 1);
    CHECK(label_of({1.0, 1.0, 1.0}) == 0);
    CHECK_THROWS_AS(label_of({}), validation_error);
}

TEST_CASE("label_of round-trips stacked_udf at keypoints with unique labels") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const int k = 3 + static_cast<int>(seed % 8);
        KeypointSet kps = random_keypoint_set(k, 0.05, Box3{}, 1000 + seed);
        std::vector<int> labels(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) labels[static_cast<std::size_t>(i)] = i;
        Rng rng(seed);
        rng.shuffle(labels);
        kps.labels = labels;
        kps.label_count = k + 2;
        for (std::size_t i = 0; i < kps.points.size(); ++i) {
            const auto udf = stacked_udf(kps.points[i], kps);
            CHECK(static_cast<int>(label_of(udf)) == labels[i]);
        }
    }
}
