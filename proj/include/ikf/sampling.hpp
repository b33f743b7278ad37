#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ikf/binio.hpp"
#include "ikf/errors.hpp"
#include "ikf/geometry.hpp"
#include "ikf/rng.hpp"

// Synthetic ground truth and training data: subdivided icospheres standing
// in for the sphere meshes, uniform volume samples with analytic SDF values,
// on-surface samples with outward normals, and the stacked-UDF variant.

namespace ikf {

struct TrainingSample {
    Vec3 point = Vec3::Zero();
    double sdf = 0.0;
    std::optional<Vec3> normal;  // present only for on-surface samples
    std::vector<double> udf;     // empty unless built by make_udf_training_set
};

struct SampleConfig {
    int n_volume = 10000;
    int n_surface = 10000;
    Box3 bounds;
    int icosphere_level = 4; // 2,562 vertices
    std::uint64_t seed = 0;

    void validate() const {
        if (n_volume < 0 || n_surface < 0) throw validation_error("negative sample count");
        if (icosphere_level < 0 || icosphere_level > 6)
            throw validation_error("icosphere_level out of [0,6]");
    }
};

// Samples are stored in three homogeneous sections:
//   [0, n_volume)                      uniform volume samples, no normal
//   [n_volume, n_volume + n_surface)   on-surface samples with normals
//   [.., .. + n_topup)                 uniform samples filling the surface
//                                      quota when too few vertices survive
//                                      the overlap discard
struct TrainingSet {
    std::vector<TrainingSample> samples;
    std::size_t n_volume = 0;
    std::size_t n_surface = 0;
    std::size_t n_topup = 0;
    int label_count = 0; // K of the udf channels; 0 when absent
};

// Subdivided icosahedron with every vertex re-projected onto the sphere:
// 10*4^level + 2 vertices, 20*4^level triangles, outward unit normals.
inline TriangleMesh icosphere(const Vec3& center, double radius, int level) {
    if (radius <= 0.0) throw validation_error("icosphere radius must be positive");
    if (level < 0) throw validation_error("icosphere level must be nonnegative");

    const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> dirs = {
        {-1, phi, 0}, {1, phi, 0},  {-1, -phi, 0}, {1, -phi, 0},
        {0, -1, phi}, {0, 1, phi},  {0, -1, -phi}, {0, 1, -phi},
        {phi, 0, -1}, {phi, 0, 1},  {-phi, 0, -1}, {-phi, 0, 1}};
    for (Vec3& d : dirs) d.normalize();

    std::vector<std::array<int, 3>> faces = {
        {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
        {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
        {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
        {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

    for (int l = 0; l < level; ++l) {
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            const auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            Vec3 m = (dirs[a] + dirs[b]).normalized();
            dirs.push_back(m);
            const int idx = static_cast<int>(dirs.size()) - 1;
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<std::array<int, 3>> next;
        next.reserve(faces.size() * 4);
        for (const auto& f : faces) {
            const int ab = mid(f[0], f[1]);
            const int bc = mid(f[1], f[2]);
            const int ca = mid(f[2], f[0]);
            next.push_back({f[0], ab, ca});
            next.push_back({f[1], bc, ab});
            next.push_back({f[2], ca, bc});
            next.push_back({ab, bc, ca});
        }
        faces = std::move(next);
    }

    TriangleMesh mesh;
    mesh.vertices.reserve(dirs.size());
    mesh.normals.reserve(dirs.size());
    for (const Vec3& d : dirs) {
        mesh.vertices.push_back(center + radius * d);
        mesh.normals.push_back(d);
    }
    mesh.triangles = std::move(faces);
    return mesh;
}

// Rejection-samples k points inside bounds with pairwise separation at least
// min_separation. Deterministic for a given seed.
inline KeypointSet random_keypoint_set(int k, double min_separation, const Box3& bounds,
                                       std::uint64_t seed) {
    if (k < 1) throw validation_error("keypoint count must be >= 1");
    if (min_separation < 0.0) throw validation_error("min_separation must be >= 0");

    Rng rng(seed);
    KeypointSet set;
    set.points.reserve(static_cast<std::size_t>(k));
    const double min_sep2 = min_separation * min_separation;
    const long max_attempts = 10000L * k;
    long attempts = 0;
    while (static_cast<int>(set.points.size()) < k) {
        if (attempts++ >= max_attempts) throw numeric_error("packing failed");
        const Vec3 candidate = rng.uniform_in(bounds);
        bool ok = true;
        for (const Vec3& q : set.points) {
            if ((candidate - q).squaredNorm() < min_sep2) {
                ok = false;
                break;
            }
        }
        if (ok) set.points.push_back(candidate);
    }
    return set;
}

// Volume samples carry the analytic SDF; surface samples come from the
// icosphere vertices of every keypoint with sdf = 0 and the outward radial
// normal of their own sphere. Vertices strictly inside another sphere
// (analytic SDF < -1e-6) are not boundary points of the union and are
// discarded; any shortfall in the surface quota is filled with additional
// uniform volume samples in the topup section.
inline TrainingSet make_training_set(const SphereField& field, const SampleConfig& cfg) {
    cfg.validate();
    if (field.keypoints.points.empty()) throw validation_error("empty field");
    if (field.radius <= 0.0) throw validation_error("radius must be positive");

    Rng rng(cfg.seed);
    TrainingSet out;
    out.samples.reserve(static_cast<std::size_t>(cfg.n_volume + cfg.n_surface));

    for (int i = 0; i < cfg.n_volume; ++i) {
        TrainingSample s;
        s.point = rng.uniform_in(cfg.bounds);
        s.sdf = sphere_sdf(s.point, field);
        out.samples.push_back(std::move(s));
    }
    out.n_volume = static_cast<std::size_t>(cfg.n_volume);

    std::vector<TrainingSample> candidates;
    for (const Vec3& c : field.keypoints.points) {
        const TriangleMesh sphere = icosphere(c, field.radius, cfg.icosphere_level);
        for (std::size_t v = 0; v < sphere.vertices.size(); ++v) {
            if (sphere_sdf(sphere.vertices[v], field) < -1e-6) continue;
            TrainingSample s;
            s.point = sphere.vertices[v];
            s.sdf = 0.0;
            s.normal = sphere.normals[v];
            candidates.push_back(std::move(s));
        }
    }

    const auto quota = static_cast<std::size_t>(cfg.n_surface);
    if (candidates.size() > quota) {
        // partial Fisher-Yates: the first `quota` entries are a uniform draw
        for (std::size_t i = 0; i < quota; ++i) {
            const std::size_t j = i + rng.index(candidates.size() - i);
            std::swap(candidates[i], candidates[j]);
        }
        candidates.resize(quota);
    }
    out.n_surface = candidates.size();
    for (auto& s : candidates) out.samples.push_back(std::move(s));

    out.n_topup = quota - out.n_surface;
    for (std::size_t i = 0; i < out.n_topup; ++i) {
        TrainingSample s;
        s.point = rng.uniform_in(cfg.bounds);
        s.sdf = sphere_sdf(s.point, field);
        out.samples.push_back(std::move(s));
    }
    return out;
}

// Same sample locations as make_training_set (same seed, same sequence) with
// the stacked-UDF channels filled in.
inline TrainingSet make_udf_training_set(const SphereField& field, const SampleConfig& cfg) {
    if (!field.keypoints.labeled()) throw validation_error("unlabeled keypoints");
    TrainingSet set = make_training_set(field, cfg);
    set.label_count = field.keypoints.label_count;
    for (TrainingSample& s : set.samples) s.udf = stacked_udf(s.point, field.keypoints);
    return set;
}

// ---------------------------------------------------------------------------
// IKPS sample file: little-endian, f32 records.
//   magic "IKPS" | u32 version | u32 n_volume | u32 n_surface | u32 n_topup
//   | u32 K | records
// Volume and topup records are (x,y,z,sdf [,K udf values]); surface records
// are (x,y,z,sdf,nx,ny,nz [,K udf values]).
// ---------------------------------------------------------------------------

inline void write_training_set(const TrainingSet& set, const std::string& path) {
    auto os = binio::open_out(path);
    binio::put_magic(os, "IKPS");
    binio::put_u32(os, 1u);
    binio::put_u32(os, static_cast<std::uint32_t>(set.n_volume));
    binio::put_u32(os, static_cast<std::uint32_t>(set.n_surface));
    binio::put_u32(os, static_cast<std::uint32_t>(set.n_topup));
    binio::put_u32(os, static_cast<std::uint32_t>(set.label_count));
    auto put_record = [&](const TrainingSample& s, bool with_normal) {
        binio::put_f32(os, static_cast<float>(s.point.x()));
        binio::put_f32(os, static_cast<float>(s.point.y()));
        binio::put_f32(os, static_cast<float>(s.point.z()));
        binio::put_f32(os, static_cast<float>(s.sdf));
        if (with_normal) {
            binio::put_f32(os, static_cast<float>(s.normal->x()));
            binio::put_f32(os, static_cast<float>(s.normal->y()));
            binio::put_f32(os, static_cast<float>(s.normal->z()));
        }
        for (int k = 0; k < set.label_count; ++k)
            binio::put_f32(os, static_cast<float>(s.udf[static_cast<std::size_t>(k)]));
    };
    for (std::size_t i = 0; i < set.samples.size(); ++i) {
        const bool on_surface = i >= set.n_volume && i < set.n_volume + set.n_surface;
        put_record(set.samples[i], on_surface);
    }
    if (!os) throw validation_error("write failed: " + path);
}

inline TrainingSet read_training_set(const std::string& path) {
    auto is = binio::open_in(path);
    binio::expect_magic(is, "IKPS", "sample");
    if (binio::get_u32(is) != 1u) throw validation_error("unsupported IKPS version");
    TrainingSet set;
    set.n_volume = binio::get_u32(is);
    set.n_surface = binio::get_u32(is);
    set.n_topup = binio::get_u32(is);
    set.label_count = static_cast<int>(binio::get_u32(is));
    const std::size_t total = set.n_volume + set.n_surface + set.n_topup;
    set.samples.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        TrainingSample s;
        s.point.x() = binio::get_f32(is);
        s.point.y() = binio::get_f32(is);
        s.point.z() = binio::get_f32(is);
        s.sdf = binio::get_f32(is);
        if (i >= set.n_volume && i < set.n_volume + set.n_surface) {
            Vec3 n;
            n.x() = binio::get_f32(is);
            n.y() = binio::get_f32(is);
            n.z() = binio::get_f32(is);
            s.normal = n;
        }
        if (set.label_count > 0) {
            s.udf.resize(static_cast<std::size_t>(set.label_count));
            for (auto& u : s.udf) u = binio::get_f32(is);
        }
        set.samples.push_back(std::move(s));
    }
    return set;
}

} // namespace ikf
