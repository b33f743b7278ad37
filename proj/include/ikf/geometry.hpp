#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include "ikf/errors.hpp"
#include "ikf/vec3.hpp"

// Analytic implicit representations of keypoint sets: the signed distance
// field of a union of equal-radius spheres, its gradient, and the per-label
// stacked unsigned distance field.

namespace ikf {

// Ordered keypoints with optional semantic labels in [0, label_count).
struct KeypointSet {
    std::vector<Vec3> points;
    std::optional<std::vector<int>> labels;
    int label_count = 0;

    std::size_t size() const { return points.size(); }
    bool labeled() const { return labels.has_value(); }

    void validate() const {
        for (const Vec3& p : points)
            if (!p.allFinite()) throw validation_error("non-finite keypoint");
        if (labels) {
            if (labels->size() != points.size())
                throw validation_error("labels/points length mismatch");
            if (label_count <= 0) throw validation_error("label_count must be positive");
            for (int l : *labels)
                if (l < 0 || l >= label_count) throw validation_error("label out of range");
        }
    }
};

// Keypoints expanded to spheres of a shared radius; evaluating the SDF at
// any center yields exactly -radius.
struct SphereField {
    KeypointSet keypoints;
    double radius = 0.08;
};

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<Vec3> normals; // per-vertex, unit length; empty when absent

    bool has_normals() const { return !normals.empty(); }
    bool empty() const { return triangles.empty(); }
};

// Index and distance of the nearest keypoint; ties go to the lowest index.
inline std::pair<std::size_t, double> nearest_keypoint(const Vec3& p,
                                                       const std::vector<Vec3>& centers) {
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < centers.size(); ++i) {
        const double d2 = (p - centers[i]).squaredNorm();
        if (d2 < best_d2) {
            best_d2 = d2;
            best = i;
        }
    }
    return {best, std::sqrt(best_d2)};
}

// Signed distance to the union of keypoint spheres: min_i ||p - c_i|| - r.
// Negative inside the union, zero on its boundary, positive outside.
inline double sphere_sdf(const Vec3& p, const SphereField& field) {
    if (field.keypoints.points.empty()) throw validation_error("empty field");
    return nearest_keypoint(p, field.keypoints.points).second - field.radius;
}

// Unit gradient of sphere_sdf: the radial direction from the nearest center.
// Undefined at the centers themselves; on equidistant surfaces the nearest
// center with the lowest index wins (the field is a distance field a.e.).
inline Vec3 sphere_sdf_gradient(const Vec3& p, const SphereField& field) {
    if (field.keypoints.points.empty()) throw validation_error("empty field");
    const auto [idx, dist] = nearest_keypoint(p, field.keypoints.points);
    if (dist < 1e-12) throw numeric_error("singular gradient");
    return (p - field.keypoints.points[idx]) / dist;
}

// K-channel unsigned distance field: channel k holds the distance to the
// keypoint carrying label k (minimum over duplicates), 1.0 when no keypoint
// carries the label.
inline std::vector<double> stacked_udf(const Vec3& p, const KeypointSet& kps) {
    if (!kps.labeled()) throw validation_error("unlabeled keypoints");
    kps.validate();
    std::vector<double> channels(static_cast<std::size_t>(kps.label_count), 1.0);
    std::vector<bool> present(static_cast<std::size_t>(kps.label_count), false);
    for (std::size_t i = 0; i < kps.points.size(); ++i) {
        const auto k = static_cast<std::size_t>((*kps.labels)[i]);
        const double d = (p - kps.points[i]).norm();
        if (!present[k] || d < channels[k]) {
            channels[k] = d;
            present[k] = true;
        }
    }
    return channels;
}

// argmin over channels; ties go to the lowest index.
inline std::size_t label_of(const std::vector<double>& udf_values) {
    if (udf_values.empty()) throw validation_error("empty udf vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < udf_values.size(); ++i)
        if (udf_values[i] < udf_values[best]) best = i;
    return best;
}

} // namespace ikf
