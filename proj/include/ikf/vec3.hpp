#pragma once

#include <Eigen/Core>

namespace ikf {

using Vec3 = Eigen::Vector3d;

// Axis-aligned box; defaults to the normalized model space [-1,1]^3.
struct Box3 {
    Vec3 min{-1.0, -1.0, -1.0};
    Vec3 max{1.0, 1.0, 1.0};

    Vec3 extent() const { return max - min; }
    Vec3 center() const { return 0.5 * (min + max); }

    bool contains(const Vec3& p) const {
        return p.x() >= min.x() && p.x() <= max.x() &&
               p.y() >= min.y() && p.y() <= max.y() &&
               p.z() >= min.z() && p.z() <= max.z();
    }

    void expand(double margin) {
        min.array() -= margin;
        max.array() += margin;
    }
};

} // namespace ikf
