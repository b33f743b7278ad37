#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "ikf/errors.hpp"
#include "ikf/geometry.hpp"

// Point-set scoring: bidirectional Hausdorff distance, Chamfer distance,
// IoU-vs-threshold curves under one-to-one matching, and top-k label
// accuracy from stacked-UDF channel scores.

namespace ikf {

namespace detail {

// Uniform-grid nearest-neighbor index. Only engaged above the brute-force
// cutoff; by construction it returns the same squared distance (the exact
// minimum of the same per-pair values) as the double loop.
class NnIndex {
public:
    static constexpr std::size_t kBruteForceCutoff = 512;

    explicit NnIndex(const std::vector<Vec3>& pts) : pts_(pts) {
        if (pts_.size() <= kBruteForceCutoff) return;
        Vec3 lo = pts_[0], hi = pts_[0];
        for (const Vec3& p : pts_) {
            lo = lo.cwiseMin(p);
            hi = hi.cwiseMax(p);
        }
        lo_ = lo;
        const Vec3 ext = (hi - lo).cwiseMax(Vec3::Constant(1e-12));
        const auto target = static_cast<double>(pts_.size());
        const double cells_per_axis = std::cbrt(target / 2.0);
        for (int a = 0; a < 3; ++a) {
            dims_[a] = std::max(1, static_cast<int>(cells_per_axis));
            cell_[a] = ext[a] / dims_[a];
        }
        cells_.assign(static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2], {});
        for (std::size_t i = 0; i < pts_.size(); ++i)
            cells_[cell_index(coords(pts_[i]))].push_back(i);
        gridded_ = true;
    }

    // squared distance to the nearest point
    double min_sq(const Vec3& q) const {
        if (!gridded_) {
            double best = std::numeric_limits<double>::infinity();
            for (const Vec3& p : pts_) best = std::min(best, (q - p).squaredNorm());
            return best;
        }
        const std::array<int, 3> c = coords(q);
        double best = std::numeric_limits<double>::infinity();
        const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
        const double cell_min = std::min({cell_[0], cell_[1], cell_[2]});
        for (int ring = 0; ring <= max_ring; ++ring) {
            scan_ring(c, ring, q, best);
            if (best < std::numeric_limits<double>::infinity()) {
                // cells at ring+1 are at least ring*cell_min away from q
                const double lower = ring * cell_min;
                if (lower * lower > best) break;
            }
        }
        return best;
    }

private:
    std::array<int, 3> coords(const Vec3& p) const {
        std::array<int, 3> c;
        for (int a = 0; a < 3; ++a) {
            const double t = (p[a] - lo_[a]) / cell_[a];
            c[a] = std::clamp(static_cast<int>(std::floor(t)), 0, dims_[a] - 1);
        }
        return c;
    }

    std::size_t cell_index(const std::array<int, 3>& c) const {
        return static_cast<std::size_t>(c[0]) +
               static_cast<std::size_t>(dims_[0]) *
                   (static_cast<std::size_t>(c[1]) + static_cast<std::size_t>(dims_[1]) * c[2]);
    }

    void scan_ring(const std::array<int, 3>& c, int ring, const Vec3& q, double& best) const {
        for (int dz = -ring; dz <= ring; ++dz)
            for (int dy = -ring; dy <= ring; ++dy)
                for (int dx = -ring; dx <= ring; ++dx) {
                    if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
                    const int x = c[0] + dx, y = c[1] + dy, z = c[2] + dz;
                    if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] ||
                        z >= dims_[2])
                        continue;
                    for (std::size_t i : cells_[cell_index({x, y, z})])
                        best = std::min(best, (q - pts_[i]).squaredNorm());
                }
    }

    const std::vector<Vec3>& pts_;
    bool gridded_ = false;
    Vec3 lo_ = Vec3::Zero();
    std::array<double, 3> cell_{1, 1, 1};
    std::array<int, 3> dims_{1, 1, 1};
    std::vector<std::vector<std::size_t>> cells_;
};

} // namespace detail

// 1/2 (max-min one way + max-min the other way), plain distances.
inline double bhd(const KeypointSet& s1, const KeypointSet& s2) {
    if (s1.points.empty() || s2.points.empty()) throw validation_error("empty point set");
    detail::NnIndex i1(s1.points), i2(s2.points);
    double fwd = 0.0, bwd = 0.0;
    for (const Vec3& p : s1.points) fwd = std::max(fwd, i2.min_sq(p));
    for (const Vec3& q : s2.points) bwd = std::max(bwd, i1.min_sq(q));
    return 0.5 * (std::sqrt(fwd) + std::sqrt(bwd));
}

// Sum of the two mean squared nearest-neighbor distances.
inline double cd(const KeypointSet& s1, const KeypointSet& s2) {
    if (s1.points.empty() || s2.points.empty()) throw validation_error("empty point set");
    detail::NnIndex i1(s1.points), i2(s2.points);
    double fwd = 0.0, bwd = 0.0;
    for (const Vec3& p : s1.points) fwd += i2.min_sq(p);
    for (const Vec3& q : s2.points) bwd += i1.min_sq(q);
    return fwd / static_cast<double>(s1.points.size()) +
           bwd / static_cast<double>(s2.points.size());
}

enum class MatchRule {
    one_to_one, // greedy ascending-distance matching, each point used once
    one_to_many // a prediction is a hit if any ground-truth point is in range
};

// IoU at each threshold: TP(t) / (|pred| + |gt| - TP(t)).
inline std::vector<std::pair<double, double>> miou_curve(
    const KeypointSet& pred, const KeypointSet& gt, const std::vector<double>& thresholds,
    MatchRule rule = MatchRule::one_to_one) {
    if (thresholds.empty()) throw validation_error("empty thresholds");
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        if (thresholds[i] < 0.0) throw validation_error("negative threshold");
        if (i > 0 && thresholds[i] < thresholds[i - 1])
            throw validation_error("thresholds not ascending");
    }
    if (pred.points.empty() || gt.points.empty()) throw validation_error("empty point set");

    std::vector<double> hit_distances; // distances of counted matches, ascending
    if (rule == MatchRule::one_to_one) {
        struct Pair {
            double d2;
            std::size_t pi, gi;
        };
        std::vector<Pair> pairs;
        pairs.reserve(pred.points.size() * gt.points.size());
        for (std::size_t pi = 0; pi < pred.points.size(); ++pi)
            for (std::size_t gi = 0; gi < gt.points.size(); ++gi)
                pairs.push_back({(pred.points[pi] - gt.points[gi]).squaredNorm(), pi, gi});
        std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
            return std::tie(a.d2, a.pi, a.gi) < std::tie(b.d2, b.pi, b.gi);
        });
        std::vector<bool> used_p(pred.points.size(), false), used_g(gt.points.size(), false);
        for (const Pair& pr : pairs) {
            if (used_p[pr.pi] || used_g[pr.gi]) continue;
            used_p[pr.pi] = used_g[pr.gi] = true;
            hit_distances.push_back(std::sqrt(pr.d2));
        }
    } else {
        detail::NnIndex gt_index(gt.points);
        for (const Vec3& p : pred.points)
            hit_distances.push_back(std::sqrt(gt_index.min_sq(p)));
        std::sort(hit_distances.begin(), hit_distances.end());
    }

    const double denom_base =
        static_cast<double>(pred.points.size()) + static_cast<double>(gt.points.size());
    std::vector<std::pair<double, double>> curve;
    curve.reserve(thresholds.size());
    for (double t : thresholds) {
        const auto tp = static_cast<double>(
            std::upper_bound(hit_distances.begin(), hit_distances.end(), t) -
            hit_distances.begin());
        curve.emplace_back(t, tp / (denom_base - tp));
    }
    return curve;
}

// Fraction of keypoints whose ground-truth label ranks among the k smallest
// channel scores. Ties rank by channel index.
inline std::map<int, double> topk_accuracy(const std::vector<std::vector<double>>& scores,
                                           const std::vector<int>& gt_labels,
                                           const std::vector<int>& ks = {1, 3, 5}) {
    if (scores.size() != gt_labels.size()) throw validation_error("length mismatch");
    if (scores.empty()) throw validation_error("empty score list");
    const std::size_t channels = scores.front().size();
    std::map<int, double> acc;
    std::vector<std::size_t> rank_of(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i].size() != channels) throw validation_error("length mismatch");
        const int gt = gt_labels[i];
        if (gt < 0 || static_cast<std::size_t>(gt) >= channels)
            throw validation_error("label out of range");
        const double v = scores[i][static_cast<std::size_t>(gt)];
        std::size_t rank = 0;
        for (std::size_t c = 0; c < channels; ++c) {
            if (c == static_cast<std::size_t>(gt)) continue;
            if (scores[i][c] < v || (scores[i][c] == v && c < static_cast<std::size_t>(gt)))
                ++rank;
        }
        rank_of[i] = rank;
    }
    for (int k : ks) {
        std::size_t hits = 0;
        for (std::size_t r : rank_of)
            if (r < static_cast<std::size_t>(k)) ++hits;
        acc[k] = static_cast<double>(hits) / static_cast<double>(scores.size());
    }
    return acc;
}

struct MetricReport {
    double bhd = 0.0;
    double cd = 0.0;
    std::map<std::string, std::pair<double, double>> per_category; // -> (bhd, cd)
    std::vector<std::pair<double, double>> miou_curve;             // (threshold, miou)
    std::map<int, double> topk;                                    // k -> accuracy
};

} // namespace ikf
