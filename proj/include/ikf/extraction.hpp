#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <string>
#include <vector>

#include "ikf/errors.hpp"
#include "ikf/geometry.hpp"
#include "ikf/isosurface.hpp"

// Recovers sphere centers of a known radius from mesh vertices: Hough voting
// over a voxelized bounding box, clustering of high-vote bins, iterative
// nearest-point partitioning with a closed-form minimum-variance sphere fit,
// and merging of centers closer than the radius.

namespace ikf {

struct ExtractionConfig {
    double grid_size = 1.0 / 32.0; // vote bin edge length d
    double radius = 0.08;          // sphere radius, shared with the field
    double epsilon = 0.01;         // refinement convergence threshold
    int n_vote = 80;               // cluster threshold (strict >)
    int n_max = 10;                // refinement iteration cap
    int max_merge_rounds = 10;     // merge/refine alternation cap

    // The pseudocode variant that votes for bins within d/2 of the surface
    // point itself; maxima then sit on the surface instead of at centers.
    // Kept for comparison, off by default.
    bool literal_vote = false;

    // Scale n_vote by (component vertex count / 2562); off by default to
    // match the fixed threshold.
    bool density_normalize = false;

    void validate() const {
        if (grid_size <= 0 || radius <= 0 || epsilon <= 0)
            throw validation_error("extraction lengths must be positive");
        if (n_vote <= 0 || n_max <= 0 || max_merge_rounds <= 0)
            throw validation_error("extraction counts must be positive");
    }
};

// Vote bins over the component bounding box expanded by `radius` on all
// sides, so that the center of a sphere touching the box edge is always
// representable.
struct VoteGrid {
    Vec3 origin = Vec3::Zero(); // min corner of bin (0,0,0)
    double cell = 1.0 / 32.0;
    std::array<int, 3> dims{1, 1, 1};
    std::vector<std::uint32_t> votes;

    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(j) +
                    static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
    }

    Vec3 bin_center(int i, int j, int k) const {
        return origin + cell * Vec3(i + 0.5, j + 0.5, k + 0.5);
    }

    std::uint32_t vote(int i, int j, int k) const { return votes[index(i, j, k)]; }
};

// Step 1: every point votes for the bins whose centers lie within d/2 of the
// sphere of radius `radius` around it (annulus voting for a known-radius
// sphere Hough transform).
inline VoteGrid hough_vote(const std::vector<Vec3>& points, const ExtractionConfig& cfg) {
    cfg.validate();
    if (points.empty()) throw validation_error("empty point set");

    Vec3 lo = points[0], hi = points[0];
    for (const Vec3& p : points) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    lo.array() -= cfg.radius;
    hi.array() += cfg.radius;

    VoteGrid grid;
    grid.origin = lo;
    grid.cell = cfg.grid_size;
    for (int a = 0; a < 3; ++a)
        grid.dims[a] = std::max(1, static_cast<int>(std::ceil((hi[a] - lo[a]) / grid.cell)));
    grid.votes.assign(static_cast<std::size_t>(grid.dims[0]) * grid.dims[1] * grid.dims[2], 0);

    const double reach = cfg.literal_vote ? cfg.grid_size / 2.0 : cfg.radius + cfg.grid_size / 2.0;
    const double half_cell = cfg.grid_size / 2.0;
    for (const Vec3& p : points) {
        int lo_bin[3], hi_bin[3];
        for (int a = 0; a < 3; ++a) {
            lo_bin[a] = std::max(
                0, static_cast<int>(std::floor((p[a] - reach - grid.origin[a]) / grid.cell - 0.5)));
            hi_bin[a] = std::min(
                grid.dims[a] - 1,
                static_cast<int>(std::ceil((p[a] + reach - grid.origin[a]) / grid.cell - 0.5)));
        }
        for (int k = lo_bin[2]; k <= hi_bin[2]; ++k)
            for (int j = lo_bin[1]; j <= hi_bin[1]; ++j)
                for (int i = lo_bin[0]; i <= hi_bin[0]; ++i) {
                    const double dist = (grid.bin_center(i, j, k) - p).norm();
                    const bool in = cfg.literal_vote
                                        ? dist <= half_cell
                                        : std::abs(dist - cfg.radius) <= half_cell;
                    if (in) ++grid.votes[grid.index(i, j, k)];
                }
    }
    return grid;
}

// Step 2: 26-connected clusters of bins with vote > threshold; one candidate
// per cluster at its maximum-vote bin center (ties: lexicographically
// smallest (i,j,k)).
inline std::vector<Vec3> cluster_candidates(const VoteGrid& grid, const ExtractionConfig& cfg,
                                            int threshold_override = -1) {
    const std::uint32_t threshold = static_cast<std::uint32_t>(
        threshold_override >= 0 ? threshold_override : cfg.n_vote);
    const std::size_t n = grid.votes.size();
    std::vector<bool> above(n, false);
    for (std::size_t i = 0; i < n; ++i) above[i] = grid.votes[i] > threshold;

    std::vector<Vec3> candidates;
    std::vector<bool> visited(n, false);
    for (std::size_t start = 0; start < n; ++start) {
        if (!above[start] || visited[start]) continue;
        // BFS over 26-neighborhood
        std::array<int, 3> best_bin{};
        std::uint32_t best_vote = 0;
        std::deque<std::size_t> queue{start};
        visited[start] = true;
        while (!queue.empty()) {
            const std::size_t cur = queue.front();
            queue.pop_front();
            const int ci = static_cast<int>(cur % grid.dims[0]);
            const int cj = static_cast<int>((cur / grid.dims[0]) % grid.dims[1]);
            const int ck = static_cast<int>(cur / (static_cast<std::size_t>(grid.dims[0]) *
                                                   grid.dims[1]));
            const std::uint32_t v = grid.votes[cur];
            const std::array<int, 3> bin{ci, cj, ck};
            if (v > best_vote || (v == best_vote && bin < best_bin)) {
                best_vote = v;
                best_bin = bin;
            }
            for (int dk = -1; dk <= 1; ++dk)
                for (int dj = -1; dj <= 1; ++dj)
                    for (int di = -1; di <= 1; ++di) {
                        if (di == 0 && dj == 0 && dk == 0) continue;
                        const int ni = ci + di, nj = cj + dj, nk = ck + dk;
                        if (ni < 0 || nj < 0 || nk < 0 || ni >= grid.dims[0] ||
                            nj >= grid.dims[1] || nk >= grid.dims[2])
                            continue;
                        const std::size_t nidx = grid.index(ni, nj, nk);
                        if (above[nidx] && !visited[nidx]) {
                            visited[nidx] = true;
                            queue.push_back(nidx);
                        }
                    }
        }
        candidates.push_back(grid.bin_center(best_bin[0], best_bin[1], best_bin[2]));
    }
    return candidates;
}

// Closed-form minimum-variance sphere center: c = mean + 1/2 Cov^-1 gamma,
// with Cov the covariance of the points and gamma the mean of
// (x - mean) ||x - mean||^2. Exact for points sampled from a sphere surface.
inline Vec3 best_sphere_center(const std::vector<Vec3>& points) {
    if (points.size() < 4) throw numeric_error("degenerate point set");

    Vec3 mean = Vec3::Zero();
    for (const Vec3& p : points) mean += p;
    mean /= static_cast<double>(points.size());

    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    Vec3 gamma = Vec3::Zero();
    for (const Vec3& p : points) {
        const Vec3 u = p - mean;
        cov += u * u.transpose();
        gamma += u * u.squaredNorm();
    }
    cov /= static_cast<double>(points.size());
    gamma /= static_cast<double>(points.size());

    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    const double lo = eig.eigenvalues()(0), hi = eig.eigenvalues()(2);
    if (lo <= 0.0 || hi / lo > 1e8) throw numeric_error("degenerate point set");

    return mean + 0.5 * cov.ldlt().solve(gamma);
}

// Step 3: nearest-center partition, closed-form refit, repeated up to n_max
// times or until the largest center movement drops below epsilon. Candidates
// whose partition turns degenerate are dropped with a warning.
inline std::vector<Vec3> refine_centers(const std::vector<Vec3>& points,
                                        const std::vector<Vec3>& candidates,
                                        const ExtractionConfig& cfg,
                                        std::vector<std::string>* warnings = nullptr) {
    cfg.validate();
    if (candidates.empty()) throw validation_error("no candidates");
    std::vector<Vec3> centers = candidates;

    for (int iter = 0; iter < cfg.n_max; ++iter) {
        std::vector<std::vector<Vec3>> partition(centers.size());
        for (const Vec3& p : points) {
            std::size_t best = 0;
            double best_d2 = (p - centers[0]).squaredNorm();
            for (std::size_t c = 1; c < centers.size(); ++c) {
                const double d2 = (p - centers[c]).squaredNorm();
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = c;
                }
            }
            partition[best].push_back(p);
        }

        std::vector<Vec3> next;
        next.reserve(centers.size());
        double max_move = 0.0;
        for (std::size_t c = 0; c < centers.size(); ++c) {
            try {
                const Vec3 refit = best_sphere_center(partition[c]);
                max_move = std::max(max_move, (refit - centers[c]).norm());
                next.push_back(refit);
            } catch (const numeric_error&) {
                if (warnings)
                    warnings->push_back("dropped degenerate candidate during refinement");
            }
        }
        if (next.empty()) throw numeric_error("no valid centers");
        const bool dropped = next.size() != centers.size();
        centers = std::move(next);
        if (!dropped && max_move < cfg.epsilon) break;
    }
    return centers;
}

// Step 4: transitively merge centers closer than the radius, replacing each
// group by its centroid. Iterated internally until no pair remains within
// the radius, so a second call is a no-op.
inline std::pair<std::vector<Vec3>, bool> merge_close(std::vector<Vec3> centers,
                                                      const ExtractionConfig& cfg) {
    cfg.validate();
    bool merged_any = false;
    for (;;) {
        const std::size_t n = centers.size();
        if (n <= 1) break;
        std::vector<std::size_t> parent(n);
        std::iota(parent.begin(), parent.end(), 0);
        std::function<std::size_t(std::size_t)> find = [&](std::size_t v) {
            while (parent[v] != v) {
                parent[v] = parent[parent[v]];
                v = parent[v];
            }
            return v;
        };
        bool merged = false;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                if ((centers[i] - centers[j]).norm() < cfg.radius) {
                    const std::size_t a = find(i), b = find(j);
                    if (a != b) {
                        parent[std::max(a, b)] = std::min(a, b);
                        merged = true;
                    }
                }
        if (!merged) break;
        merged_any = true;

        std::vector<Vec3> sums(n, Vec3::Zero());
        std::vector<int> counts(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t r = find(i);
            sums[r] += centers[i];
            counts[r] += 1;
        }
        std::vector<Vec3> next;
        for (std::size_t i = 0; i < n; ++i)
            if (counts[i] > 0) next.push_back(sums[i] / counts[i]);
        centers = std::move(next);
    }
    return {std::move(centers), merged_any};
}

// Full pipeline over a mesh: per connected component vote -> cluster ->
// refine, then alternate merge and re-refine until stable. If no bin clears
// the vote threshold the threshold is halved once before the component is
// given up with a warning.
inline KeypointSet extract_keypoints(const TriangleMesh& mesh, const ExtractionConfig& cfg,
                                     std::vector<std::string>* warnings = nullptr) {
    cfg.validate();
    KeypointSet result;
    if (mesh.triangles.empty()) return result;

    const std::vector<TriangleMesh> components = split_components(mesh);
    for (std::size_t ci = 0; ci < components.size(); ++ci) {
        const std::vector<Vec3>& pts = components[ci].vertices;
        const std::string tag = "component " + std::to_string(ci) + ": ";

        int threshold = cfg.n_vote;
        if (cfg.density_normalize)
            threshold = std::max(
                1, static_cast<int>(std::lround(cfg.n_vote * static_cast<double>(pts.size()) /
                                                2562.0)));

        const VoteGrid votes = hough_vote(pts, cfg);
        std::vector<Vec3> candidates = cluster_candidates(votes, cfg, threshold);
        if (candidates.empty()) {
            candidates = cluster_candidates(votes, cfg, threshold / 2);
            if (candidates.empty()) {
                if (warnings) warnings->push_back(tag + "no vote cluster, skipped");
                continue;
            }
            if (warnings) warnings->push_back(tag + "vote threshold halved");
        }

        std::vector<Vec3> centers;
        try {
            centers = refine_centers(pts, candidates, cfg, warnings);
        } catch (const numeric_error&) {
            if (warnings) warnings->push_back(tag + "refinement degenerate, skipped");
            continue;
        }

        for (int round = 0;; ++round) {
            auto [merged_centers, merged] = merge_close(centers, cfg);
            centers = std::move(merged_centers);
            if (!merged) break;
            if (round >= cfg.max_merge_rounds) {
                if (warnings) warnings->push_back(tag + "merge round cap reached");
                break;
            }
            try {
                centers = refine_centers(pts, centers, cfg, warnings);
            } catch (const numeric_error&) {
                if (warnings) warnings->push_back(tag + "post-merge refinement degenerate");
                break;
            }
        }
        result.points.insert(result.points.end(), centers.begin(), centers.end());
    }
    return result;
}

} // namespace ikf
