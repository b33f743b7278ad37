#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ikf/binio.hpp"
#include "ikf/errors.hpp"
#include "ikf/geometry.hpp"
#include "ikf/mc_tables.hpp"
#include "ikf/parallel.hpp"

// Dense field sampling, Marching Cubes extraction of the zero level set, and
// vertex-connected component splitting.

namespace ikf {

// Regular lattice of field samples; values in x-fastest row-major order,
// lattice points include the box corners.
struct ScalarGrid {
    std::array<int, 3> resolution{2, 2, 2};
    Box3 bounds;
    std::vector<double> values;

    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(resolution[0]) *
                   (static_cast<std::size_t>(j) +
                    static_cast<std::size_t>(resolution[1]) * static_cast<std::size_t>(k));
    }

    double value(int i, int j, int k) const { return values[index(i, j, k)]; }

    Vec3 step() const {
        return Vec3(bounds.extent().x() / (resolution[0] - 1),
                    bounds.extent().y() / (resolution[1] - 1),
                    bounds.extent().z() / (resolution[2] - 1));
    }

    Vec3 point(int i, int j, int k) const {
        const Vec3 h = step();
        return bounds.min + Vec3(i * h.x(), j * h.y(), k * h.z());
    }

    void validate() const {
        for (int a = 0; a < 3; ++a)
            if (resolution[a] < 2) throw validation_error("grid resolution must be >= 2");
        const std::size_t n = static_cast<std::size_t>(resolution[0]) * resolution[1] *
                              static_cast<std::size_t>(resolution[2]);
        if (values.size() != n) throw validation_error("grid value count mismatch");
    }
};

// Samples an arbitrary scalar field on the lattice. Each lattice value is
// written to its own slot, so parallel evaluation is reproducible.
template <class Field>
ScalarGrid eval_grid(Field&& field, const std::array<int, 3>& resolution, const Box3& bounds,
                     unsigned threads = 0) {
    for (int a = 0; a < 3; ++a)
        if (resolution[a] < 2) throw validation_error("grid resolution must be >= 2");
    ScalarGrid grid;
    grid.resolution = resolution;
    grid.bounds = bounds;
    const std::size_t n = static_cast<std::size_t>(resolution[0]) * resolution[1] *
                          static_cast<std::size_t>(resolution[2]);
    grid.values.resize(n);
    const std::size_t nx = static_cast<std::size_t>(resolution[0]);
    const std::size_t nxy = nx * static_cast<std::size_t>(resolution[1]);
    for_each_chunk(n, nxy, threads, [&](std::size_t, std::size_t begin, std::size_t end) {
        for (std::size_t idx = begin; idx < end; ++idx) {
            const int i = static_cast<int>(idx % nx);
            const int j = static_cast<int>((idx / nx) % resolution[1]);
            const int k = static_cast<int>(idx / nxy);
            grid.values[idx] = field(grid.point(i, j, k));
        }
    });
    return grid;
}

inline ScalarGrid eval_grid(const SphereField& field, const std::array<int, 3>& resolution,
                            const Box3& bounds, unsigned threads = 0) {
    return eval_grid([&field](const Vec3& p) { return sphere_sdf(p, field); }, resolution,
                     bounds, threads);
}

namespace detail {

// Central differences inside, one-sided at the borders.
inline Vec3 grid_gradient(const ScalarGrid& g, int i, int j, int k) {
    const Vec3 h = g.step();
    auto diff = [&](int axis) {
        int lo[3] = {i, j, k}, hi[3] = {i, j, k};
        double span = 2.0;
        if (hi[axis] + 1 < g.resolution[axis])
            ++hi[axis];
        else
            span -= 1.0;
        if (lo[axis] > 0)
            --lo[axis];
        else
            span -= 1.0;
        return (g.value(hi[0], hi[1], hi[2]) - g.value(lo[0], lo[1], lo[2])) / (span * h[axis]);
    };
    return Vec3(diff(0), diff(1), diff(2));
}

} // namespace detail

// Zero level set (or any iso level) of a grid as a welded triangle mesh.
// Triangles are wound so that their normals point toward increasing field
// values (outward for a signed distance field); per-vertex normals are the
// interpolated, normalized grid gradients. Lattice values exactly equal to
// iso are nudged by 1e-10 to keep every crossing strict.
inline TriangleMesh marching_cubes(const ScalarGrid& grid, double iso = 0.0) {
    grid.validate();
    TriangleMesh mesh;

    const int nx = grid.resolution[0], ny = grid.resolution[1], nz = grid.resolution[2];
    auto fetch = [&](int i, int j, int k) {
        const double v = grid.value(i, j, k);
        return v == iso ? iso + 1e-10 : v;
    };

    // welded vertices keyed by (lattice point, axis) of the crossed edge
    std::unordered_map<std::uint64_t, int> edge_vertex;
    auto edge_key = [&](int i, int j, int k, int axis) {
        const std::uint64_t lin = static_cast<std::uint64_t>(i) +
                                  static_cast<std::uint64_t>(nx) *
                                      (static_cast<std::uint64_t>(j) +
                                       static_cast<std::uint64_t>(ny) *
                                           static_cast<std::uint64_t>(k));
        return lin * 3 + static_cast<std::uint64_t>(axis);
    };

    auto edge_point = [&](int ci, int cj, int ck, int edge) {
        const int* a = mc::kCorner[mc::kEdgeCorner[edge][0]];
        const int* b = mc::kCorner[mc::kEdgeCorner[edge][1]];
        int A[3] = {ci + a[0], cj + a[1], ck + a[2]};
        int B[3] = {ci + b[0], cj + b[1], ck + b[2]};
        int axis = 0;
        for (int d = 0; d < 3; ++d)
            if (A[d] != B[d]) axis = d;
        if (A[axis] > B[axis]) std::swap(A, B);
        const std::uint64_t key = edge_key(A[0], A[1], A[2], axis);
        auto it = edge_vertex.find(key);
        if (it != edge_vertex.end()) return it->second;

        const double va = fetch(A[0], A[1], A[2]);
        const double vb = fetch(B[0], B[1], B[2]);
        const double t = (iso - va) / (vb - va);
        Vec3 p = grid.point(A[0], A[1], A[2]);
        p[axis] += t * grid.step()[axis];
        Vec3 n = (1.0 - t) * detail::grid_gradient(grid, A[0], A[1], A[2]) +
                 t * detail::grid_gradient(grid, B[0], B[1], B[2]);
        const double len = n.norm();
        n = len > 1e-12 ? Vec3(n / len) : Vec3(0, 0, 1);

        const int idx = static_cast<int>(mesh.vertices.size());
        mesh.vertices.push_back(p);
        mesh.normals.push_back(n);
        edge_vertex.emplace(key, idx);
        return idx;
    };

    for (int k = 0; k + 1 < nz; ++k)
        for (int j = 0; j + 1 < ny; ++j)
            for (int i = 0; i + 1 < nx; ++i) {
                int cube = 0;
                for (int c = 0; c < 8; ++c) {
                    const int* o = mc::kCorner[c];
                    if (fetch(i + o[0], j + o[1], k + o[2]) < iso) cube |= 1 << c;
                }
                if (mc::kEdgeTable[cube] == 0) continue;
                int ev[12];
                for (int e = 0; e < 12; ++e)
                    if (mc::kEdgeTable[cube] & (1 << e)) ev[e] = edge_point(i, j, k, e);
                for (const int* t = mc::kTriTable[cube]; *t != -1; t += 3)
                    mesh.triangles.push_back({ev[t[0]], ev[t[1]], ev[t[2]]});
            }
    return mesh;
}

// Partition by vertex connectivity (triangles sharing a vertex index are
// connected). Components are ordered by their smallest original vertex index
// and re-indexed; only vertices referenced by triangles are kept.
inline std::vector<TriangleMesh> split_components(const TriangleMesh& mesh) {
    std::vector<int> parent(mesh.vertices.size());
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int v) {
        while (parent[v] != v) {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        return v;
    };
    auto unite = [&](int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    };
    for (const auto& t : mesh.triangles) {
        unite(t[0], t[1]);
        unite(t[1], t[2]);
    }

    // root -> component slot, ordered by smallest vertex index (== root id)
    std::map<int, int> slot;
    for (const auto& t : mesh.triangles) {
        const int r = find(t[0]);
        if (!slot.count(r)) slot.emplace(r, 0);
    }
    int next_slot = 0;
    for (auto& [root, s] : slot) s = next_slot++;

    std::vector<TriangleMesh> parts(slot.size());
    std::vector<int> remap(mesh.vertices.size(), -1);
    for (int v = 0; v < static_cast<int>(mesh.vertices.size()); ++v) {
        const auto it = slot.find(find(v));
        if (it == slot.end()) continue; // not referenced by any triangle
        TriangleMesh& part = parts[static_cast<std::size_t>(it->second)];
        remap[v] = static_cast<int>(part.vertices.size());
        part.vertices.push_back(mesh.vertices[v]);
        if (mesh.has_normals()) part.normals.push_back(mesh.normals[v]);
    }
    for (const auto& t : mesh.triangles) {
        TriangleMesh& part = parts[static_cast<std::size_t>(slot.at(find(t[0])))];
        part.triangles.push_back({remap[t[0]], remap[t[1]], remap[t[2]]});
    }
    return parts;
}

// ---------------------------------------------------------------------------
// Mesh and grid files
// ---------------------------------------------------------------------------

inline void write_obj(const TriangleMesh& mesh, const std::string& path) {
    auto os = binio::open_out(path);
    char buf[128];
    for (const Vec3& v : mesh.vertices) {
        std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", v.x(), v.y(), v.z());
        os << buf;
    }
    for (const Vec3& n : mesh.normals) {
        std::snprintf(buf, sizeof buf, "vn %.17g %.17g %.17g\n", n.x(), n.y(), n.z());
        os << buf;
    }
    for (const auto& t : mesh.triangles) {
        if (mesh.has_normals())
            std::snprintf(buf, sizeof buf, "f %d//%d %d//%d %d//%d\n", t[0] + 1, t[0] + 1,
                          t[1] + 1, t[1] + 1, t[2] + 1, t[2] + 1);
        else
            std::snprintf(buf, sizeof buf, "f %d %d %d\n", t[0] + 1, t[1] + 1, t[2] + 1);
        os << buf;
    }
    if (!os) throw validation_error("write failed: " + path);
}

inline TriangleMesh read_obj(const std::string& path) {
    auto is = binio::open_in(path);
    TriangleMesh mesh;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            Vec3 v;
            ls >> v.x() >> v.y() >> v.z();
            mesh.vertices.push_back(v);
        } else if (tag == "vn") {
            Vec3 n;
            ls >> n.x() >> n.y() >> n.z();
            mesh.normals.push_back(n);
        } else if (tag == "f") {
            std::array<int, 3> t{};
            for (int c = 0; c < 3; ++c) {
                std::string tok;
                ls >> tok;
                t[c] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
            }
            mesh.triangles.push_back(t);
        }
    }
    return mesh;
}

// Binary little-endian PLY; coordinates and normals downcast to f32.
inline void write_ply(const TriangleMesh& mesh, const std::string& path) {
    auto os = binio::open_out(path);
    os << "ply\nformat binary_little_endian 1.0\n";
    os << "element vertex " << mesh.vertices.size() << "\n";
    os << "property float x\nproperty float y\nproperty float z\n";
    if (mesh.has_normals()) os << "property float nx\nproperty float ny\nproperty float nz\n";
    os << "element face " << mesh.triangles.size() << "\n";
    os << "property list uchar int vertex_indices\nend_header\n";
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
        for (int a = 0; a < 3; ++a) binio::put_f32(os, static_cast<float>(mesh.vertices[i][a]));
        if (mesh.has_normals())
            for (int a = 0; a < 3; ++a) binio::put_f32(os, static_cast<float>(mesh.normals[i][a]));
    }
    for (const auto& t : mesh.triangles) {
        os.put(static_cast<char>(3));
        for (int c = 0; c < 3; ++c) binio::put_u32(os, static_cast<std::uint32_t>(t[c]));
    }
    if (!os) throw validation_error("write failed: " + path);
}

inline TriangleMesh read_ply(const std::string& path) {
    auto is = binio::open_in(path);
    std::string line;
    std::size_t n_vertices = 0, n_faces = 0;
    bool with_normals = false;
    if (!std::getline(is, line) || line != "ply") throw validation_error("not a PLY file");
    while (std::getline(is, line) && line != "end_header") {
        std::istringstream ls(line);
        std::string tag, kind;
        ls >> tag >> kind;
        if (tag == "element" && kind == "vertex") ls >> n_vertices;
        if (tag == "element" && kind == "face") ls >> n_faces;
        if (tag == "property" && kind == "float") {
            std::string name;
            ls >> name;
            if (name == "nx") with_normals = true;
        }
    }
    TriangleMesh mesh;
    mesh.vertices.resize(n_vertices);
    if (with_normals) mesh.normals.resize(n_vertices);
    for (std::size_t i = 0; i < n_vertices; ++i) {
        for (int a = 0; a < 3; ++a) mesh.vertices[i][a] = binio::get_f32(is);
        if (with_normals)
            for (int a = 0; a < 3; ++a) mesh.normals[i][a] = binio::get_f32(is);
    }
    mesh.triangles.resize(n_faces);
    for (std::size_t i = 0; i < n_faces; ++i) {
        const int count = is.get();
        if (count != 3) throw validation_error("non-triangle face in PLY");
        for (int c = 0; c < 3; ++c)
            mesh.triangles[i][c] = static_cast<int>(binio::get_u32(is));
    }
    return mesh;
}

// IKPG grid file: magic | u32 version | u32 res[3] | f64 bounds (min,max)
// | f32 values in x-fastest order.
inline void write_grid(const ScalarGrid& grid, const std::string& path) {
    grid.validate();
    auto os = binio::open_out(path);
    binio::put_magic(os, "IKPG");
    binio::put_u32(os, 1u);
    for (int a = 0; a < 3; ++a) binio::put_u32(os, static_cast<std::uint32_t>(grid.resolution[a]));
    for (int a = 0; a < 3; ++a) binio::put_f64(os, grid.bounds.min[a]);
    for (int a = 0; a < 3; ++a) binio::put_f64(os, grid.bounds.max[a]);
    for (double v : grid.values) binio::put_f32(os, static_cast<float>(v));
    if (!os) throw validation_error("write failed: " + path);
}

inline ScalarGrid read_grid(const std::string& path) {
    auto is = binio::open_in(path);
    binio::expect_magic(is, "IKPG", "grid");
    if (binio::get_u32(is) != 1u) throw validation_error("unsupported IKPG version");
    ScalarGrid grid;
    for (int a = 0; a < 3; ++a) grid.resolution[a] = static_cast<int>(binio::get_u32(is));
    for (int a = 0; a < 3; ++a) grid.bounds.min[a] = binio::get_f64(is);
    for (int a = 0; a < 3; ++a) grid.bounds.max[a] = binio::get_f64(is);
    const std::size_t n = static_cast<std::size_t>(grid.resolution[0]) * grid.resolution[1] *
                          static_cast<std::size_t>(grid.resolution[2]);
    grid.values.resize(n);
    for (double& v : grid.values) v = binio::get_f32(is);
    grid.validate();
    return grid;
}

} // namespace ikf
