// Test-only reference implementations, kept independent of the library code
// paths they verify: BFS flood fill for component labeling, O(n^2) pairwise
// surface distances, and small generators for random fixtures.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <set>
#include <vector>

#include "polyseg/common.hpp"
#include "polyseg/volume.hpp"

namespace oracle {

using polyseg::Rng;
using polyseg::Spacing;
using polyseg::Volume;

struct FloodFillResult {
    std::vector<std::uint32_t> labels;       // arbitrary ids 1..K in discovery order
    std::vector<std::uint64_t> sizes;        // by id
    std::vector<std::uint64_t> min_indices;  // by id
};

inline FloodFillResult flood_fill(const Volume<std::uint8_t>& mask, int connectivity) {
    const std::int64_t nx = mask.dims.nx, ny = mask.dims.ny, nz = mask.dims.nz;
    FloodFillResult out;
    out.labels.assign(mask.dims.numel(), 0);

    std::vector<std::array<int, 3>> offsets;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (dx == 0 && dy == 0 && dz == 0) continue;
                if (connectivity == 6 && std::abs(dx) + std::abs(dy) + std::abs(dz) != 1) continue;
                offsets.push_back({dx, dy, dz});
            }

    std::uint32_t next = 0;
    for (std::int64_t start = 0; start < static_cast<std::int64_t>(mask.dims.numel()); ++start) {
        if (!mask.data[start] || out.labels[start]) continue;
        ++next;
        out.sizes.push_back(0);
        out.min_indices.push_back(static_cast<std::uint64_t>(start));
        std::queue<std::int64_t> frontier;
        frontier.push(start);
        out.labels[start] = next;
        while (!frontier.empty()) {
            const std::int64_t i = frontier.front();
            frontier.pop();
            ++out.sizes[next - 1];
            out.min_indices[next - 1] =
                std::min(out.min_indices[next - 1], static_cast<std::uint64_t>(i));
            const std::int64_t x = i % nx, y = (i / nx) % ny, z = i / (nx * ny);
            for (const auto& d : offsets) {
                const std::int64_t px = x + d[0], py = y + d[1], pz = z + d[2];
                if (px < 0 || py < 0 || pz < 0 || px >= nx || py >= ny || pz >= nz) continue;
                const std::int64_t pi = px + nx * (py + ny * pz);
                if (mask.data[pi] && !out.labels[pi]) {
                    out.labels[pi] = next;
                    frontier.push(pi);
                }
            }
        }
    }
    return out;
}

// surface voxels by direct 6-neighbor scan
inline std::vector<std::array<int, 3>> surface_points(const Volume<std::uint8_t>& mask) {
    const int nx = mask.dims.nx, ny = mask.dims.ny, nz = mask.dims.nz;
    std::vector<std::array<int, 3>> pts;
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                if (!mask.at(x, y, z)) continue;
                bool boundary = false;
                const std::array<std::array<int, 3>, 6> nbrs{{{1, 0, 0},
                                                              {-1, 0, 0},
                                                              {0, 1, 0},
                                                              {0, -1, 0},
                                                              {0, 0, 1},
                                                              {0, 0, -1}}};
                for (const auto& d : nbrs) {
                    const int px = x + d[0], py = y + d[1], pz = z + d[2];
                    if (px < 0 || py < 0 || pz < 0 || px >= nx || py >= ny || pz >= nz ||
                        !mask.at(px, py, pz)) {
                        boundary = true;
                        break;
                    }
                }
                if (boundary) pts.push_back({x, y, z});
            }
    return pts;
}

struct SurfaceOracle {
    double asd, msd, rmsd;
};

// O(|Sa| * |Sb|) pairwise symmetric surface distances in millimeters
inline SurfaceOracle brute_surface_distances(const Volume<std::uint8_t>& a,
                                             const Volume<std::uint8_t>& b, const Spacing& sp) {
    const auto sa = surface_points(a);
    const auto sb = surface_points(b);
    auto min_dist = [&](const std::array<int, 3>& p, const std::vector<std::array<int, 3>>& set) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : set) {
            const double dx = (p[0] - q[0]) * sp.sx;
            const double dy = (p[1] - q[1]) * sp.sy;
            const double dz = (p[2] - q[2]) * sp.sz;
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        return best;
    };
    double sum = 0, sum_sq = 0, max_sq = 0;
    for (const auto& p : sa) {
        const double d = min_dist(p, sb);
        sum += std::sqrt(d);
        sum_sq += d;
        max_sq = std::max(max_sq, d);
    }
    for (const auto& p : sb) {
        const double d = min_dist(p, sa);
        sum += std::sqrt(d);
        sum_sq += d;
        max_sq = std::max(max_sq, d);
    }
    const double n = static_cast<double>(sa.size() + sb.size());
    return SurfaceOracle{sum / n, std::sqrt(max_sq), std::sqrt(sum_sq / n)};
}

// random blobby mask: a few ellipsoids plus sparse noise voxels
inline Volume<std::uint8_t> random_mask(Rng& rng, std::uint32_t max_dim, double noise_fraction) {
    const std::uint32_t nx = static_cast<std::uint32_t>(rng.uniform_int(4, max_dim));
    const std::uint32_t ny = static_cast<std::uint32_t>(rng.uniform_int(4, max_dim));
    const std::uint32_t nz = static_cast<std::uint32_t>(rng.uniform_int(4, max_dim));
    Volume<std::uint8_t> mask(polyseg::Dims3{nx, ny, nz}, Spacing{1, 1, 1},
                              polyseg::VoxelKind::Label);
    const int blobs = static_cast<int>(rng.uniform_int(1, 2));
    for (int b = 0; b < blobs; ++b) {
        const double cx = rng.uniform(0, nx - 1), cy = rng.uniform(0, ny - 1),
                     cz = rng.uniform(0, nz - 1);
        const double rx = rng.uniform(1.0, nx / 2.5), ry = rng.uniform(1.0, ny / 2.5),
                     rz = rng.uniform(1.0, nz / 2.5);
        for (std::uint32_t z = 0; z < nz; ++z)
            for (std::uint32_t y = 0; y < ny; ++y)
                for (std::uint32_t x = 0; x < nx; ++x) {
                    const double dx = (x - cx) / rx, dy = (y - cy) / ry, dz = (z - cz) / rz;
                    if (dx * dx + dy * dy + dz * dz <= 1.0) mask.at(x, y, z) = 1;
                }
    }
    const std::uint64_t noisy =
        static_cast<std::uint64_t>(noise_fraction * static_cast<double>(mask.dims.numel()));
    for (std::uint64_t i = 0; i < noisy; ++i)
        mask.data[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(mask.dims.numel()) - 1))] = 1;
    return mask;
}

}  // namespace oracle
