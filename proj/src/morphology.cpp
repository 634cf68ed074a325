#include "polyseg/morphology.hpp"

#include <algorithm>
#include <array>
#include <numeric>

namespace polyseg {

namespace {

// union-find over flat voxel indices
class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n) {
        std::iota(parent_.begin(), parent_.end(), std::size_t{0});
    }
    std::size_t find(std::size_t i) {
        while (parent_[i] != i) {
            parent_[i] = parent_[parent_[i]];
            i = parent_[i];
        }
        return i;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent_[std::max(a, b)] = std::min(a, b);  // keep smallest index as root
    }

private:
    std::vector<std::size_t> parent_;
};

}  // namespace

ComponentLabeling connected_components(const Volume<std::uint8_t>& mask, Connectivity conn) {
    const auto nx = static_cast<std::int64_t>(mask.dims.nx);
    const auto ny = static_cast<std::int64_t>(mask.dims.ny);
    const auto nz = static_cast<std::int64_t>(mask.dims.nz);
    const std::uint64_t total = mask.dims.numel();

    ComponentLabeling out;
    out.connectivity = conn;
    out.labels = Volume<std::uint32_t>();
    out.labels.dims = mask.dims;
    out.labels.spacing = mask.spacing;
    out.labels.kind = VoxelKind::Label;
    out.labels.data.assign(total, 0);

    // neighbor offsets with a negative flat index (scan in ascending order)
    std::vector<std::array<std::int64_t, 3>> prior;
    if (conn == Connectivity::Six) {
        prior = {{{-1, 0, 0}}, {{0, -1, 0}}, {{0, 0, -1}}};
    } else {
        for (std::int64_t dz = -1; dz <= 0; ++dz)
            for (std::int64_t dy = -1; dy <= 1; ++dy)
                for (std::int64_t dx = -1; dx <= 1; ++dx) {
                    const std::int64_t flat = dx + nx * (dy + ny * dz);
                    if (flat < 0) prior.push_back({dx, dy, dz});
                }
    }

    DisjointSets sets(total);
    std::uint64_t idx = 0;
    for (std::int64_t z = 0; z < nz; ++z)
        for (std::int64_t y = 0; y < ny; ++y)
            for (std::int64_t x = 0; x < nx; ++x, ++idx) {
                if (!mask.data[idx]) continue;
                for (const auto& d : prior) {
                    const std::int64_t px = x + d[0], py = y + d[1], pz = z + d[2];
                    if (px < 0 || py < 0 || pz < 0 || px >= nx || py >= ny || pz >= nz) continue;
                    const std::uint64_t pidx = idx + d[0] + nx * (d[1] + ny * d[2]);
                    if (mask.data[pidx]) sets.unite(idx, pidx);
                }
            }

    // gather roots in scan order: first occurrence = minimum flat index
    struct Root {
        std::uint64_t first_index;
        std::uint64_t size = 0;
        std::uint32_t id = 0;
    };
    std::vector<std::uint64_t> root_of(total, 0);
    std::vector<Root> roots;
    std::vector<std::int64_t> root_slot(total, -1);
    for (std::uint64_t i = 0; i < total; ++i) {
        if (!mask.data[i]) continue;
        const std::size_t r = sets.find(i);
        if (root_slot[r] < 0) {
            root_slot[r] = static_cast<std::int64_t>(roots.size());
            roots.push_back(Root{i, 0, 0});
        }
        roots[static_cast<std::size_t>(root_slot[r])].size++;
        root_of[i] = r;
    }

    // order by size descending, ties by smallest first index
    std::vector<std::size_t> order(roots.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (roots[a].size != roots[b].size) return roots[a].size > roots[b].size;
        return roots[a].first_index < roots[b].first_index;
    });
    out.sizes.resize(roots.size());
    for (std::uint32_t rank = 0; rank < order.size(); ++rank) {
        roots[order[rank]].id = rank + 1;
        out.sizes[rank] = roots[order[rank]].size;
    }

    for (std::uint64_t i = 0; i < total; ++i) {
        if (!mask.data[i]) continue;
        out.labels.data[i] = roots[static_cast<std::size_t>(root_slot[root_of[i]])].id;
    }
    return out;
}

Volume<std::uint8_t> largest_component(const Volume<std::uint8_t>& mask, Connectivity conn) {
    ComponentLabeling cc = connected_components(mask, conn);
    Volume<std::uint8_t> out = mask;
    out.kind = VoxelKind::Label;
    if (cc.count() == 0) {
        std::fill(out.data.begin(), out.data.end(), std::uint8_t{0});
        return out;
    }
    for (std::uint64_t i = 0; i < out.data.size(); ++i)
        out.data[i] = cc.labels.data[i] == 1 ? std::uint8_t{1} : std::uint8_t{0};
    return out;
}

}  // namespace polyseg
