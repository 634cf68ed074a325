#pragma once

#include "polyseg/volume.hpp"

namespace polyseg {

enum class Connectivity { Six = 6, TwentySix = 26 };

// Dense component ids 1..K ordered by decreasing voxel count; ties broken by
// the smallest minimum flat index. Background stays 0.
struct ComponentLabeling {
    Volume<std::uint32_t> labels;
    std::vector<std::uint64_t> sizes;  // sizes[k-1] = voxel count of component k
    Connectivity connectivity = Connectivity::TwentySix;

    std::size_t count() const { return sizes.size(); }
};

ComponentLabeling connected_components(const Volume<std::uint8_t>& mask, Connectivity conn);

// Mask of the single largest component (ties -> smallest minimum flat index).
// Empty input yields an empty mask.
Volume<std::uint8_t> largest_component(const Volume<std::uint8_t>& mask, Connectivity conn);

}  // namespace polyseg
