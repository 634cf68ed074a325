#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include "polyseg/volume.hpp"

namespace polyseg {

// Synthetic abdominal phantom: an ellipsoid "liver" with embedded hypodense
// spherical "lesions" on a noisy background, with exact ground truth.
struct PhantomConfig {
    Dims3 dims{64, 64, 32};
    Spacing spacing{1.0, 1.0, 2.5};
    std::array<double, 3> liver_center{31.5, 31.5, 15.5};  // voxels
    std::array<double, 3> liver_radii{22.0, 18.0, 10.0};   // voxels
    int lesion_count_min = 1;
    int lesion_count_max = 3;
    double lesion_radius_min = 3.0;  // voxels
    double lesion_radius_max = 6.0;
    double hu_background = -100.0;
    double hu_liver = 120.0;
    double hu_lesion = 50.0;
    double noise_sigma = 15.0;
    std::uint64_t seed = 0;

    void validate() const;
};

// Deterministic per seed. Labels: 0 background, 1 liver, 2 lesion; lesion
// spheres lie fully inside the liver ellipsoid and do not overlap each other.
// Throws GenerationError if no valid lesion placement is found within the
// retry budget.
std::pair<Volume<float>, Volume<std::uint8_t>> generate_phantom(const PhantomConfig& cfg);

struct ManifestCase {
    std::filesystem::path ct;
    std::filesystem::path label;
    std::string split;  // "train" or "test"
};

using Manifest = std::vector<ManifestCase>;

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Writes n phantoms with jittered geometry as SEGV pairs plus a manifest
// (first round(n*train_fraction) cases are the train split).
Manifest generate_dataset(int n, const PhantomConfig& base, std::uint64_t seed,
                          const std::filesystem::path& out_dir, double train_fraction = 0.75);

}  // namespace polyseg
