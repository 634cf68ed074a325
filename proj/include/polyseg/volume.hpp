#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "polyseg/common.hpp"

namespace polyseg {

// Physical voxel size in millimeters. Carries the units for surface
// distances and volume measures.
struct Spacing {
    double sx = 1.0, sy = 1.0, sz = 1.0;

    void validate() const {
        if (!(sx > 0.0 && sy > 0.0 && sz > 0.0))
            throw ParamError("spacing components must be strictly positive");
    }
    bool operator==(const Spacing&) const = default;
};

struct Dims3 {
    std::uint32_t nx = 0, ny = 0, nz = 0;

    std::uint64_t numel() const {
        return static_cast<std::uint64_t>(nx) * ny * nz;
    }
    bool operator==(const Dims3&) const = default;
};

enum class VoxelKind { IntensityHu, Label, Probability };

// Dense voxel grid. Storage is x-fastest: flat index = x + nx*y + nx*ny*z.
// Immutable by convention once built; treat as a value type.
template <typename T>
struct Volume {
    Dims3 dims;
    Spacing spacing;
    VoxelKind kind = VoxelKind::IntensityHu;
    std::vector<T> data;

    Volume() = default;
    Volume(Dims3 d, Spacing s, VoxelKind k, T fill = T{})
        : dims(d), spacing(s), kind(k), data(d.numel(), fill) {
        spacing.validate();
    }

    std::uint64_t index(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return static_cast<std::uint64_t>(x) +
               static_cast<std::uint64_t>(dims.nx) * (y + static_cast<std::uint64_t>(dims.ny) * z);
    }
    T& at(std::uint32_t x, std::uint32_t y, std::uint32_t z) { return data[index(x, y, z)]; }
    const T& at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const { return data[index(x, y, z)]; }

    bool operator==(const Volume&) const = default;
};

using AnyVolume = std::variant<Volume<std::uint8_t>, Volume<std::int16_t>, Volume<float>>;

// Provenance of a loaded volume. Orientation metadata in the source file is
// read but never applied; affine_ignored records that.
struct VolumeMeta {
    std::string source;
    std::uint8_t dtype_code = 0;  // 0 uint8, 1 int16, 2 float32
    bool affine_ignored = false;

    void validate() const {
        if (dtype_code > 2) throw UnsupportedDtypeError("dtype code outside {0,1,2}");
    }
};

Dims3 any_dims(const AnyVolume& v);
Spacing any_spacing(const AnyVolume& v);

// Convert any payload dtype to a float intensity volume.
Volume<float> to_float(const AnyVolume& v);

// Labels hold only {0 background, 1 liver, 2 lesion}; throws LabelError otherwise.
Volume<std::uint8_t> as_labels(const AnyVolume& v);

}  // namespace polyseg
