#pragma once

#include <filesystem>

#include "polyseg/volume.hpp"

namespace polyseg {

// SEGV1, the canonical on-disk volume format (little-endian):
//   magic "SEGV1\0" (6 bytes)
//   nx, ny, nz          u32 each
//   sx, sy, sz          f64 each
//   dtype code          u8: 0 = uint8, 1 = int16, 2 = float32
//   payload             raw voxels, x-fastest order
// Round-trips bit-exactly.

AnyVolume load_segv(const std::filesystem::path& path, VolumeMeta* meta = nullptr);

void save_segv(const Volume<std::uint8_t>& vol, const std::filesystem::path& path);
void save_segv(const Volume<std::int16_t>& vol, const std::filesystem::path& path);
void save_segv(const Volume<float>& vol, const std::filesystem::path& path);

template <typename T>
Volume<T> load_segv_as(const std::filesystem::path& path) {
    AnyVolume v = load_segv(path);
    if (auto* p = std::get_if<Volume<T>>(&v)) return std::move(*p);
    throw UnsupportedDtypeError("SEGV payload dtype does not match the requested type: " +
                                path.string());
}

}  // namespace polyseg
