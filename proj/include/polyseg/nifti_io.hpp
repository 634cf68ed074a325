#pragma once

#include <filesystem>

#include "polyseg/volume.hpp"

namespace polyseg {

// Reads an uncompressed single-file NIfTI-1 volume (magic "n+1\0").
//
// Supported datatypes: 2 (uint8), 4 (int16), 16 (float32); dim[0] must be 3.
// Spacing is taken from pixdim[1..3]; orientation metadata is ignored (the
// volume is treated as an already axis-aligned axial stack). When scl_slope
// is nonzero and not the identity scaling, the payload is converted to
// float32 as slope*v + inter. Gzip streams are rejected with an explicit
// message; decompress externally first.
AnyVolume load_nifti1(const std::filesystem::path& path, VolumeMeta* meta = nullptr);

}  // namespace polyseg
