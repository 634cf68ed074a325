#include "polyseg/nifti_io.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace polyseg {

namespace {

// offsets into the fixed 348-byte header
constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kOffDim = 40;        // short dim[8]
constexpr std::size_t kOffDatatype = 70;   // short
constexpr std::size_t kOffPixdim = 76;     // float pixdim[8]
constexpr std::size_t kOffVoxOffset = 108; // float
constexpr std::size_t kOffSclSlope = 112;  // float
constexpr std::size_t kOffSclInter = 116;  // float
constexpr std::size_t kOffMagic = 344;     // char[4]

std::int16_t get_i16(const unsigned char* p) {
    return static_cast<std::int16_t>(static_cast<std::uint16_t>(p[0]) |
                                     (static_cast<std::uint16_t>(p[1]) << 8));
}

float get_f32(const unsigned char* p) {
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) |
                         (static_cast<std::uint32_t>(p[3]) << 24);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

template <typename T>
std::vector<T> read_payload(const std::string& bytes, std::size_t offset, std::uint64_t count,
                            const std::filesystem::path& path) {
    const std::uint64_t need = count * sizeof(T);
    if (bytes.size() < offset + need)
        throw FormatError("NIfTI payload truncated: " + path.string());
    std::vector<T> out(count);
    std::memcpy(out.data(), bytes.data() + offset, need);
    return out;
}

template <typename T>
AnyVolume build(Dims3 dims, Spacing sp, std::vector<T> raw, float slope, float inter) {
    const bool rescale = slope != 0.0f && !(slope == 1.0f && inter == 0.0f);
    if (rescale) {
        Volume<float> vol(dims, sp, VoxelKind::IntensityHu);
        for (std::uint64_t i = 0; i < raw.size(); ++i)
            vol.data[i] = slope * static_cast<float>(raw[i]) + inter;
        return vol;
    }
    Volume<T> vol;
    vol.dims = dims;
    vol.spacing = sp;
    vol.kind = std::is_same_v<T, std::uint8_t> ? VoxelKind::Label : VoxelKind::IntensityHu;
    vol.data = std::move(raw);
    return vol;
}

}  // namespace

AnyVolume load_nifti1(const std::filesystem::path& path, VolumeMeta* meta) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() >= 2 && static_cast<unsigned char>(bytes[0]) == 0x1f &&
        static_cast<unsigned char>(bytes[1]) == 0x8b)
        throw FormatError("gzip-compressed NIfTI is not supported; decompress externally: " +
                          path.string());
    if (bytes.size() < kHeaderSize)
        throw FormatError("file shorter than a NIfTI-1 header: " + path.string());

    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (std::memcmp(p + kOffMagic, "n+1\0", 4) != 0)
        throw FormatError("NIfTI-1 magic \"n+1\" not found: " + path.string());

    const std::int16_t ndim = get_i16(p + kOffDim);
    if (ndim != 3)
        throw FormatError("only 3-D NIfTI volumes are supported (dim[0] = " +
                          std::to_string(ndim) + "): " + path.string());

    Dims3 dims;
    dims.nx = static_cast<std::uint32_t>(get_i16(p + kOffDim + 2));
    dims.ny = static_cast<std::uint32_t>(get_i16(p + kOffDim + 4));
    dims.nz = static_cast<std::uint32_t>(get_i16(p + kOffDim + 6));
    if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0)
        throw FormatError("NIfTI volume has a zero dimension: " + path.string());

    Spacing sp{get_f32(p + kOffPixdim + 4), get_f32(p + kOffPixdim + 8),
               get_f32(p + kOffPixdim + 12)};
    if (!(sp.sx > 0.0 && sp.sy > 0.0 && sp.sz > 0.0))
        throw FormatError("NIfTI pixdim must be strictly positive: " + path.string());

    const std::int16_t datatype = get_i16(p + kOffDatatype);
    const float vox_offset = get_f32(p + kOffVoxOffset);
    const float slope = get_f32(p + kOffSclSlope);
    const float inter = get_f32(p + kOffSclInter);
    if (vox_offset < static_cast<float>(kHeaderSize))
        throw FormatError("NIfTI vox_offset precedes the header end: " + path.string());
    const auto offset = static_cast<std::size_t>(vox_offset);

    if (meta)
        *meta = VolumeMeta{path.string(),
                           static_cast<std::uint8_t>(datatype == 2 ? 0 : (datatype == 4 ? 1 : 2)),
                           /*affine_ignored=*/true};

    // NIfTI stores voxels x-fastest already, matching the Volume layout.
    switch (datatype) {
        case 2:
            return build(dims, sp, read_payload<std::uint8_t>(bytes, offset, dims.numel(), path),
                         slope, inter);
        case 4:
            return build(dims, sp, read_payload<std::int16_t>(bytes, offset, dims.numel(), path),
                         slope, inter);
        case 16:
            return build(dims, sp, read_payload<float>(bytes, offset, dims.numel(), path), slope,
                         inter);
        default:
            throw UnsupportedDtypeError("unsupported NIfTI datatype " + std::to_string(datatype) +
                                        " (expected 2, 4, or 16): " + path.string());
    }
}

}  // namespace polyseg
