#include "polyseg/segv_io.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace polyseg {

namespace {

constexpr char kMagic[6] = {'S', 'E', 'G', 'V', '1', '\0'};
constexpr std::size_t kHeaderSize = 6 + 12 + 24 + 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

double get_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

template <typename T>
std::uint8_t dtype_code();
template <>
std::uint8_t dtype_code<std::uint8_t>() { return 0; }
template <>
std::uint8_t dtype_code<std::int16_t>() { return 1; }
template <>
std::uint8_t dtype_code<float>() { return 2; }

template <typename T>
void save_impl(const Volume<T>& vol, const std::filesystem::path& path) {
    if (vol.dims.nx == 0 || vol.dims.ny == 0 || vol.dims.nz == 0)
        throw ParamError("cannot save volume with a zero dimension");
    if (vol.data.size() != vol.dims.numel())
        throw ParamError("volume data length does not match dims");
    vol.spacing.validate();

    std::string buf;
    buf.reserve(kHeaderSize + vol.data.size() * sizeof(T));
    buf.append(kMagic, 6);
    put_u32(buf, vol.dims.nx);
    put_u32(buf, vol.dims.ny);
    put_u32(buf, vol.dims.nz);
    put_f64(buf, vol.spacing.sx);
    put_f64(buf, vol.spacing.sy);
    put_f64(buf, vol.spacing.sz);
    buf.push_back(static_cast<char>(dtype_code<T>()));
    // this build targets little-endian hosts; payload is memcpy'd as-is
    const std::size_t payload = vol.data.size() * sizeof(T);
    const std::size_t head = buf.size();
    buf.resize(head + payload);
    std::memcpy(buf.data() + head, vol.data.data(), payload);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

template <typename T>
Volume<T> parse_payload(Dims3 dims, Spacing sp, const std::string& bytes, const std::filesystem::path& path) {
    Volume<T> vol;
    vol.dims = dims;
    vol.spacing = sp;
    vol.kind = std::is_same_v<T, std::uint8_t> ? VoxelKind::Label : VoxelKind::IntensityHu;
    const std::size_t expect = dims.numel() * sizeof(T);
    if (bytes.size() - kHeaderSize != expect)
        throw FormatError("SEGV payload length mismatch in " + path.string());
    vol.data.resize(dims.numel());
    std::memcpy(vol.data.data(), bytes.data() + kHeaderSize, expect);
    return vol;
}

}  // namespace

AnyVolume load_segv(const std::filesystem::path& path, VolumeMeta* meta) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < kHeaderSize || std::memcmp(bytes.data(), kMagic, 6) != 0)
        throw FormatError("not a SEGV1 file: " + path.string());

    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    Dims3 dims{get_u32(p + 6), get_u32(p + 10), get_u32(p + 14)};
    Spacing sp{get_f64(p + 18), get_f64(p + 26), get_f64(p + 34)};
    sp.validate();
    const std::uint8_t code = p[42];
    if (meta) *meta = VolumeMeta{path.string(), code, false};

    switch (code) {
        case 0: return parse_payload<std::uint8_t>(dims, sp, bytes, path);
        case 1: return parse_payload<std::int16_t>(dims, sp, bytes, path);
        case 2: return parse_payload<float>(dims, sp, bytes, path);
        default:
            throw UnsupportedDtypeError("unknown SEGV dtype code " + std::to_string(code) +
                                        " in " + path.string());
    }
}

void save_segv(const Volume<std::uint8_t>& vol, const std::filesystem::path& path) { save_impl(vol, path); }
void save_segv(const Volume<std::int16_t>& vol, const std::filesystem::path& path) { save_impl(vol, path); }
void save_segv(const Volume<float>& vol, const std::filesystem::path& path) { save_impl(vol, path); }

}  // namespace polyseg
