#include "polyseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace polyseg {

Volume<float> window_hu(Volume<float> vol, float lo, float hi) {
    if (!(lo < hi)) throw ParamError("window_hu requires lo < hi");
    for (float& v : vol.data) v = std::clamp(v, lo, hi);
    return vol;
}

Volume<float> normalize_zscore(const Volume<float>& vol) {
    if (vol.data.size() < 2) throw ConstantVolumeError("normalize_zscore needs at least 2 voxels");
    double sum = 0.0;
    for (float v : vol.data) sum += v;
    const double mean = sum / static_cast<double>(vol.data.size());
    double ss = 0.0;
    for (float v : vol.data) {
        const double d = v - mean;
        ss += d * d;
    }
    const double var = ss / static_cast<double>(vol.data.size());
    if (var == 0.0) throw ConstantVolumeError("normalize_zscore: volume is constant");
    const double inv_std = 1.0 / std::sqrt(var);

    Volume<float> out = vol;
    for (float& v : out.data) v = static_cast<float>((v - mean) * inv_std);
    return out;
}

SliceStack stack_adjacent(const Volume<float>& vol, int k, int t) {
    const int nz = static_cast<int>(vol.dims.nz);
    if (k < 0 || k >= nz) throw IndexError("stack_adjacent: slice index out of range");
    if (t < 0) throw ParamError("stack_adjacent: t must be non-negative");

    SliceStack stack;
    stack.t = t;
    stack.center = k;
    stack.h = static_cast<int>(vol.dims.ny);
    stack.w = static_cast<int>(vol.dims.nx);
    const std::size_t plane = static_cast<std::size_t>(stack.h) * stack.w;
    stack.channels.resize(plane * (2 * t + 1));
    for (int i = -t; i <= t; ++i) {
        const int src = std::clamp(k + i, 0, nz - 1);  // edge replication
        std::memcpy(stack.channel(i + t), vol.data.data() + static_cast<std::size_t>(src) * plane,
                    plane * sizeof(float));
    }
    return stack;
}

namespace {

float sample_bilinear(const float* img, int h, int w, double sy, double sx) {
    sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
    sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
    const int y0 = static_cast<int>(sy);
    const int x0 = static_cast<int>(sx);
    const int y1 = std::min(y0 + 1, h - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    const double fy = sy - y0;
    const double fx = sx - x0;
    const double top = img[static_cast<std::size_t>(y0) * w + x0] * (1.0 - fx) +
                       img[static_cast<std::size_t>(y0) * w + x1] * fx;
    const double bot = img[static_cast<std::size_t>(y1) * w + x0] * (1.0 - fx) +
                       img[static_cast<std::size_t>(y1) * w + x1] * fx;
    return static_cast<float>(top * (1.0 - fy) + bot * fy);
}

template <typename T>
T sample_nearest(const T* img, int h, int w, double sy, double sx) {
    const int y = std::clamp(static_cast<int>(std::lround(sy)), 0, h - 1);
    const int x = std::clamp(static_cast<int>(std::lround(sx)), 0, w - 1);
    return img[static_cast<std::size_t>(y) * w + x];
}

}  // namespace

std::pair<SliceStack, LabelImage> augment(const SliceStack& stack, const LabelImage& labels,
                                          std::uint64_t seed, const AugmentConfig& cfg) {
    if (labels.h != stack.h || labels.w != stack.w)
        throw ParamError("augment: label plane dims must match the stack");

    constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
    Rng rng(seed);
    const double theta = cfg.max_rotation_deg > 0.0
                             ? rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * kDegToRad
                             : 0.0;
    const double scale =
        cfg.scale_max > cfg.scale_min ? rng.uniform(cfg.scale_min, cfg.scale_max) : cfg.scale_min;
    const bool flip = cfg.allow_hflip && rng.bernoulli(0.5);

    if (theta == 0.0 && scale == 1.0 && !flip) return {stack, labels};

    // inverse mapping dst -> src about the image center:
    //   src = F * S^-1 * R(-theta) * (dst - c) + c
    const int h = stack.h, w = stack.w;
    const double cy = (h - 1) * 0.5, cx = (w - 1) * 0.5;
    const double cos_t = std::cos(-theta), sin_t = std::sin(-theta);
    const double inv_s = 1.0 / scale;
    const double fsign = flip ? -1.0 : 1.0;

    SliceStack out = stack;
    LabelImage out_labels = labels;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double ry = sin_t * dx + cos_t * dy;
            const double rx = cos_t * dx - sin_t * dy;
            const double sy = cy + inv_s * ry;
            const double sx = cx + fsign * inv_s * rx;
            for (int c = 0; c < stack.channel_count(); ++c)
                out.channel(c)[static_cast<std::size_t>(y) * w + x] =
                    sample_bilinear(stack.channel(c), h, w, sy, sx);
            out_labels.at(y, x) = sample_nearest(labels.v.data(), h, w, sy, sx);
        }
    return {std::move(out), std::move(out_labels)};
}

RoiBox derive_roi(const Volume<std::uint8_t>& mask, std::array<int, 3> pad) {
    const int nx = static_cast<int>(mask.dims.nx);
    const int ny = static_cast<int>(mask.dims.ny);
    const int nz = static_cast<int>(mask.dims.nz);

    RoiBox box{nx, ny, nz, -1, -1, -1};
    std::uint64_t i = 0;
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x, ++i) {
                if (!mask.data[i]) continue;
                box.x0 = std::min(box.x0, x);
                box.y0 = std::min(box.y0, y);
                box.z0 = std::min(box.z0, z);
                box.x1 = std::max(box.x1, x);
                box.y1 = std::max(box.y1, y);
                box.z1 = std::max(box.z1, z);
            }
    if (box.x1 < 0) throw RoiError("derive_roi: mask is empty");

    box.x0 = std::max(0, box.x0 - pad[0]);
    box.y0 = std::max(0, box.y0 - pad[1]);
    box.z0 = std::max(0, box.z0 - pad[2]);
    box.x1 = std::min(nx - 1, box.x1 + pad[0]);
    box.y1 = std::min(ny - 1, box.y1 + pad[1]);
    box.z1 = std::min(nz - 1, box.z1 + pad[2]);
    return box;
}

namespace {

template <typename T>
void check_box(const Volume<T>& vol, const RoiBox& box) {
    if (box.x0 < 0 || box.y0 < 0 || box.z0 < 0 || box.x0 > box.x1 || box.y0 > box.y1 ||
        box.z0 > box.z1 || box.x1 >= static_cast<int>(vol.dims.nx) ||
        box.y1 >= static_cast<int>(vol.dims.ny) || box.z1 >= static_cast<int>(vol.dims.nz))
        throw IndexError("box outside volume bounds");
}

}  // namespace

template <typename T>
Volume<T> crop(const Volume<T>& vol, const RoiBox& box) {
    check_box(vol, box);
    Volume<T> out(Dims3{static_cast<std::uint32_t>(box.extent_x()),
                        static_cast<std::uint32_t>(box.extent_y()),
                        static_cast<std::uint32_t>(box.extent_z())},
                  vol.spacing, vol.kind);
    for (int z = 0; z < box.extent_z(); ++z)
        for (int y = 0; y < box.extent_y(); ++y) {
            const T* src = &vol.at(static_cast<std::uint32_t>(box.x0),
                                   static_cast<std::uint32_t>(box.y0 + y),
                                   static_cast<std::uint32_t>(box.z0 + z));
            std::memcpy(&out.at(0, static_cast<std::uint32_t>(y), static_cast<std::uint32_t>(z)),
                        src, static_cast<std::size_t>(box.extent_x()) * sizeof(T));
        }
    return out;
}

template <typename T>
Volume<T> paste(Volume<T> dst, const Volume<T>& patch, const RoiBox& box) {
    check_box(dst, box);
    if (static_cast<int>(patch.dims.nx) != box.extent_x() ||
        static_cast<int>(patch.dims.ny) != box.extent_y() ||
        static_cast<int>(patch.dims.nz) != box.extent_z())
        throw ParamError("paste: patch dims must equal the box extents");
    for (int z = 0; z < box.extent_z(); ++z)
        for (int y = 0; y < box.extent_y(); ++y) {
            const T* src = &patch.at(0, static_cast<std::uint32_t>(y), static_cast<std::uint32_t>(z));
            std::memcpy(&dst.at(static_cast<std::uint32_t>(box.x0),
                                static_cast<std::uint32_t>(box.y0 + y),
                                static_cast<std::uint32_t>(box.z0 + z)),
                        src, static_cast<std::size_t>(box.extent_x()) * sizeof(T));
        }
    return dst;
}

template Volume<std::uint8_t> crop(const Volume<std::uint8_t>&, const RoiBox&);
template Volume<std::int16_t> crop(const Volume<std::int16_t>&, const RoiBox&);
template Volume<float> crop(const Volume<float>&, const RoiBox&);
template Volume<std::uint8_t> paste(Volume<std::uint8_t>, const Volume<std::uint8_t>&, const RoiBox&);
template Volume<std::int16_t> paste(Volume<std::int16_t>, const Volume<std::int16_t>&, const RoiBox&);
template Volume<float> paste(Volume<float>, const Volume<float>&, const RoiBox&);

namespace {

// src coordinate for output index i under the corner-aligned convention
inline double map_coord(int i, int out_n, int in_n) {
    if (out_n > 1)
        return static_cast<double>(i) * (in_n - 1) / static_cast<double>(out_n - 1);
    return (in_n - 1) * 0.5;
}

template <typename T>
Image2D<T> resample_impl(const Image2D<T>& plane, int out_h, int out_w, Interp mode) {
    if (plane.h < 1 || plane.w < 1) throw ParamError("resample_plane: empty input");
    if (out_h < 1 || out_w < 1) throw ParamError("resample_plane: output dims must be positive");
    if (out_h == plane.h && out_w == plane.w) return plane;

    Image2D<T> out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        const double sy = map_coord(y, out_h, plane.h);
        for (int x = 0; x < out_w; ++x) {
            const double sx = map_coord(x, out_w, plane.w);
            if (mode == Interp::Bilinear) {
                if constexpr (std::is_same_v<T, float>)
                    out.at(y, x) = sample_bilinear(plane.v.data(), plane.h, plane.w, sy, sx);
                else
                    throw ParamError("bilinear resampling requires a float plane");
            } else {
                out.at(y, x) = sample_nearest(plane.v.data(), plane.h, plane.w, sy, sx);
            }
        }
    }
    return out;
}

}  // namespace

Plane resample_plane(const Plane& plane, int out_h, int out_w, Interp mode) {
    return resample_impl(plane, out_h, out_w, mode);
}

LabelImage resample_plane(const LabelImage& plane, int out_h, int out_w, Interp mode) {
    if (mode == Interp::Bilinear)
        throw ParamError("label planes must be resampled nearest-neighbor");
    return resample_impl(plane, out_h, out_w, mode);
}

template <typename T>
Image2D<T> extract_slice(const Volume<T>& vol, int k) {
    if (k < 0 || k >= static_cast<int>(vol.dims.nz))
        throw IndexError("extract_slice: slice index out of range");
    Image2D<T> out(static_cast<int>(vol.dims.ny), static_cast<int>(vol.dims.nx));
    std::memcpy(out.v.data(), vol.data.data() + static_cast<std::size_t>(k) * out.v.size(),
                out.v.size() * sizeof(T));
    return out;
}

template <typename T>
void set_slice(Volume<T>& vol, int k, const Image2D<T>& slice) {
    if (k < 0 || k >= static_cast<int>(vol.dims.nz))
        throw IndexError("set_slice: slice index out of range");
    if (slice.h != static_cast<int>(vol.dims.ny) || slice.w != static_cast<int>(vol.dims.nx))
        throw ParamError("set_slice: slice dims must match the volume");
    std::memcpy(vol.data.data() + static_cast<std::size_t>(k) * slice.v.size(), slice.v.data(),
                slice.v.size() * sizeof(T));
}

template Image2D<std::uint8_t> extract_slice(const Volume<std::uint8_t>&, int);
template Image2D<float> extract_slice(const Volume<float>&, int);
template void set_slice(Volume<std::uint8_t>&, int, const Image2D<std::uint8_t>&);
template void set_slice(Volume<float>&, int, const Image2D<float>&);

namespace {

template <typename T>
Volume<T> resample_slices_impl(const Volume<T>& vol, int out_h, int out_w, Interp mode) {
    Volume<T> out(Dims3{static_cast<std::uint32_t>(out_w), static_cast<std::uint32_t>(out_h),
                        vol.dims.nz},
                  Spacing{vol.spacing.sx * vol.dims.nx / out_w,
                          vol.spacing.sy * vol.dims.ny / out_h, vol.spacing.sz},
                  vol.kind);
    for (int k = 0; k < static_cast<int>(vol.dims.nz); ++k)
        set_slice(out, k, resample_impl(extract_slice(vol, k), out_h, out_w, mode));
    return out;
}

}  // namespace

Volume<float> resample_slices(const Volume<float>& vol, int out_h, int out_w, Interp mode) {
    return resample_slices_impl(vol, out_h, out_w, mode);
}

Volume<std::uint8_t> resample_slices(const Volume<std::uint8_t>& vol, int out_h, int out_w,
                                     Interp mode) {
    if (mode == Interp::Bilinear)
        throw ParamError("label volumes must be resampled nearest-neighbor");
    return resample_slices_impl(vol, out_h, out_w, mode);
}

Volume<std::uint8_t> collapse_lesion_to_liver(Volume<std::uint8_t> labels) {
    for (std::uint8_t& v : labels.data)
        if (v == 2) v = 1;
    return labels;
}

}  // namespace polyseg
