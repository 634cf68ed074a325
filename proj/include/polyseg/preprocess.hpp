#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "polyseg/volume.hpp"

namespace polyseg {

// Row-major 2D image; rows correspond to y, columns to x.
template <typename T>
struct Image2D {
    int h = 0, w = 0;
    std::vector<T> v;

    Image2D() = default;
    Image2D(int h_, int w_, T fill = T{}) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, fill) {}

    T& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    const T& at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
    bool operator==(const Image2D&) const = default;
};

using Plane = Image2D<float>;
using LabelImage = Image2D<std::uint8_t>;

// Clamp every voxel into [lo, hi]. Defaults cover the abdominal soft-tissue
// range used for liver work.
Volume<float> window_hu(Volume<float> vol, float lo = -200.0f, float hi = 300.0f);

// Per-volume standardization to zero mean / unit variance (population std).
// Throws ConstantVolumeError on zero variance.
Volume<float> normalize_zscore(const Volume<float>& vol);

// The (2t+1)-channel network input for one axial position: slices k-t..k+t
// with edge replication past the volume boundary. Channel t is slice k.
struct SliceStack {
    int t = 0;
    int center = 0;
    int h = 0, w = 0;  // h = ny, w = nx
    std::vector<float> channels;  // (2t+1) * h * w, channel-major

    int channel_count() const { return 2 * t + 1; }
    float* channel(int i) { return channels.data() + static_cast<std::size_t>(i) * h * w; }
    const float* channel(int i) const {
        return channels.data() + static_cast<std::size_t>(i) * h * w;
    }
    bool operator==(const SliceStack&) const = default;
};

SliceStack stack_adjacent(const Volume<float>& vol, int k, int t);

struct AugmentConfig {
    double max_rotation_deg = 10.0;
    double scale_min = 0.9;
    double scale_max = 1.1;
    bool allow_hflip = true;
};

// One geometric transform (rotation, isotropic scale, optional horizontal
// flip) applied identically to every channel and to the label plane. Image
// channels are sampled bilinearly, labels nearest-neighbor, both with edge
// clamping. Deterministic given the seed; a no-op config returns the inputs
// unchanged.
std::pair<SliceStack, LabelImage> augment(const SliceStack& stack, const LabelImage& labels,
                                          std::uint64_t seed, const AugmentConfig& cfg);

// Inclusive voxel box.
struct RoiBox {
    int x0 = 0, y0 = 0, z0 = 0;
    int x1 = 0, y1 = 0, z1 = 0;

    int extent_x() const { return x1 - x0 + 1; }
    int extent_y() const { return y1 - y0 + 1; }
    int extent_z() const { return z1 - z0 + 1; }
    bool contains(int x, int y, int z) const {
        return x >= x0 && x <= x1 && y >= y0 && y <= y1 && z >= z0 && z <= z1;
    }
    bool operator==(const RoiBox&) const = default;
};

// Tight bounding box of the foreground, expanded by pad per axis and clipped
// to the volume bounds. Throws RoiError on an empty mask.
RoiBox derive_roi(const Volume<std::uint8_t>& mask, std::array<int, 3> pad);

template <typename T>
Volume<T> crop(const Volume<T>& vol, const RoiBox& box);

// Returns dst with the box region replaced by patch; voxels outside the box
// are untouched.
template <typename T>
Volume<T> paste(Volume<T> dst, const Volume<T>& patch, const RoiBox& box);

enum class Interp { Bilinear, Nearest };

// Corner-aligned coordinate convention: output pixel p maps to input
// coordinate p*(in-1)/(out-1) when out > 1, the input center otherwise.
// Same-size calls are the identity.
Plane resample_plane(const Plane& plane, int out_h, int out_w, Interp mode);
LabelImage resample_plane(const LabelImage& plane, int out_h, int out_w, Interp mode);

// Per-slice in-plane resampling of a whole volume (z untouched).
Volume<float> resample_slices(const Volume<float>& vol, int out_h, int out_w, Interp mode);
Volume<std::uint8_t> resample_slices(const Volume<std::uint8_t>& vol, int out_h, int out_w,
                                     Interp mode);

template <typename T>
Image2D<T> extract_slice(const Volume<T>& vol, int k);

template <typename T>
void set_slice(Volume<T>& vol, int k, const Image2D<T>& slice);

// Stage-1 target remapping: lesion voxels count as liver.
Volume<std::uint8_t> collapse_lesion_to_liver(Volume<std::uint8_t> labels);

}  // namespace polyseg
