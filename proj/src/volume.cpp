#include "polyseg/volume.hpp"

namespace polyseg {

Dims3 any_dims(const AnyVolume& v) {
    return std::visit([](const auto& vol) { return vol.dims; }, v);
}

Spacing any_spacing(const AnyVolume& v) {
    return std::visit([](const auto& vol) { return vol.spacing; }, v);
}

Volume<float> to_float(const AnyVolume& v) {
    return std::visit(
        [](const auto& vol) {
            Volume<float> out;
            out.dims = vol.dims;
            out.spacing = vol.spacing;
            out.kind = VoxelKind::IntensityHu;
            out.data.assign(vol.data.begin(), vol.data.end());
            return out;
        },
        v);
}

Volume<std::uint8_t> as_labels(const AnyVolume& v) {
    const auto* p = std::get_if<Volume<std::uint8_t>>(&v);
    if (!p) throw LabelError("label volumes must be stored as uint8");
    for (std::uint8_t value : p->data)
        if (value > 2) throw LabelError("label volume contains a value outside {0,1,2}");
    Volume<std::uint8_t> out = *p;
    out.kind = VoxelKind::Label;
    return out;
}

}  // namespace polyseg
