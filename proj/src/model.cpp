#include "polyseg/model.hpp"

#include <fstream>

#include <json.hpp>

namespace polyseg {

namespace {
constexpr real kBnMomentum = 0.1;
constexpr real kBnEps = 1e-5;
}  // namespace

void PolyUNetConfig::validate() const {
    if (context_radius < 0) throw ConfigError("context radius must be non-negative");
    for (int w : widths)
        if (w < 1) throw ConfigError("stage widths must be positive");
    for (int i = 1; i < 5; ++i)
        if (widths[i] <= widths[i - 1])
            throw ConfigError(
                "stage widths must increase after stage 1 (the expand branch needs channels)");
    if (zoom_size < 16 || zoom_size % 16 != 0)
        throw ConfigError("zoom size must be a positive multiple of 16");
}

void save_model_config(const PolyUNetConfig& cfg, const std::filesystem::path& path) {
    nlohmann::json j{{"context_radius", cfg.context_radius},
                     {"widths", cfg.widths},
                     {"share_f", cfg.share_f},
                     {"zoom_size", cfg.zoom_size}};
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
}

PolyUNetConfig load_model_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("invalid model config JSON " + path.string() + ": " + e.what());
    }
    PolyUNetConfig cfg;
    cfg.context_radius = j.at("context_radius").get<int>();
    cfg.widths = j.at("widths").get<std::array<int, 5>>();
    cfg.share_f = j.at("share_f").get<bool>();
    cfg.zoom_size = j.at("zoom_size").get<int>();
    cfg.validate();
    return cfg;
}

ConvUnit::ConvUnit(ParamSet& ps, const std::string& prefix, int cin, int cout, int stride, Rng& rng)
    : stride_(stride) {
    weight_ = ps.add(prefix + ".weight",
                     kaiming_normal(Shape4{cout, cin, 3, 3}, cin * 9, rng.next_u64()));
    bias_ = ps.add(prefix + ".bias", Tensor4(Shape4{1, cout, 1, 1}));
    gamma_ = ps.add(prefix + ".bn.gamma", Tensor4::full(Shape4{1, cout, 1, 1}, real(1)));
    beta_ = ps.add(prefix + ".bn.beta", Tensor4(Shape4{1, cout, 1, 1}));
    run_mean_ = ps.add(prefix + ".bn.mean", Tensor4(Shape4{1, cout, 1, 1}), /*trainable=*/false);
    run_var_ =
        ps.add(prefix + ".bn.var", Tensor4::full(Shape4{1, cout, 1, 1}, real(1)), /*trainable=*/false);
}

Tensor4 ConvUnit::forward(const Tensor4& x, Graph* g, bool training) const {
    Tensor4 y = conv2d(x, weight_, bias_, stride_, 1, g);
    Tensor4 rm = run_mean_, rv = run_var_;  // handles share storage
    y = batchnorm(y, gamma_, beta_, rm, rv, training, kBnMomentum, kBnEps, g);
    return relu(y, g);
}

PolyBlock::PolyBlock(ParamSet& ps, const std::string& prefix, int channels, bool share_f, Rng& rng)
    : share_(share_f) {
    f1_ = ConvUnit(ps, prefix + ".f1", channels, channels, 1, rng);
    if (!share_f) {
        f2_ = ConvUnit(ps, prefix + ".f2", channels, channels, 1, rng);
        f3_ = ConvUnit(ps, prefix + ".f3", channels, channels, 1, rng);
    }
}

const ConvUnit& PolyBlock::unit(int depth) const {
    if (share_ || depth == 0) return f1_;
    return depth == 1 ? f2_ : f3_;
}

Tensor4 PolyBlock::forward(const Tensor4& x, Graph* g, bool training, PolyTaps* taps) const {
    const Tensor4 p1 = unit(0).forward(x, g, training);
    const Tensor4 p2 = unit(1).forward(p1, g, training);
    const Tensor4 p3 = unit(2).forward(p2, g, training);
    Tensor4 merged = add(add(p1, p2, g), p3, g);
    Tensor4 out = relu(merged, g);
    if (taps) *taps = PolyTaps{x, p1, p2, p3, merged};
    return out;
}

DownExpand::DownExpand(ParamSet& ps, const std::string& prefix, int cin, int cout, Rng& rng) {
    if (cout <= cin)
        throw ConfigError("downsample-expand needs cout > cin for the conv branch");
    conv_ = ConvUnit(ps, prefix + ".conv", cin, cout - cin, 2, rng);
}

Tensor4 DownExpand::forward(const Tensor4& x, Graph* g, bool training) const {
    Tensor4 pooled = maxpool2x2(x, g);
    Tensor4 expanded = conv_.forward(x, g, training);
    return concat_channels(pooled, expanded, g);
}

UpUnit::UpUnit(ParamSet& ps, const std::string& prefix, int cin, int cout, Rng& rng) {
    weight_ = ps.add(prefix + ".weight",
                     kaiming_normal(Shape4{cin, cout, 2, 2}, cin * 4, rng.next_u64()));
    gamma_ = ps.add(prefix + ".bn.gamma", Tensor4::full(Shape4{1, cout, 1, 1}, real(1)));
    beta_ = ps.add(prefix + ".bn.beta", Tensor4(Shape4{1, cout, 1, 1}));
    run_mean_ = ps.add(prefix + ".bn.mean", Tensor4(Shape4{1, cout, 1, 1}), /*trainable=*/false);
    run_var_ =
        ps.add(prefix + ".bn.var", Tensor4::full(Shape4{1, cout, 1, 1}, real(1)), /*trainable=*/false);
}

Tensor4 UpUnit::forward(const Tensor4& x, Graph* g, bool training) const {
    Tensor4 y = deconv2x2(x, weight_, g);
    Tensor4 rm = run_mean_, rv = run_var_;
    y = batchnorm(y, gamma_, beta_, rm, rv, training, kBnMomentum, kBnEps, g);
    return relu(y, g);
}

PolyUNet::PolyUNet(PolyUNetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const auto& w = cfg_.widths;

    enc1a_ = ConvUnit(params_, "enc1.conv1", cfg_.in_channels(), w[0], 1, rng);
    enc1b_ = ConvUnit(params_, "enc1.conv2", w[0], w[0], 1, rng);
    for (int i = 0; i < 4; ++i) {
        const std::string stage = "enc" + std::to_string(i + 2);
        down_[i] = DownExpand(params_, stage + ".down", w[i], w[i + 1], rng);
        enc_poly_[i] = PolyBlock(params_, stage + ".poly", w[i + 1], cfg_.share_f, rng);
    }
    int deeper = w[4];
    for (int i = 3; i >= 0; --i) {
        const std::string stage = "dec" + std::to_string(i + 1);
        up_[i] = UpUnit(params_, stage + ".up", deeper, w[i], rng);
        dec_poly_[i] = PolyBlock(params_, stage + ".poly", 2 * w[i], cfg_.share_f, rng);
        deeper = 2 * w[i];
    }
    head_weight_ = params_.add(
        "head.weight", kaiming_normal(Shape4{3, 2 * w[0], 1, 1}, 2 * w[0], rng.next_u64()));
    head_bias_ = params_.add("head.bias", Tensor4(Shape4{1, 3, 1, 1}));
}

Tensor4 PolyUNet::forward(const Tensor4& x, Graph* g, bool training,
                          const ForwardOptions& opts) const {
    const Shape4 xs = x.shape();
    if (xs.c != cfg_.in_channels())
        throw ShapeError("forward: input channels must be 2t+1 = " +
                         std::to_string(cfg_.in_channels()));
    if (xs.h % 16 != 0 || xs.w % 16 != 0)
        throw ShapeError("forward: spatial dims must be divisible by 16");

    std::array<Tensor4, 5> enc;
    Tensor4 y = enc1a_.forward(x, g, training);
    enc[0] = enc1b_.forward(y, g, training);
    for (int i = 0; i < 4; ++i) {
        y = down_[i].forward(enc[i], g, training);
        enc[i + 1] = enc_poly_[i].forward(y, g, training,
                                          (opts.poly_taps && i == 0) ? opts.poly_taps : nullptr);
    }

    if (opts.trace)
        for (int i = 0; i < 5; ++i) opts.trace->encoder_shapes[i] = enc[i].shape();

    y = enc[4];
    if (opts.trace) opts.trace->decoder_shapes[0] = y.shape();
    for (int i = 3; i >= 0; --i) {
        Tensor4 upped = up_[i].forward(y, g, training);
        Tensor4 skip = opts.zero_skips ? Tensor4(enc[i].shape()) : enc[i];
        y = dec_poly_[i].forward(concat_channels(upped, skip, g), g, training);
        if (opts.trace) opts.trace->decoder_shapes[4 - i] = y.shape();
    }
    return conv2d(y, head_weight_, head_bias_, 1, 0, g);
}

Volume<std::uint8_t> ClassProbs::argmax_labels() const {
    Volume<std::uint8_t> out(dims, spacing, VoxelKind::Label);
    const std::size_t voxels = dims.numel();
    for (std::size_t i = 0; i < voxels; ++i) {
        std::uint8_t best = 0;
        float bv = p[i];
        for (int c = 1; c < 3; ++c) {
            const float v = p[static_cast<std::size_t>(c) * voxels + i];
            if (v > bv) {
                bv = v;
                best = static_cast<std::uint8_t>(c);
            }
        }
        out.data[i] = best;
    }
    return out;
}

Tensor4 stack_to_tensor(const SliceStack& stack) {
    Tensor4 x(Shape4{1, stack.channel_count(), stack.h, stack.w});
    const std::size_t count = stack.channels.size();
    for (std::size_t i = 0; i < count; ++i) x.values()[i] = static_cast<real>(stack.channels[i]);
    return x;
}

ClassProbs predict_volume(const PolyUNet& model, const Volume<float>& vol) {
    ClassProbs probs;
    probs.dims = vol.dims;
    probs.spacing = vol.spacing;
    probs.p.assign(static_cast<std::size_t>(3) * vol.dims.numel(), 0.0f);

    const int t = model.config().context_radius;
    const std::size_t voxels = vol.dims.numel();
    const std::size_t plane = static_cast<std::size_t>(vol.dims.nx) * vol.dims.ny;
    for (int k = 0; k < static_cast<int>(vol.dims.nz); ++k) {
        Tensor4 x = stack_to_tensor(stack_adjacent(vol, k, t));
        Tensor4 sm = softmax_channels(model.forward(x, nullptr, /*training=*/false));
        for (int c = 0; c < 3; ++c) {
            const real* src = sm.values().data() + static_cast<std::size_t>(c) * plane;
            float* dst =
                probs.p.data() + static_cast<std::size_t>(c) * voxels + static_cast<std::size_t>(k) * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<float>(src[i]);
        }
    }
    return probs;
}

}  // namespace polyseg
