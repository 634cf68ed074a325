#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>

#include "polyseg/ops.hpp"
#include "polyseg/params.hpp"
#include "polyseg/preprocess.hpp"
#include "polyseg/volume.hpp"

namespace polyseg {

struct PolyUNetConfig {
    int context_radius = 1;                        // t in the slice stack
    std::array<int, 5> widths = {16, 32, 64, 128, 256};
    bool share_f = true;                           // one operator F reused on all three paths
    int zoom_size = 256;                           // stage-2 fixed in-plane resolution

    int in_channels() const { return 2 * context_radius + 1; }
    void validate() const;
    bool operator==(const PolyUNetConfig&) const = default;
};

void save_model_config(const PolyUNetConfig& cfg, const std::filesystem::path& path);
PolyUNetConfig load_model_config(const std::filesystem::path& path);

// conv3x3 + BN + ReLU (stride 1 or 2). The building block every stage uses.
class ConvUnit {
public:
    ConvUnit() = default;
    ConvUnit(ParamSet& ps, const std::string& prefix, int cin, int cout, int stride, Rng& rng);

    Tensor4 forward(const Tensor4& x, Graph* g, bool training) const;
    int out_channels() const { return weight_.shape().n; }

private:
    Tensor4 weight_, bias_, gamma_, beta_, run_mean_, run_var_;
    int stride_ = 1;
};

// Intermediate activations of the polynomial block, for structural checks.
struct PolyTaps {
    Tensor4 input, p1, p2, p3, merged;
};

// ReLU-merged sum of the first-, second-, and third-order applications of the
// operator F (conv3x3+BN+ReLU). With shared parameters the same F acts at all
// three depths; otherwise each depth owns its operator, still reusing the
// shallower path's activation as its input.
class PolyBlock {
public:
    PolyBlock() = default;
    PolyBlock(ParamSet& ps, const std::string& prefix, int channels, bool share_f, Rng& rng);

    Tensor4 forward(const Tensor4& x, Graph* g, bool training, PolyTaps* taps = nullptr) const;
    const ConvUnit& unit(int depth) const;  // depth 0..2; the same unit when shared

private:
    ConvUnit f1_, f2_, f3_;
    bool share_ = true;
};

// Downsampling that widens the filter bank: concat(maxpool2x2(x),
// conv3x3-stride2-BN-ReLU(x)); the pooled channels come first.
class DownExpand {
public:
    DownExpand() = default;
    DownExpand(ParamSet& ps, const std::string& prefix, int cin, int cout, Rng& rng);

    Tensor4 forward(const Tensor4& x, Graph* g, bool training) const;

private:
    ConvUnit conv_;
};

// deconv2x2 stride 2 + BN + ReLU
class UpUnit {
public:
    UpUnit() = default;
    UpUnit(ParamSet& ps, const std::string& prefix, int cin, int cout, Rng& rng);

    Tensor4 forward(const Tensor4& x, Graph* g, bool training) const;

private:
    Tensor4 weight_, gamma_, beta_, run_mean_, run_var_;
};

struct ForwardTrace {
    std::array<Shape4, 5> encoder_shapes{};
    std::array<Shape4, 5> decoder_shapes{};  // bottleneck then the four up stages
};

struct ForwardOptions {
    bool zero_skips = false;      // ablation: substitute zero tensors for skip inputs
    ForwardTrace* trace = nullptr;
    PolyTaps* poly_taps = nullptr;       // taps of the stage-2 encoder poly block
};

// Encoder/decoder network: five encoder stages (the first is two conv units,
// the rest downsample-expand followed by a polynomial block), four decoder
// up-steps each concatenating the skip feature before a polynomial block, and
// a 1x1 three-channel head.
class PolyUNet {
public:
    PolyUNet(PolyUNetConfig cfg, std::uint64_t seed);

    const PolyUNetConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

    // logits (N, 3, H, W); input spatial dims must be divisible by 16
    Tensor4 forward(const Tensor4& x, Graph* g, bool training,
                    const ForwardOptions& opts = {}) const;

private:
    PolyUNetConfig cfg_;
    ParamSet params_;
    ConvUnit enc1a_, enc1b_;
    std::array<DownExpand, 4> down_;
    std::array<PolyBlock, 4> enc_poly_;
    std::array<UpUnit, 4> up_;
    std::array<PolyBlock, 4> dec_poly_;
    Tensor4 head_weight_, head_bias_;
};

// Per-class probability maps for one volume, class-major storage.
struct ClassProbs {
    Dims3 dims;
    Spacing spacing;
    std::vector<float> p;  // index = ((c*nz + z)*ny + y)*nx + x

    float at(int c, std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
        return p[((static_cast<std::size_t>(c) * dims.nz + z) * dims.ny + y) * dims.nx + x];
    }
    // ties resolve to the lowest class index
    Volume<std::uint8_t> argmax_labels() const;
};

// Slice-by-slice eval-mode prediction over a normalized volume; each slice k
// runs on its stack of the model's 2t+1 adjacent slices.
ClassProbs predict_volume(const PolyUNet& model, const Volume<float>& vol);

// Stack batch -> network input tensor.
Tensor4 stack_to_tensor(const SliceStack& stack);

}  // namespace polyseg
