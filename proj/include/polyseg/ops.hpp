#pragma once

#include <cstdint>
#include <vector>

#include "polyseg/tensor.hpp"

namespace polyseg {

// Per-pixel class targets for a batch of slices; values in {0,1,2}.
struct LabelBatch {
    int n = 0, h = 0, w = 0;
    std::vector<std::uint8_t> v;

    LabelBatch() = default;
    LabelBatch(int n_, int h_, int w_)
        : n(n_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * h_ * w_, 0) {}
    std::uint8_t& at(int b, int y, int x) {
        return v[(static_cast<std::size_t>(b) * h + y) * w + x];
    }
    std::uint8_t at(int b, int y, int x) const {
        return v[(static_cast<std::size_t>(b) * h + y) * w + x];
    }
};

struct ClassWeights {
    real background = 1.0;
    real liver = 2.0;
    real lesion = 5.0;

    real operator[](int c) const { return c == 0 ? background : (c == 1 ? liver : lesion); }
    void validate() const {
        if (!(background > 0 && liver > 0 && lesion > 0))
            throw ParamError("class weights must be positive");
    }
};

// All operations use the cross-correlation convention (no kernel flip) and
// record their backward closure on the graph when one is given. A null graph
// runs forward-only (inference).

// kernel (Cout, Cin, kh, kw) with kh == kw in {1,2,3}, stride in {1,2};
// bias (1, Cout, 1, 1). Output spatial dims: floor((H + 2p - k)/stride) + 1.
Tensor4 conv2d(const Tensor4& x, const Tensor4& kernel, const Tensor4& bias, int stride, int pad,
               Graph* g);

// 2x2/2 max pooling; gradient routes to the first maximal element per window.
Tensor4 maxpool2x2(const Tensor4& x, Graph* g);

// Transposed convolution, kernel (Cin, Cout, 2, 2), stride 2: the adjoint of
// a stride-2 conv. Output spatial dims exactly double.
Tensor4 deconv2x2(const Tensor4& x, const Tensor4& kernel, Graph* g);

// gamma/beta (1, C, 1, 1). Train mode normalizes per channel over (N, H, W)
// with batch statistics and updates the running stats by EMA with the given
// momentum; eval mode applies the running stats.
Tensor4 batchnorm(const Tensor4& x, const Tensor4& gamma, const Tensor4& beta,
                  Tensor4& running_mean, Tensor4& running_var, bool training, real momentum,
                  real eps, Graph* g);

Tensor4 relu(const Tensor4& x, Graph* g);

// Channel concatenation, a first; spatial and batch dims must match.
Tensor4 concat_channels(const Tensor4& a, const Tensor4& b, Graph* g);

Tensor4 add(const Tensor4& a, const Tensor4& b, Graph* g);
Tensor4 mul(const Tensor4& a, const Tensor4& b, Graph* g);  // elementwise
Tensor4 sum_all(const Tensor4& x, Graph* g);                // scalar (1,1,1,1)

// Mean over the batch of the per-slice weighted cross-entropy
//   -(1/(H*W)) * sum_pixels weight[target] * log softmax(logits)[target]
// stabilized with max subtraction. logits (N, 3, H, W).
Tensor4 weighted_cross_entropy(const Tensor4& logits, const LabelBatch& target,
                               const ClassWeights& weights, Graph* g);

// Channel softmax, forward only.
Tensor4 softmax_channels(const Tensor4& logits);

}  // namespace polyseg
