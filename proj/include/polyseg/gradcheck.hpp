#pragma once

#include <string>
#include <vector>

#include "polyseg/common.hpp"

namespace polyseg {

struct GradCheckResult {
    std::string op;
    double max_rel_err = 0.0;
    int coords_checked = 0;
    double tolerance = 0.0;
    bool pass = false;
};

// Central finite-difference verification (epsilon 1e-5) of every backward
// path against forward-only evaluations: convolutions (1x1, 3x3, 3x3/2),
// deconv, maxpool (off ties), batchnorm (train mode), relu (off zero),
// concat, softmax + weighted cross-entropy, and a full tiny network.
// The relative error per sampled coordinate is |a - n| / max(|a|, |n|, 1e-4).
std::vector<GradCheckResult> run_gradchecks(std::uint64_t seed, const std::string& filter = "");

}  // namespace polyseg
