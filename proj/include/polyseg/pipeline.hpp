#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "polyseg/metrics.hpp"
#include "polyseg/model.hpp"
#include "polyseg/morphology.hpp"
#include "polyseg/ops.hpp"
#include "polyseg/params.hpp"
#include "polyseg/phantom.hpp"
#include "polyseg/preprocess.hpp"

namespace polyseg {

struct TrainConfig {
    int stage = 1;  // 1: full-resolution liver; 2: zoomed ROI liver+lesion
    double initial_lr = 1e-3;
    double lr_decay_factor = 0.1;
    std::int64_t lr_decay_period = 40000;
    std::int64_t total_iters = 160000;
    int batch_size = 4;
    std::uint64_t seed = 0;
    ClassWeights class_weights{};
    SgdConfig sgd{};
    bool augment_enabled = true;
    AugmentConfig augment{};
    double fg_oversample = 4.0;       // sampling weight of foreground-bearing slices
    std::array<int, 3> roi_pad{16, 16, 4};
    int roi_jitter = 2;               // stage-2 ground-truth ROI jitter, voxels per side
    float window_lo = -200.0f;
    float window_hi = 300.0f;
    PolyUNetConfig model{};

    void validate() const;
};

// Step policy: initial * factor^floor(iter / period).
double lr_at(std::int64_t iter, const TrainConfig& cfg);

struct LossRecord {
    std::int64_t iter;
    double lr;
    double loss;
};

// One preprocessed training volume: windowed + normalized image with its
// target labels (stage 1: lesion collapsed into liver at full resolution;
// stage 2: ground-truth ROI crop zoomed to the fixed resolution, 3 classes).
struct PreparedCase {
    Volume<float> image;
    Volume<std::uint8_t> labels;
    std::vector<int> fg_slices, bg_slices;
};

std::vector<PreparedCase> prepare_training_cases(const Manifest& manifest, const TrainConfig& cfg);

// Runs the training loop from the optimizer's current iteration up to
// total_iters. Deterministic given the config seed. Appends one loss record
// per iteration.
std::vector<LossRecord> train_stage(PolyUNet& model, SgdOptimizer& opt, const Manifest& manifest,
                                    const TrainConfig& cfg);

void write_loss_csv(const std::vector<LossRecord>& log, const std::filesystem::path& path);

enum class CcPolicy { Foreground, LiverClass, None };

struct InferConfig {
    std::array<int, 3> roi_pad{16, 16, 4};
    Connectivity component_connectivity = Connectivity::TwentySix;
    CcPolicy stage1_cc = CcPolicy::Foreground;
    CcPolicy stage2_cc = CcPolicy::LiverClass;
    float window_lo = -200.0f;
    float window_hi = 300.0f;
};

struct StageOutputs {
    Volume<std::uint8_t> stage1_liver;   // full-resolution binary mask
    RoiBox roi;
    bool roi_fallback = false;           // stage 1 empty -> whole volume used
    Volume<std::uint8_t> stage2_labels;  // pasted to full resolution, 0 outside the box
    Volume<std::uint8_t> fused;
};

// Full two-stage pipeline: window -> normalize -> stage-1 liver prediction ->
// largest component -> padded ROI -> crop -> zoom -> stage-2 prediction ->
// un-zoom -> paste -> fuse.
StageOutputs infer_two_stage(const Volume<float>& ct_hu, const PolyUNet& stage1,
                             const PolyUNet& stage2, const InferConfig& cfg);

// Stage-2 labels win inside the box; outside it the stage-1 mask provides the
// liver label. The largest connected component of the combined foreground is
// kept (lesions inside the organ survive, detached noise is dropped).
Volume<std::uint8_t> fuse(const Volume<std::uint8_t>& stage1_liver,
                          const Volume<std::uint8_t>& stage2_labels, const RoiBox& box,
                          Connectivity conn = Connectivity::TwentySix);

}  // namespace polyseg
