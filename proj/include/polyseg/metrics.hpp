#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "polyseg/morphology.hpp"
#include "polyseg/volume.hpp"

namespace polyseg {

// A metric value with explicit worst/undefined markers instead of sentinel
// numbers, so reports stay unambiguous. Worst scores still carry the metric's
// worst value (0, 1, or infinity) so they participate in cohort means the way
// the challenge protocol prescribes; undefined scores are excluded and
// counted.
struct Score {
    enum class State { Defined, Worst, Undefined };
    State state = State::Undefined;
    double value = 0.0;

    static Score defined(double v) { return Score{State::Defined, v}; }
    static Score worst(double v) { return Score{State::Worst, v}; }
    static Score undefined() { return Score{State::Undefined, 0.0}; }

    bool is_undefined() const { return state == State::Undefined; }
    std::string to_string() const;  // "inf" for infinities, "undefined" otherwise
};

// Overlap measures on aligned binary masks (nonzero = foreground).
double dice(const Volume<std::uint8_t>& a, const Volume<std::uint8_t>& b);  // both empty -> 1
double voe(const Volume<std::uint8_t>& a, const Volume<std::uint8_t>& b);   // 1 - Jaccard
Score rvd(const Volume<std::uint8_t>& pred, const Volume<std::uint8_t>& ref);  // undefined if |ref| = 0

// Foreground voxels with at least one background 6-neighbor (out-of-bounds
// counts as background). Returned as flat indices in scan order.
std::vector<std::uint64_t> surface_voxels(const Volume<std::uint8_t>& mask);

struct SurfaceScores {
    Score asd, msd, rmsd;  // millimeters
};

// Symmetric surface distances between voxel-center surface point sets under
// the physical spacing. Either mask empty -> worst (infinity) markers.
SurfaceScores surface_distances(const Volume<std::uint8_t>& a, const Volume<std::uint8_t>& b,
                                const Spacing& spacing);

// Lesion instance matching at the 0.5 IoU threshold: instances are
// 6-connected components of the lesion class; candidate pairs with IoU > 0.5
// are matched greedily by descending IoU, one-to-one.
struct LesionMatching {
    int tp = 0, fp = 0, fn = 0;
    int pred_count = 0, ref_count = 0;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> matches;  // (pred id, ref id)
    double precision = 0.0, recall = 0.0;
};

LesionMatching match_lesions(const Volume<std::uint8_t>& pred_labels,
                             const Volume<std::uint8_t>& ref_labels);

// |lesion| / |liver region| with the liver region = labels != 0.
Score tumor_burden(const Volume<std::uint8_t>& labels);

struct ClassScores {
    Score dice, voe, rvd, asd, msd, rmsd;
};

struct CaseScores {
    std::string case_id;
    ClassScores liver, lesion;
    int lesion_tp = 0, lesion_fp = 0, lesion_fn = 0;
    int pred_lesion_count = 0, ref_lesion_count = 0;
    Score burden_pred, burden_ref;

    // pooled voxel tallies for the global Dice
    std::uint64_t liver_intersection = 0, liver_pred = 0, liver_ref = 0;
    std::uint64_t lesion_intersection = 0, lesion_pred = 0, lesion_ref = 0;
};

// Full per-case evaluation of a predicted label volume against the reference.
// The liver class is the organ region (labels != 0, lesions included); the
// lesion class is labels == 2. Lesion surface metrics cover matched instance
// pairs only; cases without reference lesions mark the lesion overlap scores
// undefined. A missing prediction is scored by passing pred_missing = true.
CaseScores evaluate_case(const std::string& case_id, const Volume<std::uint8_t>& pred,
                         const Volume<std::uint8_t>& ref, const Spacing& spacing,
                         bool pred_missing = false);

struct AggregateReport {
    ClassScores liver, lesion;       // dice holds the per-case mean
    Score liver_dice_global, lesion_dice_global;
    Score precision, recall;         // pooled over cases
    Score burden_rmse, burden_max_error;
    int case_count = 0;
    int lesion_undefined_cases = 0;  // cases excluded from per-case lesion means
};

AggregateReport aggregate(const std::vector<CaseScores>& cases);

// One CSV row per case per class, plus a JSON aggregate mirroring the
// leaderboard fields.
void write_case_csv(const std::vector<CaseScores>& cases, const std::filesystem::path& path);
void write_aggregate_json(const AggregateReport& report, const std::filesystem::path& path);
std::string aggregate_to_json(const AggregateReport& report);

}  // namespace polyseg
