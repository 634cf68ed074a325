#include "polyseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include <json.hpp>

namespace polyseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_aligned(const Volume<std::uint8_t>& a, const Volume<std::uint8_t>& b) {
    if (!(a.dims == b.dims)) throw ParamError("masks must have identical dims");
}

std::uint64_t count_fg(const Volume<std::uint8_t>& m) {
    std::uint64_t n = 0;
    for (std::uint8_t v : m.data) n += v != 0;
    return n;
}

std::uint64_t count_inter(const Volume<std::uint8_t>& a, const Volume<std::uint8_t>& b) {
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) n += (a.data[i] != 0) && (b.data[i] != 0);
    return n;
}

}  // namespace

std::string Score::to_string() const {
    if (state == State::Undefined) return "undefined";
    if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", value);
    return buf;
}

double dice(const Volume<std::uint8_t>& a, const Volume<std::uint8_t>& b) {
    check_aligned(a, b);
    const std::uint64_t na = count_fg(a), nb = count_fg(b);
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(count_inter(a, b)) / static_cast<double>(na + nb);
}

double voe(const Volume<std::uint8_t>& a, const Volume<std::uint8_t>& b) {
    check_aligned(a, b);
    const std::uint64_t inter = count_inter(a, b);
    const std::uint64_t uni = count_fg(a) + count_fg(b) - inter;
    if (uni == 0) return 0.0;
    return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

Score rvd(const Volume<std::uint8_t>& pred, const Volume<std::uint8_t>& ref) {
    check_aligned(pred, ref);
    const std::uint64_t nref = count_fg(ref);
    if (nref == 0) return Score::undefined();
    const std::uint64_t npred = count_fg(pred);
    return Score::defined((static_cast<double>(npred) - static_cast<double>(nref)) /
                          static_cast<double>(nref));
}

std::vector<std::uint64_t> surface_voxels(const Volume<std::uint8_t>& mask) {
    const std::int64_t nx = mask.dims.nx, ny = mask.dims.ny, nz = mask.dims.nz;
    std::vector<std::uint64_t> out;
    std::uint64_t i = 0;
    for (std::int64_t z = 0; z < nz; ++z)
        for (std::int64_t y = 0; y < ny; ++y)
            for (std::int64_t x = 0; x < nx; ++x, ++i) {
                if (!mask.data[i]) continue;
                const bool boundary =
                    x == 0 || !mask.data[i - 1] || x == nx - 1 || !mask.data[i + 1] || y == 0 ||
                    !mask.data[i - nx] || y == ny - 1 || !mask.data[i + nx] || z == 0 ||
                    !mask.data[i - nx * ny] || z == nz - 1 || !mask.data[i + nx * ny];
                if (boundary) out.push_back(i);
            }
    return out;
}

namespace {

constexpr double kBig = 1e30;  // stands in for "no site" during the transform

// Exact 1D squared distance transform (lower envelope of parabolas) over
// samples at physical positions pos[i]; d[q] = min_j (pos[q]-pos[j])^2 + f[j].
void edt_1d(const std::vector<double>& f, const std::vector<double>& pos, std::vector<double>& d,
            std::vector<int>& v, std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        double s;
        for (;;) {
            const int p = v[k];
            s = ((f[q] + pos[q] * pos[q]) - (f[p] + pos[p] * pos[p])) / (2.0 * (pos[q] - pos[p]));
            if (s > z[k]) break;
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < pos[q]) ++k;
        const double dp = pos[q] - pos[v[k]];
        d[q] = dp * dp + f[v[k]];
    }
}

// Squared physical distance from every voxel center to the nearest point of
// the site set, via separable transforms along x, y, z.
std::vector<double> squared_distance_field(const Volume<std::uint8_t>& domain,
                                           const std::vector<std::uint64_t>& sites,
                                           const Spacing& spacing) {
    const int nx = static_cast<int>(domain.dims.nx);
    const int ny = static_cast<int>(domain.dims.ny);
    const int nz = static_cast<int>(domain.dims.nz);
    std::vector<double> field(domain.dims.numel(), kBig);
    for (std::uint64_t s : sites) field[s] = 0.0;

    const int nmax = std::max({nx, ny, nz});
    std::vector<double> f(nmax), d(nmax), pos(nmax), z(nmax + 1);
    std::vector<int> v(nmax);

    // x pass
    for (int i = 0; i < nx; ++i) pos[i] = i * spacing.sx;
    for (int zz = 0; zz < nz; ++zz)
        for (int y = 0; y < ny; ++y) {
            double* row = field.data() + (static_cast<std::size_t>(zz) * ny + y) * nx;
            std::copy(row, row + nx, f.begin());
            f.resize(nx);
            edt_1d(f, pos, d, v, z);
            std::copy(d.begin(), d.begin() + nx, row);
            f.resize(nmax);
        }
    // y pass
    for (int i = 0; i < ny; ++i) pos[i] = i * spacing.sy;
    for (int zz = 0; zz < nz; ++zz)
        for (int x = 0; x < nx; ++x) {
            for (int y = 0; y < ny; ++y)
                f[y] = field[(static_cast<std::size_t>(zz) * ny + y) * nx + x];
            f.resize(ny);
            edt_1d(f, pos, d, v, z);
            for (int y = 0; y < ny; ++y)
                field[(static_cast<std::size_t>(zz) * ny + y) * nx + x] = d[y];
            f.resize(nmax);
        }
    // z pass
    for (int i = 0; i < nz; ++i) pos[i] = i * spacing.sz;
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
            for (int zz = 0; zz < nz; ++zz)
                f[zz] = field[(static_cast<std::size_t>(zz) * ny + y) * nx + x];
            f.resize(nz);
            edt_1d(f, pos, d, v, z);
            for (int zz = 0; zz < nz; ++zz)
                field[(static_cast<std::size_t>(zz) * ny + y) * nx + x] = d[zz];
            f.resize(nmax);
        }
    return field;
}

// Pooled symmetric squared-distance samples between two surface point sets.
std::vector<double> symmetric_sq_samples(const Volume<std::uint8_t>& a,
                                         const Volume<std::uint8_t>& b, const Spacing& spacing) {
    const auto sa = surface_voxels(a);
    const auto sb = surface_voxels(b);
    std::vector<double> samples;
    samples.reserve(sa.size() + sb.size());
    const auto db = squared_distance_field(a, sb, spacing);
    for (std::uint64_t i : sa) samples.push_back(db[i]);
    const auto da = squared_distance_field(a, sa, spacing);
    for (std::uint64_t i : sb) samples.push_back(da[i]);
    return samples;
}

SurfaceScores summarize_sq_samples(const std::vector<double>& sq) {
    double sum = 0.0, sum_sq = 0.0, max_sq = 0.0;
    for (double s : sq) {
        sum += std::sqrt(s);
        sum_sq += s;
        max_sq = std::max(max_sq, s);
    }
    const double n = static_cast<double>(sq.size());
    return SurfaceScores{Score::defined(sum / n), Score::defined(std::sqrt(max_sq)),
                         Score::defined(std::sqrt(sum_sq / n))};
}

}  // namespace

SurfaceScores surface_distances(const Volume<std::uint8_t>& a, const Volume<std::uint8_t>& b,
                                const Spacing& spacing) {
    check_aligned(a, b);
    spacing.validate();
    if (count_fg(a) == 0 || count_fg(b) == 0)
        return SurfaceScores{Score::worst(kInf), Score::worst(kInf), Score::worst(kInf)};
    return summarize_sq_samples(symmetric_sq_samples(a, b, spacing));
}

namespace {

Volume<std::uint8_t> class_mask(const Volume<std::uint8_t>& labels, bool organ_region) {
    Volume<std::uint8_t> out = labels;
    out.kind = VoxelKind::Label;
    for (std::uint8_t& v : out.data)
        v = organ_region ? (v != 0 ? 1 : 0) : (v == 2 ? 1 : 0);
    return out;
}

}  // namespace

LesionMatching match_lesions(const Volume<std::uint8_t>& pred_labels,
                             const Volume<std::uint8_t>& ref_labels) {
    check_aligned(pred_labels, ref_labels);
    const ComponentLabeling pred_cc =
        connected_components(class_mask(pred_labels, false), Connectivity::Six);
    const ComponentLabeling ref_cc =
        connected_components(class_mask(ref_labels, false), Connectivity::Six);

    LesionMatching out;
    out.pred_count = static_cast<int>(pred_cc.count());
    out.ref_count = static_cast<int>(ref_cc.count());

    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> overlap;
    for (std::size_t i = 0; i < pred_labels.data.size(); ++i) {
        const std::uint32_t p = pred_cc.labels.data[i];
        const std::uint32_t r = ref_cc.labels.data[i];
        if (p && r) ++overlap[{p, r}];
    }

    struct Candidate {
        double iou;
        std::uint32_t pred, ref;
    };
    std::vector<Candidate> candidates;
    for (const auto& [pair, inter] : overlap) {
        const std::uint64_t uni =
            pred_cc.sizes[pair.first - 1] + ref_cc.sizes[pair.second - 1] - inter;
        const double iou = static_cast<double>(inter) / static_cast<double>(uni);
        if (iou > 0.5) candidates.push_back(Candidate{iou, pair.first, pair.second});
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.iou != b.iou) return a.iou > b.iou;
        if (a.pred != b.pred) return a.pred < b.pred;
        return a.ref < b.ref;
    });

    std::vector<bool> pred_used(pred_cc.count() + 1, false), ref_used(ref_cc.count() + 1, false);
    for (const Candidate& c : candidates) {
        if (pred_used[c.pred] || ref_used[c.ref]) continue;
        pred_used[c.pred] = ref_used[c.ref] = true;
        out.matches.emplace_back(c.pred, c.ref);
    }
    out.tp = static_cast<int>(out.matches.size());
    out.fp = out.pred_count - out.tp;
    out.fn = out.ref_count - out.tp;

    out.precision = (out.tp + out.fp) == 0
                        ? (out.ref_count == 0 ? 1.0 : 0.0)
                        : static_cast<double>(out.tp) / (out.tp + out.fp);
    out.recall = (out.tp + out.fn) == 0 ? (out.pred_count == 0 ? 1.0 : 0.0)
                                        : static_cast<double>(out.tp) / (out.tp + out.fn);
    return out;
}

Score tumor_burden(const Volume<std::uint8_t>& labels) {
    std::uint64_t region = 0, lesion = 0;
    for (std::uint8_t v : labels.data) {
        region += v != 0;
        lesion += v == 2;
    }
    if (region == 0) return Score::undefined();
    return Score::defined(static_cast<double>(lesion) / static_cast<double>(region));
}

namespace {

// Surface metrics pooled over matched lesion instance pairs.
SurfaceScores matched_lesion_surfaces(const Volume<std::uint8_t>& pred,
                                      const Volume<std::uint8_t>& ref,
                                      const LesionMatching& matching, const Spacing& spacing) {
    if (matching.matches.empty())
        return SurfaceScores{Score::undefined(), Score::undefined(), Score::undefined()};

    const ComponentLabeling pred_cc =
        connected_components(class_mask(pred, false), Connectivity::Six);
    const ComponentLabeling ref_cc = connected_components(class_mask(ref, false), Connectivity::Six);

    std::vector<double> samples;
    for (const auto& [pid, rid] : matching.matches) {
        Volume<std::uint8_t> pm(pred.dims, pred.spacing, VoxelKind::Label);
        Volume<std::uint8_t> rm(ref.dims, ref.spacing, VoxelKind::Label);
        for (std::size_t i = 0; i < pm.data.size(); ++i) {
            pm.data[i] = pred_cc.labels.data[i] == pid;
            rm.data[i] = ref_cc.labels.data[i] == rid;
        }
        const auto sq = symmetric_sq_samples(pm, rm, spacing);
        samples.insert(samples.end(), sq.begin(), sq.end());
    }
    return summarize_sq_samples(samples);
}

}  // namespace

CaseScores evaluate_case(const std::string& case_id, const Volume<std::uint8_t>& pred,
                         const Volume<std::uint8_t>& ref, const Spacing& spacing,
                         bool pred_missing) {
    CaseScores cs;
    cs.case_id = case_id;

    const Volume<std::uint8_t> ref_liver = class_mask(ref, true);
    const Volume<std::uint8_t> ref_lesion = class_mask(ref, false);
    cs.liver_ref = count_fg(ref_liver);
    cs.lesion_ref = count_fg(ref_lesion);
    cs.burden_ref = tumor_burden(ref);

    if (pred_missing) {
        // challenge rule: a missing prediction defaults every segmentation
        // metric to its worst score
        const ClassScores worst{Score::worst(0.0), Score::worst(1.0), Score::worst(kInf),
                                Score::worst(kInf), Score::worst(kInf), Score::worst(kInf)};
        cs.liver = worst;
        cs.lesion = worst;
        const ComponentLabeling ref_cc = connected_components(ref_lesion, Connectivity::Six);
        cs.ref_lesion_count = static_cast<int>(ref_cc.count());
        cs.lesion_fn = cs.ref_lesion_count;
        cs.burden_pred = Score::undefined();
        return cs;
    }

    check_aligned(pred, ref);
    const Volume<std::uint8_t> pred_liver = class_mask(pred, true);
    const Volume<std::uint8_t> pred_lesion = class_mask(pred, false);
    cs.liver_pred = count_fg(pred_liver);
    cs.lesion_pred = count_fg(pred_lesion);
    cs.liver_intersection = count_inter(pred_liver, ref_liver);
    cs.lesion_intersection = count_inter(pred_lesion, ref_lesion);

    cs.liver.dice = Score::defined(dice(pred_liver, ref_liver));
    cs.liver.voe = Score::defined(voe(pred_liver, ref_liver));
    cs.liver.rvd = rvd(pred_liver, ref_liver);
    const SurfaceScores liver_sd = surface_distances(pred_liver, ref_liver, spacing);
    cs.liver.asd = liver_sd.asd;
    cs.liver.msd = liver_sd.msd;
    cs.liver.rmsd = liver_sd.rmsd;

    const LesionMatching matching = match_lesions(pred, ref);
    cs.lesion_tp = matching.tp;
    cs.lesion_fp = matching.fp;
    cs.lesion_fn = matching.fn;
    cs.pred_lesion_count = matching.pred_count;
    cs.ref_lesion_count = matching.ref_count;

    if (cs.lesion_ref == 0) {
        // no reference lesions: the overlap scores carry no information and
        // are excluded from per-case means
        cs.lesion.dice = Score::undefined();
        cs.lesion.voe = Score::undefined();
        cs.lesion.rvd = Score::undefined();
    } else {
        cs.lesion.dice = Score::defined(dice(pred_lesion, ref_lesion));
        cs.lesion.voe = Score::defined(voe(pred_lesion, ref_lesion));
        cs.lesion.rvd = rvd(pred_lesion, ref_lesion);
    }
    const SurfaceScores lesion_sd = matched_lesion_surfaces(pred, ref, matching, spacing);
    cs.lesion.asd = lesion_sd.asd;
    cs.lesion.msd = lesion_sd.msd;
    cs.lesion.rmsd = lesion_sd.rmsd;

    cs.burden_pred = tumor_burden(pred);
    return cs;
}

namespace {

Score mean_score(const std::vector<CaseScores>& cases, Score ClassScores::* field,
                 ClassScores CaseScores::* cls) {
    double sum = 0.0;
    int n = 0;
    for (const auto& c : cases) {
        const Score& s = (c.*cls).*field;
        if (s.is_undefined()) continue;
        sum += s.value;
        ++n;
    }
    if (n == 0) return Score::undefined();
    return Score::defined(sum / n);
}

}  // namespace

AggregateReport aggregate(const std::vector<CaseScores>& cases) {
    if (cases.empty()) throw ParamError("aggregate: at least one case is required");

    AggregateReport r;
    r.case_count = static_cast<int>(cases.size());

    for (auto field : {&ClassScores::dice, &ClassScores::voe, &ClassScores::rvd, &ClassScores::asd,
                       &ClassScores::msd, &ClassScores::rmsd}) {
        r.liver.*field = mean_score(cases, field, &CaseScores::liver);
        r.lesion.*field = mean_score(cases, field, &CaseScores::lesion);
    }
    for (const auto& c : cases) r.lesion_undefined_cases += c.lesion.dice.is_undefined();

    std::uint64_t li = 0, lp = 0, lr = 0, ti = 0, tp_vox = 0, tr = 0;
    for (const auto& c : cases) {
        li += c.liver_intersection;
        lp += c.liver_pred;
        lr += c.liver_ref;
        ti += c.lesion_intersection;
        tp_vox += c.lesion_pred;
        tr += c.lesion_ref;
    }
    r.liver_dice_global =
        Score::defined(lp + lr == 0 ? 1.0 : 2.0 * static_cast<double>(li) / (lp + lr));
    r.lesion_dice_global =
        Score::defined(tp_vox + tr == 0 ? 1.0 : 2.0 * static_cast<double>(ti) / (tp_vox + tr));

    std::int64_t tp = 0, fp = 0, fn = 0, preds = 0, refs = 0;
    for (const auto& c : cases) {
        tp += c.lesion_tp;
        fp += c.lesion_fp;
        fn += c.lesion_fn;
        preds += c.pred_lesion_count;
        refs += c.ref_lesion_count;
    }
    r.precision = Score::defined(tp + fp == 0 ? (refs == 0 ? 1.0 : 0.0)
                                              : static_cast<double>(tp) / (tp + fp));
    r.recall = Score::defined(tp + fn == 0 ? (preds == 0 ? 1.0 : 0.0)
                                           : static_cast<double>(tp) / (tp + fn));

    double err_sq = 0.0, err_max = 0.0;
    int burden_n = 0;
    for (const auto& c : cases) {
        if (c.burden_pred.is_undefined() || c.burden_ref.is_undefined()) continue;
        const double e = c.burden_pred.value - c.burden_ref.value;
        err_sq += e * e;
        err_max = std::max(err_max, std::abs(e));
        ++burden_n;
    }
    if (burden_n > 0) {
        r.burden_rmse = Score::defined(std::sqrt(err_sq / burden_n));
        r.burden_max_error = Score::defined(err_max);
    } else {
        r.burden_rmse = Score::undefined();
        r.burden_max_error = Score::undefined();
    }
    return r;
}

namespace {

nlohmann::json score_json(const Score& s) {
    if (s.is_undefined()) return "undefined";
    if (std::isinf(s.value)) return s.value > 0 ? "inf" : "-inf";
    return s.value;
}

nlohmann::json class_json(const ClassScores& c, const Score& global) {
    return nlohmann::json{{"dice_per_case", score_json(c.dice)}, {"dice_global", score_json(global)},
                          {"voe", score_json(c.voe)},            {"rvd", score_json(c.rvd)},
                          {"asd", score_json(c.asd)},            {"msd", score_json(c.msd)},
                          {"rmsd", score_json(c.rmsd)}};
}

}  // namespace

std::string aggregate_to_json(const AggregateReport& r) {
    nlohmann::json j;
    j["cases"] = r.case_count;
    j["liver"] = class_json(r.liver, r.liver_dice_global);
    j["lesion"] = class_json(r.lesion, r.lesion_dice_global);
    j["lesion"]["undefined_cases"] = r.lesion_undefined_cases;
    j["precision"] = score_json(r.precision);
    j["recall"] = score_json(r.recall);
    j["burden_rmse"] = score_json(r.burden_rmse);
    j["burden_max_error"] = score_json(r.burden_max_error);
    return j.dump(2);
}

void write_aggregate_json(const AggregateReport& report, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << aggregate_to_json(report) << "\n";
}

void write_case_csv(const std::vector<CaseScores>& cases, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << "case,class,dice,voe,rvd,asd,msd,rmsd,tp,fp,fn,burden_pred,burden_ref\n";
    for (const auto& c : cases) {
        f << c.case_id << ",liver," << c.liver.dice.to_string() << ',' << c.liver.voe.to_string()
          << ',' << c.liver.rvd.to_string() << ',' << c.liver.asd.to_string() << ','
          << c.liver.msd.to_string() << ',' << c.liver.rmsd.to_string() << ",,,,,\n";
        f << c.case_id << ",lesion," << c.lesion.dice.to_string() << ',' << c.lesion.voe.to_string()
          << ',' << c.lesion.rvd.to_string() << ',' << c.lesion.asd.to_string() << ','
          << c.lesion.msd.to_string() << ',' << c.lesion.rmsd.to_string() << ',' << c.lesion_tp
          << ',' << c.lesion_fp << ',' << c.lesion_fn << ',' << c.burden_pred.to_string() << ','
          << c.burden_ref.to_string() << "\n";
    }
}

}  // namespace polyseg
