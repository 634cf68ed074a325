// Acceptance suite: runs every release criterion end to end and prints one
// pass/fail line per criterion. Returns the number of failed criteria.
//
// The desk-scale learning criterion trains both stages on synthetic phantoms
// from scratch; expect the full suite to take 15-30 minutes on a 2-core CPU.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "polyseg/gradcheck.hpp"
#include "polyseg/metrics.hpp"
#include "polyseg/nifti_io.hpp"
#include "polyseg/pipeline.hpp"
#include "polyseg/segv_io.hpp"

using namespace polyseg;
namespace fs = std::filesystem;

namespace {

std::string format(const char* fmt, ...) {
    char buf[512];
    va_list args;
    va_start(args, fmt);
    std::vsnprintf(buf, sizeof(buf), fmt, args);
    va_end(args);
    return buf;
}

// shared artifacts between the learning criterion (6) and the pipeline
// invariants criterion (7)
struct DeskRun {
    bool trained = false;
    fs::path dir;
    Manifest manifest;
    std::unique_ptr<PolyUNet> stage1, stage2;
    InferConfig infer_cfg;
    std::vector<StageOutputs> outputs;            // one per phantom
    std::vector<Volume<std::uint8_t>> references;
    std::vector<Volume<float>> cts;
};

DeskRun desk;

bool criterion_gradients(std::string& detail) {
    const auto results = run_gradchecks(2024);
    bool pass = results.size() == 10;
    double worst = 0;
    for (const auto& r : results) {
        pass = pass && r.pass;
        worst = std::max(worst, r.max_rel_err / r.tolerance);
    }
    detail = format("%zu ops, worst err/tol %.3g", results.size(), worst);
    return pass;
}

bool criterion_loss_exactness(std::string& detail) {
    // single pixel, uniform logits, lesion target: loss = 5 ln 3
    Tensor4 logits(Shape4{1, 3, 1, 1});
    LabelBatch target(1, 1, 1);
    target.v[0] = 2;
    const double loss =
        weighted_cross_entropy(logits, target, ClassWeights{}, nullptr).values()[0];
    const double err_pixel = std::abs(loss - 5.0 * std::log(3.0));

    // unit weights reduce to unweighted cross-entropy
    Rng rng(7);
    Tensor4 random_logits(Shape4{2, 3, 6, 6});
    for (real& v : random_logits.values()) v = static_cast<real>(2.0 * rng.normal());
    LabelBatch targets(2, 6, 6);
    for (auto& t : targets.v) t = static_cast<std::uint8_t>(rng.uniform_int(0, 2));
    const double ours =
        weighted_cross_entropy(random_logits, targets, ClassWeights{1, 1, 1}, nullptr).values()[0];
    double expect = 0;
    for (int n = 0; n < 2; ++n) {
        double slice = 0;
        for (int i = 0; i < 36; ++i) {
            const double l0 = random_logits.values()[n * 108 + i];
            const double l1 = random_logits.values()[n * 108 + 36 + i];
            const double l2 = random_logits.values()[n * 108 + 72 + i];
            const double z = std::exp(l0) + std::exp(l1) + std::exp(l2);
            const int t = targets.v[n * 36 + i];
            slice += -((t == 0 ? l0 : t == 1 ? l1 : l2) - std::log(z));
        }
        expect += slice / 36.0;
    }
    expect /= 2.0;
    const double err_unweighted = std::abs(ours - expect);

    detail = format("pixel err %.2e (tol 1e-9), unit-weight err %.2e (tol 1e-12)", err_pixel,
                    err_unweighted);
    return err_pixel < 1e-9 && err_unweighted < 1e-12;
}

bool criterion_poly_structure(std::string& detail) {
    // structural: recompute every path from the taps with the shared F
    ParamSet ps;
    Rng rng(31);
    PolyBlock block(ps, "p", 4, /*share_f=*/true, rng);
    Tensor4 x(Shape4{2, 4, 16, 16});
    for (real& v : x.values()) v = static_cast<real>(rng.normal());

    PolyTaps taps;
    const Tensor4 out = block.forward(x, nullptr, false, &taps);
    const Tensor4 p1 = block.unit(0).forward(taps.input, nullptr, false);
    const Tensor4 p2 = block.unit(0).forward(taps.p1, nullptr, false);
    const Tensor4 p3 = block.unit(0).forward(taps.p2, nullptr, false);
    bool exact = p1.values() == taps.p1.values() && p2.values() == taps.p2.values() &&
                 p3.values() == taps.p3.values();
    for (std::size_t i = 0; i < out.values().size() && exact; ++i) {
        const real merged = taps.p1.values()[i] + taps.p2.values()[i] + taps.p3.values()[i];
        exact = out.values()[i] == std::max(merged, real(0));
    }

    // identity-F construction: out = 3x on non-negative input
    ParamSet ps_id;
    Rng rng_id(32);
    PolyBlock ident(ps_id, "poly", 2, true, rng_id);
    Tensor4& w = ps_id.get("poly.f1.weight");
    std::fill(w.values().begin(), w.values().end(), real(0));
    for (int c = 0; c < 2; ++c) w.at(c, c, 1, 1) = real(1);
    Tensor4& gamma = ps_id.get("poly.f1.bn.gamma");
    for (real& gv : gamma.values()) gv = std::sqrt(real(1) + real(1e-5));  // cancel the BN eps

    Tensor4 xp(Shape4{1, 2, 8, 8});
    Rng rng_x(33);
    for (real& v : xp.values()) v = static_cast<real>(std::abs(rng_x.normal()) + 0.05);
    const Tensor4 tripled = ident.forward(xp, nullptr, false);
    double max_err = 0;
    for (std::size_t i = 0; i < xp.values().size(); ++i)
        max_err = std::max(max_err, std::abs(static_cast<double>(tripled.values()[i]) -
                                             3.0 * xp.values()[i]));

    detail = format("taps %s, identity-F max err %.2e (tol 1e-6)", exact ? "exact" : "MISMATCH",
                    max_err);
    return exact && max_err < 1e-6;
}

bool criterion_metric_oracles(std::string& detail) {
    Rng rng(404);
    double max_dist_err = 0;
    int pairs = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto a = oracle::random_mask(rng, 16, 0.02);
        Volume<std::uint8_t> b = a;
        Rng rb(rng.next_u64());
        for (auto& v : b.data) v = rb.bernoulli(0.08) ? 1 : 0;

        std::uint64_t na = 0, nb = 0, inter = 0, uni = 0;
        for (std::size_t i = 0; i < a.data.size(); ++i) {
            na += a.data[i];
            nb += b.data[i];
            inter += a.data[i] && b.data[i];
            uni += a.data[i] || b.data[i];
        }
        // counting oracles, exact
        const double want_dice = na + nb == 0 ? 1.0 : 2.0 * inter / static_cast<double>(na + nb);
        if (dice(a, b) != want_dice) {
            detail = "dice disagrees with the counting oracle";
            return false;
        }
        const double want_voe = uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / uni;
        if (voe(a, b) != want_voe) {
            detail = "voe disagrees with the counting oracle";
            return false;
        }
        if (nb > 0) {
            const double want_rvd = (static_cast<double>(na) - static_cast<double>(nb)) / nb;
            if (rvd(a, b).value != want_rvd) {
                detail = "rvd disagrees with the counting oracle";
                return false;
            }
        }
        if (na == 0 || nb == 0) continue;
        ++pairs;
        const Spacing sp{rng.uniform(0.4, 3.0), rng.uniform(0.4, 3.0), rng.uniform(0.4, 3.0)};
        const auto got = surface_distances(a, b, sp);
        const auto want = oracle::brute_surface_distances(a, b, sp);
        max_dist_err = std::max({max_dist_err, std::abs(got.asd.value - want.asd),
                                 std::abs(got.msd.value - want.msd),
                                 std::abs(got.rmsd.value - want.rmsd)});
    }
    if (max_dist_err >= 1e-9) {
        detail = format("surface distance err %.3e exceeds 1e-9 mm", max_dist_err);
        return false;
    }

    // connected components vs flood fill, both connectivities
    Rng rng_cc(405);
    for (int trial = 0; trial < 200; ++trial) {
        Volume<std::uint8_t> mask(Dims3{8, 8, 8}, Spacing{1, 1, 1}, VoxelKind::Label);
        const double density = rng_cc.uniform(0.05, 0.6);
        for (auto& v : mask.data) v = rng_cc.bernoulli(density) ? 1 : 0;
        for (Connectivity conn : {Connectivity::Six, Connectivity::TwentySix}) {
            const auto cc = connected_components(mask, conn);
            const auto ff = oracle::flood_fill(mask, static_cast<int>(conn));
            if (cc.count() != ff.sizes.size()) {
                detail = "component count disagrees with flood fill";
                return false;
            }
            std::map<std::uint32_t, std::uint32_t> id_map;
            for (std::size_t i = 0; i < mask.data.size(); ++i) {
                if ((cc.labels.data[i] == 0) != (ff.labels[i] == 0)) {
                    detail = "foreground coverage disagrees with flood fill";
                    return false;
                }
                if (!cc.labels.data[i]) continue;
                auto [it, inserted] = id_map.try_emplace(cc.labels.data[i], ff.labels[i]);
                if (!inserted && it->second != ff.labels[i]) {
                    detail = "partition disagrees with flood fill";
                    return false;
                }
            }
            for (const auto& [own, theirs] : id_map)
                if (cc.sizes[own - 1] != ff.sizes[theirs - 1]) {
                    detail = "component sizes disagree with flood fill";
                    return false;
                }
        }
    }
    detail = format("%d surface pairs, max dist err %.2e mm; 200 component volumes x2", pairs,
                    max_dist_err);
    return true;
}

bool criterion_detection(std::string& detail) {
    // IoU 2/6 below the threshold: not detected
    Volume<std::uint8_t> pred(Dims3{12, 12, 1}, Spacing{1, 1, 1}, VoxelKind::Label);
    Volume<std::uint8_t> ref = pred;
    for (int y = 1; y <= 2; ++y)
        for (int x = 1; x <= 2; ++x) ref.at(x, y, 0) = 2;
    for (int y = 2; y <= 3; ++y)
        for (int x = 1; x <= 2; ++x) pred.at(x, y, 0) = 2;
    const auto low = match_lesions(pred, ref);
    if (low.tp != 0 || low.fp != 1 || low.fn != 1) {
        detail = "IoU 2/6 fixture was wrongly detected";
        return false;
    }
    const auto exact = match_lesions(ref, ref);
    if (exact.tp != 1 || exact.precision != 1.0 || exact.recall != 1.0) {
        detail = "identical instance was not detected";
        return false;
    }

    // identities on random multi-lesion fixtures
    Rng rng(606);
    for (int trial = 0; trial < 100; ++trial) {
        Volume<std::uint8_t> p(Dims3{14, 14, 6}, Spacing{1, 1, 1}, VoxelKind::Label);
        Volume<std::uint8_t> r = p;
        const int blobs = static_cast<int>(rng.uniform_int(0, 5));
        for (int b = 0; b < blobs; ++b) {
            const int x = static_cast<int>(rng.uniform_int(0, 11));
            const int y = static_cast<int>(rng.uniform_int(0, 11));
            const int z = static_cast<int>(rng.uniform_int(0, 4));
            auto& target = rng.bernoulli(0.5) ? p : r;
            for (int dy = 0; dy <= 1; ++dy)
                for (int dx = 0; dx <= 2; ++dx) target.at(x + dx, y + dy, z) = 2;
        }
        const auto m = match_lesions(p, r);
        auto to_binary = [](Volume<std::uint8_t> v) {
            for (auto& x : v.data) x = x == 2;
            return v;
        };
        const int pred_n = static_cast<int>(oracle::flood_fill(to_binary(p), 6).sizes.size());
        const int ref_n = static_cast<int>(oracle::flood_fill(to_binary(r), 6).sizes.size());
        if (m.tp + m.fp != pred_n || m.tp + m.fn != ref_n) {
            detail = format("identities broken at trial %d", trial);
            return false;
        }
    }
    detail = "threshold fixtures and 100 random fixtures hold";
    return true;
}

double mean_liver_dice(const std::vector<Volume<std::uint8_t>>& preds, const DeskRun& run) {
    double sum = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        Volume<std::uint8_t> pred_liver = preds[i];
        for (auto& v : pred_liver.data) v = v != 0;
        Volume<std::uint8_t> ref_liver = run.references[i];
        for (auto& v : ref_liver.data) v = v != 0;
        sum += dice(pred_liver, ref_liver);
    }
    return sum / static_cast<double>(preds.size());
}

bool criterion_desk_learning(std::string& detail) {
    desk.dir = fs::temp_directory_path() / "polyseg_acceptance";
    fs::remove_all(desk.dir);

    PhantomConfig phantom;  // 64x64x32, spacing (1,1,2.5)
    desk.manifest = generate_dataset(4, phantom, 11, desk.dir, 1.0);
    for (const auto& c : desk.manifest) {
        desk.cts.push_back(load_segv_as<float>(c.ct));
        desk.references.push_back(as_labels(load_segv(c.label)));
    }

    TrainConfig cfg1;
    cfg1.stage = 1;
    cfg1.total_iters = 400;
    cfg1.lr_decay_period = 400;
    cfg1.batch_size = 1;
    cfg1.seed = 1;
    cfg1.model.context_radius = 1;
    cfg1.model.widths = {16, 32, 64, 128, 256};
    cfg1.model.zoom_size = 64;
    cfg1.roi_pad = {4, 4, 4};

    desk.stage1 = std::make_unique<PolyUNet>(cfg1.model, mix_seed(cfg1.seed, 1));
    SgdOptimizer opt1(desk.stage1->params(), cfg1.sgd);
    train_stage(*desk.stage1, opt1, desk.manifest, cfg1);

    // stage-1 training-set liver dice
    std::vector<Volume<std::uint8_t>> stage1_preds;
    for (const auto& ct : desk.cts) {
        const Volume<float> image = normalize_zscore(window_hu(ct));
        stage1_preds.push_back(predict_volume(*desk.stage1, image).argmax_labels());
    }
    const double stage1_dice = mean_liver_dice(stage1_preds, desk);

    TrainConfig cfg2 = cfg1;
    cfg2.stage = 2;
    cfg2.total_iters = 1200;
    cfg2.lr_decay_period = 600;
    cfg2.seed = 2;

    desk.stage2 = std::make_unique<PolyUNet>(cfg2.model, mix_seed(cfg2.seed, 2));
    SgdOptimizer opt2(desk.stage2->params(), cfg2.sgd);
    train_stage(*desk.stage2, opt2, desk.manifest, cfg2);

    desk.infer_cfg.roi_pad = {4, 4, 4};
    std::vector<CaseScores> cases;
    for (std::size_t i = 0; i < desk.cts.size(); ++i) {
        desk.outputs.push_back(
            infer_two_stage(desk.cts[i], *desk.stage1, *desk.stage2, desk.infer_cfg));
        cases.push_back(evaluate_case("phantom" + std::to_string(i), desk.outputs.back().fused,
                                      desk.references[i], desk.references[i].spacing));
    }
    const AggregateReport report = aggregate(cases);
    desk.trained = true;

    const double fused_liver = report.liver.dice.value;
    const double fused_lesion = report.lesion.dice.value;
    detail = format("stage-1 liver dice %.4f (>=0.90), fused liver %.4f (>=0.90), lesion %.4f (>=0.5)",
                    stage1_dice, fused_liver, fused_lesion);
    return stage1_dice >= 0.90 && fused_liver >= 0.90 && fused_lesion >= 0.5;
}

bool criterion_pipeline_invariants(std::string& detail) {
    if (!desk.trained) {
        detail = "skipped: desk-scale training did not complete";
        return false;
    }
    for (std::size_t i = 0; i < desk.outputs.size(); ++i) {
        const StageOutputs& out = desk.outputs[i];
        for (auto v : out.fused.data)
            if (v > 2) {
                detail = "fused labels escape {0,1,2}";
                return false;
            }
        std::uint64_t idx = 0;
        for (int z = 0; z < static_cast<int>(out.fused.dims.nz); ++z)
            for (int y = 0; y < static_cast<int>(out.fused.dims.ny); ++y)
                for (int x = 0; x < static_cast<int>(out.fused.dims.nx); ++x, ++idx)
                    if (out.fused.data[idx] == 2 && !out.roi.contains(x, y, z)) {
                        detail = "lesion voxel escaped the ROI";
                        return false;
                    }
        // the padded ROI covers every ground-truth liver voxel (pad = 4)
        idx = 0;
        for (int z = 0; z < static_cast<int>(out.fused.dims.nz); ++z)
            for (int y = 0; y < static_cast<int>(out.fused.dims.ny); ++y)
                for (int x = 0; x < static_cast<int>(out.fused.dims.nx); ++x, ++idx)
                    if (desk.references[i].data[idx] != 0 && !out.roi.contains(x, y, z)) {
                        detail = format("ROI missed a ground-truth liver voxel on phantom %zu", i);
                        return false;
                    }
    }

    // end-to-end determinism, bitwise
    const StageOutputs rerun =
        infer_two_stage(desk.cts[0], *desk.stage1, *desk.stage2, desk.infer_cfg);
    if (rerun.fused.data != desk.outputs[0].fused.data || !(rerun.roi == desk.outputs[0].roi)) {
        detail = "repeated inference differs";
        return false;
    }
    detail = format("%zu phantoms: labels, ROI confinement, coverage, determinism", desk.outputs.size());
    return true;
}

bool criterion_schedule(std::string& detail) {
    TrainConfig cfg;  // full-scale defaults: 1e-3, x0.1 per 40000, total 160000
    const bool pass = lr_at(0, cfg) == 1e-3 && lr_at(40000, cfg) == 1e-3 * 0.1 &&
                      lr_at(120000, cfg) == 1e-3 * 0.1 * 0.1 * 0.1;
    detail = format("lr(0)=%.0e lr(40000)=%.0e lr(120000)=%.0e", lr_at(0, cfg), lr_at(40000, cfg),
                    lr_at(120000, cfg));
    return pass;
}

bool criterion_formats(std::string& detail) {
    const fs::path dir = fs::temp_directory_path() / "polyseg_acceptance_fmt";
    fs::create_directories(dir);

    // SEGV bitwise round trip
    Rng rng(77);
    Volume<float> vol(Dims3{5, 4, 3}, Spacing{0.7, 1.1, 2.5}, VoxelKind::IntensityHu);
    for (float& v : vol.data) v = static_cast<float>(rng.normal() * 200);
    save_segv(vol, dir / "a.segv");
    const auto back = load_segv_as<float>(dir / "a.segv");
    if (!(back.data == vol.data && back.dims == vol.dims && back.spacing == vol.spacing)) {
        detail = "SEGV round trip not bitwise";
        return false;
    }

    // NIfTI fixture built byte-by-byte
    std::string h(348, '\0');
    auto put_i16 = [&](std::size_t off, std::int16_t v) { std::memcpy(&h[off], &v, 2); };
    auto put_f32 = [&](std::size_t off, float v) { std::memcpy(&h[off], &v, 4); };
    std::int32_t hdr = 348;
    std::memcpy(&h[0], &hdr, 4);
    put_i16(40, 3);
    put_i16(42, 2);
    put_i16(44, 2);
    put_i16(46, 2);
    put_i16(70, 2);
    put_f32(80, 1.0f);
    put_f32(84, 1.0f);
    put_f32(88, 2.5f);
    put_f32(108, 348.0f);
    std::memcpy(&h[344], "n+1\0", 4);
    for (int i = 0; i < 8; ++i) h.push_back(static_cast<char>(i));
    {
        std::ofstream f(dir / "fixture.nii", std::ios::binary | std::ios::trunc);
        f.write(h.data(), static_cast<std::streamsize>(h.size()));
    }
    const AnyVolume nv = load_nifti1(dir / "fixture.nii");
    const auto* nifti = std::get_if<Volume<std::uint8_t>>(&nv);
    if (!nifti || !(nifti->dims == Dims3{2, 2, 2}) || nifti->spacing.sz != 2.5) {
        detail = "NIfTI fixture ingestion mismatch";
        return false;
    }
    for (int i = 0; i < 8; ++i)
        if (nifti->data[i] != i) {
            detail = "NIfTI payload mismatch";
            return false;
        }

    // checkpoint: load(save(p)) restores the stored float32 values bitwise and
    // a resave is byte-identical
    PolyUNetConfig mc;
    mc.widths = {4, 6, 8, 10, 12};
    mc.zoom_size = 16;
    PolyUNet model(mc, 5);
    save_checkpoint(model.params(), dir / "m.punw");
    PolyUNet loaded(mc, 6);
    load_checkpoint(loaded.params(), dir / "m.punw");
    for (std::size_t e = 0; e < model.params().entries().size(); ++e) {
        const auto& a = model.params().entries()[e].tensor.values();
        const auto& b = loaded.params().entries()[e].tensor.values();
        for (std::size_t i = 0; i < a.size(); ++i)
            if (b[i] != static_cast<real>(static_cast<float>(a[i]))) {
                detail = "checkpoint values not restored bitwise";
                return false;
            }
    }
    save_checkpoint(loaded.params(), dir / "m2.punw");
    std::ifstream f1(dir / "m.punw", std::ios::binary), f2(dir / "m2.punw", std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    if (b1 != b2) {
        detail = "checkpoint resave differs";
        return false;
    }
    detail = "SEGV bitwise, NIfTI fixture, checkpoint restore";
    return true;
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        std::function<bool(std::string&)> run;
    };
    const std::vector<Criterion> criteria{
        {1, "gradient correctness", criterion_gradients},
        {2, "loss exactness", criterion_loss_exactness},
        {3, "polynomial module structure", criterion_poly_structure},
        {4, "metric oracle equivalence", criterion_metric_oracles},
        {5, "detection protocol", criterion_detection},
        {6, "desk-scale learning", criterion_desk_learning},
        {7, "pipeline invariants", criterion_pipeline_invariants},
        {8, "schedule fidelity", criterion_schedule},
        {9, "format round-trips", criterion_formats},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        std::string detail;
        bool pass = false;
        try {
            pass = c.run(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        const double sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("[%s] criterion %d: %s (%.1fs) — %s\n", pass ? "PASS" : "FAIL", c.id, c.name,
                    sec, detail.c_str());
        std::fflush(stdout);
        failures += !pass;
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
                criteria.size());
    return failures;
}
