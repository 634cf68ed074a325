#include "polyseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <tuple>

#include "polyseg/segv_io.hpp"

namespace polyseg {

void TrainConfig::validate() const {
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
    if (initial_lr < 0.0 || lr_decay_factor <= 0.0)
        throw ConfigError("learning rate must be non-negative and the decay factor positive");
    if (lr_decay_period < 1 || total_iters < 1) throw ConfigError("iteration counts must be positive");
    if (lr_decay_period > total_iters) throw ConfigError("decay period must not exceed total iterations");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    if (fg_oversample <= 0.0) throw ConfigError("foreground oversampling weight must be positive");
    class_weights.validate();
    model.validate();
}

double lr_at(std::int64_t iter, const TrainConfig& cfg) {
    if (iter < 0 || iter >= cfg.total_iters) throw ParamError("lr_at: iteration out of range");
    return cfg.initial_lr * std::pow(cfg.lr_decay_factor,
                                     static_cast<double>(iter / cfg.lr_decay_period));
}

namespace {

RoiBox jittered_gt_roi(const Volume<std::uint8_t>& fg, const TrainConfig& cfg, Rng& rng) {
    const RoiBox tight = derive_roi(fg, {0, 0, 0});
    auto pad = [&](int base) {
        return std::max(0, base + static_cast<int>(rng.uniform_int(-cfg.roi_jitter, cfg.roi_jitter)));
    };
    RoiBox box;
    box.x0 = std::max(0, tight.x0 - pad(cfg.roi_pad[0]));
    box.y0 = std::max(0, tight.y0 - pad(cfg.roi_pad[1]));
    box.z0 = std::max(0, tight.z0 - pad(cfg.roi_pad[2]));
    box.x1 = std::min(static_cast<int>(fg.dims.nx) - 1, tight.x1 + pad(cfg.roi_pad[0]));
    box.y1 = std::min(static_cast<int>(fg.dims.ny) - 1, tight.y1 + pad(cfg.roi_pad[1]));
    box.z1 = std::min(static_cast<int>(fg.dims.nz) - 1, tight.z1 + pad(cfg.roi_pad[2]));
    return box;
}

// Oversampled slices are the ones carrying the class the stage must newly
// learn: any foreground for stage 1, lesion voxels for stage 2 (inside an ROI
// crop nearly every slice holds liver, so plain foreground would not bias the
// sampler at all).
void collect_slices(PreparedCase& pc, int stage) {
    const std::size_t plane = static_cast<std::size_t>(pc.labels.dims.nx) * pc.labels.dims.ny;
    for (int k = 0; k < static_cast<int>(pc.labels.dims.nz); ++k) {
        const std::uint8_t* s = pc.labels.data.data() + static_cast<std::size_t>(k) * plane;
        const std::uint8_t wanted = stage == 1 ? 1 : 2;
        const bool fg = std::any_of(s, s + plane, [&](std::uint8_t v) { return v >= wanted; });
        (fg ? pc.fg_slices : pc.bg_slices).push_back(k);
    }
}

}  // namespace

std::vector<PreparedCase> prepare_training_cases(const Manifest& manifest, const TrainConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, 0x726f695f6a697400ULL));
    std::vector<PreparedCase> cases;
    for (const auto& mc : manifest) {
        if (mc.split != "train") continue;
        const Volume<float> ct = to_float(load_segv(mc.ct));
        const Volume<std::uint8_t> labels = as_labels(load_segv(mc.label));
        if (!(ct.dims == labels.dims))
            throw ConfigError("ct/label dims mismatch for " + mc.ct.string());

        Volume<float> image = normalize_zscore(window_hu(ct, cfg.window_lo, cfg.window_hi));

        PreparedCase pc;
        if (cfg.stage == 1) {
            pc.image = std::move(image);
            pc.labels = collapse_lesion_to_liver(labels);
        } else {
            Volume<std::uint8_t> fg = labels;
            for (std::uint8_t& v : fg.data) v = v != 0;
            const RoiBox box = jittered_gt_roi(fg, cfg, rng);
            pc.image = resample_slices(crop(image, box), cfg.model.zoom_size, cfg.model.zoom_size,
                                       Interp::Bilinear);
            pc.labels = resample_slices(crop(labels, box), cfg.model.zoom_size,
                                        cfg.model.zoom_size, Interp::Nearest);
        }
        collect_slices(pc, cfg.stage);
        cases.push_back(std::move(pc));
    }
    if (cases.empty()) throw ConfigError("no training cases in the manifest");
    return cases;
}

std::vector<LossRecord> train_stage(PolyUNet& model, SgdOptimizer& opt, const Manifest& manifest,
                                    const TrainConfig& cfg) {
    cfg.validate();
    const std::vector<PreparedCase> cases = prepare_training_cases(manifest, cfg);

    // batches mix cases only when the in-plane dims agree across the dataset
    bool uniform_dims = true;
    for (const auto& pc : cases)
        uniform_dims = uniform_dims && pc.image.dims.nx == cases[0].image.dims.nx &&
                       pc.image.dims.ny == cases[0].image.dims.ny;

    const int t = model.config().context_radius;
    Rng rng(mix_seed(cfg.seed, 0x747261696e000000ULL));
    std::vector<LossRecord> log;
    log.reserve(static_cast<std::size_t>(cfg.total_iters - opt.iteration()));

    for (std::int64_t iter = opt.iteration(); iter < cfg.total_iters; iter = opt.iteration()) {
        const double lr = lr_at(iter, cfg);
        opt.zero_grad();

        const std::size_t fixed_case = static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(cases.size()) - 1));

        Tensor4 x;
        LabelBatch targets;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::size_t ci =
                uniform_dims ? static_cast<std::size_t>(rng.uniform_int(
                                   0, static_cast<std::int64_t>(cases.size()) - 1))
                             : fixed_case;
            const PreparedCase& pc = cases[ci];

            // foreground-bearing slices are oversampled
            const double wf = static_cast<double>(pc.fg_slices.size()) * cfg.fg_oversample;
            const double wb = static_cast<double>(pc.bg_slices.size());
            int k;
            if (pc.bg_slices.empty() || rng.uniform() * (wf + wb) < wf)
                k = pc.fg_slices[static_cast<std::size_t>(rng.uniform_int(
                    0, static_cast<std::int64_t>(pc.fg_slices.size()) - 1))];
            else
                k = pc.bg_slices[static_cast<std::size_t>(rng.uniform_int(
                    0, static_cast<std::int64_t>(pc.bg_slices.size()) - 1))];

            SliceStack stack = stack_adjacent(pc.image, k, t);
            LabelImage lab = extract_slice(pc.labels, k);
            if (cfg.augment_enabled) {
                const std::uint64_t aug_seed =
                    mix_seed(cfg.seed, static_cast<std::uint64_t>(iter) * 1000003ULL +
                                           static_cast<std::uint64_t>(b));
                std::tie(stack, lab) = augment(stack, lab, aug_seed, cfg.augment);
            }

            if (b == 0) {
                x = Tensor4(Shape4{cfg.batch_size, stack.channel_count(), stack.h, stack.w});
                targets = LabelBatch(cfg.batch_size, stack.h, stack.w);
            }
            const std::size_t sample = stack.channels.size();
            for (std::size_t i = 0; i < sample; ++i)
                x.values()[static_cast<std::size_t>(b) * sample + i] =
                    static_cast<real>(stack.channels[i]);
            std::copy(lab.v.begin(), lab.v.end(),
                      targets.v.begin() + static_cast<std::size_t>(b) * lab.v.size());
        }

        Graph graph;
        Tensor4 logits = model.forward(x, &graph, /*training=*/true);
        Tensor4 loss = weighted_cross_entropy(logits, targets, cfg.class_weights, &graph);
        graph.backward(loss);
        opt.step(static_cast<real>(lr));

        log.push_back(LossRecord{iter, lr, static_cast<double>(loss.values()[0])});
    }
    return log;
}

void write_loss_csv(const std::vector<LossRecord>& log, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << "iter,lr,loss\n";
    for (const auto& rec : log) {
        char line[96];
        std::snprintf(line, sizeof(line), "%lld,%.9g,%.9g\n", static_cast<long long>(rec.iter),
                      rec.lr, rec.loss);
        f << line;
    }
}

namespace {

Volume<std::uint8_t> apply_cc_policy(Volume<std::uint8_t> labels, CcPolicy policy,
                                     Connectivity conn) {
    if (policy == CcPolicy::None) return labels;
    Volume<std::uint8_t> mask = labels;
    if (policy == CcPolicy::Foreground) {
        for (std::uint8_t& v : mask.data) v = v != 0;
        const Volume<std::uint8_t> keep = largest_component(mask, conn);
        for (std::size_t i = 0; i < labels.data.size(); ++i)
            if (!keep.data[i]) labels.data[i] = 0;
    } else {
        // clean the liver class only; lesions come from the prediction as-is
        for (std::uint8_t& v : mask.data) v = v == 1;
        bool any = false;
        for (std::uint8_t v : mask.data) any = any || v;
        if (!any) return labels;
        const Volume<std::uint8_t> keep = largest_component(mask, conn);
        for (std::size_t i = 0; i < labels.data.size(); ++i)
            if (labels.data[i] == 1 && !keep.data[i]) labels.data[i] = 0;
    }
    return labels;
}

}  // namespace

Volume<std::uint8_t> fuse(const Volume<std::uint8_t>& stage1_liver,
                          const Volume<std::uint8_t>& stage2_labels, const RoiBox& box,
                          Connectivity conn) {
    if (!(stage1_liver.dims == stage2_labels.dims))
        throw ParamError("fuse: stage volumes must have identical dims");

    Volume<std::uint8_t> out(stage1_liver.dims, stage1_liver.spacing, VoxelKind::Label);
    std::uint64_t i = 0;
    for (int z = 0; z < static_cast<int>(out.dims.nz); ++z)
        for (int y = 0; y < static_cast<int>(out.dims.ny); ++y)
            for (int x = 0; x < static_cast<int>(out.dims.nx); ++x, ++i)
                out.data[i] = box.contains(x, y, z) ? stage2_labels.data[i]
                                                    : (stage1_liver.data[i] ? 1 : 0);

    Volume<std::uint8_t> fg = out;
    for (std::uint8_t& v : fg.data) v = v != 0;
    bool any = false;
    for (std::uint8_t v : fg.data) any = any || v;
    if (any) {
        const Volume<std::uint8_t> keep = largest_component(fg, conn);
        for (std::size_t k = 0; k < out.data.size(); ++k)
            if (!keep.data[k]) out.data[k] = 0;
    }
    return out;
}

StageOutputs infer_two_stage(const Volume<float>& ct_hu, const PolyUNet& stage1,
                             const PolyUNet& stage2, const InferConfig& cfg) {
    const Volume<float> image = normalize_zscore(window_hu(ct_hu, cfg.window_lo, cfg.window_hi));

    StageOutputs out;
    const Volume<std::uint8_t> labels1 =
        apply_cc_policy(predict_volume(stage1, image).argmax_labels(), cfg.stage1_cc,
                        cfg.component_connectivity);
    out.stage1_liver = labels1;
    for (std::uint8_t& v : out.stage1_liver.data) v = v != 0;

    bool any_fg = false;
    for (std::uint8_t v : out.stage1_liver.data) any_fg = any_fg || v;
    if (any_fg) {
        out.roi = derive_roi(out.stage1_liver, cfg.roi_pad);
    } else {
        out.roi_fallback = true;
        out.roi = RoiBox{0, 0, 0, static_cast<int>(image.dims.nx) - 1,
                         static_cast<int>(image.dims.ny) - 1, static_cast<int>(image.dims.nz) - 1};
    }

    const int zoom = stage2.config().zoom_size;
    const Volume<float> zoomed =
        resample_slices(crop(image, out.roi), zoom, zoom, Interp::Bilinear);
    Volume<std::uint8_t> labels2 =
        apply_cc_policy(predict_volume(stage2, zoomed).argmax_labels(), cfg.stage2_cc,
                        cfg.component_connectivity);
    const Volume<std::uint8_t> unzoomed =
        resample_slices(labels2, out.roi.extent_y(), out.roi.extent_x(), Interp::Nearest);

    Volume<std::uint8_t> full(image.dims, image.spacing, VoxelKind::Label);
    Volume<std::uint8_t> patch = unzoomed;
    patch.spacing = full.spacing;  // paste back into the native grid
    out.stage2_labels = paste(full, patch, out.roi);

    out.fused = fuse(out.stage1_liver, out.stage2_labels, out.roi, cfg.component_connectivity);
    out.fused.spacing = ct_hu.spacing;
    return out;
}

}  // namespace polyseg
