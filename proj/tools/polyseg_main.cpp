// Command-line front end: synth, train, predict, evaluate, gradcheck, report.
// Settings come from an optional JSON config file overridden by flags; every
// run writes its resolved configuration next to its outputs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "polyseg/gradcheck.hpp"
#include "polyseg/metrics.hpp"
#include "polyseg/nifti_io.hpp"
#include "polyseg/phantom.hpp"
#include "polyseg/pipeline.hpp"
#include "polyseg/segv_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace polyseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
}

json load_json_file(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw ConfigError("cannot open config file: " + p.string());
    try {
        json j;
        f >> j;
        return j;
    } catch (const json::exception& e) {
        throw ConfigError("invalid JSON in " + p.string() + ": " + e.what());
    }
}

void write_json_file(const json& j, const fs::path& p) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + p.string());
    f << j.dump(2) << "\n";
}

// scan argv for --config before the real parse so flags override file values
fs::path find_config_arg(int argc, char** argv) {
    for (int i = 1; i < argc - 1; ++i)
        if (std::string(argv[i]) == "--config") return argv[i + 1];
    return {};
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

// ---- config <-> json ----

json model_to_json(const PolyUNetConfig& m) {
    return json{{"context_radius", m.context_radius},
                {"widths", m.widths},
                {"share_f", m.share_f},
                {"zoom_size", m.zoom_size}};
}

void model_from_json(const json& j, PolyUNetConfig& m) {
    maybe(j, "context_radius", m.context_radius);
    maybe(j, "widths", m.widths);
    maybe(j, "share_f", m.share_f);
    maybe(j, "zoom_size", m.zoom_size);
}

json train_to_json(const TrainConfig& c) {
    return json{{"stage", c.stage},
                {"initial_lr", c.initial_lr},
                {"lr_decay_factor", c.lr_decay_factor},
                {"lr_decay_period", c.lr_decay_period},
                {"total_iters", c.total_iters},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"class_weights", {c.class_weights.background, c.class_weights.liver, c.class_weights.lesion}},
                {"momentum", c.sgd.momentum},
                {"weight_decay", c.sgd.weight_decay},
                {"augment", c.augment_enabled},
                {"fg_oversample", c.fg_oversample},
                {"roi_pad", c.roi_pad},
                {"roi_jitter", c.roi_jitter},
                {"window", {c.window_lo, c.window_hi}},
                {"model", model_to_json(c.model)}};
}

void train_from_json(const json& j, TrainConfig& c) {
    maybe(j, "stage", c.stage);
    maybe(j, "initial_lr", c.initial_lr);
    maybe(j, "lr_decay_factor", c.lr_decay_factor);
    maybe(j, "lr_decay_period", c.lr_decay_period);
    maybe(j, "total_iters", c.total_iters);
    maybe(j, "batch_size", c.batch_size);
    maybe(j, "seed", c.seed);
    if (j.contains("class_weights")) {
        auto w = j.at("class_weights").get<std::array<double, 3>>();
        c.class_weights = ClassWeights{static_cast<real>(w[0]), static_cast<real>(w[1]),
                                       static_cast<real>(w[2])};
    }
    if (j.contains("momentum")) c.sgd.momentum = static_cast<real>(j.at("momentum").get<double>());
    if (j.contains("weight_decay"))
        c.sgd.weight_decay = static_cast<real>(j.at("weight_decay").get<double>());
    maybe(j, "augment", c.augment_enabled);
    maybe(j, "fg_oversample", c.fg_oversample);
    maybe(j, "roi_pad", c.roi_pad);
    maybe(j, "roi_jitter", c.roi_jitter);
    if (j.contains("window")) {
        auto w = j.at("window").get<std::array<float, 2>>();
        c.window_lo = w[0];
        c.window_hi = w[1];
    }
    if (j.contains("model")) model_from_json(j.at("model"), c.model);
}

json phantom_to_json(const PhantomConfig& c) {
    return json{{"dims", {c.dims.nx, c.dims.ny, c.dims.nz}},
                {"spacing", {c.spacing.sx, c.spacing.sy, c.spacing.sz}},
                {"liver_center", c.liver_center},
                {"liver_radii", c.liver_radii},
                {"lesion_count", {c.lesion_count_min, c.lesion_count_max}},
                {"lesion_radius", {c.lesion_radius_min, c.lesion_radius_max}},
                {"hu", {c.hu_background, c.hu_liver, c.hu_lesion}},
                {"noise_sigma", c.noise_sigma}};
}

void phantom_from_json(const json& j, PhantomConfig& c) {
    if (j.contains("dims")) {
        auto d = j.at("dims").get<std::array<std::uint32_t, 3>>();
        c.dims = Dims3{d[0], d[1], d[2]};
    }
    if (j.contains("spacing")) {
        auto s = j.at("spacing").get<std::array<double, 3>>();
        c.spacing = Spacing{s[0], s[1], s[2]};
    }
    maybe(j, "liver_center", c.liver_center);
    maybe(j, "liver_radii", c.liver_radii);
    if (j.contains("lesion_count")) {
        auto n = j.at("lesion_count").get<std::array<int, 2>>();
        c.lesion_count_min = n[0];
        c.lesion_count_max = n[1];
    }
    if (j.contains("lesion_radius")) {
        auto r = j.at("lesion_radius").get<std::array<double, 2>>();
        c.lesion_radius_min = r[0];
        c.lesion_radius_max = r[1];
    }
    if (j.contains("hu")) {
        auto h = j.at("hu").get<std::array<double, 3>>();
        c.hu_background = h[0];
        c.hu_liver = h[1];
        c.hu_lesion = h[2];
    }
    maybe(j, "noise_sigma", c.noise_sigma);
}

// ---- subcommands ----

struct SynthArgs {
    int n = 4;
    std::uint64_t seed = 0;
    fs::path out;
    double train_fraction = 0.75;
    PhantomConfig phantom;
};

int cmd_synth(const SynthArgs& a) {
    const Manifest manifest = generate_dataset(a.n, a.phantom, a.seed, a.out, a.train_fraction);
    json resolved = phantom_to_json(a.phantom);
    resolved["n"] = a.n;
    resolved["seed"] = a.seed;
    resolved["train_fraction"] = a.train_fraction;
    write_json_file(resolved, a.out / "synth_config.json");
    std::cout << "wrote " << manifest.size() << " phantom pairs under " << a.out.string() << "\n";
    return kExitOk;
}

struct TrainArgs {
    fs::path manifest;
    fs::path out;
    fs::path resume;
    TrainConfig cfg;
};

int cmd_train(const TrainArgs& a) {
    require_file(a.manifest, "manifest");
    fs::create_directories(a.out);
    a.cfg.validate();

    const Manifest manifest = load_manifest(a.manifest);
    PolyUNet model(a.cfg.model, mix_seed(a.cfg.seed, 0x696e697400000000ULL));
    SgdOptimizer opt(model.params(), a.cfg.sgd);
    if (!a.resume.empty()) {
        require_file(a.resume, "checkpoint");
        load_checkpoint(model.params(), a.resume);
        const fs::path state = fs::path(a.resume).replace_extension(".puns");
        require_file(state, "optimizer state");
        load_optimizer_state(opt, state);
        std::cout << "resumed at iteration " << opt.iteration() << "\n";
    }

    const auto log = train_stage(model, opt, manifest, a.cfg);

    const std::string stem = "stage" + std::to_string(a.cfg.stage);
    const fs::path ckpt = a.out / (stem + ".punw");
    save_checkpoint(model.params(), ckpt);
    save_model_config(a.cfg.model, a.out / (stem + ".punw.json"));
    save_optimizer_state(opt, a.out / (stem + ".puns"));
    write_loss_csv(log, a.out / ("loss_" + stem + ".csv"));
    write_json_file(train_to_json(a.cfg), a.out / ("train_" + stem + "_config.json"));

    if (!log.empty())
        std::cout << "trained " << log.size() << " iterations, final loss " << log.back().loss
                  << "\n";
    std::cout << "checkpoint: " << ckpt.string() << "\n";
    return kExitOk;
}

Volume<float> load_ct(const fs::path& p) {
    require_file(p, "ct volume");
    const std::string ext = p.extension().string();
    if (ext == ".nii") return to_float(load_nifti1(p));
    return to_float(load_segv(p));
}

PolyUNet load_model(const fs::path& ckpt) {
    require_file(ckpt, "checkpoint");
    const fs::path cfg_path = ckpt.string() + ".json";
    require_file(cfg_path, "model config");
    PolyUNet model(load_model_config(cfg_path), 0);
    load_checkpoint(model.params(), ckpt);
    return model;
}

struct PredictArgs {
    fs::path ct, ckpt1, ckpt2, out;
    InferConfig cfg;
};

int cmd_predict(const PredictArgs& a) {
    const Volume<float> ct = load_ct(a.ct);
    const PolyUNet stage1 = load_model(a.ckpt1);
    const PolyUNet stage2 = load_model(a.ckpt2);

    const StageOutputs result = infer_two_stage(ct, stage1, stage2, a.cfg);
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    save_segv(result.fused, a.out);

    json roi_log{{"x0", result.roi.x0}, {"y0", result.roi.y0}, {"z0", result.roi.z0},
                 {"x1", result.roi.x1}, {"y1", result.roi.y1}, {"z1", result.roi.z1},
                 {"fallback_whole_volume", result.roi_fallback},
                 {"pad", a.cfg.roi_pad}};
    write_json_file(roi_log, a.out.string() + ".roi.json");
    json resolved{{"ct", a.ct.string()},
                  {"ckpt1", a.ckpt1.string()},
                  {"ckpt2", a.ckpt2.string()},
                  {"roi_pad", a.cfg.roi_pad},
                  {"window", {a.cfg.window_lo, a.cfg.window_hi}}};
    write_json_file(resolved, a.out.string() + ".config.json");

    if (result.roi_fallback)
        std::cerr << "warning: stage-1 prediction empty, whole volume used as the ROI\n";
    std::cout << "fused labels: " << a.out.string() << "\n";
    return kExitOk;
}

struct EvaluateArgs {
    fs::path pred_dir, ref_dir, out_prefix;
};

int cmd_evaluate(const EvaluateArgs& a) {
    if (!fs::is_directory(a.pred_dir)) throw ConfigError("--pred must be a directory");
    if (!fs::is_directory(a.ref_dir)) throw ConfigError("--ref must be a directory");

    // the cohort is every uint8 (label) SEGV volume in the reference dir
    std::vector<fs::path> refs;
    for (const auto& entry : fs::directory_iterator(a.ref_dir))
        if (entry.path().extension() == ".segv") {
            const AnyVolume v = load_segv(entry.path());
            if (std::holds_alternative<Volume<std::uint8_t>>(v)) refs.push_back(entry.path());
        }
    std::sort(refs.begin(), refs.end());
    if (refs.empty()) throw ConfigError("no label volumes found in " + a.ref_dir.string());

    std::vector<CaseScores> cases;
    for (const fs::path& ref_path : refs) {
        const std::string case_id = ref_path.stem().string();
        const Volume<std::uint8_t> ref = as_labels(load_segv(ref_path));
        const fs::path pred_path = a.pred_dir / ref_path.filename();
        if (!fs::exists(pred_path)) {
            std::cerr << "warning: no prediction for " << case_id << ", scoring as worst\n";
            cases.push_back(evaluate_case(case_id, Volume<std::uint8_t>(), ref, ref.spacing,
                                          /*pred_missing=*/true));
            continue;
        }
        const Volume<std::uint8_t> pred = as_labels(load_segv(pred_path));
        cases.push_back(evaluate_case(case_id, pred, ref, ref.spacing));
    }

    const AggregateReport report = aggregate(cases);
    if (a.out_prefix.has_parent_path()) fs::create_directories(a.out_prefix.parent_path());
    write_case_csv(cases, a.out_prefix.string() + ".csv");
    write_aggregate_json(report, a.out_prefix.string() + ".json");
    std::cout << aggregate_to_json(report) << "\n";
    return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& filter) {
    const auto results = run_gradchecks(seed, filter);
    if (results.empty()) {
        std::cerr << "no operation matches filter \"" << filter << "\"\n";
        return kExitUsage;
    }
    bool all_pass = true;
    std::printf("%-18s %-8s %12s %10s %8s\n", "op", "coords", "max_rel_err", "tolerance", "status");
    for (const auto& r : results) {
        std::printf("%-18s %-8d %12.3e %10.0e %8s\n", r.op.c_str(), r.coords_checked,
                    r.max_rel_err, r.tolerance, r.pass ? "pass" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    return all_pass ? kExitOk : kExitRuntime;
}

std::string cell(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", v.get<double>());
        return buf;
    }
    return v.dump();
}

int cmd_report(const fs::path& json_path) {
    require_file(json_path, "aggregate report");
    const json j = load_json_file(json_path);
    std::printf("cases evaluated: %d\n\n", j.at("cases").get<int>());
    std::printf("%-8s %14s %12s %8s %8s %8s %8s %8s\n", "class", "dice_per_case", "dice_global",
                "voe", "rvd", "asd", "msd", "rmsd");
    for (const char* cls : {"liver", "lesion"}) {
        const json& c = j.at(cls);
        std::printf("%-8s %14s %12s %8s %8s %8s %8s %8s\n", cls, cell(c.at("dice_per_case")).c_str(),
                    cell(c.at("dice_global")).c_str(), cell(c.at("voe")).c_str(),
                    cell(c.at("rvd")).c_str(), cell(c.at("asd")).c_str(), cell(c.at("msd")).c_str(),
                    cell(c.at("rmsd")).c_str());
    }
    std::printf("\ndetection: precision %s, recall %s\n", cell(j.at("precision")).c_str(),
                cell(j.at("recall")).c_str());
    std::printf("tumor burden: rmse %s, max error %s\n", cell(j.at("burden_rmse")).c_str(),
                cell(j.at("burden_max_error")).c_str());
    if (j.at("lesion").contains("undefined_cases"))
        std::printf("cases without reference lesions (excluded from lesion means): %d\n",
                    j.at("lesion").at("undefined_cases").get<int>());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"liver/lesion segmentation toolkit"};
    app.require_subcommand(1);

    const fs::path config_path = find_config_arg(argc, argv);
    json file_cfg;
    if (!config_path.empty()) {
        try {
            file_cfg = load_json_file(config_path);
        } catch (const Error& e) {
            std::cerr << "error: " << e.what() << "\n";
            return kExitUsage;
        }
    }
    std::string config_dummy;

    SynthArgs synth;
    if (!file_cfg.is_null()) phantom_from_json(file_cfg, synth.phantom);
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic phantom dataset");
    synth_cmd->add_option("--n", synth.n, "number of phantoms");
    synth_cmd->add_option("--seed", synth.seed, "generator seed");
    synth_cmd->add_option("--out", synth.out, "output directory")->required();
    synth_cmd->add_option("--train-fraction", synth.train_fraction, "train split fraction");
    synth_cmd->add_option("--config", config_dummy, "JSON config file");

    TrainArgs train;
    if (!file_cfg.is_null()) train_from_json(file_cfg, train.cfg);
    auto* train_cmd = app.add_subcommand("train", "train one stage");
    train_cmd->add_option("--stage", train.cfg.stage, "1 or 2")->required();
    train_cmd->add_option("--manifest", train.manifest, "dataset manifest")->required();
    train_cmd->add_option("--out", train.out, "output directory")->required();
    train_cmd->add_option("--resume", train.resume, "checkpoint to resume from");
    train_cmd->add_option("--iters", train.cfg.total_iters, "total iterations");
    train_cmd->add_option("--period", train.cfg.lr_decay_period, "lr decay period");
    train_cmd->add_option("--lr", train.cfg.initial_lr, "initial learning rate");
    train_cmd->add_option("--batch", train.cfg.batch_size, "batch size");
    train_cmd->add_option("--seed", train.cfg.seed, "training seed");
    train_cmd->add_option("--t", train.cfg.model.context_radius, "slice context radius");
    train_cmd->add_option("--widths", train.cfg.model.widths, "five encoder stage widths");
    train_cmd->add_option("--zoom", train.cfg.model.zoom_size, "stage-2 zoom resolution");
    train_cmd->add_option("--augment", train.cfg.augment_enabled, "enable augmentation");
    train_cmd->add_option("--config", config_dummy, "JSON config file");

    PredictArgs predict;
    auto* predict_cmd = app.add_subcommand("predict", "two-stage inference on a CT volume");
    predict_cmd->add_option("--ct", predict.ct, "input volume (.segv or .nii)")->required();
    predict_cmd->add_option("--ckpt1", predict.ckpt1, "stage-1 checkpoint")->required();
    predict_cmd->add_option("--ckpt2", predict.ckpt2, "stage-2 checkpoint")->required();
    predict_cmd->add_option("--out", predict.out, "output label volume path")->required();
    predict_cmd->add_option("--pad", predict.cfg.roi_pad, "ROI padding (x y z)");
    predict_cmd->add_option("--config", config_dummy, "JSON config file");

    EvaluateArgs evaluate_args;
    auto* eval_cmd = app.add_subcommand("evaluate", "score predictions against references");
    eval_cmd->add_option("--pred", evaluate_args.pred_dir, "prediction directory")->required();
    eval_cmd->add_option("--ref", evaluate_args.ref_dir, "reference directory")->required();
    eval_cmd->add_option("--out", evaluate_args.out_prefix, "report prefix (.csv/.json)")->required();

    std::uint64_t gc_seed = 1;
    std::string gc_filter;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc_cmd->add_option("--seed", gc_seed, "rng seed");
    gc_cmd->add_option("--op", gc_filter, "substring filter on operation names");

    fs::path report_json;
    auto* report_cmd = app.add_subcommand("report", "pretty-print an aggregate report");
    report_cmd->add_option("--json", report_json, "aggregate JSON file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (synth_cmd->parsed()) return cmd_synth(synth);
        if (train_cmd->parsed()) return cmd_train(train);
        if (predict_cmd->parsed()) return cmd_predict(predict);
        if (eval_cmd->parsed()) return cmd_evaluate(evaluate_args);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc_seed, gc_filter);
        if (report_cmd->parsed()) return cmd_report(report_json);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ParamError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
