#include "polyseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "polyseg/segv_io.hpp"

namespace polyseg {

void PhantomConfig::validate() const {
    spacing.validate();
    if (dims.numel() == 0) throw ConfigError("phantom dims must be positive");
    if (lesion_count_min < 0 || lesion_count_max < lesion_count_min)
        throw ConfigError("invalid lesion count range");
    if (lesion_radius_min < 1.0 || lesion_radius_max < lesion_radius_min)
        throw ConfigError("lesion radii must be >= 1 voxel");
    for (double r : liver_radii)
        if (r < 1.0) throw ConfigError("liver radii must be >= 1 voxel");
    if (noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
}

namespace {

struct Sphere {
    double x, y, z, r;
};

double ellipsoid_norm(const PhantomConfig& cfg, double x, double y, double z, double shrink) {
    const double rx = cfg.liver_radii[0] * shrink;
    const double ry = cfg.liver_radii[1] * shrink;
    const double rz = cfg.liver_radii[2] * shrink;
    const double dx = (x - cfg.liver_center[0]) / rx;
    const double dy = (y - cfg.liver_center[1]) / ry;
    const double dz = (z - cfg.liver_center[2]) / rz;
    return dx * dx + dy * dy + dz * dz;
}

}  // namespace

std::pair<Volume<float>, Volume<std::uint8_t>> generate_phantom(const PhantomConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);

    const int lesion_count = static_cast<int>(rng.uniform_int(cfg.lesion_count_min, cfg.lesion_count_max));
    const double min_radius = *std::min_element(cfg.liver_radii.begin(), cfg.liver_radii.end());

    std::vector<Sphere> lesions;
    for (int li = 0; li < lesion_count; ++li) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            const double r = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
            if (r >= min_radius) continue;
            // a center inside the ellipsoid shrunk by r/min_radius keeps the
            // whole sphere inside the liver
            const double shrink = 1.0 - r / min_radius;
            if (shrink <= 0.0) continue;
            const double x = cfg.liver_center[0] +
                             rng.uniform(-1.0, 1.0) * cfg.liver_radii[0] * shrink;
            const double y = cfg.liver_center[1] +
                             rng.uniform(-1.0, 1.0) * cfg.liver_radii[1] * shrink;
            const double z = cfg.liver_center[2] +
                             rng.uniform(-1.0, 1.0) * cfg.liver_radii[2] * shrink;
            if (ellipsoid_norm(cfg, x, y, z, shrink) > 1.0) continue;
            bool overlaps = false;
            for (const Sphere& other : lesions) {
                const double dx = x - other.x, dy = y - other.y, dz = z - other.z;
                const double min_gap = r + other.r + 1.0;
                if (dx * dx + dy * dy + dz * dz < min_gap * min_gap) overlaps = true;
            }
            if (overlaps) continue;
            lesions.push_back(Sphere{x, y, z, r});
            placed = true;
        }
        if (!placed)
            throw GenerationError("no feasible lesion placement after the retry budget");
    }

    Volume<std::uint8_t> labels(cfg.dims, cfg.spacing, VoxelKind::Label);
    std::uint64_t i = 0;
    for (std::uint32_t z = 0; z < cfg.dims.nz; ++z)
        for (std::uint32_t y = 0; y < cfg.dims.ny; ++y)
            for (std::uint32_t x = 0; x < cfg.dims.nx; ++x, ++i) {
                if (ellipsoid_norm(cfg, x, y, z, 1.0) > 1.0) continue;
                labels.data[i] = 1;
                for (const Sphere& s : lesions) {
                    const double dx = x - s.x, dy = y - s.y, dz = z - s.z;
                    if (dx * dx + dy * dy + dz * dz <= s.r * s.r) {
                        labels.data[i] = 2;
                        break;
                    }
                }
            }

    Volume<float> ct(cfg.dims, cfg.spacing, VoxelKind::IntensityHu);
    for (std::uint64_t v = 0; v < ct.data.size(); ++v) {
        const double mean = labels.data[v] == 0   ? cfg.hu_background
                            : labels.data[v] == 1 ? cfg.hu_liver
                                                  : cfg.hu_lesion;
        ct.data[v] = static_cast<float>(mean + cfg.noise_sigma * rng.normal());
    }
    return {std::move(ct), std::move(labels)};
}

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("invalid manifest JSON " + path.string() + ": " + e.what());
    }
    if (!j.is_array()) throw FormatError("manifest must be a JSON list: " + path.string());

    const std::filesystem::path base = path.parent_path();
    Manifest manifest;
    for (const auto& entry : j) {
        ManifestCase c;
        c.ct = entry.at("ct").get<std::string>();
        c.label = entry.at("label").get<std::string>();
        c.split = entry.at("split").get<std::string>();
        if (c.split != "train" && c.split != "test")
            throw FormatError("manifest split must be \"train\" or \"test\"");
        if (c.ct.is_relative()) c.ct = base / c.ct;
        if (c.label.is_relative()) c.label = base / c.label;
        manifest.push_back(std::move(c));
    }
    return manifest;
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
    nlohmann::json j = nlohmann::json::array();
    const std::filesystem::path base = path.parent_path();
    for (const auto& c : manifest) {
        auto rel = [&](const std::filesystem::path& p) {
            return p.parent_path() == base ? p.filename().string() : p.string();
        };
        j.push_back({{"ct", rel(c.ct)}, {"label", rel(c.label)}, {"split", c.split}});
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
}

Manifest generate_dataset(int n, const PhantomConfig& base, std::uint64_t seed,
                          const std::filesystem::path& out_dir, double train_fraction) {
    if (n < 1) throw ConfigError("dataset size must be >= 1");
    if (train_fraction < 0.0 || train_fraction > 1.0)
        throw ConfigError("train fraction must lie in [0, 1]");
    std::filesystem::create_directories(out_dir);

    const int train_count = static_cast<int>(std::llround(n * train_fraction));
    Manifest manifest;
    for (int i = 0; i < n; ++i) {
        PhantomConfig cfg = base;
        cfg.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
        Rng jitter(mix_seed(cfg.seed, 0x6a69747465720000ULL));
        for (int a = 0; a < 3; ++a) {
            cfg.liver_center[a] += jitter.uniform(-2.0, 2.0);
            cfg.liver_radii[a] = std::max(2.0, cfg.liver_radii[a] * jitter.uniform(0.85, 1.1));
        }

        auto [ct, labels] = generate_phantom(cfg);
        char name[32];
        std::snprintf(name, sizeof(name), "%04d", i);
        const std::filesystem::path ct_path = out_dir / ("ct_" + std::string(name) + ".segv");
        const std::filesystem::path seg_path = out_dir / ("seg_" + std::string(name) + ".segv");
        save_segv(ct, ct_path);
        save_segv(labels, seg_path);
        manifest.push_back(
            ManifestCase{ct_path, seg_path, i < train_count ? "train" : "test"});
    }
    save_manifest(manifest, out_dir / "manifest.json");
    return manifest;
}

}  // namespace polyseg
